"""Quick closed-form checks of every module, run by the ``selftest`` experiment kind."""

from __future__ import annotations

import math

import numpy as np

from .capacity import hitting_time, qcapacity
from .grid import GridField, combine, integrate, integrate_deficit, make_grid
from .levy import LevyTriple, brownian, truncate
from .rearrange import ball_radius, increasing_rearrange, rearrange_fn, rearrange_set
from .sampler import MCParams, uniform_time_grid
from .trap_continuum import TrapSchedule, kill_weight, poisson_field_oracle, sausage_volume, survival_probability, \
    trap_mass
from .trap_discrete import DiscreteInstance, survival_density, verify_bll, verify_ri, wn_eval

__all__ = ["CHECKS", "run_selftest"]

EXACT = 1e-12


def _grid_cells():
    g = make_grid(2, 1.0, 2)
    c = g.centers()
    return float(g.size + g.spacing + np.abs(c).max()), float(4 + 1 + 0.5), EXACT


def _integrate_box():
    g = make_grid(1, 4.0, 64)
    return integrate(g.box_indicator([0.0], [2.0])), 2.0, EXACT


def _integrate_inf():
    g = make_grid(1, 4.0, 8)
    v = np.zeros(8)
    v[3] = math.inf
    return integrate(GridField(g, v)), math.inf, 0.0


def _deficit():
    g = make_grid(1, 4.0, 64)
    a = integrate_deficit(GridField(g, 1 - g.box_indicator([0.0], [2.0]).values, 1.0), 1.0)
    b = integrate_deficit(g.constant(1.0), 1.0)
    c = integrate_deficit(GridField(g, 1 - 0.5 * g.box_indicator([0.0], [4.0]).values, 1.0), 1.0)
    return a + 10 * b + 100 * c, 2.0 + 0.0 + 200.0, EXACT


def _combine():
    g = make_grid(1, 4.0, 64)
    A, B = g.box_indicator([-1.0], [1.0]), g.box_indicator([0.0], [2.0])
    err = np.abs(combine(A, B).values - g.box_indicator([0.0], [1.0]).values).max()
    C = combine(A, op="complement", sigma=1.0)
    err += np.abs(C.values - (1 - A.values)).max() + abs(C.background - 1.0)
    err += np.abs(combine(A, op="scale", factor=0.0).values).max()
    return float(err), 0.0, EXACT


def _ball_radius():
    return ball_radius(4.0, 1) + ball_radius(math.pi, 2) + ball_radius(4 * math.pi / 3, 3), 4.0, 1e-12


def _rearrange_trivial():
    g = make_grid(2, 2.0, 16)
    empty = rearrange_set(g.zeros()).cell_count()
    ones = np.abs(rearrange_fn(g.constant(1.0, 0.0)).values - 1).max()
    phi = g.constant(0.7)
    inc = np.abs(increasing_rearrange(phi, 0.7).values - 0.7).max()
    return float(empty + ones + inc), 0.0, EXACT


def _survival_upto0():
    g = make_grid(1, 4.0, 64)
    V = g.box_indicator([-1.0], [1.0])
    phi0 = survival_density(DiscreteInstance(g.constant(1.0), [V], []), 0)
    return float(np.abs(phi0.values - (1 - V.values)).max()), 0.0, EXACT


def _wn_n0():
    g = make_grid(1, 4.0, 64)
    V = g.box_indicator([0.5], [2.0], 0.6)
    return wn_eval(DiscreteInstance(g.constant(1.0), [V], [])), integrate(V), EXACT


def _ri_n0():
    g = make_grid(1, 4.0, 64)
    rep = verify_ri(DiscreteInstance(g.constant(1.0), [g.box_indicator([0.5], [2.0], 0.6)], []))
    return rep.margin, 0.0, EXACT * max(1.0, rep.lhs)


def _bll_ball():
    g = make_grid(1, 4.0, 64)
    ball = g.box_indicator([-1.0], [1.0])
    phi = ball.with_values(ball.values / integrate(ball))
    p = g.box_indicator([-0.5], [0.5])
    p = p.with_values(p.values / integrate(p))
    return verify_bll(phi, [ball, ball], [p]).margin, 0.0, EXACT


def _bll_everything():
    g = make_grid(1, 4.0, 64)
    ball = g.box_indicator([-1.0], [1.0])
    phi = ball.with_values(ball.values / integrate(ball))
    p = g.box_indicator([-0.5], [0.5])
    p = p.with_values(p.values / integrate(p))
    rep = verify_bll(phi, [ball, g.constant(1.0, 0.0)], [p])
    return abs(rep.lhs - 1) + abs(rep.rhs - 1) + abs(rep.margin), 0.0, 1e-12


def _truncate_no_jumps():
    S = truncate(brownian(1), 8)
    return S.c_n, 0.0, 0.0


def _kill_weight_cases():
    g = make_grid(1, 4.0, 64)
    times = uniform_time_grid(1.0, 10)
    path = np.zeros((11, 1))
    none = kill_weight(path, times, TrapSchedule.constant(1.0, soft=g.zeros()), [0.0])
    box = kill_weight(path, times, TrapSchedule.constant(1.0, hard=g.constant(1.0, 0.0)), [0.1])
    return none + 10 * box, 10.0, EXACT


def _trap_mass_empty():
    g = make_grid(1, 4.0, 32)
    est = trap_mass(brownian(1), TrapSchedule.constant(1.0, soft=g.zeros()), g.constant(1.0), MCParams(P=4, K=8))
    return est.value + est.std_error, 0.0, 0.0


def _survival_probability():
    return survival_probability(0.0) + survival_probability(math.log(2)), 1.5, 1e-15


def _oracle_tiny_phi():
    g = make_grid(1, 4.0, 32)
    phi = g.box_indicator([0.0], [0.125], 1e-9)
    est = poisson_field_oracle(brownian(1), TrapSchedule.constant(1.0, soft=g.zeros()), phi, MCParams(P=4, K=8))
    return est.value, 1.0, 1e-6


def _sausage_single_time():
    g = make_grid(1, 4.0, 64)
    D = g.box_indicator([-1.0], [1.0])
    est = sausage_volume(brownian(1), D, 1.0, MCParams(P=8, K=1))
    return est.value, integrate(D), EXACT


def _sausage_symmetric():
    g = make_grid(1, 4.0, 64)
    from .trap_continuum import verify_sausage

    rep = verify_sausage(brownian(1), g.box_indicator([-1.0], [1.0]), 0.5, MCParams(P=50, K=20))
    return rep.margin, 0.0, 3 * rep.margin_se + EXACT


def _hitting_time_cases():
    g = make_grid(1, 4.0, 40)
    A = g.box_indicator([-1.0], [1.0])
    inside = hitting_time(np.zeros(5), A, [0.05])
    never = hitting_time(np.zeros(5), A, [1.5])
    times = uniform_time_grid(3.5, 35)
    i = hitting_time(times.copy(), g.box_indicator([2.0], [3.0]), [0.0])
    ok = inside == 0 and never is None and times[i] >= 2.0 - 1e-12
    return float(ok), 1.0, 0.0


def _capacity_empty():
    g = make_grid(1, 4.0, 40)
    return qcapacity(brownian(1), g.zeros(), 1.0, MCParams(P=4, K=100)).value, 0.0, 0.0


def _zero_process_sausage():
    g = make_grid(1, 4.0, 64)
    D = g.box_indicator([-1.0], [1.0])
    T = LevyTriple([0.0], [[0.0]])
    est = sausage_volume(T, D, 1.0, MCParams(P=3, K=10, eps_n=0))
    return est.value, integrate(D), EXACT


CHECKS = {
    "grid-cells": _grid_cells,
    "integrate-box": _integrate_box,
    "integrate-inf": _integrate_inf,
    "integrate-deficit": _deficit,
    "combine-ops": _combine,
    "ball-radius": _ball_radius,
    "rearrange-fixed-points": _rearrange_trivial,
    "survival-density-upto0": _survival_upto0,
    "wn-n0": _wn_n0,
    "ri-n0-equality": _ri_n0,
    "bll-ball": _bll_ball,
    "bll-whole-box": _bll_everything,
    "truncate-no-jumps": _truncate_no_jumps,
    "kill-weight": _kill_weight_cases,
    "trap-mass-no-traps": _trap_mass_empty,
    "survival-probability": _survival_probability,
    "oracle-tiny-phi": _oracle_tiny_phi,
    "sausage-single-time": _sausage_single_time,
    "sausage-zero-process": _zero_process_sausage,
    "sausage-symmetric": _sausage_symmetric,
    "hitting-time": _hitting_time_cases,
    "capacity-empty": _capacity_empty,
}


def run_selftest() -> list[dict]:
    """One CSV-style row per check; ``margin = lhs - rhs`` must satisfy ``|margin| <= tol``."""
    rows = []
    for name, fn in CHECKS.items():
        lhs, rhs, tol = fn()
        margin = 0.0 if lhs == rhs else lhs - rhs
        rows.append({"instance_id": name, "n": 0, "lhs": float(lhs), "rhs": float(rhs), "margin": float(margin),
                     "tol": float(tol), "holds": bool(abs(margin) <= tol)})
    return rows

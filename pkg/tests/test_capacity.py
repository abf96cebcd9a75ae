from __future__ import annotations

import math
from unittest import mock

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from levyrearrange import capacity
from levyrearrange.capacity import (
    CapacityEstimate,
    dilate,
    hitting_histograms,
    hitting_time,
    qcapacity,
    qcapacity_ladder,
    verify_cap,
    zero_capacity,
)
from levyrearrange.grid import make_grid
from levyrearrange.levy import LevyTriple, brownian, uniform_ball
from levyrearrange.sampler import MCParams, sample_paths, scheme_for, uniform_time_grid
from levyrearrange.trap_continuum import TrapSchedule, trap_mass

JUMPY = LevyTriple([0.3], [[1.0]], uniform_ball(1, 1.0, 1.0), [([0.7], 0.5)])


# ---------------------------------------------------------------------------
# hitting_time


def test_hitting_time_start_inside():
    g = make_grid(1, 4.0, 40)
    A = g.box_indicator([-1], [1])
    assert hitting_time(np.random.default_rng(0).normal(size=11), A, [0.05]) == 0


def test_hitting_time_zero_process_never():
    g = make_grid(1, 4.0, 40)
    assert hitting_time(np.zeros(50), g.box_indicator([-1], [1]), [1.5]) is None


def test_hitting_time_unit_drift():
    g = make_grid(1, 4.0, 40)
    times = uniform_time_grid(3.5, 35)
    i = hitting_time(times.copy(), g.box_indicator([2.0], [3.0]), [0.0])
    assert times[i] >= 2.0 - 1e-12
    assert times[i - 1] < 2.0


def test_hitting_time_rejects_non_indicator():
    g = make_grid(1, 4.0, 40)
    with pytest.raises(ValueError):
        hitting_time(np.zeros(3), g.box_indicator([-1], [1], 3.0), [0.0])


def test_hitting_histograms_match_direct_hitting_times():
    g = make_grid(2, 2.0, 20)
    A = g.ball_indicator([0.3, -0.2], 0.45)
    T = LevyTriple([0.4, 0.0], 0.3 * np.eye(2), None, [([0.2, 0.1], 1.0)])
    times = uniform_time_grid(1.0, 25)
    ens = sample_paths(scheme_for(T, MCParams(P=3, K=25)), times, 3, 9)
    hist = hitting_histograms(A, times, 3, ensemble=ens)
    h = g.spacing
    for p in range(3):
        # start cell centers on a wider lattice; offsets are rounded as in the grid method
        rounded = np.floor(ens.paths[p] / h + 0.5) * h
        expect = np.zeros(25, dtype=int)
        for i in range(-40, 40):
            for j in range(-40, 40):
                x = np.array([i + 0.5, j + 0.5]) * h
                k = hitting_time(rounded[:25], A, x)
                if k is not None:
                    expect[k] += 1
        np.testing.assert_array_equal(hist[p], expect)


# ---------------------------------------------------------------------------
# qcapacity


def test_qcapacity_empty_set_is_zero():
    g = make_grid(1, 4.0, 40)
    for method in ("grid", "last_exit"):
        est = qcapacity(brownian(1), g.zeros(), 1.0, MCParams(P=10, K=100), method=method)
        assert est.value == 0.0 and est.std_error == 0.0


def test_qcapacity_errors():
    g = make_grid(1, 4.0, 40)
    A = g.box_indicator([-1], [1])
    with pytest.raises(ValueError, match="too short"):
        qcapacity(brownian(1), A, 1.0, MCParams(P=10, K=100), t_max=2.0)
    with pytest.raises(ValueError):
        qcapacity(brownian(1), A, 0.0, MCParams(P=10, K=100))
    with pytest.raises(ValueError):
        qcapacity(brownian(1), A, 1.0, MCParams(P=10, K=100), method="magic")
    with pytest.raises(ValueError):
        qcapacity(brownian(1), A.with_values(A.values * 2), 1.0, MCParams(P=10, K=100))


def test_qcapacity_brownian_interval_reduced_scale():
    g = make_grid(1, 4.0, 400)
    A = g.box_indicator([-1], [1])
    est = qcapacity(brownian(1), A, 1.0, MCParams(P=300, K=7000, seed=3, eps_n=0))
    exact = 2 + math.sqrt(2)
    # grid-time detection bias ~ 0.58 sqrt(dt) per endpoint
    assert abs(est.value - exact) <= 3 * est.std_error + 2 * 0.6 * math.sqrt(est.time_step) * 2
    assert est.horizon_bias_bound >= 0 and est.spatial_truncation_bias_bound == 0.0


def test_grid_and_last_exit_agree_with_jumps():
    g = make_grid(1, 4.0, 400)
    A = g.box_indicator([-1], [1])
    a = qcapacity(JUMPY, A, 1.0, MCParams(P=300, K=7000, seed=4))
    b = qcapacity(JUMPY, A, 1.0, MCParams(P=2_000_000, K=7000, seed=4), method="last_exit")
    assert abs(a.value - b.value) <= 3 * math.hypot(a.std_error, b.std_error) + 0.01 * a.value


def test_monotone_in_set_per_sample():
    g = make_grid(2, 2.0, 24)
    A = g.ball_indicator([0.2, 0.0], 0.4)
    B = A.with_values(np.maximum(A.values, g.box_indicator([-0.6, -0.3], [0.0, 0.3]).values))
    mc = MCParams(P=30, K=400, seed=1)
    T = LevyTriple([0.5, -0.2], np.eye(2), None, [([0.3, 0.0], 1.0)])
    ea, eb = qcapacity(T, A, 1.0, mc), qcapacity(T, B, 1.0, mc)
    assert np.all(eb.samples >= ea.samples - 1e-12)
    ed = qcapacity(T, dilate(A), 1.0, mc)
    assert np.all(ed.samples >= ea.samples - 1e-12) and ed.value > ea.value


def test_monotone_in_set_last_exit_statistically():
    g = make_grid(1, 4.0, 80)
    A = g.box_indicator([-0.5], [0.5])
    B = g.box_indicator([-0.5], [0.9])
    mc = MCParams(P=200_000, K=3000, seed=2)
    ea = qcapacity(brownian(1), A, 1.0, mc, method="last_exit")
    eb = qcapacity(brownian(1), B, 1.0, mc, method="last_exit")
    assert ea.value <= eb.value + 3 * math.hypot(ea.std_error, eb.std_error)


def test_ladder_nondecreasing_in_q_and_lower_bound():
    g = make_grid(1, 4.0, 200)
    A = g.box_indicator([-1], [1])
    ests = qcapacity_ladder(JUMPY, A, [2.0, 1.0, 0.5, 0.25], MCParams(P=100, K=3000, seed=5))
    vol = A.cell_count() * g.cell_volume
    for big, small in zip(ests, ests[1:]):
        diff = big.samples - small.samples
        assert diff.mean() >= -3 * diff.std(ddof=1) / math.sqrt(len(diff))
    for e in ests:
        # a start inside A hits at time 0; every start contributes at most q
        assert e.value >= e.q * vol - 1e-12
        assert isinstance(e, CapacityEstimate) and e.value >= 0


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_grid_samples_bounded_by_hit_mass(seed):
    """Per path, ``q h^d sum_x e^{-q T}`` lies between ``q |A|`` and ``q`` times the hit volume."""
    rng = np.random.default_rng(seed)
    g = make_grid(1, 2.0, 20)
    A = g.zeros().with_values((rng.random(20) < 0.3).astype(float))
    if A.cell_count() == 0:
        return
    q = float(rng.uniform(0.5, 3.0))
    T = LevyTriple([rng.normal()], [[rng.uniform(0.1, 1)]])
    mc = MCParams(P=5, K=200, seed=seed)
    e = qcapacity(T, A, q, mc)
    times = uniform_time_grid(-math.log(1e-3) / q, 200)
    hist = hitting_histograms(A, times, 5, scheme_for(T, mc), seed)
    hit_vol = hist.sum(axis=1) * g.cell_volume
    assert np.all(e.samples <= q * hit_vol + 1e-12)
    assert np.all(e.samples >= q * A.cell_count() * g.cell_volume - 1e-12)


def test_bridge_identity_with_trap_machinery():
    """``C^q = q sum_i M(t_{i+1}) (e^{-q t_i} - e^{-q t_{i+1}}) + q e^{-q t_K} M(t_K)`` with M the hard-trap mass of -A."""
    g = make_grid(1, 4.0, 80)
    A = g.box_indicator([0.2], [1.0])
    T = JUMPY
    K, q = 40, 1.5
    t_max = -math.log(1e-3) / q
    times = uniform_time_grid(t_max, K)
    mc = MCParams(P=30, K=K, seed=6)
    ens = sample_paths(scheme_for(T, mc), times, 30, 6)
    cap = qcapacity(None, A, q, mc, ensemble=ens)
    D = A.with_values(A.values[::-1])
    one = g.constant(1.0)
    M = np.zeros((K + 1, 30))
    for k in range(1, K + 1):
        M[k] = trap_mass(None, TrapSchedule.constant(times[k], hard=D), one, mc, ensemble=ens).samples
    e = np.exp(-q * times)
    rhs = q * ((e[:-1] - e[1:]) @ M[1:]) + q * e[-1] * M[-1]
    np.testing.assert_allclose(cap.samples, rhs, rtol=1e-10)


# ---------------------------------------------------------------------------
# zero capacity


def test_zero_capacity_requires_transience():
    g = make_grid(3, 1.2, 12)
    with pytest.raises(ValueError, match="transient"):
        zero_capacity(brownian(3, transient=False), g.ball_indicator([0, 0, 0], 1.0), MCParams(P=10, K=10))


def test_zero_capacity_empty_set():
    g = make_grid(3, 1.2, 12)
    est = zero_capacity(brownian(3), g.zeros(), MCParams(P=10, K=10))
    assert est.value == 0.0 and est.std_error == 0.0


def test_zero_capacity_flags_non_monotone_ladder():
    g = make_grid(3, 1.2, 12)
    A = g.ball_indicator([0, 0, 0], 1.0)
    rng = np.random.default_rng(0)

    def fake(T, A, qs, mc, method, t_max, tol):
        # values that grow as q shrinks
        return [CapacityEstimate(q, 10 - q, 0.01, 0.0, 0.01, 50, samples=10 - q + 0.01 * rng.normal(size=50))
                for q in qs]

    with mock.patch.object(capacity, "qcapacity_ladder", fake):
        with pytest.raises(ValueError, match="grows as q decreases"):
            zero_capacity(brownian(3), A, MCParams(P=50, K=10))


def test_zero_capacity_scaling_in_radius():
    """Newtonian capacity is linear in the radius: C(B_2) = 2 C(B_1)."""
    mc = MCParams(P=1_000_000, K=27_000, seed=7, eps_n=0)
    g1 = make_grid(3, 1.2, 48)
    g2 = make_grid(3, 2.4, 48)  # same cells, scaled by 2
    c1 = zero_capacity(brownian(3), g1.ball_indicator([0, 0, 0], 1.0), mc)
    c2 = zero_capacity(brownian(3), g2.ball_indicator([0, 0, 0], 2.0), mc)
    assert abs(c2.value - 2 * c1.value) <= 3 * math.hypot(c2.std_error, 2 * c1.std_error) + 0.03 * c2.value
    assert abs(c1.value - 2 * math.pi) <= 3 * c1.std_error + 0.05 * 2 * math.pi


# ---------------------------------------------------------------------------
# verify_cap


def test_verify_cap_symmetric_is_exact_tie():
    g = make_grid(1, 4.0, 200)
    rep = verify_cap(brownian(1), g.box_indicator([-1], [1]), 1.0, MCParams(P=100, K=2000, seed=1, eps_n=0))
    assert rep.margin == 0.0 and rep.holds


def test_verify_cap_shifted_interval_translation_invariance():
    g = make_grid(1, 4.0, 200)
    A = g.box_indicator([0.3], [1.5])
    rep = verify_cap(brownian(1), A, 1.0, MCParams(P=100, K=2000, seed=1, eps_n=0))
    # whole-cell shifts leave every path's histogram unchanged
    assert abs(rep.margin) <= 1e-9 * rep.lhs and rep.holds


def test_verify_cap_drift_strictly_positive():
    g = make_grid(1, 4.0, 200)
    rep = verify_cap(brownian(1, drift=[3.0]), g.box_indicator([-1], [1]), 1.0,
                     MCParams(P=200, K=2000, seed=2, eps_n=0))
    assert rep.holds and rep.margin > 5 * rep.margin_se


def test_verify_cap_last_exit_symmetric_tie():
    g = make_grid(3, 1.2, 24)
    A = g.ball_indicator([0, 0, 0], 0.8)
    rep = verify_cap(brownian(3), A, 1.0, MCParams(P=100_000, K=7000, seed=3, eps_n=0))
    assert rep.margin == 0.0 and rep.holds and rep.extra["method"] == "last_exit"

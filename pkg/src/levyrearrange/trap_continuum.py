"""Monte Carlo killed mass, survival probability and sausage volume for Lévy paths.

A trap schedule is piecewise constant in time. Killing is read at the left
endpoints ``t_0 .. t_{K-1}`` of a uniform time grid: a soft potential adds
``dt * U`` and a hard set kills outright.

For a path with rounded offsets ``o_i`` the trap cell seen from start cell
``b`` at step ``i`` is ``m - 1 - b - o_i``, so the killing integral over all
starting cells is a convolution of the path's occupation histogram with the
potential. Each path therefore yields one sample of the whole spatial
integral, on a canvas large enough that nothing is truncated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import signal, stats

from .grid import Grid, GridField, GridMismatchError
from .levy import LevyTriple, rearrange_triple
from .rearrange import increasing_rearrange, rearrange_fn, rearrange_set
from .reports import ComparisonReport, MCEstimate, compare_estimates
from .rng import ROLE_AUX, uniforms
from .sampler import MCParams, PathEnsemble, for_each_chunk, scheme_for, uniform_time_grid

__all__ = [
    "TrapSchedule",
    "shift_cells",
    "kill_weight",
    "trap_mass",
    "survival_probability",
    "poisson_field_oracle",
    "sausage_volume",
    "verify_trap",
    "verify_sausage",
    "rearranged_phi",
]

ALIGN_TOL = 1e-9


def shift_cells(f: GridField, k) -> GridField:
    """Translate a zero-background field by whole cells; cells pushed off the grid are dropped."""
    if f.background != 0:
        raise ValueError("only zero-background fields can be shifted")
    k = np.broadcast_to(np.asarray(k, dtype=int), (f.grid.dim,))
    out = np.zeros(f.grid.shape)
    src, dst = [], []
    m = f.grid.points_per_axis
    for s in k:
        if abs(s) >= m:
            return f.with_values(out)
        src.append(slice(max(0, -s), m - max(0, s)))
        dst.append(slice(max(0, s), m - max(0, -s)))
    out[tuple(dst)] = f.values[tuple(src)]
    return f.with_values(out)


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True, eq=False)
class TrapSchedule:
    """Slices ``(soft_j, hard_j)`` in force on ``[s_j, s_{j+1})``.

    ``soft`` fields are finite with zero background; ``hard`` fields are
    indicators of the instant-kill sets.
    """

    slice_times: np.ndarray
    soft: tuple
    hard: tuple

    def __post_init__(self):
        s = np.asarray(self.slice_times, dtype=float)
        J = len(s) - 1
        if J < 1 or s[0] != 0 or np.any(np.diff(s) <= 0):
            raise ValueError("slice_times must start at 0 and increase strictly")
        soft, hard = list(self.soft), list(self.hard)
        if len(soft) != J or len(hard) != J:
            raise ValueError("need one soft and one hard field per slice")
        grid = next((f.grid for f in soft + hard if f is not None), None)
        if grid is None:
            raise ValueError("schedule needs at least one field to fix the grid")
        for j in range(J):
            soft[j] = GridField(grid, np.zeros(grid.shape)) if soft[j] is None else soft[j]
            hard[j] = GridField(grid, np.zeros(grid.shape)) if hard[j] is None else hard[j]
            if soft[j].grid != grid or hard[j].grid != grid:
                raise GridMismatchError("all schedule fields must share one grid")
            if soft[j].background != 0 or soft[j].has_hard_part:
                raise ValueError("soft potentials must be finite with zero background")
            if not hard[j].is_indicator():
                raise ValueError("hard sets must be indicators")
        s.setflags(write=False)
        object.__setattr__(self, "slice_times", s)
        object.__setattr__(self, "soft", tuple(soft))
        object.__setattr__(self, "hard", tuple(hard))

    @classmethod
    def constant(cls, t: float, soft: GridField | None = None, hard: GridField | None = None) -> "TrapSchedule":
        return cls([0.0, float(t)], [soft], [hard])

    @classmethod
    def from_potentials(cls, slice_times, potentials) -> "TrapSchedule":
        """Split potentials with ``inf`` cells into a soft part and a hard set."""
        soft, hard = [], []
        for U in potentials:
            inf = np.isinf(U.values)
            soft.append(U.with_values(np.where(inf, 0.0, U.values)))
            hard.append(U.with_values(inf.astype(float)))
        return cls(slice_times, soft, hard)

    @classmethod
    def moving_hard(cls, D: GridField, g, slice_times) -> "TrapSchedule":
        """Hard set ``D + g(s_j)`` on slice ``j``, shifted to the nearest cell."""
        h = D.grid.spacing
        times = np.asarray(slice_times, dtype=float)
        hard = [shift_cells(D, np.floor(np.atleast_1d(g(s)) / h + 0.5).astype(int)) for s in times[:-1]]
        return cls(times, [None] * len(hard), hard)

    @property
    def grid(self) -> Grid:
        return self.soft[0].grid

    @property
    def t(self) -> float:
        return float(self.slice_times[-1])

    @property
    def J(self) -> int:
        return len(self.slice_times) - 1

    def rearranged(self) -> "TrapSchedule":
        return TrapSchedule(self.slice_times, [rearrange_fn(u) for u in self.soft],
                            [rearrange_set(d) for d in self.hard])

    def is_empty(self) -> bool:
        return all(not np.any(u.values) and not np.any(d.values) for u, d in zip(self.soft, self.hard))

    def slice_index(self, times) -> np.ndarray:
        """Slice in force at each left endpoint ``times[:-1]``; checks that slice boundaries are grid times."""
        times = np.asarray(times, dtype=float)
        if times[-1] < self.t * (1 - ALIGN_TOL):
            raise ValueError("path horizon is shorter than the schedule")
        scale = max(self.t, 1.0)
        for s in self.slice_times[1:-1]:
            if np.min(np.abs(times - s)) > ALIGN_TOL * scale:
                raise ValueError(f"slice boundary {s} is not a time-grid point")
        j = np.searchsorted(self.slice_times, times[:-1] + ALIGN_TOL * scale, side="right") - 1
        return np.clip(j, 0, self.J - 1)


def _horizon_index(times, t) -> int:
    times = np.asarray(times, dtype=float)
    k = int(np.argmin(np.abs(times - t)))
    if abs(times[k] - t) > ALIGN_TOL * max(t, 1.0):
        raise ValueError("horizon t is not a time-grid point")
    return k


# ---------------------------------------------------------------------------
# killing


def _cell_of(z, grid: Grid):
    """Cell index of points ``z`` (shape ``(..., d)``) and an in-grid mask."""
    idx = np.floor((z + grid.half_extent) / grid.spacing).astype(np.int64)
    ok = np.all((idx >= 0) & (idx < grid.points_per_axis), axis=-1)
    return idx, ok


def kill_weight(path, times, sched: TrapSchedule, x) -> float:
    """``1 - exp(-sum_i dt_i U(-x - X_{t_i}))`` over left endpoints before ``sched.t``; 1 on a hard hit."""
    times = np.asarray(times, dtype=float)
    path = np.asarray(path, dtype=float).reshape(len(times), -1)
    k = _horizon_index(times, sched.t)
    times, path = times[: k + 1], path[: k + 1]
    j = sched.slice_index(times)
    dt = np.diff(times)
    z = -np.asarray(x, dtype=float) - path[:-1]
    idx, ok = _cell_of(z, sched.grid)
    total = 0.0
    for i in np.nonzero(ok)[0]:
        c = tuple(idx[i])
        if sched.hard[j[i]].values[c]:
            return 1.0
        total += dt[i] * sched.soft[j[i]].values[c]
    return float(-math.expm1(-total))


def _offsets(X, h):
    # the trap cell seen from start cell b is m - 1 - b - o exactly when o = -floor(1/2 - X/h)
    return -np.floor(0.5 - X / h).astype(np.int64)


@dataclass
class _Prepared:
    """Per-slice supports cropped to their bounding boxes."""

    grid: Grid
    slices: list  # (lo, soft crop or None, hard crop or None)
    lo: np.ndarray
    hi: np.ndarray


def _prepare(fields_soft, fields_hard, grid: Grid) -> _Prepared:
    slices, los, his = [], [], []
    for U, D in zip(fields_soft, fields_hard):
        sup = (U.values > 0) | (D.values > 0)
        if not sup.any():
            slices.append(None)
            continue
        nz = np.nonzero(sup)
        lo = np.array([a.min() for a in nz])
        hi = np.array([a.max() for a in nz])
        box = tuple(slice(a, b + 1) for a, b in zip(lo, hi))
        soft = U.values[box] if np.any(U.values[box]) else None
        hard = D.values[box] if np.any(D.values[box]) else None
        slices.append((lo, soft, hard))
        los.append(lo)
        his.append(hi)
    if not los:
        return _Prepared(grid, slices, None, None)
    return _Prepared(grid, slices, np.min(los, axis=0), np.max(his, axis=0))


def _conv(a, b):
    return signal.convolve(a, b, mode="full", method="auto")


def _occupation(o, dt, omin, shape):
    flat = np.ravel_multi_index(tuple((o - omin).T), shape)
    return np.bincount(flat, weights=dt, minlength=int(np.prod(shape))).reshape(shape)


def _kill_canvas(o, slice_of, dt, prep: _Prepared):
    """Kill weights indexed by ``s = a + o``; returns ``(smin, w)``."""
    omin, omax = o.min(axis=0), o.max(axis=0)
    n_o = tuple(int(v) for v in omax - omin + 1)
    smin = omin + prep.lo
    shape = tuple(int(v) for v in (omax + prep.hi) - smin + 1)
    S = np.zeros(shape)
    hit = np.zeros(shape, dtype=bool)
    for j, sl in enumerate(prep.slices):
        if sl is None:
            continue
        sel = slice_of == j
        if not sel.any():
            continue
        lo, soft, hard = sl
        H = _occupation(o[sel], dt[sel], omin, n_o)
        crop = soft if soft is not None else hard
        at = tuple(slice(int(a), int(a) + n + c - 1) for a, n, c in zip(lo - prep.lo, n_o, crop.shape))
        if soft is not None:
            S[at] += _conv(H, soft)
        if hard is not None:
            hit[at] |= _conv((H > 0).astype(float), hard) > 0.5
    w = np.where(hit, 1.0, -np.expm1(-S))
    return smin, w


def _start_weights(phi: GridField, smin, shape):
    """``phi`` at start cell ``b = m - 1 - s`` over the canvas, background elsewhere."""
    m = phi.grid.points_per_axis
    out = np.full(shape, phi.background)
    smax = smin + np.array(shape) - 1
    lo = np.maximum(smin, 0)
    hi = np.minimum(smax, m - 1)
    if np.all(hi >= lo):
        rev = phi.values[(slice(None, None, -1),) * phi.grid.dim]
        dst = tuple(slice(int(a - s0), int(b - s0) + 1) for a, b, s0 in zip(lo, hi, smin))
        src = tuple(slice(int(a), int(b) + 1) for a, b in zip(lo, hi))
        out[dst] = rev[src]
    return out


def _ensemble_source(T, t, mc, ensemble):
    if ensemble is None:
        times = uniform_time_grid(t, mc.K)
        return scheme_for(T, mc), times, mc.P, times
    k = _horizon_index(ensemble.time_grid, t)
    return None, ensemble.time_grid, ensemble.P, ensemble.time_grid[: k + 1]


def trap_mass(T: LevyTriple | None, sched: TrapSchedule, phi: GridField, mc: MCParams,
              ensemble: PathEnsemble | None = None, stream: int = 0) -> MCEstimate:
    """Killed mass ``int phi(x) w_t(x) dx``: one sample of the full spatial integral per path.

    With ``ensemble`` given its paths are used and ``T`` may be ``None``.
    """
    grid = sched.grid
    if phi.grid != grid:
        raise GridMismatchError("phi and the schedule must share one grid")
    if phi.has_hard_part:
        raise ValueError("phi must be finite")
    S, times, P, used = _ensemble_source(T, sched.t, mc, ensemble)
    K = len(used) - 1
    slice_of = sched.slice_index(used)
    dt = np.diff(used)
    prep = _prepare(sched.soft, sched.hard, grid)
    out = np.zeros(P)
    if prep.lo is None:
        return MCEstimate.from_samples(out)
    h, vol = grid.spacing, grid.cell_volume

    def fn(p0, block):
        for q in range(block.shape[0]):
            o = _offsets(block[q, :K], h)
            smin, w = _kill_canvas(o, slice_of, dt, prep)
            out[p0 + q] = vol * float(np.sum(_start_weights(phi, smin, w.shape) * w))

    for_each_chunk(S, times, P, mc.seed, fn, mc.workers, stream, ensemble)
    return MCEstimate.from_samples(out)


def survival_probability(W: float) -> float:
    if W < 0:
        raise ValueError("killed mass must be >= 0")
    return math.exp(-W)


def poisson_field_oracle(T: LevyTriple, sched: TrapSchedule, phi: GridField, mc: MCParams) -> MCEstimate:
    """Direct simulation of a Poisson trap field with intensity ``phi``; ``mc.P`` realizations.

    Trap starting points sit at cell centers chosen with probability
    proportional to ``phi``, and each trap moves along its own path (stream 1).
    """
    grid = sched.grid
    if phi.grid != grid:
        raise GridMismatchError("phi and the schedule must share one grid")
    if phi.background != 0 or phi.has_hard_part:
        raise ValueError("the oracle needs a finite intensity with zero background")
    R = mc.P
    lam = float(phi.flat.sum() * grid.cell_volume)
    u = uniforms(mc.seed, R, role=ROLE_AUX)
    counts = stats.poisson.ppf(u, lam).astype(np.int64) if lam > 0 else np.zeros(R, dtype=np.int64)
    Q = int(counts.sum())
    kill = np.zeros(R)
    if Q == 0 or sched.is_empty():
        return MCEstimate.from_samples(np.ones(R))
    cum = np.cumsum(phi.flat)
    cells = np.searchsorted(cum, uniforms(mc.seed, Q, path=1, role=ROLE_AUX) * cum[-1], side="right")
    cells = np.minimum(cells, grid.size - 1)
    start = np.array(np.unravel_index(cells, grid.shape)).T
    owner = np.repeat(np.arange(R), counts)
    times = uniform_time_grid(sched.t, mc.K)
    slice_of = sched.slice_index(times)
    dt = np.diff(times)
    soft = np.stack([u_.values for u_ in sched.soft])
    hard = np.stack([d.values > 0 for d in sched.hard])
    m, h = grid.points_per_axis, grid.spacing
    per_point = np.zeros(Q)

    def fn(p0, block):
        o = _offsets(block[:, : mc.K], h)  # (B, K, d)
        a = (m - 1) - start[p0 : p0 + len(block), None, :] - o
        ok = np.all((a >= 0) & (a < m), axis=-1)
        a = np.clip(a, 0, m - 1)
        jj = np.broadcast_to(slice_of, ok.shape)
        idx = (jj,) + tuple(a[..., k] for k in range(grid.dim))
        s = np.where(ok, soft[idx], 0.0) @ dt
        s[np.any(ok & hard[idx], axis=1)] = np.inf
        per_point[p0 : p0 + len(block)] = s

    for_each_chunk(scheme_for(T, mc), times, Q, mc.seed, fn, mc.workers, stream=1)
    np.add.at(kill, owner, per_point)
    return MCEstimate.from_samples(np.exp(-kill))


# ---------------------------------------------------------------------------
# sausage


def _drift_samples(g, times, d):
    if g is None:
        return np.zeros((len(times), d))
    if callable(g):
        return np.array([np.broadcast_to(np.asarray(g(s), dtype=float), (d,)) for s in times])
    g = np.asarray(g, dtype=float).reshape(len(times), d)
    return g


def sausage_volume(T: LevyTriple | None, D: GridField, t: float, mc: MCParams, g=None,
                   ensemble: PathEnsemble | None = None, stream: int = 0) -> MCEstimate:
    """Volume of ``union_i (D + X_{t_i} + g(t_i))`` over left endpoints, translations rounded to cells.

    ``g`` is ``None``, a callable of time, or samples on the time grid.
    """
    if not D.is_indicator():
        raise ValueError("D must be an indicator")
    grid = D.grid
    S, times, P, used = _ensemble_source(T, t, mc, ensemble)
    K = len(used) - 1
    G = _drift_samples(g, times, grid.dim)[:K]
    h, vol = grid.spacing, grid.cell_volume
    out = np.zeros(P)
    if D.cell_count() == 0:
        return MCEstimate.from_samples(out)
    nz = np.nonzero(D.values)
    lo = np.array([a.min() for a in nz])
    hi = np.array([a.max() for a in nz])
    crop = D.values[tuple(slice(a, b + 1) for a, b in zip(lo, hi))]

    def fn(p0, block):
        for q in range(block.shape[0]):
            o = np.floor((block[q, :K] + G) / h + 0.5).astype(np.int64)
            omin, omax = o.min(axis=0), o.max(axis=0)
            n_o = tuple(int(v) for v in omax - omin + 1)
            V = _occupation(o, np.ones(K), omin, n_o) > 0
            out[p0 + q] = vol * int(np.count_nonzero(_conv(V.astype(float), crop) > 0.5))

    for_each_chunk(S, times, P, mc.seed, fn, mc.workers, stream, ensemble)
    return MCEstimate.from_samples(out)


# ---------------------------------------------------------------------------
# comparisons


def rearranged_phi(phi: GridField) -> GridField:
    """Symmetric increasing rearrangement with ``sigma`` the background (zero when it is 0)."""
    sigma = phi.background
    if sigma == 0:
        return phi.with_values(np.zeros(phi.grid.shape))
    return increasing_rearrange(phi.with_values(np.minimum(phi.values, sigma)), sigma)


def verify_trap(T: LevyTriple, sched: TrapSchedule, phi: GridField, mc: MCParams,
                allowance_rel: float = 0.01, label: str = "") -> ComparisonReport:
    """Killed mass of ``(X, phi, U)`` against ``(X*, phi_*, U*)``; both sides share the seed."""
    raw = trap_mass(T, sched, phi, mc)
    star = trap_mass(rearrange_triple(T), sched.rearranged(), rearranged_phi(phi), mc)
    return compare_estimates(raw, star, allowance_rel, mc.seed, label, {"P": mc.P, "K": mc.K, "n": mc.n, "t": sched.t})


def verify_sausage(T: LevyTriple, D: GridField, t: float, mc: MCParams, g=None,
                   allowance_rel: float = 0.01, label: str = "") -> ComparisonReport:
    """Sausage volume of ``(X, D, g)`` against ``(X*, D*, 0)``; both sides share the seed."""
    raw = sausage_volume(T, D, t, mc, g)
    star = sausage_volume(rearrange_triple(T), rearrange_set(D), t, mc)
    return compare_estimates(raw, star, allowance_rel, mc.seed, label, {"P": mc.P, "K": mc.K, "n": mc.n, "t": t})

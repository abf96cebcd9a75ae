"""Monte Carlo q-capacities and extrapolated 0-capacities.

``C^q(A) = q int E_x[exp(-q T_A)] dx`` with ``T_A`` read at grid times.

Grid method (practical for d <= 2)
    One centered path per sample. Start cell ``b`` hits ``A`` at step ``i``
    when ``b + o_i`` is a cell of ``A``, with ``o_i`` the path's rounded
    offset; scanning first visits of each offset in time order gives the
    hitting step of every start cell at once, and from the per-path histogram
    of hitting steps the spatial integral for any q.
Last-exit method (any d, the default for d = 3)
    Splits each hit at the last visit to ``A``. Only walks whose first step
    leaves ``A`` are simulated, until they return or are killed, so the
    estimator needs no spatial truncation and no proposal over space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .grid import GridField
from .levy import LevyTriple, rearrange_triple
from .rearrange import rearrange_set
from .reports import ComparisonReport, MCEstimate, compare_estimates
from .rng import ROLE_AUX, ROLE_COUNT, ROLE_GAUSS, normal_pair, positive_poisson, seed_key, uniform_pair
from .sampler import (
    MCParams,
    PathEnsemble,
    _add_n_jumps,
    check_rate,
    for_each_chunk,
    run_chunks,
    scheme_arrays,
    scheme_for,
    uniform_time_grid,
)

__all__ = [
    "CapacityEstimate",
    "ZeroCapacityEstimate",
    "hitting_time",
    "hitting_histograms",
    "hitting_mass",
    "qcapacity",
    "qcapacity_ladder",
    "zero_capacity",
    "verify_cap",
    "dilate",
    "DEFAULT_LADDER",
]

DEFAULT_LADDER = (1.0, 0.5, 0.25, 0.125, 0.0625)


@dataclass(frozen=True)
class CapacityEstimate:
    q: float
    value: float
    std_error: float
    spatial_truncation_bias_bound: float
    time_step: float
    paths: int
    horizon: float = math.inf
    horizon_bias_bound: float = 0.0
    method: str = "grid"
    samples: np.ndarray = field(repr=False, compare=False, default=None)

    def to_dict(self) -> dict:
        return {"q": self.q, "value": self.value, "std_error": self.std_error,
                "spatial_truncation_bias_bound": self.spatial_truncation_bias_bound,
                "horizon_bias_bound": self.horizon_bias_bound, "time_step": self.time_step,
                "paths": self.paths, "horizon": self.horizon, "method": self.method}

    def as_mc(self) -> MCEstimate:
        return MCEstimate(self.value, self.std_error, self.samples)


@dataclass(frozen=True)
class ZeroCapacityEstimate(CapacityEstimate):
    ladder: tuple = ()
    coefficients: tuple = ()
    residual: float = 0.0

    def to_dict(self) -> dict:
        out = super().to_dict()
        out.update(ladder=[e.to_dict() for e in self.ladder], coefficients=list(self.coefficients),
                   residual=self.residual)
        return out


def dilate(A: GridField) -> GridField:
    """One-cell dilation of an indicator along each axis (cross-shaped neighbourhood)."""
    v = A.values > 0
    out = v.copy()
    for ax in range(A.grid.dim):
        out[tuple(slice(1, None) if k == ax else slice(None) for k in range(A.grid.dim))] |= \
            v[tuple(slice(None, -1) if k == ax else slice(None) for k in range(A.grid.dim))]
        out[tuple(slice(None, -1) if k == ax else slice(None) for k in range(A.grid.dim))] |= \
            v[tuple(slice(1, None) if k == ax else slice(None) for k in range(A.grid.dim))]
    return A.with_values(out.astype(float))


def _check_set(A: GridField):
    if not A.is_indicator():
        raise ValueError("A must be an indicator field")


def hitting_time(path, A: GridField, x) -> int | None:
    """First index ``i`` with ``x + X_{t_i}`` in ``A``, or ``None``."""
    _check_set(A)
    g = A.grid
    z = np.asarray(path, dtype=float).reshape(len(path), -1) + np.asarray(x, dtype=float)
    idx = np.floor((z + g.half_extent) / g.spacing).astype(np.int64)
    ok = np.all((idx >= 0) & (idx < g.points_per_axis), axis=1)
    idx = np.clip(idx, 0, g.points_per_axis - 1)
    inside = ok & (A.values[tuple(idx.T)] > 0)
    hits = np.nonzero(inside)[0]
    return int(hits[0]) if len(hits) else None


# ---------------------------------------------------------------------------
# grid method


@njit(cache=True, nogil=True)
def _first_hits(o, acells, hist):
    """Histogram over steps of the first hit of every start cell ``b`` (``b + o_i`` in ``A``)."""
    K, d = o.shape
    omin = o[0].copy()
    omax = o[0].copy()
    for i in range(K):
        for k in range(d):
            omin[k] = min(omin[k], o[i, k])
            omax[k] = max(omax[k], o[i, k])
    amin = acells[0].copy()
    amax = acells[0].copy()
    for a in range(acells.shape[0]):
        for k in range(d):
            amin[k] = min(amin[k], acells[a, k])
            amax[k] = max(amax[k], acells[a, k])
    no = omax - omin + 1
    bmin = amin - omax
    nb = amax - omin - bmin + 1
    so = np.ones(d, dtype=np.int64)
    sb = np.ones(d, dtype=np.int64)
    for k in range(d - 2, -1, -1):
        so[k] = so[k + 1] * no[k + 1]
        sb[k] = sb[k + 1] * nb[k + 1]
    seen = np.zeros(so[0] * no[0], dtype=np.bool_)
    done = np.zeros(sb[0] * nb[0], dtype=np.bool_)
    for i in range(K):
        fo = 0
        for k in range(d):
            fo += (o[i, k] - omin[k]) * so[k]
        if seen[fo]:
            continue
        seen[fo] = True
        for a in range(acells.shape[0]):
            fb = 0
            for k in range(d):
                fb += (acells[a, k] - o[i, k] - bmin[k]) * sb[k]
            if not done[fb]:
                done[fb] = True
                hist[i] += 1


def hitting_histograms(A: GridField, times, P: int, S=None, seed: int = 0, workers=None,
                       ensemble: PathEnsemble | None = None, stream: int = 0) -> np.ndarray:
    """Per-path count of start cells first hitting ``A`` at each left endpoint, shape ``(P, K)``."""
    _check_set(A)
    acells = np.argwhere(A.values > 0).astype(np.int64)
    times = np.asarray(times, dtype=float)
    K = len(times) - 1
    hist = np.zeros((P, K), dtype=np.int64)
    if len(acells) == 0:
        return hist
    h = A.grid.spacing

    def fn(p0, block):
        for q in range(block.shape[0]):
            o = np.floor(block[q, :K] / h + 0.5).astype(np.int64)
            _first_hits(o, acells, hist[p0 + q])

    for_each_chunk(S, times, P, seed, fn, workers, stream, ensemble)
    return hist


def hitting_mass(A: GridField, ensemble: PathEnsemble, t: float) -> MCEstimate:
    """``int P_x(T_A < t) dx`` on the ensemble's paths (hits read at grid times before ``t``)."""
    times = ensemble.time_grid
    k = int(np.argmin(np.abs(times - t)))
    if abs(times[k] - t) > 1e-9 * max(t, 1.0):
        raise ValueError("t is not a time-grid point")
    hist = hitting_histograms(A, times[: k + 1], ensemble.P, ensemble=ensemble)
    return MCEstimate.from_samples(hist.sum(axis=1) * A.grid.cell_volume)


def _horizon_bound(q, t_max, mass_at_horizon):
    # sausage volume is subadditive in time, so M(s) <= (1 + s / t_max) M(t_max)
    return q * mass_at_horizon * math.exp(-q * t_max) * (2 + 1 / (q * t_max))


def _grid_ladder(T, A, qs, mc, t_max, ensemble):
    if ensemble is None:
        times = uniform_time_grid(t_max, mc.K)
        S, P = scheme_for(T, mc), mc.P
    else:
        times, S, P = ensemble.time_grid, None, ensemble.P
        t_max = float(times[-1])
    hist = hitting_histograms(A, times, P, S, mc.seed, mc.workers, ensemble)
    vol = A.grid.cell_volume
    mass = hist.sum(axis=1) * vol
    dt = float(np.max(np.diff(times)))
    out = []
    for q in qs:
        y = q * vol * (hist @ np.exp(-q * times[:-1]))
        e = MCEstimate.from_samples(y)
        out.append(CapacityEstimate(q, e.value, e.std_error, 0.0, dt, P, t_max,
                                    _horizon_bound(q, t_max, float(mass.mean())), "grid", y))
    return out


# ---------------------------------------------------------------------------
# last-exit method


@njit(cache=True, nogil=True)
def _inside(x, L, h, m, mask):
    flat = 0
    for k in range(x.shape[0]):
        c = int(math.floor((x[k] + L) / h))
        if c < 0 or c >= m:
            return False
        flat = flat * m + c
    return mask[flat]


ENVELOPE = 8.0  # Gaussian envelope, in standard deviations, for skipped grid times


@njit(cache=True, nogil=True)
def _box_distance(x, lo, hi):
    acc = 0.0
    for k in range(x.shape[0]):
        e = max(lo[k] - x[k], x[k] - hi[k], 0.0)
        acc += e * e
    return math.sqrt(acc)


@njit(cache=True, nogil=True)
def _skip(D, dt, sig, bnorm, max_steps):
    """Largest step count ``n <= max_steps`` whose drift plus ``ENVELOPE`` standard deviations stay below ``D``."""
    if D <= 0.0:
        return 1
    if sig == 0.0 and bnorm == 0.0:
        return max_steps
    ks = ENVELOPE * sig
    if bnorm > 0.0:
        r = (-ks + math.sqrt(ks * ks + 4.0 * bnorm * D)) / (2.0 * bnorm)
    else:
        r = D / ks
    n = int(r * r / dt)
    return max(1, min(n, max_steps))


@njit(cache=True, nogil=True)
def _jump_gap(u, rate_dt):
    """Number of jump-free intervals before the next interval with jumps (geometric)."""
    g = -math.log1p(-u) / rate_dt
    return int(min(g, 1e15))


@njit(cache=True, nogil=True)
def _last_exit_batches(b0, b1, bs, cells, mask, L, h, m, lo, hi, dt, t_cap, q_min, qs, arrs, sig, bnorm, k0, k1,
                       sums, counts):
    """Per batch: sums of the escape weights for every q and the number of first steps leaving ``A``.

    Sample ``s`` starts uniformly in a random cell of ``A`` and takes one step.
    If it lands outside ``A`` it walks until it returns (weight 0) or outlives
    its killing time ``tau ~ Exp(q_min)`` (weight ``(q / q_min) exp(-(q - q_min) tau)``).
    Walks are cut at ``t_cap``.

    Away from the bounding box of ``A`` one exact increment covers ``n`` grid
    steps when drift plus the Gaussian envelope stay short of the box. Jumps
    are placed by interval: the gap to the next interval with jumps is
    geometric and that interval gets a Poisson number of jumps conditioned to
    be positive, so a long step never straddles a jump.
    """
    drift, S, total, kinds, cum, fpar, vecs, mats, gcent, gcum = arrs
    d = cells.shape[1]
    nc = cells.shape[0]
    z = np.empty(d + 1)
    y = np.empty(d)
    x = np.empty(d)
    u = np.empty(d + 2)
    rate_dt = total * dt
    far = 1 << 60
    for bt in range(b0, b1):
        for s in range(bt * bs, (bt + 1) * bs):
            for j in range(0, d + 2, 2):
                u[j], u[j + 1] = uniform_pair(k0, k1, j // 2, 0, s, ROLE_AUX)
            c = min(int(u[0] * nc), nc - 1)
            for k in range(d):
                x[k] = -L + h * (cells[c, k] + u[k + 1])
            tau = -math.log1p(-u[d + 1]) / q_min
            next_jump = far
            if rate_dt > 0.0:
                ug, _ = uniform_pair(k0, k1, 0, 0, s, ROLE_COUNT)
                next_jump = 1 + _jump_gap(ug, rate_dt)
            escaped = False
            i = 0
            while True:
                n = _skip(_box_distance(x, lo, hi), dt, sig, bnorm, next_jump - i)
                tn = n * dt
                st = math.sqrt(tn)
                for j in range(0, d, 2):
                    z[j], z[j + 1] = normal_pair(k0, k1, j // 2, i + 1, s, ROLE_GAUSS)
                for r in range(d):
                    acc = 0.0
                    for cc in range(d):
                        acc += S[r, cc] * z[cc]
                    x[r] += drift[r] * tn + st * acc
                i += n
                if i == next_jump:
                    ug, un = uniform_pair(k0, k1, 0, i, s, ROLE_COUNT)
                    _add_n_jumps(x, positive_poisson(rate_dt, un), i, s, k0, k1, 0, kinds, cum, fpar, vecs, mats,
                                 gcent, gcum, y)
                    next_jump = i + 1 + _jump_gap(ug, rate_dt)
                # position i is a visit only if (i - 1) * dt < tau
                if i >= 2 and (i - 1) * dt >= tau:
                    escaped = True
                    break
                if _inside(x, L, h, m, mask):
                    break
                if i == 1:
                    counts[bt] += 1
                if i * dt >= tau or i * dt >= t_cap:
                    escaped = True
                    break
            if escaped:
                for k in range(qs.shape[0]):
                    sums[bt, k] += qs[k] / q_min * math.exp(-(qs[k] - q_min) * tau)


def _batches(P: int, max_batches: int = 1000) -> tuple[int, int]:
    B = min(max_batches, P)
    return B, P // B


def _last_exit_ladder(T, A, qs, mc, t_max, dt):
    """Last-exit identity for grid-time hitting.

    With ``Y_j = y + X_{j dt}`` and visits counted before an ``Exp(q)`` time,
    splitting at the last visit and using that Lebesgue measure is invariant
    for Lévy increments gives ``C^q = q |A| + q e^{-q dt} / (1 - e^{-q dt}) |A| E[U_q]``
    with ``y`` uniform on ``A`` and ``U_q`` the weight of the walk after its first step.
    """
    S = scheme_for(T, mc)
    g = A.grid
    cells = np.argwhere(A.values > 0).astype(np.int64)
    mask = (A.flat > 0).copy()
    vol = A.cell_count() * g.cell_volume
    q_arr = np.asarray(qs, dtype=float)
    q_min = float(q_arr.min())
    B, bs = _batches(mc.P)
    sums = np.zeros((B, len(qs)))
    counts = np.zeros(B, dtype=np.int64)
    arrs = scheme_arrays(S)
    k0, k1 = seed_key(mc.seed)
    check_rate(S, np.array([0.0, dt]))

    lo = -g.half_extent + g.spacing * cells.min(axis=0)
    hi = -g.half_extent + g.spacing * (cells.max(axis=0) + 1)
    sig = math.sqrt(max(float(np.linalg.eigvalsh(S.A_n).max()), 0.0))
    bnorm = float(np.linalg.norm(S.b_n))

    def work(a, b):
        _last_exit_batches(a, b, bs, cells, mask, g.half_extent, g.spacing, g.points_per_axis, lo, hi, dt, t_max,
                           q_min, q_arr, arrs, sig, bnorm, k0, k1, sums, counts)

    run_chunks(B, mc.workers, work, chunk=max(1, B // 64))
    escape_rate = float(sums[:, int(np.argmin(q_arr))].sum()) / (B * bs)
    out = []
    for k, q in enumerate(qs):
        factor = q * vol * math.exp(-q * dt) / -math.expm1(-q * dt)
        y = q * vol + factor * sums[:, k] / bs
        e = MCEstimate.from_samples(y)
        # a walk cut at t_max counts as an escape and overstates its weight by at most exp(-q t_max);
        # walks alive at t_max have not returned before tau, an event whose weight at q_min is 1
        bias = factor * escape_rate * math.exp(-q * t_max)
        out.append(CapacityEstimate(q, e.value, e.std_error, 0.0, dt, B * bs, t_max, bias, "last_exit", y))
    return out


# ---------------------------------------------------------------------------
# public estimators


METHODS = ("auto", "grid", "last_exit")


def _horizon(qs, t_max, tol):
    q_min = min(qs)
    if t_max is None:
        return -math.log(tol) / q_min
    if math.exp(-q_min * t_max) > tol:
        raise ValueError(f"horizon {t_max} too short: exp(-q t_max) = {math.exp(-q_min * t_max):.3g} > {tol}")
    return float(t_max)


def qcapacity_ladder(T: LevyTriple | None, A: GridField, qs, mc: MCParams, method: str = "auto",
                     t_max: float | None = None, tol: float = 1e-3,
                     ensemble: PathEnsemble | None = None) -> list[CapacityEstimate]:
    """q-capacities for several ``q`` from one shared set of random numbers.

    ``mc.K`` steps of length ``dt = t_max / K`` cover the horizon ``t_max``
    (default ``-log(tol) / min(q)``). For the grid method ``mc.P`` is the
    number of paths; for the last-exit method it is the number of start points.
    """
    _check_set(A)
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    qs = [float(q) for q in qs]
    if not qs or min(qs) <= 0:
        raise ValueError("q must be > 0")
    if method == "auto":
        method = "grid" if A.grid.dim <= 2 or ensemble is not None else "last_exit"
    if ensemble is None:
        t_max = _horizon(qs, t_max, tol)
    if A.cell_count() == 0:
        return [CapacityEstimate(q, 0.0, 0.0, 0.0, 0.0, mc.P, method=method, samples=np.zeros(2)) for q in qs]
    if method == "grid":
        return _grid_ladder(T, A, qs, mc, t_max, ensemble)
    if ensemble is not None:
        raise ValueError("the last-exit method simulates its own walks")
    return _last_exit_ladder(T, A, qs, mc, t_max, t_max / mc.K)


def qcapacity(T: LevyTriple | None, A: GridField, q: float, mc: MCParams, method: str = "auto",
              t_max: float | None = None, tol: float = 1e-3,
              ensemble: PathEnsemble | None = None) -> CapacityEstimate:
    """``C^q_X(A)``; see :func:`qcapacity_ladder`."""
    return qcapacity_ladder(T, A, [q], mc, method, t_max, tol, ensemble)[0]


def zero_capacity(T: LevyTriple, A: GridField, mc: MCParams, ladder=DEFAULT_LADDER, method: str = "auto",
                  t_max: float | None = None, tol: float = 1e-3, monotone_k: float = 4.0) -> ZeroCapacityEstimate:
    """Extrapolate ``C^q`` to ``q = 0`` with a quadratic fit in ``sqrt(q)`` over a shared ladder.

    The caller asserts transience through ``T.transient``. The fitted
    intercept is a fixed linear combination of the ladder values, so its
    standard error comes from the per-sample spread; the fit residual is added
    in quadrature. A ladder value that grows as q decreases by more than
    ``monotone_k`` paired standard errors raises ``ValueError``.
    """
    if not T.transient:
        raise ValueError("0-capacity needs a transient process; set transient=True on the triple")
    ladder = sorted((float(q) for q in ladder), reverse=True)
    if len(ladder) < 3:
        raise ValueError("the ladder needs at least three values of q")
    ests = qcapacity_ladder(T, A, ladder, mc, method, t_max, tol)
    if A.cell_count() == 0:
        return ZeroCapacityEstimate(0.0, 0.0, 0.0, 0.0, 0.0, mc.P, method=ests[0].method, samples=np.zeros(2),
                                    ladder=tuple(ests))
    r = np.sqrt(ladder)
    X = np.stack([np.ones_like(r), r, r**2], axis=1)
    lam = np.linalg.pinv(X)  # rows map ladder values to fit coefficients
    Y = np.stack([e.samples for e in ests], axis=1)
    means = Y.mean(axis=0)
    coef = lam @ means
    resid = means - X @ coef
    for k in range(len(ladder) - 1):
        diff = Y[:, k + 1] - Y[:, k]
        sd = float(diff.std(ddof=1) / math.sqrt(len(diff)))
        if diff.mean() > monotone_k * sd + 1e-12 * abs(means[k]):
            raise ValueError("q-capacity grows as q decreases beyond noise: recurrence or a too short horizon")
    c0 = Y @ lam[0]
    se = float(c0.std(ddof=1) / math.sqrt(len(c0)))
    rms = float(np.sqrt(np.mean(resid**2)))
    return ZeroCapacityEstimate(
        0.0, float(coef[0]), math.hypot(se, rms), 0.0, ests[0].time_step, ests[0].paths, ests[0].horizon,
        max(e.horizon_bias_bound for e in ests), ests[0].method, c0, tuple(ests), tuple(float(c) for c in coef), rms,
    )


def verify_cap(T: LevyTriple, A: GridField, q: float, mc: MCParams, allowance_rel: float = 0.01,
               method: str = "auto", t_max: float | None = None, tol: float = 1e-3,
               label: str = "") -> ComparisonReport:
    """``C^q_X(A)`` against ``C^q_{X*}(A*)``; both sides share the seed."""
    raw = qcapacity(T, A, q, mc, method, t_max, tol)
    star = qcapacity(rearrange_triple(T), rearrange_set(A), q, mc, method, t_max, tol)
    return compare_estimates(raw.as_mc(), star.as_mc(), allowance_rel, mc.seed, label,
                             {"P": mc.P, "K": mc.K, "n": mc.n, "q": q, "time_step": raw.time_step,
                              "horizon": raw.horizon, "method": raw.method,
                              "horizon_bias_bound": max(raw.horizon_bias_bound, star.horizon_bias_bound)})

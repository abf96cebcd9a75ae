"""Path simulation for truncated Lévy schemes.

Each interval's increment is a Gaussian with mean ``b_n dt`` and covariance
``A_n dt`` plus a Poisson number of jumps drawn from the mixture of the
truncated density and the atoms. Randomness for path ``p`` and interval ``i``
comes from the Philox counter ``(draw, i, p, role | stream << 8)``, so every
path can be regenerated on its own and in any order.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit

from .levy import LevyTriple, SimScheme, truncate
from .rng import ROLE_COUNT, ROLE_GAUSS, ROLE_JUMP, normal_pair, poisson, seed_key, uniform_pair

__all__ = ["MCParams", "PathEnsemble", "sample_paths", "for_each_chunk", "scheme_for", "scheme_arrays", "resolve_workers", "run_chunks", "uniform_time_grid",
           "WORKERS_ENV"]

WORKERS_ENV = "LEVYREARRANGE_WORKERS"
MAX_POISSON_MEAN = 700.0


@dataclass(frozen=True)
class MCParams:
    """Monte Carlo settings: ``P`` paths, ``K`` uniform time steps, truncation ``n``.

    ``eps_n = None`` uses the default ``1/n**2``; ``eps_n = 0`` is accepted for
    degenerate covariances (e.g. the zero process).
    """

    P: int
    K: int
    seed: int = 0
    n: int = 16
    eps_n: float | None = None
    workers: int | None = None

    def __post_init__(self):
        if self.P < 1 or self.K < 1 or self.n < 1:
            raise ValueError("P, K and n must be >= 1")


def scheme_for(T: LevyTriple, mc: MCParams) -> SimScheme:
    return truncate(T, mc.n, mc.eps_n, allow_degenerate=mc.eps_n == 0)


def resolve_workers(workers: int | None = None) -> int:
    """Explicit argument, then the environment variable, then 1."""
    if workers is None:
        env = os.environ.get(WORKERS_ENV)
        workers = int(env) if env else 1
    if workers < 1:
        raise ValueError("workers must be >= 1")
    return int(workers)


def chunk_size(K: int, d: int, budget: int = 1 << 22) -> int:
    """Paths per chunk so one block of ``K + 1`` positions stays under ``budget`` floats."""
    return int(max(1, min(64, budget // ((K + 1) * d))))


def run_chunks(P: int, workers: int | None, fn, chunk: int = 64) -> None:
    """Call ``fn(p0, p1)`` over ``[0, P)`` in fixed-size chunks.

    Chunk boundaries do not depend on the worker count; ``fn`` must write only
    its own slice of any output.
    """
    workers = resolve_workers(workers)
    bounds = [(p, min(p + chunk, P)) for p in range(0, P, chunk)]
    if workers == 1 or len(bounds) == 1:
        for a, b in bounds:
            fn(a, b)
        return
    with ThreadPoolExecutor(max_workers=workers) as ex:
        for f in [ex.submit(fn, a, b) for a, b in bounds]:
            f.result()


def uniform_time_grid(t: float, K: int) -> np.ndarray:
    if K < 1 or not t > 0:
        raise ValueError("need K >= 1 and t > 0")
    g = np.arange(K + 1) * (t / K)
    g[-1] = t
    return g


def scheme_arrays(S: SimScheme) -> tuple:
    """Flatten a scheme into the arrays consumed by the compiled kernels."""
    d = S.dim
    rows = S.jump_rows()
    total = float(sum(r[1] for r in rows))
    k = max(len(rows), 1)
    kinds = np.full(k, -1, dtype=np.int64)
    cum = np.ones(k)
    fpar = np.zeros((k, 6))
    vecs = np.zeros((k, d))
    mats = np.zeros((k, d, d))
    acc = 0.0
    for i, (kind, rate, par, vec, mat) in enumerate(rows):
        kinds[i] = kind
        acc += rate
        cum[i] = acc / total if total > 0 else 1.0
        fpar[i] = par
        vecs[i] = vec
        mats[i] = mat
    if rows:
        cum[len(rows) - 1] = 1.0
    gcent, gcum = np.zeros((1, d)), np.ones(1)
    if S.rho_n is not None and hasattr(S.rho_n, "grid_table") and S.c_n > 0:
        gcent, gcum = S.rho_n.grid_table()
        gcent = np.ascontiguousarray(gcent, dtype=float)
    return (np.ascontiguousarray(S.b_n, dtype=float), np.ascontiguousarray(S.sqrt_A), total, kinds, cum, fpar,
            vecs, mats, gcent, np.ascontiguousarray(gcum, dtype=float))


@njit(cache=True, nogil=True)
def _radial_u(v, alpha, u_lo, a, G, d):
    g = v * G
    if alpha == 0.0:
        return (u_lo + a) * math.exp(g) - a
    beta = -alpha / d
    base = (u_lo + a) ** beta + beta * g
    if base <= 0.0:
        base = 0.0
    return base ** (1.0 / beta) - a


@njit(cache=True, nogil=True)
def _jump(y, kind, comp, fpar, vecs, mats, gcent, gcum, k0, k1, interval, path, role, draw):
    """Write one jump into ``y``; returns the advanced draw counter."""
    d = y.shape[0]
    if kind == 3:  # atom
        for j in range(d):
            y[j] = vecs[comp, j]
        return draw
    if kind == 0:  # radial power, inverse cdf in u = r^d
        u1, u2 = uniform_pair(k0, k1, draw, interval, path, role)
        draw += 1
        alpha, u_lo, u_hi, a, G = fpar[comp, 0], fpar[comp, 1], fpar[comp, 2], fpar[comp, 3], fpar[comp, 4]
        u = _radial_u(u1, alpha, u_lo, a, G, d)
        if u < u_lo:
            u = u_lo
        if u > u_hi:
            u = u_hi
        r = u ** (1.0 / d)
        if d == 1:
            y[0] = r if u2 < 0.5 else -r
        elif d == 2:
            th = 2.0 * math.pi * u2
            y[0] = r * math.cos(th)
            y[1] = r * math.sin(th)
        else:
            u3, _ = uniform_pair(k0, k1, draw, interval, path, role)
            draw += 1
            z = 2.0 * u2 - 1.0
            s = math.sqrt(max(0.0, 1.0 - z * z))
            ph = 2.0 * math.pi * u3
            y[0] = r * s * math.cos(ph)
            y[1] = r * s * math.sin(ph)
            y[2] = r * z
        return draw
    if kind == 1:  # gaussian component, rejected inside the cut ball
        rc2 = fpar[comp, 0] ** 2
        z = np.empty(d + 1)
        for _ in range(1000000):
            for j in range(0, d, 2):
                a, b = normal_pair(k0, k1, draw, interval, path, role)
                draw += 1
                z[j] = a
                z[j + 1] = b
            r2 = 0.0
            for i in range(d):
                s = vecs[comp, i]
                for j in range(i + 1):
                    s += mats[comp, i, j] * z[j]
                y[i] = s
                r2 += s * s
            if r2 > rc2:
                return draw
        return draw
    # grid cells: pick a cell by its cumulative mass, then a uniform point inside it
    u1, u2 = uniform_pair(k0, k1, draw, interval, path, role)
    draw += 1
    idx = np.searchsorted(gcum, u1, side="right")
    if idx >= gcum.shape[0]:
        idx = gcum.shape[0] - 1
    h = fpar[comp, 0]
    offs = np.empty(d + 1)
    offs[0] = u2
    for j in range(1, d, 2):
        a, b = uniform_pair(k0, k1, draw, interval, path, role)
        draw += 1
        offs[j] = a
        offs[j + 1] = b
    for j in range(d):
        y[j] = gcent[idx, j] + (offs[j] - 0.5) * h
    return draw


@njit(cache=True, nogil=True)
def _add_n_jumps(x, N, i, p, k0, k1, stream, kinds, cum, fpar, vecs, mats, gcent, gcum, y):
    """Add ``N`` jumps drawn for interval ``i`` of path ``p`` to ``x`` in place."""
    rj = ROLE_JUMP | (stream << 8)
    d = x.shape[0]
    draw = 0
    for _ in range(N):
        u, _u = uniform_pair(k0, k1, draw, i, p, rj)
        draw += 1
        comp = 0
        while comp < cum.shape[0] - 1 and u >= cum[comp]:
            comp += 1
        draw = _jump(y, kinds[comp], comp, fpar, vecs, mats, gcent, gcum, k0, k1, i, p, rj, draw)
        for r in range(d):
            x[r] += y[r]


@njit(cache=True, nogil=True)
def _add_jumps(x, i, dt, p, k0, k1, stream, total, kinds, cum, fpar, vecs, mats, gcent, gcum, y):
    """Add the Poisson jumps of interval ``i`` of path ``p`` to ``x`` in place."""
    N = poisson(total * dt, k0, k1, i, p, ROLE_COUNT | (stream << 8))
    _add_n_jumps(x, N, i, p, k0, k1, stream, kinds, cum, fpar, vecs, mats, gcent, gcum, y)


# The Gaussian step is written out in each stepping loop: passing the scheme
# arrays through a per-step call costs several times the step itself.


@njit(cache=True, nogil=True)
def gen_path(out, times, p, k0, k1, stream, arrs):
    """Fill ``out[0..K]`` with one path started at 0."""
    drift, S, total, kinds, cum, fpar, vecs, mats, gcent, gcum = arrs
    K = times.shape[0] - 1
    d = out.shape[1]
    z = np.empty(d + 1)
    y = np.empty(d)
    x = np.zeros(d)
    rg = ROLE_GAUSS | (stream << 8)
    for j in range(d):
        out[0, j] = 0.0
    for i in range(1, K + 1):
        dt = times[i] - times[i - 1]
        sdt = math.sqrt(dt)
        for j in range(0, d, 2):
            z[j], z[j + 1] = normal_pair(k0, k1, j // 2, i, p, rg)
        for r in range(d):
            acc = 0.0
            for c in range(d):
                acc += S[r, c] * z[c]
            x[r] += drift[r] * dt + sdt * acc
        if total > 0.0:
            _add_jumps(x, i, dt, p, k0, k1, stream, total, kinds, cum, fpar, vecs, mats, gcent, gcum, y)
        for r in range(d):
            out[i, r] = x[r]


@njit(cache=True, nogil=True)
def _fill(out, times, p0, p1, k0, k1, stream, arrs):
    for p in range(p0, p1):
        gen_path(out[p], times, p, k0, k1, stream, arrs)


@njit(cache=True, nogil=True)
def _fill_local(out, times, p0, k0, k1, stream, arrs):
    for q in range(out.shape[0]):
        gen_path(out[q], times, p0 + q, k0, k1, stream, arrs)


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    time_grid: np.ndarray
    paths: np.ndarray
    seed: int
    provenance: dict

    @property
    def P(self) -> int:
        return self.paths.shape[0]

    def at(self, i: int) -> np.ndarray:
        """Positions of all paths at time index ``i``, shape ``(P, d)``."""
        return self.paths[:, i, :]


def check_time_grid(times) -> np.ndarray:
    times = np.ascontiguousarray(times, dtype=float)
    if times.ndim != 1 or len(times) < 2 or times[0] != 0 or np.any(np.diff(times) <= 0):
        raise ValueError("time grid must start at 0 and increase strictly")
    return times


def check_rate(S: SimScheme, times) -> None:
    if S.total_rate * float(np.max(np.diff(times))) > MAX_POISSON_MEAN:
        raise ValueError("jump rate times step exceeds the Poisson sampler range; refine the time grid")


def sample_paths(S: SimScheme, time_grid, P: int, seed: int, workers: int | None = None,
                 stream: int = 0) -> PathEnsemble:
    """Simulate ``P`` paths on ``time_grid``; bit-identical for a fixed seed at any worker count."""
    if P < 1:
        raise ValueError("P must be >= 1")
    times = check_time_grid(time_grid)
    check_rate(S, times)
    arrs = scheme_arrays(S)
    k0, k1 = seed_key(seed)
    out = np.zeros((P, len(times), S.dim))

    def work(a, b):
        _fill(out, times, a, b, k0, k1, stream, arrs)

    run_chunks(P, workers, work)
    out.setflags(write=False)
    return PathEnsemble(times, out, int(seed), {"scheme": S.provenance(), "P": P, "stream": stream})


def for_each_chunk(S: SimScheme, time_grid, P: int, seed: int, fn, workers: int | None = None,
                   stream: int = 0, ensemble: PathEnsemble | None = None) -> None:
    """Call ``fn(p0, block)`` with paths ``p0 .. p0 + len(block)`` without storing the whole ensemble.

    The blocks are the ones :func:`sample_paths` would produce; with ``ensemble``
    given, its stored paths are used instead of simulating.
    """
    if ensemble is not None:
        paths = ensemble.paths

        def work(a, b):
            fn(a, paths[a:b])

        run_chunks(ensemble.P, workers, work, chunk_size(paths.shape[1] - 1, paths.shape[2]))
        return
    if P < 1:
        raise ValueError("P must be >= 1")
    times = check_time_grid(time_grid)
    check_rate(S, times)
    arrs = scheme_arrays(S)
    k0, k1 = seed_key(seed)

    def work(a, b):
        block = np.empty((b - a, len(times), S.dim))
        _fill_local(block, times, a, k0, k1, stream, arrs)
        fn(a, block)

    run_chunks(P, workers, work, chunk_size(len(times) - 1, S.dim))

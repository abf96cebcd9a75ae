"""Discrete-time killed mass ``W_n`` on a grid and its rearrangement comparison.

The state carried through the recursion is always the deficit ``psi_k = 1 - phi_k``
(zero background), so every integral stays finite. For a normalized density
``p``, ``p * (1 - psi) = 1 - p * psi`` and the background never has to be
convolved.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .grid import GridField, GridMismatchError, convolve, integrate
from .rearrange import dominates, increasing_rearrange, rearrange_fn
from .reports import ComparisonReport

__all__ = [
    "DiscreteInstance",
    "survival_deficit",
    "survival_density",
    "wn_eval",
    "brute_wn",
    "rearranged_instance",
    "verify_ri",
    "bll_probability",
    "verify_bll",
    "random_instance_params",
    "build_instance",
]

NORM_TOL = 1e-10
BRUTE_MAX_ELEMENTS = 2**22


@dataclass(frozen=True)
class DiscreteInstance:
    """``phi`` (background ``sigma``), traps ``V[0..n]`` and densities ``p[1..n]``.

    ``p[j-1]`` is the transition density from step ``j-1`` to ``j``. Each ``V_i``
    may also be a tuple of fields whose complements multiply, i.e.
    ``1 - V_i = prod_k (1 - V_i^(k))``.
    """

    phi: GridField
    V: tuple
    p: tuple
    sigma: float = 1.0

    def __post_init__(self):
        V = tuple(v if isinstance(v, tuple) else (v,) for v in self.V)
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "p", tuple(self.p))
        if len(V) != len(self.p) + 1:
            raise ValueError(f"need n+1 traps for n densities, got {len(V)} and {len(self.p)}")
        grid = self.phi.grid
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.phi.background != self.sigma:
            raise ValueError("phi must have background sigma")
        if (self.phi.values > self.sigma).any():
            raise ValueError("phi exceeds sigma; clip with min(phi, sigma) first")
        for f in (*(v for vs in V for v in vs), *self.p):
            if f.grid != grid:
                raise GridMismatchError("all instance fields must share one grid")
            if f.background != 0 or f.has_hard_part:
                raise ValueError("traps and densities need zero background and finite values")
        for vs in V:
            for v in vs:
                if (v.values > 1).any():
                    raise ValueError("trap values must lie in [0, 1]")
        for j, pj in enumerate(self.p):
            mass = integrate(pj)
            if abs(mass - 1.0) > NORM_TOL:
                raise ValueError(f"p[{j}] integrates to {mass!r}, not 1")

    @property
    def n(self) -> int:
        return len(self.p)

    @property
    def grid(self):
        return self.phi.grid

    def survive(self, i: int) -> np.ndarray:
        """``1 - V_i`` with multiple factors multiplied out."""
        out = np.ones(self.grid.shape)
        for v in self.V[i]:
            out = out * (1.0 - v.values)
        return out


def survival_deficit(inst: DiscreteInstance, upto: int | None = None, method: str = "auto") -> list[np.ndarray]:
    """Deficits ``psi_k = 1 - phi_k / sigma`` for k = 0..upto (arrays on the grid)."""
    upto = inst.n if upto is None else upto
    if not 0 <= upto <= inst.n:
        raise ValueError(f"upto must be in [0, {inst.n}]")
    grid = inst.grid
    psi = (inst.sigma - inst.phi.values) / inst.sigma
    cur = 1.0 - inst.survive(0) * (1.0 - psi)
    out = [cur]
    for k in range(1, upto + 1):
        c = convolve(inst.p[k - 1], GridField(grid, np.clip(cur, 0.0, 1.0)), method=method).values
        cur = 1.0 - inst.survive(k) * (1.0 - np.minimum(c, 1.0))
        out.append(cur)
    return out


def survival_density(inst: DiscreteInstance, upto: int | None = None, method: str = "auto") -> GridField:
    """``phi_upto`` as a field with background ``sigma``."""
    psi = survival_deficit(inst, upto, method)[-1]
    vals = inst.sigma * np.clip(1.0 - psi, 0.0, 1.0)
    return GridField(inst.grid, vals, inst.sigma)


def wn_eval(inst: DiscreteInstance, method: str = "auto") -> float:
    """Killed mass ``W_n = int (sigma - phi_n) - int (sigma - phi)``."""
    hd = inst.grid.cell_volume
    psi_n = survival_deficit(inst, method=method)[-1]
    psi_0 = (inst.sigma - inst.phi.values) / inst.sigma
    return float(inst.sigma * hd * (psi_n.sum() - psi_0.sum()))


def _kernel_matrix(p: GridField) -> np.ndarray:
    """``K[a, b] = h^d * ptilde(x_a - x_b)`` with ptilde the 2^d-corner averaged kernel."""
    grid = p.grid
    m, d = grid.points_per_axis, grid.dim
    idx = np.indices(grid.shape).reshape(d, -1).T
    diff = idx[:, None, :] - idx[None, :, :]
    vals = p.values
    acc = np.zeros((grid.size, grid.size))
    for corner in product((m // 2 - 1, m // 2), repeat=d):
        j = diff + np.asarray(corner)
        ok = np.all((j >= 0) & (j < m), axis=2)
        jj = np.where(ok[..., None], j, 0)
        acc += np.where(ok, vals[tuple(jj[..., k] for k in range(d))], 0.0)
    return acc * grid.cell_volume / 2**d


def brute_wn(inst: DiscreteInstance) -> float:
    """Literal nested Riemann sum over all cell tuples ``(x_0, ..., x_n)``.

    Uses ``phi = sigma (1 - psi)`` so that
    ``W = sigma * sum [ (1 - psi(x_0)) (1 - prod (1 - V_i(x_i))) prod K_j ]``
    where the constant term sums kernels over all of the grid.
    """
    n, N = inst.n, inst.grid.size
    if n > 2:
        raise ValueError("brute_wn supports n <= 2")
    if N ** (n + 1) > BRUTE_MAX_ELEMENTS:
        raise ValueError(f"instance too large for brute force: {N}^{n + 1} cells")
    hd = inst.grid.cell_volume
    phi0 = inst.phi.flat / inst.sigma
    surv = [inst.survive(i).reshape(-1) for i in range(n + 1)]
    # integrand over index tuples, axis i = x_i
    prod_s = surv[0].reshape((N,) + (1,) * n)
    weight = np.ones((N,) + (1,) * n) * hd
    for j in range(1, n + 1):
        K = _kernel_matrix(inst.p[j - 1])  # K[x_j, x_{j-1}]
        shape = [1] * (n + 1)
        shape[j - 1], shape[j] = N, N
        weight = weight * K.T.reshape(shape)
        s_shape = [1] * (n + 1)
        s_shape[j] = N
        prod_s = prod_s * surv[j].reshape(s_shape)
    killed = 1.0 - prod_s
    integrand = phi0.reshape((N,) + (1,) * n) * killed * weight
    return float(inst.sigma * integrand.sum())


def _renormalized(p: GridField) -> GridField:
    return p.with_values(p.values / integrate(p))


def rearranged_instance(inst: DiscreteInstance, phi_override: GridField | None = None) -> DiscreteInstance:
    """All slots rearranged: ``phi -> phi_*``, ``V_i -> V_i*`` (factor-wise), ``p_j -> p_j*``."""
    phi_r = increasing_rearrange(inst.phi, inst.sigma) if phi_override is None else phi_override
    V_r = tuple(tuple(rearrange_fn(v) for v in vs) for vs in inst.V)
    p_r = tuple(_renormalized(rearrange_fn(p)) for p in inst.p)
    return DiscreteInstance(phi_r, V_r, p_r, inst.sigma)


def _deficit_scale(inst: DiscreteInstance) -> float:
    hd = inst.grid.cell_volume
    s = hd * float(np.sum(inst.sigma - inst.phi.values))
    s += inst.sigma * sum(integrate(v) for vs in inst.V for v in vs)
    return max(s, 1e-300)


def verify_ri(inst: DiscreteInstance, c: float = 10.0, phi_override: GridField | None = None,
              method: str = "auto") -> ComparisonReport:
    """Compare ``W_n`` of the raw instance with the fully rearranged one.

    ``phi_override`` replaces ``phi_*`` by any field dominating ``phi`` with the
    same total deficit.
    """
    if phi_override is not None and not dominates(phi_override, inst.phi, inst.sigma):
        raise ValueError("phi_override must dominate phi")
    lhs = wn_eval(inst, method)
    rhs = wn_eval(rearranged_instance(inst, phi_override), method)
    tol = c * inst.grid.spacing * _deficit_scale(inst)
    margin = lhs - rhs
    return ComparisonReport(lhs=lhs, rhs=rhs, margin=margin, tol=tol, holds=margin >= -tol,
                            extra={"n": inst.n, "h": inst.grid.spacing})


def bll_probability(phi_prob: GridField, A: list[GridField], p: list[GridField], method: str = "auto") -> float:
    """Probability of staying in ``A_i`` at every step i = 0..n."""
    if len(A) != len(p) + 1:
        raise ValueError("need n+1 sets for n densities")
    u = phi_prob.values * A[0].values
    for Ak, pk in zip(A[1:], p):
        u = Ak.values * convolve(pk, GridField(phi_prob.grid, u), method=method).values
    return float(phi_prob.grid.cell_volume * u.sum())


def verify_bll(phi_prob: GridField, A: list[GridField], p: list[GridField], c: float = 10.0,
               method: str = "auto") -> ComparisonReport:
    """Stay-inside probability, raw vs fully rearranged; margin = rearranged - raw."""
    if A[0].cell_count() == 0:
        raise ValueError("A_0 must be nonempty")
    for a in A:
        if not a.is_indicator():
            raise ValueError("A_i must be indicators")
    mass = integrate(phi_prob)
    if abs(mass - 1.0) > NORM_TOL:
        raise ValueError(f"phi_prob integrates to {mass!r}, not 1")
    raw = bll_probability(phi_prob, A, p, method)
    A_r = [rearrange_fn(a) for a in A]
    p_r = [_renormalized(rearrange_fn(q)) for q in p]
    rear = bll_probability(rearrange_fn(phi_prob), A_r, p_r, method)
    tol = c * phi_prob.grid.spacing
    margin = rear - raw
    return ComparisonReport(lhs=raw, rhs=rear, margin=margin, tol=tol, holds=margin >= -tol,
                            extra={"n": len(p)})


def random_instance_params(rng: np.random.Generator, n: int, d: int = 1, L: float = 8.0) -> dict:
    """Continuum description of a random instance, independent of the grid.

    Supports are kept well inside the box so nothing leaks across the boundary:
    ``psi`` and the traps live in ``[-L/4, L/4]^d`` and each density in
    ``[-L/10, L/10]^d``.
    """
    def boxes(k, reach, hi_lo, hi_hi):
        out = []
        for _ in range(k):
            c = rng.uniform(-reach, reach, d)
            w = rng.uniform(0.05, 0.5, d) * reach
            lo, hi = np.maximum(c - w, -reach), np.minimum(c + w, reach)
            out.append({"lo": lo.tolist(), "hi": hi.tolist(), "value": float(rng.uniform(hi_lo, hi_hi))})
        return out

    r_main, r_p = L / 4, L / 10
    return {
        "d": d,
        "L": L,
        "psi": boxes(int(rng.integers(1, 4)), r_main, 0.1, 1.0),
        "V": [boxes(int(rng.integers(0, 3)), r_main, 0.05, 1.0) for _ in range(n + 1)],
        "p": [boxes(int(rng.integers(1, 4)), r_p, 0.1, 1.0) for _ in range(n)],
    }


def _raster(grid, boxes, cap: float | None) -> np.ndarray:
    vals = np.zeros(grid.shape)
    for b in boxes:
        vals = vals + grid.box_indicator(b["lo"], b["hi"], b["value"]).values
    return np.minimum(vals, cap) if cap is not None else vals


def build_instance(params: dict, m: int) -> DiscreteInstance:
    """Rasterize :func:`random_instance_params` output on a grid with ``m`` points per axis."""
    from .grid import make_grid

    grid = make_grid(params["d"], params["L"], m)
    psi = _raster(grid, params["psi"], 1.0)
    V = [GridField(grid, _raster(grid, v, 1.0)) for v in params["V"]]
    p = []
    for boxes in params["p"]:
        vals = _raster(grid, boxes, None)
        if not vals.any():
            # density collapsed below the resolution: use the two central cells
            vals = grid.box_indicator([-grid.spacing] * grid.dim, [grid.spacing] * grid.dim).values
        f = GridField(grid, vals)
        p.append(_renormalized(f))
    return DiscreteInstance(GridField(grid, 1.0 - psi, 1.0), V, p, 1.0)

"""Lévy triples, their symmetric rearrangement, truncated simulation schemes and
characteristic functions.

A triple is ``(b, A, rho)`` plus an optional finite list of atoms ``(y_k, lam_k)``
for the singular part of the jump measure. The exponent follows the
Lévy-Khintchine convention with the compensator on ``|y| < 1``.

Jump densities come in three families:

``RadialPower``
    ``c (|y|^d + a)^{-(d+alpha)/d}`` on ``u_in < |y|^d < u_out``. ``alpha = -d``
    is a uniform ball, ``a = 0`` a truncated power law. Parameters are kept in
    ``u = r^d`` so rearranging (which shifts ``u``) is exact.
``GaussianMixture``
    weighted Gaussian densities (weights are total masses), optionally zeroed
    on the ball ``|y| <= r_cut``.
``GridDensity``
    a piecewise-constant :class:`GridField`; cells with center inside
    ``|y| <= r_cut`` are dropped.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import integrate, special, stats

from .grid import GridField, field_from_json, field_to_json, make_grid
from .rearrange import UNIT_BALL_VOLUME, rearrange_fn

__all__ = [
    "QuadratureWarning",
    "RadialPower",
    "GaussianMixture",
    "GridDensity",
    "LevyTriple",
    "brownian",
    "SimScheme",
    "uniform_ball",
    "power_law",
    "rearrange_triple",
    "truncate",
    "char_exponent",
    "char_fn",
    "triple_from_json",
    "triple_to_json",
]

SURFACE = {1: 2.0, 2: 2 * math.pi, 3: 4 * math.pi}
KIND_RADIAL, KIND_GAUSS, KIND_GRID, KIND_ATOM = 0, 1, 2, 3


class QuadratureWarning(RuntimeWarning):
    """A characteristic-exponent integral did not converge to tolerance."""


def _ball_rule(d: int, R: float, n: int = 96):
    """Quadrature nodes and weights on the centered ball of radius ``R``."""
    x, w = np.polynomial.legendre.leggauss(n)
    if d == 1:
        return (R * x)[:, None], R * w
    r = 0.5 * R * (x + 1)
    wr = 0.5 * R * w
    if d == 2:
        nt = n
        th = 2 * math.pi * np.arange(nt) / nt
        pts = np.stack([np.outer(r, np.cos(th)), np.outer(r, np.sin(th))], axis=-1).reshape(-1, 2)
        wts = np.outer(wr * r, np.full(nt, 2 * math.pi / nt)).reshape(-1)
        return pts, wts
    nm, nphi = 48, 48
    mu, wmu = np.polynomial.legendre.leggauss(nm)
    ph = 2 * math.pi * np.arange(nphi) / nphi
    s = np.sqrt(1 - mu**2)
    dirs = np.stack(
        [np.outer(s, np.cos(ph)), np.outer(s, np.sin(ph)), np.outer(mu, np.ones(nphi))], axis=-1
    ).reshape(-1, 3)
    dw = np.outer(wmu, np.full(nphi, 2 * math.pi / nphi)).reshape(-1)
    pts = (r[:, None, None] * dirs[None]).reshape(-1, 3)
    wts = np.outer(wr * r**2, dw).reshape(-1)
    return pts, wts


def _one_minus_kernel(d: int, z: float) -> float:
    """``1 - `` sphere average of ``cos(<xi, y>)`` at ``z = |xi| |y|``, cancellation-free."""
    if d == 1:
        return 2.0 * math.sin(0.5 * z) ** 2
    if z < 1e-3:
        z2 = z * z
        return z2 / 4 - z2 * z2 / 64 if d == 2 else z2 / 6 - z2 * z2 / 120
    if d == 2:
        return 1.0 - float(special.j0(z))
    return 1.0 - math.sin(z) / z


def _quad(fn, lo, hi):
    """scipy quad returning ``(value, converged)``."""
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        val, err = integrate.quad(fn, lo, hi, limit=400, epsabs=1e-13, epsrel=1e-11)
    ok = not any(issubclass(c.category, integrate.IntegrationWarning) for c in caught)
    return val, ok


def _quad_weighted(fn, lo, kind, w):
    """``int_lo^inf fn(r) cos(w r)`` (or ``sin``) by QAWF; returns ``(value, converged)``."""
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        val, err = integrate.quad(fn, lo, np.inf, weight=kind, wvar=w, limlst=200, epsabs=1e-13)
    ok = not any(issubclass(c.category, integrate.IntegrationWarning) for c in caught)
    return val, ok


# ---------------------------------------------------------------------------
# families


@dataclass(frozen=True)
class RadialPower:
    dim: int
    c: float
    alpha: float
    u_in: float = 0.0
    u_out: float = math.inf
    a: float = 0.0

    def __post_init__(self):
        d = self.dim
        if self.c < 0 or self.a < 0 or self.u_in < 0 or not self.u_out > self.u_in:
            raise ValueError("need c >= 0, a >= 0 and 0 <= u_in < u_out")
        if self.alpha < -d:
            raise ValueError("alpha must be >= -d (profile must decrease in |y|)")
        if math.isinf(self.u_out) and self.alpha <= 0 and self.c > 0:
            raise ValueError("unbounded support needs alpha > 0")
        if self.a == 0 and self.u_in == 0 and self.alpha >= 2 and self.c > 0:
            raise ValueError("alpha >= 2 with mass at the origin is not a Lévy density")

    def density(self, y):
        y = np.atleast_2d(y)
        u = np.sum(y**2, axis=1) ** (self.dim / 2)
        inside = (u > self.u_in) & (u < self.u_out)
        with np.errstate(divide="ignore"):
            v = self.c * (u + self.a) ** (-(self.dim + self.alpha) / self.dim)
        return np.where(inside, v, 0.0)

    def _G(self, lo: float, hi: float) -> float:
        """``int_lo^hi (s + a)^(-1 - alpha/d) ds``."""
        d, al, a = self.dim, self.alpha, self.a
        if hi <= lo:
            return 0.0
        if lo + a == 0 and al >= 0:
            return math.inf
        if al == 0:
            return math.log((hi + a) / (lo + a))
        beta = -al / d
        top = 0.0 if math.isinf(hi) else (hi + a) ** beta
        return (top - (lo + a) ** beta) / beta

    def mass(self) -> float:
        if self.c == 0:
            return 0.0
        return self.c * UNIT_BALL_VOLUME[self.dim] * self._G(self.u_in, self.u_out)

    def inner_first_moment(self) -> np.ndarray:
        return np.zeros(self.dim)

    def truncated(self, r: float) -> "RadialPower":
        u = r**self.dim
        if u <= self.u_in:
            return self
        if u >= self.u_out:
            return RadialPower(self.dim, 0.0, self.alpha, 0.0, 1.0, self.a)
        return RadialPower(self.dim, self.c, self.alpha, u, self.u_out, self.a)

    def rearranged(self):
        # level sets are annuli; rearranging slides the profile inward in u = r^d
        if self.u_in == 0:
            return self
        return RadialPower(self.dim, self.c, self.alpha, 0.0, self.u_out - self.u_in, self.a + self.u_in)

    def psi(self, xi: np.ndarray):
        """``int (1 - e^{i xi.y} + i xi.y 1{|y|<1}) rho(y) dy`` (real: rho is radial)."""
        d = self.dim
        k = float(np.linalg.norm(xi))
        if k == 0 or self.c == 0:
            return 0.0, True
        r_lo = self.u_in ** (1 / d)
        r_hi = self.u_out ** (1 / d) if math.isfinite(self.u_out) else math.inf
        ex = -(d + self.alpha) / d

        def f(r):
            return _one_minus_kernel(d, k * r) * (r**d + self.a) ** ex * r ** (d - 1)

        # split near the oscillation scale so quad resolves the small-r singularity
        mid = min(max(r_lo, 1.0 / k), r_hi)
        total, ok = 0.0, True
        if mid > r_lo:
            total, ok = _quad(f, r_lo, mid)
        if math.isfinite(r_hi):
            if r_hi > mid:
                v, o = _quad(f, mid, r_hi)
                total, ok = total + v, ok and o
        else:
            v, o = self._tail(k, mid)
            total, ok = total + v, ok and o
        return self.c * SURFACE[d] * total, ok

    def _tail(self, k: float, R: float):
        """``int_R^inf (1 - K(k r)) g(r) dr`` with Fourier-weighted quadrature (``g`` the radial profile)."""
        d, a = self.dim, self.a
        ex = -(d + self.alpha) / d

        def g(r):
            return (r**d + a) ** ex * r ** (d - 1)

        def plain(lo):
            return self._G(lo**d, math.inf) / d

        def one_minus_cos(w):
            """``int_R^inf g(r) (1 - cos(w r)) dr``; the head below ``1/w`` is done in log r."""
            if w == 0:
                return 0.0, True
            R1 = max(R, 1.0 / w)
            head, ok1 = 0.0, True
            if R1 > R:
                head, ok1 = _quad(lambda s: 2 * math.sin(0.5 * w * math.exp(s)) ** 2 * g(math.exp(s)) * math.exp(s),
                                  math.log(R), math.log(R1))
            v, ok2 = _quad_weighted(g, R1, "cos", w)
            return head + plain(R1) - v, ok1 and ok2

        if d == 1:
            return one_minus_cos(k)
        if d == 3:
            v, ok = _quad_weighted(lambda r: g(r) / (k * r), R, "sin", k)
            return plain(R) - v, ok
        # d = 2: J0(z) = (2/pi) int_0^{pi/2} cos(z cos t) dt
        flags = []

        def inner(t):
            v, o = one_minus_cos(k * math.cos(t))
            flags.append(o)
            return v

        v, o = _quad(inner, 0.0, math.pi / 2)
        return 2 * v / math.pi, o and all(flags)

    def sampler_rows(self):
        G = self._G(self.u_in, self.u_out)
        return [(KIND_RADIAL, self.mass(), (self.alpha, self.u_in, self.u_out, self.a, G, 0.0),
                 np.zeros(self.dim), np.zeros((self.dim, self.dim)))]

    def to_json(self) -> dict:
        return {"family": "radial-power", "c": self.c, "alpha": self.alpha, "u_in": self.u_in,
                "u_out": "inf" if math.isinf(self.u_out) else self.u_out, "a": self.a}


def power_law(d: int, c: float, alpha: float, r_in: float = 0.0, r_out: float = math.inf) -> RadialPower:
    """``c |y|^{-d-alpha}`` on ``r_in < |y| < r_out``."""
    return RadialPower(d, c, alpha, r_in**d, r_out**d if math.isfinite(r_out) else math.inf, 0.0)


def uniform_ball(d: int, rate: float, radius: float) -> RadialPower:
    """Jump density of total mass ``rate``, uniform on the ball of given radius."""
    vol = UNIT_BALL_VOLUME[d] * radius**d
    return RadialPower(d, rate / vol, -float(d), 0.0, radius**d, 0.0)


@dataclass(frozen=True)
class GaussianMixture:
    """``sum_k w_k N(mean_k, cov_k)`` restricted to ``|y| > r_cut``."""

    dim: int
    weights: tuple
    means: tuple
    covs: tuple
    r_cut: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        object.__setattr__(self, "means", tuple(tuple(float(v) for v in np.ravel(m)) for m in self.means))
        covs = []
        for c in self.covs:
            c = np.atleast_2d(np.asarray(c, dtype=float))
            if c.shape != (self.dim, self.dim) or not np.allclose(c, c.T):
                raise ValueError("covariances must be symmetric d x d")
            if np.linalg.eigvalsh(c).min() <= 0:
                raise ValueError("jump covariances must be positive definite")
            covs.append(tuple(map(tuple, c)))
        object.__setattr__(self, "covs", tuple(covs))
        if any(w < 0 for w in self.weights):
            raise ValueError("weights must be nonnegative")
        if not (len(self.weights) == len(self.means) == len(self.covs)):
            raise ValueError("weights, means and covs must have equal length")

    def _cov(self, k):
        return np.array(self.covs[k])

    def density(self, y):
        y = np.atleast_2d(y)
        out = np.zeros(len(y))
        for k, w in enumerate(self.weights):
            out += w * stats.multivariate_normal(self.means[k], self._cov(k)).pdf(y).reshape(-1)
        return np.where(np.sum(y**2, axis=1) > self.r_cut**2, out, 0.0)

    def _full_density(self, y):
        out = np.zeros(len(y))
        for k, w in enumerate(self.weights):
            out += w * stats.multivariate_normal(self.means[k], self._cov(k)).pdf(y).reshape(-1)
        return out

    def _ball_mass_moment(self, R: float):
        """Mass and first moment of the untruncated mixture on ``|y| < R``."""
        if R <= 0:
            return 0.0, np.zeros(self.dim)
        if self.dim == 1:
            mass, mom = 0.0, 0.0
            for w, m, c in zip(self.weights, self.means, self.covs):
                mu, s = m[0], math.sqrt(c[0][0])
                zl, zu = (-R - mu) / s, (R - mu) / s
                p = stats.norm.cdf(zu) - stats.norm.cdf(zl)
                mass += w * p
                mom += w * (mu * p - s * (stats.norm.pdf(zu) - stats.norm.pdf(zl)))
            return mass, np.array([mom])
        pts, wts = _ball_rule(self.dim, R)
        dens = self._full_density(pts) * wts
        return float(dens.sum()), dens @ pts

    def mass(self) -> float:
        return sum(self.weights) - self._ball_mass_moment(self.r_cut)[0]

    def inner_first_moment(self) -> np.ndarray:
        if self.r_cut >= 1:
            return np.zeros(self.dim)
        return self._ball_mass_moment(1.0)[1] - self._ball_mass_moment(self.r_cut)[1]

    def truncated(self, r: float) -> "GaussianMixture":
        if r <= self.r_cut:
            return self
        return GaussianMixture(self.dim, self.weights, self.means, self.covs, r)

    def rearranged(self, grid_m: int | None = None):
        if len(self.weights) == 1 and self.r_cut == 0:
            c = self._cov(0)
            d = self.dim
            if np.all(np.array(self.means[0]) == 0) and np.array_equal(c, c[0, 0] * np.eye(d)):
                return self
            s = max(np.linalg.det(c), 0.0) ** (1.0 / d)
            return GaussianMixture(d, self.weights, ((0.0,) * d,), (s * np.eye(d),))
        return self.to_grid(grid_m).rearranged()

    def to_grid(self, m: int | None = None) -> "GridDensity":
        d = self.dim
        m = m or {1: 1024, 2: 128, 3: 48}[d]
        L = max(float(np.linalg.norm(mu)) + 7 * math.sqrt(np.linalg.eigvalsh(self._cov(k)).max())
                for k, mu in enumerate(self.means))
        g = make_grid(d, L, m)
        vals = self.density(g.centers()).reshape(g.shape)
        return GridDensity(GridField(g, vals), self.r_cut)

    def psi(self, xi: np.ndarray):
        xi = np.asarray(xi, dtype=float)
        val = 0.0 + 0.0j
        for k, w in enumerate(self.weights):
            mu = np.array(self.means[k])
            val += w * (1 - np.exp(1j * xi @ mu - 0.5 * xi @ self._cov(k) @ xi))
        if self.r_cut > 0:
            pts, wts = _ball_rule(self.dim, self.r_cut)
            dens = self._full_density(pts) * wts
            val -= np.sum((1 - np.exp(1j * pts @ xi)) * dens)
        val += 1j * xi @ self.inner_first_moment()
        return complex(val), True

    def sampler_rows(self):
        rows = []
        for k, w in enumerate(self.weights):
            single = GaussianMixture(self.dim, (w,), (self.means[k],), (self.covs[k],), self.r_cut)
            rows.append((KIND_GAUSS, single.mass(), (self.r_cut, 0, 0, 0, 0, 0),
                         np.array(self.means[k]), np.linalg.cholesky(self._cov(k))))
        return rows

    def to_json(self) -> dict:
        return {
            "family": "gaussian-mixture",
            "components": [
                {"weight": w, "mean": list(m), "cov": [list(r) for r in c]}
                for w, m, c in zip(self.weights, self.means, self.covs)
            ],
            "r_cut": self.r_cut,
        }


@dataclass(frozen=True, eq=False)
class GridDensity:
    """Piecewise-constant jump density on grid cells with ``|center| > r_cut``."""

    field: GridField
    r_cut: float = 0.0

    def __post_init__(self):
        if self.field.background != 0 or self.field.has_hard_part:
            raise ValueError("grid jump density needs zero background and finite values")

    def __eq__(self, other):
        return isinstance(other, GridDensity) and self.field == other.field and self.r_cut == other.r_cut

    __hash__ = None

    @property
    def dim(self) -> int:
        return self.field.grid.dim

    @cached_property
    def _cells(self):
        g = self.field.grid
        c = g.centers()
        w = self.field.flat * g.cell_volume
        keep = (np.sum(c**2, axis=1) > self.r_cut**2) & (w > 0)
        return c[keep], w[keep]

    def density(self, y):
        g = self.field.grid
        y = np.atleast_2d(y)
        idx = np.floor((y + g.half_extent) / g.spacing).astype(int)
        ok = np.all((idx >= 0) & (idx < g.points_per_axis), axis=1)
        idx = np.clip(idx, 0, g.points_per_axis - 1)
        v = self.field.values[tuple(idx.T)]
        c = g.centers()[np.ravel_multi_index(tuple(idx.T), g.shape)]
        return np.where(ok & (np.sum(c**2, axis=1) > self.r_cut**2), v, 0.0)

    def mass(self) -> float:
        return float(self._cells[1].sum())

    def inner_first_moment(self) -> np.ndarray:
        c, w = self._cells
        inner = np.sum(c**2, axis=1) < 1.0
        return w[inner] @ c[inner]

    def truncated(self, r: float) -> "GridDensity":
        return self if r <= self.r_cut else GridDensity(self.field, r)

    def rearranged(self) -> "GridDensity":
        g = self.field.grid
        if self.r_cut > 0:
            keep = np.sum(g.centers() ** 2, axis=1) > self.r_cut**2
            base = GridField(g, (self.field.flat * keep).reshape(g.shape))
        else:
            base = self.field
        return GridDensity(rearrange_fn(base), 0.0)

    def psi(self, xi: np.ndarray):
        xi = np.asarray(xi, dtype=float)
        c, w = self._cells
        h = self.field.grid.spacing
        # uniform position inside each cell
        box = np.prod(np.sinc(xi * h / (2 * math.pi)))
        inner = np.sum(c**2, axis=1) < 1.0
        val = np.sum(w * (1 - np.exp(1j * c @ xi) * box)) + 1j * np.sum(w[inner] * (c[inner] @ xi))
        return complex(val), True

    def sampler_rows(self):
        return [(KIND_GRID, self.mass(), (self.field.grid.spacing, 0, 0, 0, 0, 0),
                 np.zeros(self.dim), np.zeros((self.dim, self.dim)))]

    def grid_table(self):
        c, w = self._cells
        cum = np.cumsum(w)
        return c, cum / cum[-1] if len(cum) else cum

    def to_json(self) -> dict:
        return {"family": "grid", "field": field_to_json(self.field), "r_cut": self.r_cut}


# ---------------------------------------------------------------------------
# triples and schemes


def _as_vec(b, d=None):
    v = np.atleast_1d(np.asarray(b, dtype=float))
    if d is not None and v.shape != (d,):
        raise ValueError(f"expected a vector of length {d}")
    return v


@dataclass(frozen=True, eq=False)
class LevyTriple:
    """Drift ``b``, Gaussian covariance ``A``, jump density ``rho`` and atoms."""

    b: np.ndarray
    A: np.ndarray
    rho: object = None
    atoms: tuple = ()
    transient: bool = False

    def __post_init__(self):
        b = _as_vec(self.b)
        d = b.size
        if d not in (1, 2, 3):
            raise ValueError("dimension must be 1, 2 or 3")
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        if A.shape != (d, d):
            raise ValueError(f"A must be {d} x {d}")
        if not np.allclose(A, A.T, atol=1e-14):
            raise ValueError("A must be symmetric")
        if d and np.linalg.eigvalsh(A).min() < -1e-12 * max(1.0, np.abs(A).max()):
            raise ValueError("A must be positive semidefinite")
        if self.rho is not None and self.rho.dim != d:
            raise ValueError("jump density dimension differs from drift dimension")
        atoms = []
        for y, lam in self.atoms:
            y = _as_vec(y, d)
            if lam < 0:
                raise ValueError("atom rates must be >= 0")
            if not np.any(y):
                raise ValueError("atoms at the origin are not allowed")
            atoms.append((tuple(y.tolist()), float(lam)))
        b.setflags(write=False)
        A.setflags(write=False)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "atoms", tuple(atoms))

    @property
    def dim(self) -> int:
        return self.b.size

    def __eq__(self, other):
        if not isinstance(other, LevyTriple):
            return NotImplemented
        return (np.array_equal(self.b, other.b) and np.array_equal(self.A, other.A)
                and self.rho == other.rho and self.atoms == other.atoms)

    __hash__ = None


def brownian(d: int, drift=None, scale: float = 1.0, transient: bool | None = None) -> LevyTriple:
    """Brownian motion with covariance ``scale * I`` and optional drift; transient by default for d = 3."""
    b = np.zeros(d) if drift is None else drift
    return LevyTriple(b, scale * np.eye(d), transient=d == 3 if transient is None else transient)


def rearrange_triple(T: LevyTriple) -> LevyTriple:
    """``(0, Det(A)^{1/d} I, rho*)``; atoms are dropped."""
    d = T.dim
    A = T.A
    if np.array_equal(A, A[0, 0] * np.eye(d)):
        A_star = A.copy()
    else:
        A_star = max(float(np.linalg.det(A)), 0.0) ** (1.0 / d) * np.eye(d)
    rho = None if T.rho is None else T.rho.rearranged()
    return LevyTriple(np.zeros(d), A_star, rho, (), T.transient)


@dataclass(frozen=True, eq=False)
class SimScheme:
    """Truncation-``n`` approximation: Gaussian part plus compound Poisson jumps."""

    base: LevyTriple
    n: int
    eps_n: float
    rho_n: object
    c_n: float
    A_n: np.ndarray
    b_n: np.ndarray

    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def atoms(self):
        return self.base.atoms

    @property
    def total_rate(self) -> float:
        return self.c_n + sum(lam for _, lam in self.atoms)

    def rhobar_n(self, y):
        """Normalized jump law of the density part."""
        if self.rho_n is None or self.c_n == 0:
            return np.zeros(len(np.atleast_2d(y)))
        return self.rho_n.density(y) / self.c_n

    @cached_property
    def sqrt_A(self) -> np.ndarray:
        w, v = np.linalg.eigh(self.A_n)
        return (v * np.sqrt(np.clip(w, 0, None))) @ v.T

    def as_triple(self) -> LevyTriple:
        """The simulated process written as an exact triple."""
        return LevyTriple(self.base.b, self.A_n, self.rho_n, self.base.atoms, self.base.transient)

    def jump_rows(self):
        rows = [] if self.rho_n is None or self.c_n == 0 else list(self.rho_n.sampler_rows())
        for y, lam in self.atoms:
            if lam > 0:
                rows.append((KIND_ATOM, lam, (0, 0, 0, 0, 0, 0), np.array(y), np.zeros((self.dim, self.dim))))
        return rows

    def provenance(self) -> dict:
        return {"n": self.n, "eps_n": self.eps_n, "c_n": self.c_n, "b_n": self.b_n.tolist(),
                "A_n": self.A_n.tolist(), "base": triple_to_json(self.base)}


def truncate(T: LevyTriple, n: int, eps_n: float | None = None, allow_degenerate: bool = False) -> SimScheme:
    """Drop jumps with ``|y| <= 1/n`` and pad the covariance by ``eps_n I``.

    ``eps_n`` defaults to ``1/n**2``. ``eps_n = 0`` is allowed when ``A`` is
    already positive definite, or with ``allow_degenerate`` (e.g. the zero
    process).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    eps = 1.0 / n**2 if eps_n is None else float(eps_n)
    if eps < 0:
        raise ValueError("eps_n must be >= 0")
    d = T.dim
    A_n = T.A + eps * np.eye(d)
    if np.linalg.eigvalsh(A_n).min() <= 0 and not allow_degenerate:
        raise ValueError("A_n is not positive definite; pass eps_n > 0 or allow_degenerate=True")
    r = 1.0 / n
    rho_n = None if T.rho is None else T.rho.truncated(r)
    c_n = 0.0 if rho_n is None else float(rho_n.mass())
    if not math.isfinite(c_n):
        raise ValueError("truncated jump rate is infinite; malformed jump density")
    b_n = T.b.copy()
    if rho_n is not None:
        b_n = b_n - rho_n.inner_first_moment()
    for y, lam in T.atoms:
        y = np.asarray(y)
        if np.linalg.norm(y) < 1:
            b_n = b_n - lam * y
    A_n.setflags(write=False)
    b_n.setflags(write=False)
    return SimScheme(T, int(n), eps, rho_n, c_n, A_n, b_n)


def char_exponent(T: LevyTriple, xi) -> tuple[complex, bool]:
    """``Psi(xi)`` and a flag that is False when a quadrature failed to converge."""
    xi = _as_vec(xi, T.dim)
    psi = -1j * (T.b @ xi) + 0.5 * xi @ T.A @ xi
    ok = True
    if T.rho is not None:
        v, ok = T.rho.psi(xi)
        psi = psi + v
    for y, lam in T.atoms:
        y = np.asarray(y)
        comp = 1j * (xi @ y) if np.linalg.norm(y) < 1 else 0.0
        psi = psi + lam * (1 - np.exp(1j * (xi @ y)) + comp)
    return complex(psi), ok


def char_fn(T: LevyTriple, xi, t: float) -> complex:
    """``E exp(i <xi, X_t>) = exp(-t Psi(xi))``."""
    psi, ok = char_exponent(T, xi)
    if not ok:
        warnings.warn("characteristic exponent quadrature did not converge", QuadratureWarning, stacklevel=2)
    return complex(np.exp(-t * psi))


# ---------------------------------------------------------------------------
# JSON


def _rho_from_json(rec, d):
    if rec is None:
        return None
    fam = rec.get("family", "none")
    if fam == "none":
        return None
    if fam == "power":
        r_out = rec.get("r_out", "inf")
        r_out = math.inf if r_out == "inf" else float(r_out)
        return RadialPower(d, float(rec["c"]), float(rec["alpha"]), float(rec.get("r_in", 0.0)) ** d,
                           r_out**d if math.isfinite(r_out) else math.inf, float(rec.get("a", 0.0)))
    if fam == "radial-power":
        u_out = rec.get("u_out", "inf")
        return RadialPower(d, float(rec["c"]), float(rec["alpha"]), float(rec.get("u_in", 0.0)),
                           math.inf if u_out == "inf" else float(u_out), float(rec.get("a", 0.0)))
    if fam == "uniform-ball":
        return uniform_ball(d, float(rec["rate"]), float(rec["radius"]))
    if fam == "gaussian-mixture":
        comps = rec["components"]
        return GaussianMixture(d, [c["weight"] for c in comps], [c["mean"] for c in comps],
                               [c["cov"] for c in comps], float(rec.get("r_cut", 0.0)))
    if fam == "grid":
        return GridDensity(field_from_json(rec["field"]), float(rec.get("r_cut", 0.0)))
    raise ValueError(f"unknown jump family {fam!r}")


def triple_from_json(rec: dict) -> LevyTriple:
    b = _as_vec(rec["b"])
    d = b.size
    A = np.asarray(rec.get("A", np.zeros((d, d))), dtype=float).reshape(d, d)
    atoms = [(a["y"], float(a["rate"])) for a in rec.get("atoms", [])]
    return LevyTriple(b, A, _rho_from_json(rec.get("rho"), d), atoms, bool(rec.get("transient", False)))


def triple_to_json(T: LevyTriple) -> dict:
    return {
        "b": T.b.tolist(),
        "A": T.A.tolist(),
        "rho": {"family": "none"} if T.rho is None else T.rho.to_json(),
        "atoms": [{"y": list(y), "rate": lam} for y, lam in T.atoms],
        "transient": T.transient,
    }

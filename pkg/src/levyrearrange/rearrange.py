"""Symmetric decreasing / increasing rearrangement on grids and the domination order.

All rearrangements use one cell order: by squared distance of the cell center
from the origin, ties broken by lexicographic cell index. The discrete
"centered ball" of volume ``k * h^d`` is the first ``k`` cells in that order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .grid import Grid, GridField, GridMismatchError

__all__ = [
    "UNIT_BALL_VOLUME",
    "DominationReport",
    "ball_radius",
    "distance_order",
    "rearrange_fn",
    "rearrange_set",
    "increasing_rearrange",
    "dominates",
]

UNIT_BALL_VOLUME = {1: 2.0, 2: math.pi, 3: 4.0 * math.pi / 3.0}


def ball_radius(v: float, d: int) -> float:
    """Radius of the centered ball of volume ``v`` in dimension ``d``."""
    if v < 0:
        raise ValueError("volume must be nonnegative")
    return (v / UNIT_BALL_VOLUME[d]) ** (1.0 / d)


@lru_cache(maxsize=64)
def _order(grid: Grid) -> np.ndarray:
    r2 = np.sum(grid.odd_coords.astype(np.int64) ** 2, axis=1)
    order = np.argsort(r2, kind="stable")
    order.setflags(write=False)
    return order


def distance_order(grid: Grid) -> np.ndarray:
    """Flat cell indices sorted nearest-to-origin first (lexicographic tie-break)."""
    return _order(grid)


def rearrange_fn(f: GridField) -> GridField:
    """Discrete layer-cake rearrangement ``f*``: a permutation of the values of ``f``.

    The largest value goes to the cell nearest the origin, and so on outward.
    Infinite values are allowed and are placed first.
    """
    if f.background > 0:
        raise ValueError("rearrange_fn needs zero background; use increasing_rearrange")
    order = distance_order(f.grid)
    # stable descending sort so equal values keep a reproducible placement
    vals = f.flat
    ranked = vals[np.argsort(-vals, kind="stable")]
    out = np.empty_like(vals)
    out[order] = ranked
    return GridField(f.grid, out.reshape(f.grid.shape))


def rearrange_set(a: GridField) -> GridField:
    """The centered discrete ball with as many cells as the indicator ``a``."""
    if not a.is_indicator():
        raise ValueError("rearrange_set expects a 0/1 indicator field with zero background")
    out = np.zeros(a.grid.size)
    out[distance_order(a.grid)[: a.cell_count()]] = 1.0
    return GridField(a.grid, out.reshape(a.grid.shape))


def increasing_rearrange(phi: GridField, sigma: float) -> GridField:
    """``sigma - (sigma - phi)*`` for a field with background ``sigma``."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if phi.background != sigma:
        raise ValueError(f"background {phi.background} must equal sigma={sigma}")
    if (phi.values > sigma).any():
        raise ValueError("values above sigma; clip with min(phi, sigma) first")
    deficit = GridField(phi.grid, sigma - phi.values)
    return GridField(phi.grid, sigma - rearrange_fn(deficit).values, sigma)


@dataclass(frozen=True)
class DominationReport:
    holds: bool
    worst_volume: float
    worst_margin: float
    tolerance: float
    margins: np.ndarray

    def __bool__(self):
        return self.holds


def _suffix_sums(x: np.ndarray) -> np.ndarray:
    """``s[k] = sum(x[k:])`` for k = 0..len(x), with s[len(x)] = 0 exactly."""
    s = np.zeros(len(x) + 1)
    s[:-1] = np.cumsum(x[::-1])[::-1]
    return s


def domination_margins(varphi: GridField, phi: GridField, sigma: float) -> np.ndarray:
    """``RHS_k - LHS_k`` for k = 0..N cells, see :func:`dominates`."""
    if varphi.grid != phi.grid:
        raise GridMismatchError("varphi and phi live on different grids")
    if varphi.background != sigma or phi.background != sigma:
        raise ValueError("both fields must have background sigma")
    hd = phi.grid.cell_volume
    dv = hd * (sigma - varphi.flat)
    dp = hd * (sigma - phi.flat)
    if not (np.isfinite(dv).all() and np.isfinite(dp).all()):
        raise ValueError("deficits must be finite")
    # deficit of varphi outside the k nearest cells
    lhs = _suffix_sums(dv[distance_order(phi.grid)])
    # smallest deficit of phi outside any k cells: drop the k largest
    rhs = _suffix_sums(np.sort(dp)[::-1])
    return rhs - lhs


def dominates(varphi: GridField, phi: GridField, sigma: float = 1.0,
              tol: float | None = None) -> DominationReport:
    """Exact check of ``varphi ≻ phi`` on the grid (bathtub principle).

    For every k, the deficit of ``varphi`` outside the k cells nearest the
    origin must not exceed the minimal deficit of ``phi`` outside any k cells.
    The default tolerance is ``1e-12`` times the larger total deficit.
    """
    margins = domination_margins(varphi, phi, sigma)
    if tol is None:
        hd = phi.grid.cell_volume
        scale = max(hd * np.sum(sigma - varphi.flat), hd * np.sum(sigma - phi.flat), 1e-300)
        tol = 1e-12 * scale
    k = int(np.argmin(margins))
    worst = float(margins[k])
    return DominationReport(
        holds=bool(worst >= -tol),
        worst_volume=k * phi.grid.cell_volume,
        worst_margin=worst,
        tolerance=float(tol),
        margins=margins,
    )

"""Uniform centered grids and nonnegative fields sampled on them.

A field is a set of cell-center samples on ``[-L, L]^d`` plus a constant
``background`` attributed to everything outside the box. Fields with a
positive background are only integrable in "deficit" form, see
:func:`integrate_deficit`.

Convolution treats both operands as piecewise constant on cells. The
difference of two cell centers is an integer multiple of ``h`` and hence
never a cell center, so the kernel value at a lattice offset is the mean of
the ``2**d`` cells touching that offset. This is the exact convolution of the
piecewise-constant interpolants, evaluated at cell centers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from itertools import product
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

__all__ = [
    "Grid",
    "GridField",
    "GridMismatchError",
    "make_grid",
    "integrate",
    "integrate_deficit",
    "convolve",
    "combine",
    "field_to_json",
    "field_from_json",
    "save_field",
    "load_field",
]


class GridMismatchError(ValueError):
    """Two fields live on different grids."""


@dataclass(frozen=True)
class Grid:
    dim: int
    half_extent: float
    points_per_axis: int

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise ValueError(f"dim must be 1, 2 or 3, got {self.dim}")
        if not self.half_extent > 0:
            raise ValueError(f"half_extent must be positive, got {self.half_extent}")
        m = self.points_per_axis
        if m < 2 or m % 2:
            raise ValueError(f"points_per_axis must be even and >= 2, got {m}")

    @property
    def spacing(self) -> float:
        return 2.0 * self.half_extent / self.points_per_axis

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.dim

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.points_per_axis,) * self.dim

    @property
    def size(self) -> int:
        return self.points_per_axis**self.dim

    @cached_property
    def axis(self) -> np.ndarray:
        """Cell centers along one axis."""
        m, h = self.points_per_axis, self.spacing
        return -self.half_extent + (np.arange(m) + 0.5) * h

    @cached_property
    def odd_coords(self) -> np.ndarray:
        """Integer coordinates ``2k - m + 1`` of the cell centers, shape ``(size, dim)``.

        Center = odd_coord * h / 2, so squared distances compare exactly.
        """
        m = self.points_per_axis
        idx = np.indices(self.shape).reshape(self.dim, -1).T
        return 2 * idx - m + 1

    def centers(self) -> np.ndarray:
        """All cell centers in lexicographic (row-major) order, shape ``(size, dim)``."""
        return self.odd_coords * (self.spacing / 2.0)

    def mesh(self) -> tuple[np.ndarray, ...]:
        return np.meshgrid(*([self.axis] * self.dim), indexing="ij")

    def sample(self, fn, background: float = 0.0) -> "GridField":
        """Evaluate ``fn(*coords)`` at the cell centers."""
        vals = np.broadcast_to(np.asarray(fn(*self.mesh()), dtype=float), self.shape)
        return GridField(self, np.array(vals), background)

    def zeros(self) -> "GridField":
        return GridField(self, np.zeros(self.shape))

    def constant(self, value: float, background: float | None = None) -> "GridField":
        bg = value if background is None else background
        return GridField(self, np.full(self.shape, float(value)), bg)

    def box_indicator(self, lo, hi, value: float = 1.0) -> "GridField":
        """``value`` on cells whose center lies in the box ``[lo, hi)``."""
        lo = np.broadcast_to(np.asarray(lo, dtype=float), (self.dim,))
        hi = np.broadcast_to(np.asarray(hi, dtype=float), (self.dim,))
        c = self.centers()
        inside = np.all((c >= lo) & (c < hi), axis=1)
        return GridField(self, np.where(inside, float(value), 0.0).reshape(self.shape))

    def ball_indicator(self, center, radius: float, value: float = 1.0) -> "GridField":
        center = np.broadcast_to(np.asarray(center, dtype=float), (self.dim,))
        r2 = np.sum((self.centers() - center) ** 2, axis=1)
        return GridField(self, np.where(r2 < radius**2, float(value), 0.0).reshape(self.shape))


def make_grid(d: int, L: float, m: int) -> Grid:
    return Grid(int(d), float(L), int(m))


@dataclass(frozen=True, eq=False)
class GridField:
    """Nonnegative samples on a :class:`Grid` with a constant outside value.

    ``values`` may contain ``inf`` (a hard part); such cells are flagged, and
    only operations that explicitly define the semantics accept them.
    """

    grid: Grid
    values: np.ndarray
    background: float = 0.0

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != self.grid.shape:
            vals = vals.reshape(self.grid.shape)
        if np.isnan(vals).any():
            raise ValueError("field values must not be NaN")
        if (vals < 0).any():
            raise ValueError("field values must be nonnegative")
        if not (math.isfinite(self.background) and self.background >= 0):
            raise ValueError(f"background must be finite and >= 0, got {self.background}")
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "background", float(self.background))

    @property
    def has_hard_part(self) -> bool:
        return bool(np.isinf(self.values).any())

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)

    def with_values(self, values, background: float | None = None) -> "GridField":
        bg = self.background if background is None else background
        return GridField(self.grid, values, bg)

    def is_indicator(self) -> bool:
        return bool(np.isin(self.values, (0.0, 1.0)).all()) and self.background == 0.0

    def cell_count(self) -> int:
        return int(np.count_nonzero(self.values))

    def __eq__(self, other):
        if not isinstance(other, GridField):
            return NotImplemented
        return (
            self.grid == other.grid
            and self.background == other.background
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


def _same_grid(*fields: GridField) -> Grid:
    g = fields[0].grid
    for f in fields[1:]:
        if f.grid != g:
            raise GridMismatchError(f"grid mismatch: {g} vs {f.grid}")
    return g


def integrate(f: GridField) -> float:
    """Midpoint-rule integral of a field with zero background."""
    if f.background > 0:
        raise ValueError(
            "field has positive background; its integral is infinite (use integrate_deficit)"
        )
    if f.has_hard_part:
        return math.inf
    return float(f.grid.cell_volume * f.values.sum())


def integrate_deficit(f: GridField, sigma: float) -> float:
    """``∫ (sigma - f)`` for a field whose background equals ``sigma``."""
    if f.background != sigma:
        raise ValueError(f"background {f.background} does not equal sigma={sigma}")
    if (f.values > sigma).any():
        raise ValueError("field exceeds sigma somewhere; deficit would be negative")
    return float(f.grid.cell_volume * (sigma - f.values).sum())


def _full_direct(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # canonical operand order makes the summation order symmetric under swap
    if a.tobytes() > b.tobytes():
        a, b = b, a
    m = a.shape[0]
    d = a.ndim
    out = np.zeros((2 * m - 1,) * d)
    for idx in zip(*np.nonzero(a)):
        sl = tuple(slice(i, i + m) for i in idx)
        out[sl] += a[idx] * b
    return out


def _full_fft(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if not a.any() or not b.any():
        return np.zeros((2 * a.shape[0] - 1,) * a.ndim)
    return fftconvolve(a, b, mode="full")


def _crop_average(full: np.ndarray, m: int) -> np.ndarray:
    d = full.ndim
    acc = np.zeros((m,) * d)
    for corner in product((m // 2 - 1, m // 2), repeat=d):
        acc += full[tuple(slice(c, c + m) for c in corner)]
    return acc / 2**d


def convolve(f: GridField, g: GridField, method: str = "auto") -> GridField:
    """Zero-padded convolution ``f * g`` on the common grid.

    Parameters
    ----------
    method : {"auto", "direct", "fft"}
        ``direct`` is the O(N^2) summation, ``fft`` the transform path. ``auto``
        picks ``fft`` above a few thousand cells.
    """
    grid = _same_grid(f, g)
    if f.background or g.background:
        raise ValueError("convolve requires zero background on both operands")
    if f.has_hard_part or g.has_hard_part:
        raise ValueError("convolve does not accept infinite values")
    if method == "auto":
        method = "fft" if grid.size > 2048 else "direct"
    if method == "direct":
        full = _full_direct(f.values, g.values)
    elif method == "fft":
        full = _full_fft(f.values, g.values)
    else:
        raise ValueError(f"unknown convolution method {method!r}")
    out = _crop_average(full, grid.points_per_axis) * grid.cell_volume
    if method == "fft":
        # transform round-off can leave tiny negatives
        np.maximum(out, 0.0, out=out)
    return GridField(grid, out)


def combine(f: GridField, g: GridField | None = None, op: str = "product", *, sigma: float | None = None,
            factor: float | None = None) -> GridField:
    """Pointwise operation; the background follows the same rule.

    ``op`` is one of ``product``, ``min`` (binary), ``complement`` (``sigma - f``)
    and ``scale`` (``factor * f``).
    """
    if op in ("product", "min"):
        if g is None:
            raise ValueError(f"{op} needs two fields")
        grid = _same_grid(f, g)
        if op == "min":
            return GridField(grid, np.minimum(f.values, g.values), min(f.background, g.background))
        if f.has_hard_part or g.has_hard_part:
            raise ValueError("product of infinite values is not defined here")
        return GridField(grid, f.values * g.values, f.background * g.background)
    if f.has_hard_part:
        raise ValueError(f"{op} is not defined for infinite values")
    if op == "complement":
        if sigma is None:
            raise ValueError("complement needs sigma")
        if (f.values > sigma).any() or f.background > sigma:
            raise ValueError("complement would be negative")
        return GridField(f.grid, sigma - f.values, sigma - f.background)
    if op == "scale":
        if factor is None or factor < 0:
            raise ValueError("scale needs a nonnegative factor")
        return GridField(f.grid, factor * f.values, factor * f.background)
    raise ValueError(f"unknown op {op!r}")


def field_to_json(f: GridField) -> dict:
    vals = [("inf" if math.isinf(v) else float(v)) for v in f.flat.tolist()]
    return {
        "dim": f.grid.dim,
        "L": f.grid.half_extent,
        "m": f.grid.points_per_axis,
        "background": f.background,
        "values": vals,
    }


def field_from_json(rec: dict) -> GridField:
    grid = make_grid(rec["dim"], rec["L"], rec["m"])
    vals = np.array([math.inf if v == "inf" else float(v) for v in rec["values"]], dtype=float)
    return GridField(grid, vals.reshape(grid.shape), float(rec.get("background", 0.0)))


def save_field(f: GridField, path) -> None:
    Path(path).write_text(json.dumps(field_to_json(f)))


def load_field(path) -> GridField:
    return field_from_json(json.loads(Path(path).read_text()))

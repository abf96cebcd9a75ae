from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from levyrearrange.grid import (
    GridField,
    GridMismatchError,
    combine,
    convolve,
    field_from_json,
    field_to_json,
    integrate,
    integrate_deficit,
    load_field,
    make_grid,
    save_field,
)


def test_make_grid_centers_1d():
    g = make_grid(1, 2.0, 4)
    assert g.spacing == 1.0
    np.testing.assert_array_equal(g.centers()[:, 0], [-1.5, -0.5, 0.5, 1.5])


def test_make_grid_2d():
    g = make_grid(2, 1.0, 2)
    assert g.size == 4 and g.spacing == 1.0
    np.testing.assert_array_equal(g.centers(), [[-0.5, -0.5], [-0.5, 0.5], [0.5, -0.5], [0.5, 0.5]])


@pytest.mark.parametrize("args", [(1, 1.0, 3), (1, 0.0, 4), (1, -1.0, 4), (4, 1.0, 4), (1, 1.0, 0)])
def test_make_grid_rejects(args):
    with pytest.raises(ValueError):
        make_grid(*args)


def test_grid_symmetry():
    g = make_grid(2, 3.0, 10)
    c = g.centers()
    assert not np.any(np.all(c == 0, axis=1))
    np.testing.assert_allclose(np.sort(c[:, 0]), np.sort(-c[:, 0]))


def test_integrate_constant():
    g = make_grid(1, 2.0, 8)
    assert integrate(g.constant(3.0, background=0.0)) == pytest.approx(12.0, rel=1e-15)


def test_integrate_cell_aligned_indicator():
    g = make_grid(1, 4.0, 64)
    assert integrate(g.box_indicator([0.0], [2.0])) == 2.0


def test_integrate_inf_and_background():
    g = make_grid(1, 1.0, 4)
    vals = np.zeros(4)
    vals[1] = np.inf
    f = GridField(g, vals)
    assert f.has_hard_part
    assert integrate(f) == math.inf
    with pytest.raises(ValueError):
        integrate(g.constant(1.0))


def test_integrate_deficit_examples():
    g = make_grid(1, 4.0, 64)
    ind = g.box_indicator([0.0], [2.0])
    assert integrate_deficit(GridField(g, 1 - ind.values, 1.0), 1.0) == 2.0
    assert integrate_deficit(g.constant(1.0), 1.0) == 0.0
    half = g.box_indicator([0.0], [4.0], 0.5)
    assert integrate_deficit(GridField(g, 1 - half.values, 1.0), 1.0) == 2.0
    with pytest.raises(ValueError):
        integrate_deficit(GridField(g, np.full(64, 2.0), 1.0), 1.0)
    with pytest.raises(ValueError):
        integrate_deficit(ind, 1.0)


def test_integrate_deficit_consistency():
    g = make_grid(2, 2.0, 16)
    rng = np.random.default_rng(0)
    vals = np.ones(g.shape)
    vals[4:12, 4:12] = rng.uniform(0, 1, (8, 8))
    f = GridField(g, vals, 1.0)
    lhs = integrate_deficit(f, 1.0)
    rhs = 1.0 * (2 * 2.0) ** 2 - integrate(GridField(g, vals, 0.0))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_field_validation():
    g = make_grid(1, 1.0, 4)
    with pytest.raises(ValueError):
        GridField(g, np.array([0, -1.0, 0, 0]))
    with pytest.raises(ValueError):
        GridField(g, np.array([0, np.nan, 0, 0]))
    with pytest.raises(ValueError):
        GridField(g, np.zeros(4), background=np.inf)
    f = GridField(g, np.zeros(4))
    with pytest.raises(ValueError):
        f.values[0] = 1.0


def test_convolve_triangle():
    for m in (64, 256):
        g = make_grid(1, 4.0, m)
        box = g.box_indicator([-0.5], [0.5])
        out = convolve(box, box).values
        tri = np.maximum(1 - np.abs(g.axis), 0)
        assert np.max(np.abs(out - tri)) <= 2 * g.spacing


def test_convolve_delta_shift():
    g = make_grid(1, 4.0, 64)
    f = g.sample(lambda x: np.exp(-x**2))
    vals = np.zeros(64)
    k = 40
    vals[k] = 1.0 / g.spacing
    out = convolve(f, GridField(g, vals)).values
    shift = g.axis[k]
    # shifting by a cell center lands halfway between centers: compare to the midpoint average
    h = g.spacing
    expect = 0.5 * (np.exp(-(g.axis - shift - h / 2) ** 2) + np.exp(-(g.axis - shift + h / 2) ** 2))
    interior = np.abs(g.axis - shift) < 2.0
    np.testing.assert_allclose(out[interior], expect[interior], atol=1e-12)


def test_convolve_gaussians():
    g = make_grid(1, 10.0, 512)
    m1, s1, m2, s2 = 1.0, 0.7, -1.5, 1.1

    def gauss(x, mu, s):
        return np.exp(-0.5 * ((x - mu) / s) ** 2) / (s * math.sqrt(2 * math.pi))

    out = convolve(g.sample(lambda x: gauss(x, m1, s1)), g.sample(lambda x: gauss(x, m2, s2))).values
    exact = gauss(g.axis, m1 + m2, math.hypot(s1, s2))
    assert np.max(np.abs(out - exact)) < g.spacing


def test_convolve_gaussian_2d():
    g = make_grid(2, 6.0, 96)

    def gauss(x, y, mx, my, s):
        return np.exp(-((x - mx) ** 2 + (y - my) ** 2) / (2 * s * s)) / (2 * math.pi * s * s)

    f = g.sample(lambda x, y: gauss(x, y, 0.5, -0.5, 0.6))
    k = g.sample(lambda x, y: gauss(x, y, -0.5, 0.0, 0.8))
    out = convolve(f, k).values
    x, y = g.mesh()
    exact = gauss(x, y, 0.0, -0.5, 1.0)
    assert np.max(np.abs(out - exact)) < g.spacing


def test_convolve_errors():
    g1, g2 = make_grid(1, 1.0, 4), make_grid(1, 2.0, 4)
    with pytest.raises(GridMismatchError):
        convolve(g1.zeros(), g2.zeros())
    with pytest.raises(ValueError):
        convolve(g1.constant(1.0), g1.zeros())
    with pytest.raises(ValueError):
        convolve(GridField(g1, [np.inf, 0, 0, 0]), g1.zeros())
    with pytest.raises(ValueError):
        convolve(g1.zeros(), g1.zeros(), method="bogus")


def _random_field(rng, grid, frac=0.5):
    vals = np.zeros(grid.shape)
    m = grid.points_per_axis
    lo, hi = int(m * (0.5 - frac / 2)), int(m * (0.5 + frac / 2))
    sl = tuple(slice(lo, hi) for _ in range(grid.dim))
    vals[sl] = rng.uniform(0, 1, (hi - lo,) * grid.dim)
    return GridField(grid, vals)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 2), st.sampled_from([8, 16, 32]), st.integers(0, 2**32 - 1))
def test_convolve_mass_product(d, m, seed):
    rng = np.random.default_rng(seed)
    g = make_grid(d, 2.0, m)
    f, k = _random_field(rng, g), _random_field(rng, g)
    for method in ("direct", "fft"):
        c = convolve(f, k, method=method)
        assert integrate(c) == pytest.approx(integrate(f) * integrate(k), rel=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.sampled_from([4, 8, 12]), st.integers(0, 2**32 - 1))
def test_convolve_commutative_and_paths_agree(d, m, seed):
    rng = np.random.default_rng(seed)
    g = make_grid(d, 1.5, m)
    f = GridField(g, rng.uniform(0, 1, g.shape) * (rng.uniform(size=g.shape) < 0.6))
    k = GridField(g, rng.exponential(1.0, g.shape))
    a = convolve(f, k, method="direct").values
    b = convolve(k, f, method="direct").values
    assert np.array_equal(a, b)
    c = convolve(f, k, method="fft").values
    scale = np.max(np.abs(a))
    np.testing.assert_allclose(c, a, rtol=0, atol=1e-12 * max(scale, 1e-300))


def test_combine_ops():
    g = make_grid(1, 4.0, 16)
    A = g.box_indicator([-2.0], [1.0])
    B = g.box_indicator([0.0], [3.0])
    assert combine(A, B, "product") == g.box_indicator([0.0], [1.0])
    comp = combine(A, op="complement", sigma=1.0)
    assert comp.background == 1.0
    np.testing.assert_array_equal(comp.values, 1 - A.values)
    z = combine(A, op="scale", factor=0.0)
    assert z == g.zeros()
    mn = combine(A, B, "min")
    assert mn == g.box_indicator([0.0], [1.0])
    with pytest.raises(GridMismatchError):
        combine(A, make_grid(1, 2.0, 16).zeros(), "product")
    with pytest.raises(ValueError):
        combine(A, op="nope")


def test_json_roundtrip(tmp_path):
    g = make_grid(2, 1.25, 6)
    rng = np.random.default_rng(3)
    vals = rng.uniform(0, 1, g.shape) / 3.0
    vals[0, 0] = np.inf
    f = GridField(g, vals, 0.0)
    assert field_from_json(field_to_json(f)) == f
    path = tmp_path / "f.json"
    save_field(f, path)
    assert load_field(path) == f
    h = GridField(g, np.full(g.shape, 0.1 + 0.2), 0.7)
    assert field_from_json(field_to_json(h)) == h

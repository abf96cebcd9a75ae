from __future__ import annotations

import math
import warnings

import numpy as np
import pytest

from levyrearrange.grid import GridField, make_grid
from levyrearrange.levy import (
    GaussianMixture,
    GridDensity,
    LevyTriple,
    QuadratureWarning,
    char_fn,
    power_law,
    rearrange_triple,
    triple_from_json,
    triple_to_json,
    truncate,
    uniform_ball,
)
from levyrearrange.sampler import sample_paths, uniform_time_grid


def ecf(x, xi):
    """Empirical characteristic function and per-component standard errors."""
    ph = x @ np.atleast_1d(xi)
    c, s = np.cos(ph), np.sin(ph)
    n = len(ph)
    return complex(c.mean(), s.mean()), c.std() / math.sqrt(n), s.std() / math.sqrt(n)


def assert_cf_close(x, T, xi, t, k=4.0):
    est, se_re, se_im = ecf(x, xi)
    th = char_fn(T, xi, t)
    assert abs(est.real - th.real) <= k * se_re + 1e-12
    assert abs(est.imag - th.imag) <= k * se_im + 1e-12


# --- rearrange_triple -------------------------------------------------------


def test_rearrange_gaussian_only():
    T = LevyTriple([3.0, -1.0], np.diag([1.0, 4.0]))
    R = rearrange_triple(T)
    np.testing.assert_array_equal(R.b, [0.0, 0.0])
    np.testing.assert_allclose(R.A, 2 * np.eye(2), rtol=1e-15)
    assert R.rho is None


def test_rearrange_recenters_gaussian():
    rho = GaussianMixture(2, [1.5], [[1.0, -2.0]], [np.eye(2) * 0.3])
    R = rearrange_triple(LevyTriple([0.0, 0.0], np.eye(2), rho))
    assert R.rho == GaussianMixture(2, [1.5], [[0.0, 0.0]], [np.eye(2) * 0.3])


def test_rearrange_atoms_only_is_zero_process():
    T = LevyTriple([0.5], [[0.0]], None, [([1.0], 2.0), ([-3.0], 0.5)])
    R = rearrange_triple(T)
    assert R == LevyTriple([0.0], [[0.0]])


def test_rearrange_shifted_power_law_annulus():
    rho = power_law(2, 1.0, 1.0, 0.5, 2.0)
    R = rearrange_triple(LevyTriple([0.0, 0.0], np.eye(2), rho)).rho
    assert R.mass() == pytest.approx(rho.mass(), rel=1e-13)
    # profile moved inward: mass now sits at the origin
    assert R.u_in == 0 and R.a == 0.25


@pytest.mark.parametrize(
    "rho",
    [
        None,
        power_law(1, 1.0, 1.5, 0.0, 1.0),
        power_law(2, 1.0, 1.0, 0.5, 2.0),
        uniform_ball(3, 2.0, 0.7),
        GaussianMixture(1, [1.0], [[2.0]], [[[0.5]]]),
        GaussianMixture(2, [1.0], [[0.0, 1.0]], [[[1.0, 0.3], [0.3, 2.0]]]),
    ],
)
def test_rearrange_idempotent_parametric(rho):
    d = 1 if rho is None else rho.dim
    A = np.eye(d) + 0.2 * (np.ones((d, d)) - np.eye(d))
    T = LevyTriple(np.ones(d), A, rho, [(np.ones(d), 1.0)])
    R = rearrange_triple(T)
    assert rearrange_triple(R) == R


def test_rearrange_idempotent_grid():
    g = make_grid(2, 3.0, 24)
    rng = np.random.default_rng(0)
    rho = GridDensity(GridField(g, rng.uniform(0, 1, g.shape)), 0.3)
    R = rearrange_triple(LevyTriple([0.0, 0.0], np.eye(2), rho))
    RR = rearrange_triple(R)
    np.testing.assert_allclose(RR.rho.field.values, R.rho.field.values, rtol=1e-12)
    assert R.rho.mass() == pytest.approx(rho.mass(), rel=1e-12)


def test_gaussian_mixture_rearranges_on_grid():
    rho = GaussianMixture(1, [1.0, 0.5], [[2.0], [-1.0]], [[[0.3]], [[0.2]]])
    R = rearrange_triple(LevyTriple([0.0], [[1.0]], rho)).rho
    assert isinstance(R, GridDensity)
    assert R.mass() == pytest.approx(1.5, rel=1e-6)


# --- truncate ---------------------------------------------------------------


def test_truncate_closed_form_rate():
    rho = power_law(1, 1.0, 1.5, 0.0, 1.0)
    S = truncate(LevyTriple([0.0], [[0.0]], rho), 4)
    assert S.c_n == pytest.approx(28 / 3, rel=1e-13)
    assert S.eps_n == 1 / 16
    np.testing.assert_array_equal(S.b_n, [0.0])


def test_truncate_zero_density_and_symmetric_drift():
    S = truncate(LevyTriple([0.3, 0.1], np.eye(2)), 5)
    assert S.c_n == 0 and S.total_rate == 0
    np.testing.assert_array_equal(S.b_n, [0.3, 0.1])
    S = truncate(LevyTriple([0.3, 0.1], np.eye(2), uniform_ball(2, 1.0, 2.0)), 5)
    np.testing.assert_allclose(S.b_n, [0.3, 0.1], atol=1e-15)


def test_truncate_compensates_asymmetric_density():
    rho = GaussianMixture(1, [2.0], [[0.4]], [[[0.1]]])
    S = truncate(LevyTriple([0.0], [[1.0]], rho), 10)
    y = np.linspace(-1, 1, 400_001)[1:-1]
    f = rho.density(y[:, None]) * (np.abs(y) > 0.1)
    inner = np.sum(y * f) * (y[1] - y[0])
    assert S.b_n[0] == pytest.approx(-inner, rel=1e-6)


def test_truncate_rejects_degenerate_and_infinite():
    with pytest.raises(ValueError):
        truncate(LevyTriple([0.0], [[0.0]]), 3, eps_n=0.0)
    truncate(LevyTriple([0.0], [[0.0]]), 3, eps_n=0.0, allow_degenerate=True)
    with pytest.raises(ValueError):
        power_law(1, 1.0, 2.5)  # not a Lévy density near 0


@pytest.mark.parametrize("A", [np.zeros((2, 2)), np.array([[1.0, 1.0], [1.0, 1.0]]), np.eye(2)])
@pytest.mark.parametrize("n", [1, 4, 64])
def test_det_A_n_positive(A, n):
    S = truncate(LevyTriple([0.0, 0.0], A), n)
    assert np.linalg.det(S.A_n) > 0


# --- char_fn ----------------------------------------------------------------


def test_char_fn_examples():
    bm = LevyTriple([0.0], [[1.0]])
    assert char_fn(bm, [1.0], 2.0) == pytest.approx(math.exp(-1), rel=1e-15)
    atoms = LevyTriple([0.0], [[0.0]], None, [([1.0], 0.5), ([-1.0], 0.5)])
    for xi in (0.3, 1.0, 2.5):
        assert char_fn(atoms, [xi], 1.7) == pytest.approx(math.exp(-1.7 * (1 - math.cos(xi))), rel=1e-14)
    for T in (bm, atoms, LevyTriple([1.0, 2.0], np.eye(2), power_law(2, 1.0, 1.0))):
        assert char_fn(T, np.zeros(T.dim), 3.0) == 1.0


def test_char_fn_power_law_closed_form():
    # symmetric stable: int (1 - cos(xi y)) |y|^{-1-a} dy = -2 Gamma(-a) cos(pi a / 2) |xi|^a
    a = 1.5
    T = LevyTriple([0.0], [[0.0]], power_law(1, 1.0, a))
    xi = 0.8
    psi = -2 * math.gamma(-a) * math.cos(math.pi * a / 2) * xi**a
    with warnings.catch_warnings():
        warnings.simplefilter("error", QuadratureWarning)
        assert char_fn(T, [xi], 1.0) == pytest.approx(math.exp(-psi), rel=1e-8)


def test_json_round_trip():
    g = make_grid(1, 2.0, 8)
    for rho in (None, power_law(1, 1.0, 1.5, 0.1, 2.0), uniform_ball(1, 2.0, 1.0),
                GaussianMixture(1, [1.0], [[0.5]], [[[0.2]]]), GridDensity(g.box_indicator([0.5], [1.5]), 0.2)):
        T = LevyTriple([0.5], [[2.0]], rho, [([1.5], 0.3)])
        assert triple_from_json(triple_to_json(T)) == T


# --- sampler ----------------------------------------------------------------


def test_zero_triple_increment_variance():
    eps = 0.01
    S = truncate(LevyTriple([0.0], [[0.0]]), 10, eps_n=eps)
    E = sample_paths(S, [0.0, 0.5], 100_000, seed=1)
    x = E.paths[:, 1, 0]
    var = x.var()
    se = var * math.sqrt(2 / len(x))
    assert abs(var - eps * 0.5) <= 3 * se


def test_pure_atom_is_poisson_counter():
    S = truncate(LevyTriple([0.0], [[0.0]], None, [([1.0], 2.0)]), 1, eps_n=0.0, allow_degenerate=True)
    E = sample_paths(S, uniform_time_grid(1.0, 4), 100_000, seed=2)
    x = E.paths[:, -1, 0]
    assert np.array_equal(x, np.round(x))
    assert abs(x.mean() - 2.0) <= 3 * math.sqrt(2.0 / len(x))
    assert np.all(np.diff(E.paths[:, :, 0], axis=1) >= 0)


def test_paths_start_at_zero_and_are_deterministic():
    S = truncate(LevyTriple([0.1, 0.0], np.eye(2), uniform_ball(2, 1.0, 1.0), [([1.0, 1.0], 0.5)]), 4)
    grid = uniform_time_grid(1.0, 16)
    a = sample_paths(S, grid, 500, seed=9)
    b = sample_paths(S, grid, 500, seed=9, workers=4)
    assert np.array_equal(a.paths, b.paths)
    assert np.all(a.paths[:, 0] == 0) and np.all(np.isfinite(a.paths))
    c = sample_paths(S, grid, 200, seed=9)
    assert np.array_equal(c.paths, a.paths[:200])
    assert not np.array_equal(sample_paths(S, grid, 500, seed=10).paths, a.paths)


def test_sampler_errors():
    S = truncate(LevyTriple([0.0], [[1.0]]), 1)
    with pytest.raises(ValueError):
        sample_paths(S, [0.0, 0.5, 0.5], 10, 1)
    with pytest.raises(ValueError):
        sample_paths(S, [0.1, 0.5], 10, 1)
    with pytest.raises(ValueError):
        sample_paths(S, [0.0, 1.0], 0, 1)


CF_CASES = {
    "bm": LevyTriple([0.2], [[1.0]]),
    "atoms": LevyTriple([0.0], [[0.0]], None, [([1.0], 1.0), ([-1.0], 0.5)]),
    "power": LevyTriple([0.0], [[0.5]], power_law(1, 1.0, 1.5, 0.0, 2.0)),
    "gauss2d": LevyTriple([0.0, 0.3], np.eye(2), GaussianMixture(2, [1.0], [[0.5, 0.0]], [np.eye(2) * 0.2])),
    "grid2d": LevyTriple([0.0, 0.0], np.eye(2) * 0.5,
                         GridDensity(make_grid(2, 2.0, 8).box_indicator([0.0, -1.0], [1.5, 0.5]), 0.3)),
    "ball3d": LevyTriple([0.0, 0.0, 0.1], np.eye(3), uniform_ball(3, 2.0, 1.0)),
}


@pytest.mark.parametrize("name", sorted(CF_CASES))
def test_empirical_cf_matches(name):
    T = CF_CASES[name]
    S = truncate(T, 8, eps_n=0.0, allow_degenerate=True)
    E = sample_paths(S, uniform_time_grid(1.0, 10), 20_000, seed=11, workers=4)
    exact = S.as_triple()
    d = T.dim
    for i, t in ((5, 0.5), (10, 1.0)):
        for xi in (0.3, 0.7, 1.0, 1.6, 2.5):
            v = np.full(d, xi / math.sqrt(d))
            v[0] *= 1.1
            assert_cf_close(E.at(i), exact, v, t)


def test_weak_convergence_in_n():
    T = LevyTriple([0.0], [[0.2]], power_law(1, 1.0, 1.5, 0.0, 2.0))
    gaps, ses = [], []
    for n in (2, 8, 32):
        S = truncate(T, n)
        E = sample_paths(S, uniform_time_grid(1.0, 4), 40_000, seed=5, workers=4)
        gap, se = 0.0, 0.0
        for xi in (0.5, 1.0, 2.0):
            est, s_re, s_im = ecf(E.at(4), [xi])
            gap = max(gap, abs(est - char_fn(T, [xi], 1.0)))
            se = max(se, math.hypot(s_re, s_im))
            # the empirical gap is the analytic truncation gap plus noise
            analytic = abs(char_fn(S.as_triple(), [xi], 1.0) - char_fn(T, [xi], 1.0))
            assert abs(abs(est - char_fn(T, [xi], 1.0)) - analytic) <= 4 * math.hypot(s_re, s_im)
        gaps.append(gap)
        ses.append(se)
    for a, b, s in zip(gaps, gaps[1:], ses[1:]):
        assert b <= a + 3 * s
    assert gaps[-1] < 0.5 * gaps[0]

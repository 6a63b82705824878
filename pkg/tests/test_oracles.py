import numpy as np
import pytest

from egwalign import (
    CostSpec,
    CouplingMatrix,
    SampleSet,
    center,
    cost_matrix,
    coupling,
    coupling_covariance,
    finite_diff_check,
    fit_loglog_slope,
    gaussian_iegw_plan_1d,
    gen_uniform_cube,
    grid_oracle_1d,
    sinkhorn,
)
from egwalign.oracles import SlopeFit
from egwalign.samples import make_rng


def test_grid_oracle_single_point():
    spec = CostSpec("quadratic", 1.0)
    s = SampleSet(np.array([[0.0]]))
    val, a = grid_oracle_1d(spec, s, s, 101, 1e-9)
    assert val == 0.0 and a == 0.0


def test_grid_oracle_preconditions():
    spec = CostSpec("quadratic", 1.0)
    s2 = gen_uniform_cube(2, 4, 0)
    s1 = gen_uniform_cube(1, 4, 0)
    with pytest.raises(ValueError):
        grid_oracle_1d(spec, s2, s2)
    with pytest.raises(ValueError):
        grid_oracle_1d(spec, s1, s1, grid_points=2)


def test_grid_oracle_mirror_symmetry():
    # negating one marginal flips the objective in A; a symmetric grid scan
    # must land on the same minimum value
    spec = CostSpec("quadratic", 1.0)
    x = SampleSet(np.array([[-1.0], [1.0]]))
    v1, _ = grid_oracle_1d(spec, x, x, 81, 1e-10)
    v2, _ = grid_oracle_1d(spec, x, SampleSet(-x.points), 81, 1e-10)
    assert abs(v1 - v2) < 1e-9


def test_grid_oracle_sign_flip_equivalence_random():
    spec = CostSpec("inner_product", 1.0)
    x = gen_uniform_cube(1, 6, 31)
    y = gen_uniform_cube(1, 6, 32)
    v1, a1 = grid_oracle_1d(spec, x, y, 101, 1e-10)
    v2, a2 = grid_oracle_1d(spec, x, SampleSet(-y.points), 101, 1e-10)
    assert abs(v1 - v2) < 1e-9
    assert abs(a1 + a2) < 1e-9


def test_grid_oracle_upper_bounds_random_probes():
    spec = CostSpec("quadratic", 1.0)
    x = gen_uniform_cube(1, 8, 33)
    y = gen_uniform_cube(1, 8, 34)
    val, _ = grid_oracle_1d(spec, x, y, 201, 1e-10)
    xc, yc = center(x), center(y)
    from egwalign import marginal_constant_quadratic

    const = marginal_constant_quadratic(xc, yc)
    rng = make_rng(35, "probes")
    for a in rng.uniform(-0.5, 0.5, size=50):
        probe = (
            const
            + spec.reg_weight * a * a
            + sinkhorn(spec, cost_matrix(spec, [[a]], xc, yc), tol=1e-10).value
        )
        assert val <= probe + 1e-6


def test_grid_oracle_refinement_never_increases():
    spec = CostSpec("quadratic", 0.8)
    x = gen_uniform_cube(1, 7, 36)
    y = gen_uniform_cube(1, 7, 37)
    coarse, _ = grid_oracle_1d(spec, x, y, 201, 1e-10)
    fine, _ = grid_oracle_1d(spec, x, y, 401, 1e-10)
    assert fine <= coarse + 1e-9


def test_gaussian_plan_matrix():
    s = gaussian_iegw_plan_1d()
    assert s.shape == (2, 2)
    assert s[0, 0] == 1.0 and s[1, 1] == 0.25
    assert s[0, 1] == s[1, 0] == 1.0 / np.sqrt(8.0)
    assert abs(s[0, 1] - 0.35355) < 1e-4
    assert abs(np.linalg.det(s) - 0.125) < 1e-15
    assert np.linalg.eigvalsh(s).min() > 0


def test_coupling_covariance_single_atom():
    pi = CouplingMatrix(np.array([[1.0]]))
    x = SampleSet(np.array([[3.0]]))
    y = SampleSet(np.array([[-2.0]]))
    np.testing.assert_allclose(coupling_covariance(pi, x, y), np.zeros((2, 2)), atol=1e-12)


def test_coupling_covariance_product_coupling():
    n = 12
    x = center(gen_uniform_cube(2, n, 40))
    y = center(gen_uniform_cube(1, n, 41))
    pi = CouplingMatrix(np.full((n, n), 1.0 / (n * n)))
    got = coupling_covariance(pi, x, y)
    cx = x.points.T @ x.points / n
    cy = y.points.T @ y.points / n
    np.testing.assert_allclose(got[:2, :2], cx, atol=1e-10)
    np.testing.assert_allclose(got[2:, 2:], cy, atol=1e-10)
    np.testing.assert_allclose(got[:2, 2:], 0.0, atol=1e-10)


def test_coupling_covariance_matches_direct_loop():
    n = 6
    rng = make_rng(42, "cc")
    x = SampleSet(rng.standard_normal((n, 2)))
    y = SampleSet(rng.standard_normal((n, 1)))
    spec = CostSpec("quadratic", 1.0)
    pi = coupling(spec, rng.standard_normal(n), rng.standard_normal((n, n)))
    got = coupling_covariance(pi, x, y)
    second = np.zeros((3, 3))
    mean = np.zeros(3)
    for i in range(n):
        for j in range(n):
            z = np.concatenate([x.points[i], y.points[j]])
            second += pi.values[i, j] * np.outer(z, z)
            mean += pi.values[i, j] * z
    want = second - np.outer(mean, mean)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_coupling_covariance_diagonal_equals_cov():
    n = 9
    x = SampleSet(make_rng(43, "cc2").standard_normal((n, 2)) + 1.5)
    pi = CouplingMatrix(np.eye(n) / n)
    got = coupling_covariance(pi, x, x)
    mu = x.points.mean(axis=0)
    cov = (x.points - mu).T @ (x.points - mu) / n
    for bi in (slice(0, 2), slice(2, 4)):
        for bj in (slice(0, 2), slice(2, 4)):
            np.testing.assert_allclose(got[bi, bj], cov, atol=1e-12)


def test_fit_loglog_slope_exact_power_laws():
    ns = np.array([32, 64, 128, 256, 512])
    fit = fit_loglog_slope(ns, 3.0 * ns**-0.5)
    assert abs(fit.slope - (-0.5)) < 1e-12
    assert abs(fit.r2 - 1.0) < 1e-12
    flat = fit_loglog_slope(ns, np.full(5, 2.0))
    assert abs(flat.slope) < 1e-12
    inv = fit_loglog_slope(ns, 5.0 / ns)
    assert abs(inv.slope - (-1.0)) < 1e-12


def test_fit_loglog_slope_affine_equivariance():
    ns = np.array([10, 20, 40, 80])
    errs = np.array([0.9, 0.52, 0.31, 0.17])
    base = fit_loglog_slope(ns, errs)
    scaled = fit_loglog_slope(ns, 7.0 * errs)
    assert abs(base.slope - scaled.slope) < 1e-12
    assert abs(scaled.intercept - base.intercept - np.log(7.0)) < 1e-12


def test_fit_loglog_slope_validation():
    with pytest.raises(ValueError):
        fit_loglog_slope([10, 20], [1.0, 0.0])
    with pytest.raises(ValueError):
        fit_loglog_slope([10, 20], [1.0, -2.0])
    with pytest.raises(ValueError):
        fit_loglog_slope([10], [1.0])
    with pytest.raises(ValueError):
        SlopeFit(slope=-0.5, intercept=0.0, r2=1.5, points=((0.0, 0.0), (1.0, 1.0)))
    with pytest.raises(ValueError):
        SlopeFit(slope=-0.5, intercept=0.0, r2=0.5, points=((0.0, 0.0),))


def test_finite_diff_quadratic_field():
    x0 = make_rng(44, "fd").standard_normal(6)

    def field(v):
        return 0.5 * float(v @ v)

    rep = finite_diff_check(field, x0, x0, h=1e-5)
    assert rep.max_rel_err < 1e-10


def test_finite_diff_linear_field():
    c = np.array([2.0, -1.0, 0.5])

    def field(v):
        return float(c @ v)

    rep = finite_diff_check(field, c, np.zeros(3), h=1e-5)
    assert rep.max_rel_err < 1e-10
    with pytest.raises(ValueError):
        finite_diff_check(field, c, np.zeros(3), h=0.0)


def test_finite_diff_reports_worst_coordinate():
    def field(v):
        return float(v[0] ** 2 + v[1] ** 2)

    wrong = np.array([0.0, 2.0])  # gradient in coordinate 0 is wrong at x0
    rep = finite_diff_check(field, wrong, np.array([1.0, 1.0]), h=1e-5)
    assert rep.worst_index == 0
    assert rep.max_rel_err > 0.5

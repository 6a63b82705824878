"""Ground-truth machinery the estimator is validated against.

A brute-force 1-D grid oracle (scalar A scanned over the box, exact inner
solve per point), the closed-form Gaussian coupling covariance for the
inner-product instance, a coupling second-moment helper, log-log slope
fitting, and a central-difference gradient harness.  Everything here is
deliberately independent of the training path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .outer import marginal_constant_inner, marginal_constant_quadratic
from .samples import SampleSet, center
from .semidual import KIND_QUADRATIC, CostSpec, CouplingMatrix, cost_matrix, sinkhorn

__all__ = [
    "SlopeFit",
    "FdReport",
    "grid_oracle_1d",
    "gaussian_iegw_plan_1d",
    "coupling_covariance",
    "fit_loglog_slope",
    "finite_diff_check",
]


@dataclass(frozen=True, eq=False)
class SlopeFit:
    """Least-squares line through (log n, log error) points."""

    slope: float
    intercept: float
    r2: float
    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.points) < 2:
            raise ValueError("need at least 2 points")
        if not (0.0 <= self.r2 <= 1.0):
            raise ValueError("r2 must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class FdReport:
    """Central-difference gradient comparison; worst coordinate wins."""

    max_rel_err: float
    worst_index: int
    fd: np.ndarray
    analytic: np.ndarray


def _objective_at(spec: CostSpec, a: float, x, y, const: float, tol: float) -> float:
    cost = cost_matrix(spec, np.array([[a]]), x, y)
    res = sinkhorn(spec, cost, tol=tol)
    return const + spec.reg_weight * a * a + res.value


def grid_oracle_1d(
    spec: CostSpec,
    x: SampleSet,
    y: SampleSet,
    grid_points: int = 401,
    sinkhorn_tol: float = 1e-9,
) -> tuple[float, float]:
    """Brute-force scalar-A oracle for one-dimensional marginals.

    Scans A over a uniform grid spanning the box, solving the inner problem
    exactly at each point, then refines once on a 10x finer local grid
    around the coarse minimizer.  Centers the data for the quadratic kind,
    matching what the estimator does internally.  Returns (value, A).
    """
    if x.d != 1 or y.d != 1:
        raise ValueError("grid oracle handles 1-D marginals only")
    if grid_points < 3:
        raise ValueError("grid_points must be >= 3")
    if spec.kind == KIND_QUADRATIC:
        x = center(x)
        y = center(y)
        const = marginal_constant_quadratic(x, y)
    else:
        const = marginal_constant_inner(x, y)
    half = math.sqrt(x.d * y.d) / 2.0
    grid = np.linspace(-half, half, grid_points)
    vals = np.array([_objective_at(spec, a, x, y, const, sinkhorn_tol) for a in grid])
    best = int(np.argmin(vals))
    best_val = float(vals[best])
    best_a = float(grid[best])
    spacing = grid[1] - grid[0]
    fine = np.clip(np.linspace(best_a - spacing, best_a + spacing, 21), -half, half)
    for a in fine:
        v = _objective_at(spec, float(a), x, y, const, sinkhorn_tol)
        if v < best_val:
            best_val = v
            best_a = float(a)
    return best_val, best_a


def gaussian_iegw_plan_1d() -> np.ndarray:
    """Covariance of the optimal inner-product plan for the fixed instance
    eps=0.5, standard normal source, variance-1/4 target."""
    off = 1.0 / math.sqrt(8.0)
    return np.array([[1.0, off], [off, 0.25]])


def coupling_covariance(pi: CouplingMatrix, x: SampleSet, y: SampleSet) -> np.ndarray:
    """Covariance of the joint (X, Y) distribution induced by the coupling."""
    if pi.n != x.n or pi.n != y.n:
        raise ValueError("coupling size must match the sample sets")
    w = pi.values
    r = w.sum(axis=1)
    c = w.sum(axis=0)
    mean = np.concatenate([x.points.T @ r, y.points.T @ c])
    sxx = x.points.T @ (x.points * r[:, None])
    syy = y.points.T @ (y.points * c[:, None])
    sxy = (x.points.T @ w) @ y.points
    second = np.block([[sxx, sxy], [sxy.T, syy]])
    return second - np.outer(mean, mean)


def fit_loglog_slope(ns, errs) -> SlopeFit:
    """Ordinary least squares on (ln n, ln err)."""
    ns = np.asarray(ns, dtype=np.float64)
    errs = np.asarray(errs, dtype=np.float64)
    if ns.shape != errs.shape or ns.ndim != 1:
        raise ValueError("ns and errs must be 1-D of equal length")
    if ns.size < 2:
        raise ValueError("need at least 2 points")
    if not (errs > 0).all():
        raise ValueError("errors must be positive")
    if not (ns > 0).all():
        raise ValueError("sample counts must be positive")
    lx = np.log(ns)
    ly = np.log(errs)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(((ly - ly.mean()) ** 2).sum())
    ss_res = float((resid**2).sum())
    r2 = 1.0 if ss_tot == 0.0 else max(0.0, min(1.0, 1.0 - ss_res / ss_tot))
    return SlopeFit(
        slope=float(slope),
        intercept=float(intercept),
        r2=r2,
        points=tuple(zip(lx.tolist(), ly.tolist())),
    )


def finite_diff_check(f, analytic, x0, h: float = 1e-5, floor: float = 1e-4) -> FdReport:
    """Central differences per coordinate against a supplied gradient.

    Relative error uses max(|fd|, |analytic|, floor) as denominator so
    near-zero coordinates compare absolutely at the floor scale.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = np.asarray(x0, dtype=np.float64).ravel()
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    if analytic.shape != x0.shape:
        raise ValueError("analytic gradient shape must match x0")
    fd = np.empty_like(x0)
    for i in range(x0.size):
        hi = x0.copy()
        lo = x0.copy()
        hi[i] += h
        lo[i] -= h
        fd[i] = (f(hi) - f(lo)) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(analytic)), floor)
    rel = np.abs(fd - analytic) / denom
    worst = int(np.argmax(rel))
    return FdReport(
        max_rel_err=float(rel[worst]), worst_index=worst, fd=fd, analytic=analytic
    )

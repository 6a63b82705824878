"""Entropic OT semi-dual kernel for the two alignment costs.

Houses the cost matrices, the stabilized (c, eps)-transform, the empirical
semi-dual objective with its analytic gradient, the induced coupling whose
columns match the second marginal exactly, Adam training of a neural
potential, and a log-domain Sinkhorn oracle.  Every exponential goes through
a max-subtracted log-sum-exp; nothing exponentiates (.)/eps raw.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .net import (
    AdamState,
    MlpGrads,
    MlpParams,
    TrainPlan,
    adam_step,
    backward,
    forward_batch,
    init_adam,
)
from .samples import SampleSet, make_rng

__all__ = [
    "KIND_QUADRATIC",
    "KIND_INNER",
    "CostSpec",
    "PotentialVector",
    "CouplingMatrix",
    "NumericalFailure",
    "ConvergenceError",
    "SinkhornResult",
    "cost_matrix",
    "ctransform",
    "semidual_value",
    "coupling",
    "semidual_grad_fvals",
    "train_potential",
    "sinkhorn",
    "kl_between",
    "potential_plan_stats",
    "coupling_dense",
]

KIND_QUADRATIC = "quadratic"
KIND_INNER = "inner_product"

# kind -> (quad_coeff, bilinear_coeff, reg_weight, grad_lin, grad_bilin)
_COEFFS = {
    KIND_QUADRATIC: (4.0, 32.0, 32.0, 64.0, 32.0),
    KIND_INNER: (0.0, 8.0, 8.0, 16.0, 8.0),
}


class NumericalFailure(RuntimeError):
    """Non-finite objective during potential training; carries the step."""

    def __init__(self, message: str, step: int, eps: float):
        super().__init__(message)
        self.step = step
        self.eps = eps


class ConvergenceError(RuntimeError):
    """Sinkhorn hit max_iter; carries the last marginal sup-error."""

    def __init__(self, message: str, marginal_error: float):
        super().__init__(message)
        self.marginal_error = marginal_error


@dataclass(frozen=True)
class CostSpec:
    """Cost family and regularization strength.

    kind "quadratic" uses c_A(x, y) = -4 |x|^2 |y|^2 - 32 x^T A y and ties the
    A-penalty weight to 32; kind "inner_product" uses c_A(x, y) = -8 x^T A y
    with weight 8.  The gradient constants grad_lin and grad_bilin are twice
    the penalty weight and the bilinear coefficient respectively.
    """

    kind: str
    eps: float

    def __post_init__(self):
        if self.kind not in _COEFFS:
            raise ValueError(f"unknown cost kind {self.kind!r}")
        if not (self.eps > 0 and math.isfinite(self.eps)):
            raise ValueError("eps must be positive and finite")

    @property
    def quad_coeff(self) -> float:
        return _COEFFS[self.kind][0]

    @property
    def bilinear_coeff(self) -> float:
        return _COEFFS[self.kind][1]

    @property
    def reg_weight(self) -> float:
        return _COEFFS[self.kind][2]

    @property
    def grad_lin(self) -> float:
        return _COEFFS[self.kind][3]

    @property
    def grad_bilin(self) -> float:
        return _COEFFS[self.kind][4]


@dataclass(frozen=True, eq=False)
class PotentialVector:
    """Potential values at the sample points."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.isfinite(v).all():
            raise ValueError("potential values must be finite")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class CouplingMatrix:
    """n x n coupling whose columns each sum to 1/n.

    Entry (i, j) is the mass on the pair (X_i, Y_j).  Construction validates
    nonnegativity, the column sums (within 1e-12), and unit total mass.
    """

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"coupling must be square, got shape {v.shape}")
        n = v.shape[0]
        if (v < 0).any():
            raise ValueError("coupling has negative entries")
        col_err = float(np.abs(v.sum(axis=0) - 1.0 / n).max())
        if col_err > 1e-12:
            raise ValueError(f"column sums deviate from 1/n by {col_err:.3e}")
        mass_err = abs(float(v.sum()) - 1.0)
        if mass_err > 1e-12:
            raise ValueError(f"total mass deviates from 1 by {mass_err:.3e}")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]


def _as_vals(f_vals) -> np.ndarray:
    if isinstance(f_vals, PotentialVector):
        return f_vals.values
    return np.asarray(f_vals, dtype=np.float64).reshape(-1)


def cost_matrix(spec: CostSpec, a_mat, x: SampleSet, y: SampleSet) -> np.ndarray:
    """Pairwise alignment costs: entry (i, j) = c_A(X_i, Y_j)."""
    a_mat = np.asarray(a_mat, dtype=np.float64)
    if a_mat.shape != (x.d, y.d):
        raise ValueError(f"A must be {x.d} x {y.d}, got shape {a_mat.shape}")
    bil = x.points @ (a_mat @ y.points.T)
    if spec.quad_coeff:
        sqx = np.einsum("nd,nd->n", x.points, x.points)
        sqy = np.einsum("nd,nd->n", y.points, y.points)
        return -spec.quad_coeff * np.outer(sqx, sqy) - spec.bilinear_coeff * bil
    return -spec.bilinear_coeff * bil


def _col_softstats(spec: CostSpec, f: np.ndarray, cost: np.ndarray):
    """Shared log-domain core over columns.

    Returns (lse, w, s) with lse[j] = log((1/n) sum_i e^{z_ij}) for
    z_ij = (f[i] - cost[i, j]) / eps, w the max-subtracted exponentials, and
    s the column sums of w.
    """
    n_rows = f.shape[0]
    # non-finite intermediates are detected by callers, not by warnings
    with np.errstate(over="ignore", invalid="ignore"):
        z = (f[:, None] - cost) / spec.eps
        m = z.max(axis=0)
        w = np.exp(z - m[None, :])
        s = w.sum(axis=0)
        lse = m + np.log(s) - np.log(n_rows)
    return lse, w, s


def _ctransform_raw(spec: CostSpec, f: np.ndarray, cost: np.ndarray) -> np.ndarray:
    if cost.shape[0] != f.shape[0]:
        raise ValueError("cost rows must match f_vals length")
    lse, _, _ = _col_softstats(spec, f, cost)
    return -spec.eps * lse


def ctransform(spec: CostSpec, f_vals, cost: np.ndarray) -> PotentialVector:
    """(c, eps)-transform of f against the first marginal, at every Y_j.

    output[j] = -eps * log((1/n) sum_i exp((f[i] - cost[i, j]) / eps)),
    evaluated with max subtraction so it never overflows.
    """
    f = _as_vals(f_vals)
    cost = np.asarray(cost, dtype=np.float64)
    return PotentialVector(_ctransform_raw(spec, f, cost))


def semidual_value(spec: CostSpec, f_vals, cost: np.ndarray) -> float:
    """Empirical semi-dual objective mean(f) + mean(ctransform(f))."""
    f = _as_vals(f_vals)
    cost = np.asarray(cost, dtype=np.float64)
    return float(f.mean() + _ctransform_raw(spec, f, cost).mean())


def coupling(spec: CostSpec, f_vals, cost: np.ndarray) -> CouplingMatrix:
    """Neural coupling: columnwise softmax of (f - cost)/eps, scaled by 1/n."""
    f = _as_vals(f_vals)
    cost = np.asarray(cost, dtype=np.float64)
    _, w, s = _col_softstats(spec, f, cost)
    n = cost.shape[1]
    return CouplingMatrix(w / (n * s)[None, :])


def semidual_grad_fvals(spec: CostSpec, f_vals, cost: np.ndarray) -> np.ndarray:
    """Gradient of semidual_value in the f values: 1/n - row sums of the coupling."""
    f = _as_vals(f_vals)
    cost = np.asarray(cost, dtype=np.float64)
    _, w, s = _col_softstats(spec, f, cost)
    n_rows = f.shape[0]
    n_cols = cost.shape[1]
    return 1.0 / n_rows - w @ (1.0 / (n_cols * s))


def _value_and_fgrad(spec: CostSpec, f: np.ndarray, cost: np.ndarray):
    """Objective and f-gradient in one pass over the exponentials."""
    lse, w, s = _col_softstats(spec, f, cost)
    n_rows = f.shape[0]
    n_cols = cost.shape[1]
    with np.errstate(over="ignore", invalid="ignore"):
        value = float(f.mean() - spec.eps * lse.mean())
        grad = 1.0 / n_rows - w @ (1.0 / (n_cols * s))
    return value, grad


def _neg(g: MlpGrads) -> MlpGrads:
    return MlpGrads(
        hidden_w=-g.hidden_w,
        hidden_b=-g.hidden_b,
        out_w=-g.out_w,
        skip_w=-g.skip_w,
        skip_b=-g.skip_b,
    )


def train_potential(
    spec: CostSpec,
    net: MlpParams,
    a_mat,
    x: SampleSet,
    y: SampleSet,
    plan: TrainPlan,
    seed: int,
    adam: AdamState | None = None,
) -> tuple[MlpParams, list[float], AdamState]:
    """Adam ascent of the semi-dual objective in the network parameters.

    Full batch (plan.batch_size = 0) takes one step per epoch on the complete
    objective; minibatch mode takes ceil(n/m) steps per epoch, each on fresh
    independent uniform row subsets of X and Y of size m, with the batch
    semi-dual objective on the m x m block.  The trace holds one objective
    value per epoch (the full objective in full-batch mode, the mean of the
    batch objectives otherwise).  Warm starts: pass the previous network and
    Adam state; nothing is reset implicitly.
    """
    if net.d != x.d:
        raise ValueError(f"net expects dimension {net.d}, X has {x.d}")
    if x.n != y.n:
        raise ValueError("X and Y must have the same number of rows")
    if plan.projection and net.bound_a is None:
        raise ValueError("projection requires the net to carry a finite bound_a")
    n = x.n
    if plan.batch_size > n:
        raise ValueError("batch_size cannot exceed n")
    adam = adam if adam is not None else init_adam(net, plan.rate)
    trace: list[float] = []
    step = 0
    if plan.batch_size == 0:
        cost = cost_matrix(spec, a_mat, x, y)
        for _ in range(plan.epochs):
            step += 1
            f = forward_batch(net, x.points)
            value, fgrad = _value_and_fgrad(spec, f, cost)
            if not math.isfinite(value):
                raise NumericalFailure(
                    f"non-finite semi-dual objective at step {step}", step, spec.eps
                )
            grads = backward(net, x.points, fgrad)
            net, adam = adam_step(net, _neg(grads), adam, project=plan.projection)
            trace.append(value)
        return net, trace, adam
    m = plan.batch_size
    a_mat = np.asarray(a_mat, dtype=np.float64)
    rng = make_rng(seed, "minibatch")
    steps_per_epoch = -(-n // m)
    sqy_full = None
    if spec.quad_coeff:
        sqy_full = np.einsum("nd,nd->n", y.points, y.points)
    for _ in range(plan.epochs):
        epoch_vals = []
        for _ in range(steps_per_epoch):
            step += 1
            ix = rng.choice(n, size=m, replace=False)
            iy = rng.choice(n, size=m, replace=False)
            xb = x.points[ix]
            yb = y.points[iy]
            bil = xb @ (a_mat @ yb.T)
            if spec.quad_coeff:
                sqx = np.einsum("nd,nd->n", xb, xb)
                cost = -spec.quad_coeff * np.outer(sqx, sqy_full[iy])
                cost -= spec.bilinear_coeff * bil
            else:
                cost = -spec.bilinear_coeff * bil
            f = forward_batch(net, xb)
            value, fgrad = _value_and_fgrad(spec, f, cost)
            if not math.isfinite(value):
                raise NumericalFailure(
                    f"non-finite batch semi-dual objective at step {step}",
                    step,
                    spec.eps,
                )
            grads = backward(net, xb, fgrad)
            net, adam = adam_step(net, _neg(grads), adam, project=plan.projection)
            epoch_vals.append(value)
        trace.append(float(np.mean(epoch_vals)))
    return net, trace, adam


@dataclass(frozen=True, eq=False)
class SinkhornResult:
    phi: PotentialVector
    psi: PotentialVector
    coupling: CouplingMatrix
    value: float
    iterations: int
    marginal_error: float


def sinkhorn(
    spec: CostSpec, cost: np.ndarray, tol: float = 1e-9, max_iter: int = 100_000
) -> SinkhornResult:
    """Log-domain Sinkhorn for uniform marginals; the ground-truth oracle.

    Alternates exact (c, eps)-transform updates of the two potentials until
    the marginal sup-error of the induced coupling drops below tol.  The
    returned coupling has exact column sums by construction and row sums
    within tol; the value is the dual objective
    mean(phi) + mean(psi) - eps * (mass - 1).
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.shape != (n, n):
        raise ValueError("cost must be square")
    phi = np.zeros(n)
    row_err = math.inf
    iterations = 0
    cost_t = np.ascontiguousarray(cost.T)
    for iterations in range(1, max_iter + 1):
        psi = _ctransform_raw(spec, phi, cost)
        phi_next = _ctransform_raw(spec, psi, cost_t)
        # Row sums of the coupling induced by (phi, psi) are
        # (1/n) exp((phi - phi_next)/eps); columns are exact by construction.
        row_err = float(np.abs(np.exp((phi - phi_next) / spec.eps) - 1.0).max()) / n
        if row_err < tol:
            break
        phi = phi_next
    else:
        raise ConvergenceError(
            f"sinkhorn did not reach tol={tol:g} in {max_iter} iterations "
            f"(marginal sup-error {row_err:.3e})",
            row_err,
        )
    pi = coupling(spec, phi, cost)
    mass = float(pi.values.sum())
    value = float(phi.mean() + psi.mean() - spec.eps * (mass - 1.0))
    return SinkhornResult(
        phi=PotentialVector(phi),
        psi=PotentialVector(psi),
        coupling=pi,
        value=value,
        iterations=iterations,
        marginal_error=row_err,
    )


def kl_between(p: CouplingMatrix, q: CouplingMatrix) -> float:
    """KL divergence sum p log(p/q) with 0 log 0 = 0."""
    pv = p.values
    qv = q.values
    if pv.shape != qv.shape:
        raise ValueError("couplings must have the same shape")
    mask = pv > 0
    if (qv[mask] <= 0).any():
        raise ValueError("support violation: q vanishes where p has mass")
    return float(np.sum(pv[mask] * np.log(pv[mask] / qv[mask])))


def potential_plan_stats(
    spec: CostSpec,
    net: MlpParams,
    a_mat,
    x: SampleSet,
    y: SampleSet,
    col_chunk: int = 4096,
) -> tuple[float, np.ndarray]:
    """Semi-dual value and cross moment X^T Pi Y of the neural coupling.

    Streams over column blocks so no n x n array is materialized; the
    per-column arithmetic is identical to the dense operations.
    """
    n = x.n
    if y.n != n:
        raise ValueError("X and Y must have the same number of rows")
    f = forward_batch(net, x.points)
    a_mat = np.asarray(a_mat, dtype=np.float64)
    sqx = sqy = None
    if spec.quad_coeff:
        sqx = np.einsum("nd,nd->n", x.points, x.points)
        sqy = np.einsum("nd,nd->n", y.points, y.points)
    ct = np.empty(n)
    cross = np.zeros((x.d, y.d))
    for j0 in range(0, n, col_chunk):
        j1 = min(j0 + col_chunk, n)
        yb = y.points[j0:j1]
        bil = x.points @ (a_mat @ yb.T)
        if spec.quad_coeff:
            cost = -spec.quad_coeff * np.outer(sqx, sqy[j0:j1])
            cost -= spec.bilinear_coeff * bil
        else:
            cost = -spec.bilinear_coeff * bil
        lse, w, s = _col_softstats(spec, f, cost)
        ct[j0:j1] = -spec.eps * lse
        cross += (x.points.T @ (w * (1.0 / (n * s))[None, :])) @ yb
    value = float(f.mean() + ct.mean())
    return value, cross


def coupling_dense(
    spec: CostSpec,
    net: MlpParams,
    a_mat,
    x: SampleSet,
    y: SampleSet,
    col_chunk: int = 4096,
) -> CouplingMatrix:
    """Materialize the neural coupling blockwise (one n x n allocation)."""
    n = x.n
    f = forward_batch(net, x.points)
    a_mat = np.asarray(a_mat, dtype=np.float64)
    sqx = sqy = None
    if spec.quad_coeff:
        sqx = np.einsum("nd,nd->n", x.points, x.points)
        sqy = np.einsum("nd,nd->n", y.points, y.points)
    out = np.empty((n, n))
    for j0 in range(0, n, col_chunk):
        j1 = min(j0 + col_chunk, n)
        yb = y.points[j0:j1]
        bil = x.points @ (a_mat @ yb.T)
        if spec.quad_coeff:
            cost = -spec.quad_coeff * np.outer(sqx, sqy[j0:j1])
            cost -= spec.bilinear_coeff * bil
        else:
            cost = -spec.bilinear_coeff * bil
        _, w, s = _col_softstats(spec, f, cost)
        out[:, j0:j1] = w / (n * s)[None, :]
    return CouplingMatrix(out)

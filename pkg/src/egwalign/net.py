"""Shallow ReLU potentials: forward, analytic gradients, Adam, projection.

The function class is f(x) = sum_i beta_i relu(w_i . x + b_i) + w0 . x + b0
with an optional box on the parameters (l1 rows of the hidden layer and bias
magnitudes at most 1, readout and skip scales tied to a bound ``a``).  All
gradients are computed analytically; no autodiff dependency.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .samples import make_rng

__all__ = [
    "MlpParams",
    "MlpGrads",
    "AdamState",
    "TrainPlan",
    "init_params",
    "forward",
    "forward_batch",
    "backward",
    "project_params",
    "init_adam",
    "adam_step",
    "params_to_json",
    "params_from_json",
]

_FIELDS = ("hidden_w", "hidden_b", "out_w", "skip_w", "skip_b")


@dataclass(frozen=True, eq=False)
class MlpParams:
    """Parameters of one shallow ReLU potential.

    bound_a is the class scale ``a``; None means the class is unrestricted
    and projection is unavailable.
    """

    hidden_w: np.ndarray
    hidden_b: np.ndarray
    out_w: np.ndarray
    skip_w: np.ndarray
    skip_b: float
    bound_a: float | None = None

    def __post_init__(self):
        hw = np.asarray(self.hidden_w, dtype=np.float64)
        if hw.ndim != 2:
            raise ValueError("hidden_w must be k x d")
        k, d = hw.shape
        hb = np.asarray(self.hidden_b, dtype=np.float64).reshape(k)
        ow = np.asarray(self.out_w, dtype=np.float64).reshape(k)
        sw = np.asarray(self.skip_w, dtype=np.float64).reshape(d)
        for name, arr in (("hidden_w", hw), ("hidden_b", hb), ("out_w", ow), ("skip_w", sw)):
            if not np.isfinite(arr).all():
                raise ValueError(f"{name} has non-finite entries")
        if not np.isfinite(self.skip_b):
            raise ValueError("skip_b is non-finite")
        if self.bound_a is not None and self.bound_a < 0:
            raise ValueError("bound_a must be nonnegative or None")
        object.__setattr__(self, "hidden_w", hw)
        object.__setattr__(self, "hidden_b", hb)
        object.__setattr__(self, "out_w", ow)
        object.__setattr__(self, "skip_w", sw)
        object.__setattr__(self, "skip_b", float(self.skip_b))

    @property
    def k(self) -> int:
        return self.hidden_w.shape[0]

    @property
    def d(self) -> int:
        return self.hidden_w.shape[1]


@dataclass(eq=False)
class MlpGrads:
    """Per-parameter gradient record matching MlpParams shapes."""

    hidden_w: np.ndarray
    hidden_b: np.ndarray
    out_w: np.ndarray
    skip_w: np.ndarray
    skip_b: float


@dataclass(eq=False)
class AdamState:
    """Adam accumulators; m and v mirror the parameter shapes."""

    m: MlpGrads
    v: MlpGrads
    t: int
    rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    stab: float = 1e-8


@dataclass(frozen=True)
class TrainPlan:
    """Inner-loop schedule: epochs N, batch size m (0 = full), rate eta."""

    epochs: int = 5
    batch_size: int = 0
    rate: float = 0.01
    projection: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 0:
            raise ValueError("batch_size must be >= 0")
        if self.rate < 0:
            raise ValueError("rate must be >= 0")


def init_params(k: int, d: int, seed: int, bound_a: float | None = None) -> MlpParams:
    """Small uniform hidden layer, zero readout and skip.

    The zero readout makes the initial potential identically zero, which is
    always feasible for the semi-dual.  When bound_a is finite the result is
    projected onto the class box.
    """
    if k < 1 or d < 1:
        raise ValueError("need k >= 1 and d >= 1")
    half = 1.0 / np.sqrt(d)
    rng = make_rng(seed, "net-init", k, d)
    p = MlpParams(
        hidden_w=rng.uniform(-half, half, size=(k, d)),
        hidden_b=rng.uniform(-half, half, size=k),
        out_w=np.zeros(k),
        skip_w=np.zeros(d),
        skip_b=0.0,
        bound_a=bound_a,
    )
    if bound_a is not None:
        p = project_params(p)
    return p


def forward_batch(p: MlpParams, xs: np.ndarray) -> np.ndarray:
    """Evaluate the potential on every row of xs.

    Contractions run through einsum so the per-row reduction order is fixed:
    batched evaluation is bit-identical to a scalar loop.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim != 2 or xs.shape[1] != p.d:
        raise ValueError(f"xs must be n x {p.d}, got shape {xs.shape}")
    z = np.einsum("nd,kd->nk", xs, p.hidden_w) + p.hidden_b[None, :]
    act = np.maximum(z, 0.0)
    out = np.einsum("nk,k->n", act, p.out_w)
    out += np.einsum("nd,d->n", xs, p.skip_w)
    out += p.skip_b
    return out


def forward(p: MlpParams, x: np.ndarray) -> float:
    """Evaluate the potential at a single point."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape[0] != p.d:
        raise ValueError(f"x must have dimension {p.d}, got {x.shape[0]}")
    return float(forward_batch(p, x[None, :])[0])


def backward(p: MlpParams, xs: np.ndarray, dl_df: np.ndarray) -> MlpGrads:
    """Gradient of sum_i dl_df[i] * f(xs[i]) in every parameter.

    Uses the subgradient relu'(z) = 1{z > 0}, so the derivative at the kink
    is 0.
    """
    xs = np.asarray(xs, dtype=np.float64)
    dl_df = np.asarray(dl_df, dtype=np.float64).reshape(-1)
    if xs.ndim != 2 or xs.shape[1] != p.d:
        raise ValueError(f"xs must be n x {p.d}, got shape {xs.shape}")
    if dl_df.shape[0] != xs.shape[0]:
        raise ValueError("dl_df length must match the number of rows")
    z = np.einsum("nd,kd->nk", xs, p.hidden_w) + p.hidden_b[None, :]
    act = np.maximum(z, 0.0)
    dz = (dl_df[:, None] * (z > 0.0)) * p.out_w[None, :]
    return MlpGrads(
        hidden_w=dz.T @ xs,
        hidden_b=dz.sum(axis=0),
        out_w=act.T @ dl_df,
        skip_w=xs.T @ dl_df,
        skip_b=float(dl_df.sum()),
    )


def project_params(p: MlpParams) -> MlpParams:
    """Project onto the class box: rescale l1 norms, clip scalar bounds."""
    if p.bound_a is None:
        raise ValueError("projection requires a finite bound_a")
    a = float(p.bound_a)
    row_norms = np.abs(p.hidden_w).sum(axis=1)
    scale = np.where(row_norms > 1.0, 1.0 / np.maximum(row_norms, 1e-300), 1.0)
    hidden_w = p.hidden_w * scale[:, None]
    hidden_b = np.clip(p.hidden_b, -1.0, 1.0)
    cap = 2.0 * a / p.k
    out_w = np.clip(p.out_w, -cap, cap)
    skip_norm = float(np.abs(p.skip_w).sum())
    skip_w = p.skip_w * (a / skip_norm if skip_norm > a else 1.0)
    skip_b = float(np.clip(p.skip_b, -a, a))
    return MlpParams(hidden_w, hidden_b, out_w, skip_w, skip_b, bound_a=p.bound_a)


def _zero_grads(p: MlpParams) -> MlpGrads:
    return MlpGrads(
        hidden_w=np.zeros_like(p.hidden_w),
        hidden_b=np.zeros_like(p.hidden_b),
        out_w=np.zeros_like(p.out_w),
        skip_w=np.zeros_like(p.skip_w),
        skip_b=0.0,
    )


def init_adam(p: MlpParams, rate: float) -> AdamState:
    return AdamState(m=_zero_grads(p), v=_zero_grads(p), t=0, rate=rate)


def adam_step(
    p: MlpParams, g: MlpGrads, st: AdamState, project: bool = False
) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam step (minimization), optional box projection."""
    t = st.t + 1
    bc1 = 1.0 - st.beta1**t
    bc2 = 1.0 - st.beta2**t
    new_p = {}
    new_m = {}
    new_v = {}
    for name in _FIELDS:
        pv = np.asarray(getattr(p, name), dtype=np.float64)
        gv = np.asarray(getattr(g, name), dtype=np.float64)
        m = st.beta1 * np.asarray(getattr(st.m, name)) + (1.0 - st.beta1) * gv
        v = st.beta2 * np.asarray(getattr(st.v, name)) + (1.0 - st.beta2) * (gv * gv)
        step = st.rate * (m / bc1) / (np.sqrt(v / bc2) + st.stab)
        new_p[name] = pv - step
        new_m[name] = m
        new_v[name] = v
    out = MlpParams(
        hidden_w=new_p["hidden_w"],
        hidden_b=new_p["hidden_b"],
        out_w=new_p["out_w"],
        skip_w=new_p["skip_w"],
        skip_b=float(new_p["skip_b"]),
        bound_a=p.bound_a,
    )
    if project:
        out = project_params(out)
    state = AdamState(
        m=MlpGrads(**{k: new_m[k] for k in ("hidden_w", "hidden_b", "out_w", "skip_w")},
                   skip_b=float(new_m["skip_b"])),
        v=MlpGrads(**{k: new_v[k] for k in ("hidden_w", "hidden_b", "out_w", "skip_w")},
                   skip_b=float(new_v["skip_b"])),
        t=t,
        rate=st.rate,
        beta1=st.beta1,
        beta2=st.beta2,
        stab=st.stab,
    )
    return out, state


def params_to_json(p: MlpParams) -> str:
    """Serialize parameters with round-trip-exact decimal floats."""
    doc = {
        "schema": 1,
        "k": p.k,
        "d": p.d,
        "bound_a": p.bound_a,
        "hidden_w": p.hidden_w.tolist(),
        "hidden_b": p.hidden_b.tolist(),
        "out_w": p.out_w.tolist(),
        "skip_w": p.skip_w.tolist(),
        "skip_b": p.skip_b,
    }
    return json.dumps(doc, sort_keys=True)


def params_from_json(text: str) -> MlpParams:
    doc = json.loads(text)
    if doc.get("schema") != 1:
        raise ValueError("unsupported MlpParams schema")
    p = MlpParams(
        hidden_w=np.asarray(doc["hidden_w"], dtype=np.float64),
        hidden_b=np.asarray(doc["hidden_b"], dtype=np.float64),
        out_w=np.asarray(doc["out_w"], dtype=np.float64),
        skip_w=np.asarray(doc["skip_w"], dtype=np.float64),
        skip_b=float(doc["skip_b"]),
        bound_a=doc["bound_a"],
    )
    if p.k != doc["k"] or p.d != doc["d"]:
        raise ValueError("shape header disagrees with array payload")
    return p

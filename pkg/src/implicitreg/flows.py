"""Modified losses and the gradient flows they generate.

The discrete optimizers in this package track, to higher order in the step
size, the continuous path of gradient flow on a *modified* loss rather than on
the original one. This module evaluates each modified loss, its exact
gradient, and integrates the corresponding flow with fixed-step RK4 as the
high-accuracy continuous reference:

* full-batch:          C + (eps/4)||grad C||^2
* epoch-wise SGD:      C + eps * c_reg,  c_reg = (1/4m) sum_k ||grad C_k||^2
* n-step SGD:          C + (eps/4mn) sum_k ||grad C_k||^2
* shuffle-averaged:    C + (eps/4)||grad C||^2 + ((N-B)/(N-1)) (eps/4B) Gamma

with Gamma the per-example gradient variance trace. All gradients are exact
(assembled from HVPs); finite differences appear only in test oracles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .batching import BatchPartition
from .models import LossModel

__all__ = [
    "FlowSpec",
    "c_reg",
    "modified_loss_gd",
    "modified_loss_sgd",
    "modified_loss_sgd_expanded",
    "modified_loss_nsgd",
    "gamma_trace",
    "gamma_trace_grad",
    "expected_modified_loss",
    "flow_loss",
    "modified_flow_gradient",
    "integrate_flow",
]

FLOW_KINDS = (
    "original",
    "gd_modified",
    "sgd_modified",
    "nsgd_modified",
    "expected_sgd_modified",
)


@dataclass(frozen=True)
class FlowSpec:
    """Which modified loss to flow on, for how long, and how finely.

    ``substeps_per_unit`` is the RK4 resolution K: the step size is 1/K, so
    K * t_total must land on an integer step count. ``t_total`` may be 0,
    in which case integration returns the initial point.
    """

    loss_kind: str
    t_total: float
    substeps_per_unit: float = 1000.0
    epsilon: float = 0.0
    partition: BatchPartition | None = None
    n_step: int = 1
    batch_size: int | None = None

    def __post_init__(self):
        if self.loss_kind not in FLOW_KINDS:
            raise ValueError(
                f"unknown flow kind {self.loss_kind!r}; expected one of {FLOW_KINDS}"
            )
        if self.t_total < 0:
            raise ValueError("t_total must be >= 0")
        if self.substeps_per_unit < 100:
            raise ValueError("substeps_per_unit must be >= 100")
        if self.loss_kind != "original":
            if self.epsilon < 0:
                raise ValueError("epsilon must be >= 0")
        if self.loss_kind in ("sgd_modified", "nsgd_modified"):
            if self.partition is None:
                raise ValueError(f"{self.loss_kind} flow needs a partition")
        if self.loss_kind == "nsgd_modified" and self.n_step < 1:
            raise ValueError("n_step must be >= 1")
        if self.loss_kind == "expected_sgd_modified" and self.batch_size is None:
            raise ValueError("expected_sgd_modified flow needs batch_size")


def c_reg(model: LossModel, params, partition: BatchPartition) -> float:
    """Implicit regularizer (1/4m) sum_k ||batch_grad_k||^2."""
    total = 0.0
    for k in range(partition.m):
        g = model.batch_grad(params, partition.batch(k))
        total += float(g @ g)
    return total / (4.0 * partition.m)


def modified_loss_gd(model: LossModel, params, epsilon: float) -> float:
    """C + (eps/4) ||grad C||^2, the loss whose flow full-batch GD follows."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    g = model.full_grad(params)
    return model.full_loss(params) + 0.25 * epsilon * float(g @ g)


def modified_loss_sgd(
    model: LossModel, params, partition: BatchPartition, epsilon: float
) -> float:
    """C + eps * c_reg, the loss whose flow the mean SGD iterate follows."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    return model.full_loss(params) + epsilon * c_reg(model, params, partition)


def modified_loss_sgd_expanded(
    model: LossModel, params, partition: BatchPartition, epsilon: float
) -> float:
    """Same value split as C + (eps/4)||grad C||^2 + (eps/4m) sum ||grad C_k - grad C||^2.

    Equality with ``modified_loss_sgd`` is an algebraic identity (the batch
    gradient deviations sum to zero), kept as a separate code path so tests
    can confirm it numerically.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    full_g = model.full_grad(params)
    dev = 0.0
    for k in range(partition.m):
        d = model.batch_grad(params, partition.batch(k)) - full_g
        dev += float(d @ d)
    return (
        model.full_loss(params)
        + 0.25 * epsilon * float(full_g @ full_g)
        + epsilon * dev / (4.0 * partition.m)
    )


def modified_loss_nsgd(
    model: LossModel, params, partition: BatchPartition, epsilon: float, n: int
) -> float:
    """C + (eps/4mn) sum_k ||batch_grad_k||^2 for n gradient steps per batch."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    return model.full_loss(params) + epsilon * c_reg(model, params, partition) / n


def _per_example_grads(model: LossModel, params) -> np.ndarray:
    return np.stack(
        [model.per_example_grad(params, i) for i in range(model.n_examples)]
    )


def gamma_trace(model: LossModel, params) -> float:
    """Trace of the per-example gradient covariance: (1/N) sum ||grad C_i - grad C||^2."""
    grads = _per_example_grads(model, params)
    dev = grads - model.full_grad(params)
    return float(np.mean(np.einsum("ij,ij->i", dev, dev)))


def gamma_trace_grad(model: LossModel, params) -> np.ndarray:
    """Exact gradient of gamma_trace: (2/N) sum (H_i - H)(grad C_i - grad C)."""
    grads = _per_example_grads(model, params)
    dev = grads - model.full_grad(params)
    n = model.n_examples
    acc = np.zeros(model.dim)
    for i in range(n):
        acc += model.batch_hvp(params, [i], dev[i])
    acc -= model.full_hvp(params, dev.sum(axis=0))
    return 2.0 * acc / n


def expected_modified_loss(
    model: LossModel, params, epsilon: float, batch_size: int
) -> float:
    """Modified loss averaged over batch compositions:

    C + (eps/4)||grad C||^2 + ((N-B)/(N-1)) (eps/4B) Gamma. The variance term
    is defined as 0 when N = 1 (no gradient diversity to average over).
    """
    n = model.n_examples
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch_size must be in [1, {n}]")
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    base = modified_loss_gd(model, params, epsilon)
    if n == 1:
        return base
    coef = (n - batch_size) / (n - 1) * epsilon / (4.0 * batch_size)
    return base + coef * gamma_trace(model, params)


def flow_loss(model: LossModel, params, flow: FlowSpec) -> float:
    """Value of the loss selected by ``flow`` at ``params``."""
    kind = flow.loss_kind
    if kind == "original":
        return model.full_loss(params)
    if kind == "gd_modified":
        return modified_loss_gd(model, params, flow.epsilon)
    if kind == "sgd_modified":
        return modified_loss_sgd(model, params, flow.partition, flow.epsilon)
    if kind == "nsgd_modified":
        return modified_loss_nsgd(
            model, params, flow.partition, flow.epsilon, flow.n_step
        )
    return expected_modified_loss(model, params, flow.epsilon, flow.batch_size)


def modified_flow_gradient(model: LossModel, params, flow: FlowSpec) -> np.ndarray:
    """Exact gradient of the loss selected by ``flow`` (no finite differences)."""
    kind = flow.loss_kind
    g = model.full_grad(params)
    if kind == "original":
        return g
    eps = flow.epsilon
    if kind == "gd_modified":
        return g + 0.25 * eps * model.grad_sq_norm_grad(params)
    if kind in ("sgd_modified", "nsgd_modified"):
        part = flow.partition
        acc = np.zeros(model.dim)
        for k in range(part.m):
            acc += model.grad_sq_norm_grad(params, part.batch(k))
        scale = eps / (4.0 * part.m)
        if kind == "nsgd_modified":
            scale /= flow.n_step
        return g + scale * acc
    # expected_sgd_modified
    n = model.n_examples
    out = g + 0.25 * eps * model.grad_sq_norm_grad(params)
    if n > 1:
        coef = (n - flow.batch_size) / (n - 1) * eps / (4.0 * flow.batch_size)
        out = out + coef * gamma_trace_grad(model, params)
    return out


def integrate_flow(model: LossModel, init_params, flow: FlowSpec) -> np.ndarray:
    """Classical fixed-step RK4 for d(omega)/dt = -grad(selected loss).

    The step count K * t_total must be integral so the trajectory lands
    exactly on t_total.
    """
    params = model.check_params(init_params).copy()
    t = flow.t_total
    if t == 0.0:
        return params
    raw = flow.substeps_per_unit * t
    steps = int(round(raw))
    if steps < 1 or abs(raw - steps) > 1e-9 * max(1.0, raw):
        raise ValueError(
            f"substeps_per_unit * t_total = {raw} must be a positive integer "
            "step count"
        )
    h = t / steps

    def rhs(w):
        return -modified_flow_gradient(model, w, flow)

    for step in range(steps):
        k1 = rhs(params)
        k2 = rhs(params + 0.5 * h * k1)
        k3 = rhs(params + 0.5 * h * k2)
        k4 = rhs(params + h * k3)
        params = params + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(params)):
            raise FloatingPointError(
                f"flow state became non-finite at step {step + 1}/{steps}"
            )
    return params

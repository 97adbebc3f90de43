"""Discrete update rules and the multi-epoch training loop.

One engine drives every variant: for each batch in the epoch's ordering it
takes ``n_step`` consecutive steps of size alpha along the batch gradient,
optionally augmented with the explicit regularizer gradient
(lambda/4) * grad ||batch_grad||^2. Plain SGD is n_step=1, lambda=0; full-batch
GD is the single-batch case. With lambda=0 the regularizer code path is never
entered, so those runs are bitwise identical to plain SGD.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .batching import BatchPartition, make_partition, palindromic_schedule, sample_ordering
from .data import Dataset
from .flows import c_reg
from .models import LossModel

__all__ = [
    "DivergenceError",
    "TrainConfig",
    "EpochRow",
    "RunRecord",
    "gd_step",
    "sgd_epoch",
    "nstep_sgd_epoch",
    "modified_loss_sgd_epoch",
    "run_schedule",
    "train",
    "derive_seed",
]

DIVERGENCE_LIMIT = 1e12

SCHEDULE_KINDS = ("in_order", "shuffled", "palindromic")
LR_DECAY_KINDS = ("none", "step_halving")


class DivergenceError(RuntimeError):
    """Raised when an iterate or gradient stops being finite."""


def derive_seed(*parts: int) -> int:
    """Stable child seed from integer parts (documented derivation scheme)."""
    ss = np.random.SeedSequence([int(p) for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one training run.

    ``epsilon`` is the effective learning rate; with ``n_step`` n > 1 each
    batch receives n consecutive steps at the bare rate epsilon/n.
    ``lambda_`` scales the explicit per-batch regularizer; ``weight_decay``
    adds (wd/2)||w||^2 to every per-example loss so it propagates into batch
    gradients, HVPs, and the implicit regularizer alike. ``eval_every``
    controls the metric cadence: losses, accuracies, and diagnostics are
    recorded every that-many epochs (plus always the last one), which keeps
    long desk-scale runs from spending most of their time on evaluation.
    """

    epsilon: float
    batch_size: int
    epochs: int
    lambda_: float = 0.0
    n_step: int = 1
    weight_decay: float = 0.0
    schedule_kind: str = "in_order"
    lr_decay: str = "none"
    reshuffle_each_epoch: bool = True
    seed: int = 0
    eval_every: int = 1

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.lambda_ < 0:
            raise ValueError("lambda must be >= 0")
        if self.n_step < 1:
            raise ValueError("n_step must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.schedule_kind not in SCHEDULE_KINDS:
            raise ValueError(
                f"schedule_kind must be one of {SCHEDULE_KINDS}, got {self.schedule_kind!r}"
            )
        if self.lr_decay not in LR_DECAY_KINDS:
            raise ValueError(
                f"lr_decay must be one of {LR_DECAY_KINDS}, got {self.lr_decay!r}"
            )
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    def learning_rate(self, epoch: int) -> float:
        """Rate for a 0-based epoch: constant, or constant for the first half
        then halved at the start of each remaining tenth of the run."""
        if self.lr_decay == "none" or self.epochs == 0:
            return self.epsilon
        # integer arithmetic so tenth-of-run boundaries land exactly
        if 2 * epoch < self.epochs:
            return self.epsilon
        halvings = (5 * (2 * epoch - self.epochs)) // self.epochs + 1
        return self.epsilon / (2.0**halvings)


@dataclass(frozen=True)
class EpochRow:
    epoch: int
    train_loss: float
    train_accuracy: float
    test_loss: float
    test_accuracy: float
    c_reg_value: float
    grad_norm_sq: float


@dataclass
class RunRecord:
    """Per-epoch metrics plus the final parameter state of one run."""

    rows: list[EpochRow]
    final_params: np.ndarray
    config: TrainConfig
    seed: int
    diverged: bool = False

    @property
    def params_digest(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.final_params).tobytes()).hexdigest()

    def best_test_accuracy(self) -> float:
        if not self.rows:
            return float("nan")
        return max(r.test_accuracy for r in self.rows)

    def final_test_accuracy(self) -> float:
        return self.rows[-1].test_accuracy if self.rows else float("nan")

    def final_c_reg(self) -> float:
        return self.rows[-1].c_reg_value if self.rows else float("nan")


def _check_state(params: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(params)) or np.max(np.abs(params)) > DIVERGENCE_LIMIT:
        raise DivergenceError(f"iterate diverged at {where}")


def gd_step(model: LossModel, params, epsilon: float) -> np.ndarray:
    """One full-batch step w - eps * grad C(w)."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    params = model.check_params(params)
    g = model.full_grad(params)
    if not np.all(np.isfinite(g)):
        raise DivergenceError("full gradient non-finite in gd_step")
    return params - epsilon * g


def _step_gradient(model: LossModel, params, batch, lambda_: float) -> np.ndarray:
    g = model.batch_grad(params, batch)
    if lambda_:
        g = g + 0.25 * lambda_ * model.grad_sq_norm_grad(params, batch)
    return g


def run_schedule(
    model: LossModel,
    params,
    partition: BatchPartition,
    ordering: Sequence[int],
    alpha: float,
    lambda_: float = 0.0,
    n_step: int = 1,
) -> np.ndarray:
    """Visit batches in ``ordering``, taking n_step size-alpha steps on each."""
    if not alpha >= 0:
        raise ValueError("step size must be >= 0")
    if n_step < 1:
        raise ValueError("n_step must be >= 1")
    params = model.check_params(params).copy()
    for pos, k in enumerate(ordering):
        if not 0 <= k < partition.m:
            raise ValueError(f"ordering entry {k} is not a batch index (m={partition.m})")
        batch = partition.batch(k)
        for rep in range(n_step):
            params = params - alpha * _step_gradient(model, params, batch, lambda_)
            if not np.all(np.isfinite(params)) or np.max(np.abs(params)) > DIVERGENCE_LIMIT:
                raise DivergenceError(
                    f"iterate diverged at schedule position {pos} (batch {k}, "
                    f"step {rep + 1}/{n_step})"
                )
    return params


def _require_permutation(ordering: Sequence[int], m: int) -> None:
    if sorted(ordering) != list(range(m)):
        raise ValueError("ordering must be a permutation of 0..m-1")


def sgd_epoch(
    model: LossModel,
    params,
    partition: BatchPartition,
    ordering: Sequence[int],
    epsilon: float,
) -> np.ndarray:
    """One pass: m sequential batch-gradient steps in the given order."""
    _require_permutation(ordering, partition.m)
    return run_schedule(model, params, partition, ordering, epsilon)


def nstep_sgd_epoch(
    model: LossModel,
    params,
    partition: BatchPartition,
    ordering: Sequence[int],
    n: int,
    alpha: float,
) -> np.ndarray:
    """One pass with n consecutive bare-rate steps on each batch before moving on."""
    _require_permutation(ordering, partition.m)
    return run_schedule(model, params, partition, ordering, alpha, n_step=n)


def modified_loss_sgd_epoch(
    model: LossModel,
    params,
    partition: BatchPartition,
    ordering: Sequence[int],
    epsilon: float,
    lambda_: float,
) -> np.ndarray:
    """One pass where each step also descends (lambda/4)||batch_grad||^2."""
    if lambda_ < 0:
        raise ValueError("lambda must be >= 0")
    _require_permutation(ordering, partition.m)
    return run_schedule(model, params, partition, ordering, epsilon, lambda_=lambda_)


def _epoch_ordering(config: TrainConfig, m: int, epoch: int) -> tuple[int, ...]:
    if config.schedule_kind == "in_order":
        return tuple(range(m))
    if config.schedule_kind == "shuffled":
        rng = np.random.default_rng(derive_seed(config.seed, 1, epoch))
        return sample_ordering(m, rng)
    return palindromic_schedule(m).ordering


def train(
    model: LossModel,
    init_params,
    config: TrainConfig,
    test_data: Dataset | None = None,
) -> RunRecord:
    """Run ``config.epochs`` epochs of the configured variant and log metrics.

    Each epoch draws a fresh seeded partition when ``reshuffle_each_epoch`` is
    on; otherwise the initial in-order partition is reused. A palindromic
    schedule makes each recorded epoch a forward-plus-reverse double pass.
    Divergence truncates the record and sets the ``diverged`` flag. Everything
    is deterministic given the config.
    """
    if config.weight_decay > 0:
        model = model.with_l2(config.weight_decay)
    params = model.check_params(init_params).copy()
    if model.n_examples % config.batch_size != 0:
        raise ValueError(
            f"batch size must divide dataset size (N={model.n_examples}, "
            f"B={config.batch_size})"
        )
    test_model = None
    if test_data is not None:
        test_model = model.rebind(test_data)

    rows: list[EpochRow] = []
    diverged = False
    partition = make_partition(model.n_examples, config.batch_size)
    for epoch in range(config.epochs):
        if config.reshuffle_each_epoch:
            partition = make_partition(
                model.n_examples,
                config.batch_size,
                shuffle_seed=derive_seed(config.seed, 0, epoch),
            )
        ordering = _epoch_ordering(config, partition.m, epoch)
        lr = config.learning_rate(epoch) / config.n_step
        try:
            params = run_schedule(
                model,
                params,
                partition,
                ordering,
                lr,
                lambda_=config.lambda_,
                n_step=config.n_step,
            )
        except DivergenceError:
            diverged = True
            break
        if (epoch + 1) % config.eval_every != 0 and epoch != config.epochs - 1:
            continue
        g = model.full_grad(params)
        acc = model.accuracy(params) if hasattr(model, "accuracy") else float("nan")
        if test_model is not None:
            test_loss = test_model.full_loss(params)
            test_acc = test_model.accuracy(params)
        else:
            test_loss = float("nan")
            test_acc = float("nan")
        rows.append(
            EpochRow(
                epoch=epoch + 1,
                train_loss=model.full_loss(params),
                train_accuracy=acc,
                test_loss=test_loss,
                test_accuracy=test_acc,
                c_reg_value=c_reg(model, params, partition),
                grad_norm_sq=float(g @ g),
            )
        )
    return RunRecord(
        rows=rows, final_params=params, config=config, seed=config.seed, diverged=diverged
    )

"""Differentiable model families: losses, gradients, and Hessian-vector products.

Every model binds its per-example data and exposes the same evaluation
surface over a flat float64 parameter vector:

* ``per_example_loss`` / ``batch_loss`` / ``full_loss``
* ``batch_grad`` / ``full_grad`` (mean of per-example gradients)
* ``batch_hvp`` / ``full_hvp`` (exact Hessian-vector products, no finite
  differences)
* ``grad_sq_norm_grad``: the gradient of ``||grad||^2``, assembled as
  ``2 * H(grad)`` from the exact HVP

All operations are pure: repeated calls with identical inputs return
bitwise-identical outputs. Batches are index arrays; examples are gathered in
ascending index order before reduction, and the full-batch quantities reuse
the batch code path so that a batch covering every index reproduces them
bitwise.

An optional L2 term ``(l2/2)*||w||^2`` can be attached with ``with_l2``; it is
added to every per-example loss, so it flows through batch gradients, HVPs,
and the implicit regularizer consistently.
"""

from __future__ import annotations

import copy
from typing import Sequence

import numpy as np

from .data import Dataset

__all__ = [
    "LossModel",
    "QuadraticEnsemble",
    "LogisticRegressionModel",
    "SmallMlp",
    "random_quadratic_ensemble",
]

ArrayLike = Sequence[float] | np.ndarray


class LossModel:
    """Base of the model families: C(w) = (1/N) sum_j C_j(w) plus optional L2."""

    dim: int
    n_examples: int
    l2: float = 0.0

    # subclass surface: data term only, on a canonical sorted index array
    def _batch_loss(self, params: np.ndarray, idx: np.ndarray) -> float:
        raise NotImplementedError

    def _batch_grad(self, params: np.ndarray, idx: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _batch_hvp(self, params: np.ndarray, idx: np.ndarray, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    # -- validation helpers -------------------------------------------------

    def check_params(self, params: ArrayLike) -> np.ndarray:
        arr = np.asarray(params, dtype=np.float64)
        if arr.shape != (self.dim,):
            raise ValueError(
                f"parameter vector has shape {arr.shape}, model expects ({self.dim},)"
            )
        return arr

    def check_batch(self, batch: ArrayLike) -> np.ndarray:
        idx = np.asarray(batch, dtype=np.int64).ravel()
        if idx.size == 0:
            raise ValueError("batch must not be empty")
        if idx.min() < 0 or idx.max() >= self.n_examples:
            raise IndexError(
                f"batch indices must lie in [0, {self.n_examples}), got "
                f"[{idx.min()}, {idx.max()}]"
            )
        return np.sort(idx)

    def _all_indices(self) -> np.ndarray:
        return np.arange(self.n_examples, dtype=np.int64)

    # -- public evaluation surface -------------------------------------------

    def per_example_loss(self, params: ArrayLike, i: int) -> float:
        if not 0 <= i < self.n_examples:
            raise IndexError(f"example index {i} out of range [0, {self.n_examples})")
        return self.batch_loss(params, np.array([i]))

    def per_example_grad(self, params: ArrayLike, i: int) -> np.ndarray:
        if not 0 <= i < self.n_examples:
            raise IndexError(f"example index {i} out of range [0, {self.n_examples})")
        return self.batch_grad(params, np.array([i]))

    def batch_loss(self, params: ArrayLike, batch: ArrayLike) -> float:
        params = self.check_params(params)
        idx = self.check_batch(batch)
        val = self._batch_loss(params, idx)
        if self.l2:
            val += 0.5 * self.l2 * float(params @ params)
        return val

    def batch_grad(self, params: ArrayLike, batch: ArrayLike) -> np.ndarray:
        params = self.check_params(params)
        idx = self.check_batch(batch)
        g = self._batch_grad(params, idx)
        if self.l2:
            g = g + self.l2 * params
        return g

    def batch_hvp(self, params: ArrayLike, batch: ArrayLike, v: ArrayLike) -> np.ndarray:
        params = self.check_params(params)
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.dim,):
            raise ValueError(f"hvp vector has shape {v.shape}, expected ({self.dim},)")
        idx = self.check_batch(batch)
        hv = self._batch_hvp(params, idx, v)
        if self.l2:
            hv = hv + self.l2 * v
        return hv

    def full_loss(self, params: ArrayLike) -> float:
        return self.batch_loss(params, self._all_indices())

    def full_grad(self, params: ArrayLike) -> np.ndarray:
        return self.batch_grad(params, self._all_indices())

    def full_hvp(self, params: ArrayLike, v: ArrayLike) -> np.ndarray:
        return self.batch_hvp(params, self._all_indices(), v)

    def grad_sq_norm_grad(self, params: ArrayLike, batch: ArrayLike | None = None) -> np.ndarray:
        """Gradient of ||batch_grad||^2, i.e. 2 * H_batch(batch_grad)."""
        if batch is None:
            batch = self._all_indices()
        g = self.batch_grad(params, batch)
        return 2.0 * self.batch_hvp(params, batch, g)

    # -- configuration --------------------------------------------------------

    def with_l2(self, coef: float) -> "LossModel":
        """Copy of the model with L2 coefficient ``coef`` in every per-example loss."""
        if coef < 0:
            raise ValueError("l2 coefficient must be >= 0")
        clone = copy.copy(self)
        clone.l2 = float(coef)
        return clone

    def random_params(self, seed: int, scale: float = 1.0) -> np.ndarray:
        """Seeded Gaussian parameter draw, handy for randomized checks."""
        rng = np.random.default_rng(seed)
        return scale * rng.standard_normal(self.dim)


class QuadraticEnsemble(LossModel):
    """Per-example quadratics C_i(w) = w'A_i w / 2 + b_i'w + c_i.

    Gradients A_i w + b_i and the constant Hessians A_i are analytic, which
    makes this the reference family for exact expectation checks.
    """

    def __init__(self, a: ArrayLike, b: ArrayLike, c: ArrayLike):
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        c = np.asarray(c, dtype=np.float64)
        if a.ndim != 3 or a.shape[1] != a.shape[2]:
            raise ValueError(f"A must have shape (n, d, d), got {a.shape}")
        n, d, _ = a.shape
        if b.shape != (n, d) or c.shape != (n,):
            raise ValueError(
                f"b must be (n, d) and c (n,); got {b.shape} and {c.shape} for "
                f"n={n}, d={d}"
            )
        if not np.allclose(a, np.swapaxes(a, 1, 2), rtol=0, atol=1e-12):
            raise ValueError("every A_i must be symmetric")
        self.a = np.ascontiguousarray(a)
        self.b = np.ascontiguousarray(b)
        self.c = np.ascontiguousarray(c)
        self.n_examples = n
        self.dim = d

    def _batch_loss(self, params, idx):
        aw = self.a[idx] @ params
        vals = 0.5 * (aw @ params) + self.b[idx] @ params + self.c[idx]
        return float(np.mean(vals))

    def _batch_grad(self, params, idx):
        return np.mean(self.a[idx] @ params + self.b[idx], axis=0)

    def _batch_hvp(self, params, idx, v):
        return np.mean(self.a[idx] @ v, axis=0)


def random_quadratic_ensemble(
    n: int,
    dim: int,
    seed: int = 0,
    curv_min: float = 0.2,
    curv_max: float = 2.0,
) -> QuadraticEnsemble:
    """Random positive-definite ensemble with generically non-commuting Hessians.

    Each A_i = Q_i diag(lam_i) Q_i' with a Haar-ish orthogonal Q_i (QR of a
    Gaussian matrix) and eigenvalues uniform in [curv_min, curv_max]; b_i and
    c_i are standard normal.
    """
    if not 0 < curv_min <= curv_max:
        raise ValueError("need 0 < curv_min <= curv_max")
    rng = np.random.default_rng(seed)
    a = np.empty((n, dim, dim))
    for i in range(n):
        q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
        q = q * np.sign(np.diag(r))[None, :]
        lam = rng.uniform(curv_min, curv_max, size=dim)
        mat = (q * lam[None, :]) @ q.T
        a[i] = 0.5 * (mat + mat.T)
    b = rng.standard_normal((n, dim))
    c = rng.standard_normal(n)
    return QuadraticEnsemble(a, b, c)


def _sigmoid(u: np.ndarray) -> np.ndarray:
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    eu = np.exp(u[~pos])
    out[~pos] = eu / (1.0 + eu)
    return out


class LogisticRegressionModel(LossModel):
    """Binary logistic regression with bias; targets are class indices {0, 1}.

    Parameters are [w_0..w_{k-1}, bias]. Per-example loss is the logistic
    loss log(1 + exp(-s*u)) with u = w'x + bias and s = +-1; gradient and
    Hessian are analytic.
    """

    def __init__(self, dataset: Dataset):
        if not dataset.is_classification:
            raise ValueError("logistic regression needs class-index targets")
        if dataset.targets.min() < 0 or dataset.targets.max() > 1:
            raise ValueError("logistic regression targets must be in {0, 1}")
        self.dataset = dataset
        self.x = dataset.features
        self.y = dataset.targets.astype(np.float64)
        self.n_examples = dataset.n
        self.dim = dataset.n_features + 1

    def rebind(self, dataset: Dataset) -> "LogisticRegressionModel":
        """Same architecture (and L2) bound to different examples."""
        if dataset.n_features != self.x.shape[1]:
            raise ValueError("feature dimension mismatch")
        clone = LogisticRegressionModel(dataset)
        clone.l2 = self.l2
        return clone

    def init_params(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        s = 1.0 / np.sqrt(self.dim - 1)
        w = rng.uniform(-s, s, size=self.dim - 1)
        return np.concatenate([w, [0.0]])

    def _margins(self, params, idx):
        return self.x[idx] @ params[:-1] + params[-1]

    def _batch_loss(self, params, idx):
        u = self._margins(params, idx)
        s = 2.0 * self.y[idx] - 1.0
        return float(np.mean(np.logaddexp(0.0, -s * u)))

    def _batch_grad(self, params, idx):
        u = self._margins(params, idx)
        r = (_sigmoid(u) - self.y[idx]) / idx.size
        g = np.empty(self.dim)
        g[:-1] = self.x[idx].T @ r
        g[-1] = r.sum()
        return g

    def _batch_hvp(self, params, idx, v):
        u = self._margins(params, idx)
        p = _sigmoid(u)
        t = self.x[idx] @ v[:-1] + v[-1]
        q = p * (1.0 - p) * t / idx.size
        hv = np.empty(self.dim)
        hv[:-1] = self.x[idx].T @ q
        hv[-1] = q.sum()
        return hv

    def predict(self, params: ArrayLike, features: np.ndarray) -> np.ndarray:
        params = self.check_params(params)
        return (features @ params[:-1] + params[-1] > 0).astype(np.int64)

    def accuracy(self, params: ArrayLike, dataset: Dataset | None = None) -> float:
        data = self.dataset if dataset is None else dataset
        return float(np.mean(self.predict(params, data.features) == data.targets))


def _act_tables(kind: str):
    if kind == "tanh":

        def act(z):
            t = np.tanh(z)
            return t, 1.0 - t * t, -2.0 * t * (1.0 - t * t)

    elif kind == "relu":

        def act(z):
            # subgradient convention: derivative(0) = 0
            mask = (z > 0).astype(np.float64)
            return z * mask, mask, np.zeros_like(z)

    else:
        raise ValueError(f"unknown activation {kind!r} (want 'tanh' or 'relu')")
    return act


class SmallMlp(LossModel):
    """Fully connected MLP with a softmax cross-entropy head.

    ``widths`` lists layer sizes including input and output (e.g. [2, 3, 2]);
    targets are class indices below the output width. Gradients come from
    reverse accumulation; HVPs from forward-over-reverse accumulation
    (tangent-carrying forward and backward passes), so both are exact up to
    float rounding. With relu, second derivatives use the derivative(0)=0
    convention and are exact away from the kinks.
    """

    def __init__(self, dataset: Dataset, widths: Sequence[int], activation: str = "tanh"):
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ValueError(f"widths must list >= 2 positive layer sizes, got {widths}")
        if not dataset.is_classification:
            raise ValueError("SmallMlp needs class-index targets")
        if dataset.n_features != widths[0]:
            raise ValueError(
                f"dataset has {dataset.n_features} features but input width is {widths[0]}"
            )
        if dataset.targets.min() < 0 or dataset.targets.max() >= widths[-1]:
            raise ValueError("targets must be class indices below the output width")
        self.dataset = dataset
        self.widths = widths
        self.activation = activation
        self._act = _act_tables(activation)
        self.x = dataset.features
        self.y = dataset.targets
        self.n_examples = dataset.n
        self.dim = sum(wo * wi + wo for wi, wo in zip(widths[:-1], widths[1:]))

    def rebind(self, dataset: Dataset) -> "SmallMlp":
        clone = SmallMlp(dataset, self.widths, self.activation)
        clone.l2 = self.l2
        return clone

    def init_params(self, seed: int) -> np.ndarray:
        """Uniform(-s, s) weights with s = 1/sqrt(fan_in); zero biases."""
        rng = np.random.default_rng(seed)
        chunks = []
        for wi, wo in zip(self.widths[:-1], self.widths[1:]):
            s = 1.0 / np.sqrt(wi)
            chunks.append(rng.uniform(-s, s, size=wo * wi))
            chunks.append(np.zeros(wo))
        return np.concatenate(chunks)

    def unpack(self, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        layers = []
        off = 0
        for wi, wo in zip(self.widths[:-1], self.widths[1:]):
            w = params[off : off + wo * wi].reshape(wo, wi)
            off += wo * wi
            b = params[off : off + wo]
            off += wo
            layers.append((w, b))
        return layers

    def _forward(self, layers, xb):
        """Activations a_l and pre-activations z_l for a feature block."""
        a = [xb]
        zs = []
        for li, (w, b) in enumerate(layers):
            z = a[-1] @ w.T + b
            zs.append(z)
            if li < len(layers) - 1:
                a.append(self._act(z)[0])
        return a, zs

    @staticmethod
    def _softmax(logits):
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)

    def _batch_loss(self, params, idx):
        layers = self.unpack(params)
        _, zs = self._forward(layers, self.x[idx])
        logits = zs[-1]
        shifted = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1)) + logits.max(axis=1)
        picked = logits[np.arange(idx.size), self.y[idx]]
        return float(np.mean(lse - picked))

    def _output_delta(self, logits, yb):
        p = self._softmax(logits)
        delta = p.copy()
        delta[np.arange(yb.size), yb] -= 1.0
        return p, delta / yb.size

    def _batch_grad(self, params, idx):
        layers = self.unpack(params)
        xb, yb = self.x[idx], self.y[idx]
        a, zs = self._forward(layers, xb)
        _, dz = self._output_delta(zs[-1], yb)
        grads = [None] * len(layers)
        for li in range(len(layers) - 1, -1, -1):
            w, _ = layers[li]
            grads[li] = (dz.T @ a[li], dz.sum(axis=0))
            if li > 0:
                da = dz @ w
                dz = da * self._act(zs[li - 1])[1]
        return np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])

    def _batch_hvp(self, params, idx, v):
        layers = self.unpack(params)
        tangents = self.unpack(v)
        xb, yb = self.x[idx], self.y[idx]

        # tangent-carrying forward pass
        a = [xb]
        ra = [np.zeros_like(xb)]
        zs, rzs, d1s, d2s = [], [], [], []
        for li, ((w, b), (vw, vb)) in enumerate(zip(layers, tangents)):
            z = a[-1] @ w.T + b
            rz = ra[-1] @ w.T + a[-1] @ vw.T + vb
            zs.append(z)
            rzs.append(rz)
            if li < len(layers) - 1:
                act, d1, d2 = self._act(z)
                d1s.append(d1)
                d2s.append(d2)
                a.append(act)
                ra.append(d1 * rz)

        # tangent-carrying backward pass
        p, dz = self._output_delta(zs[-1], yb)
        inner = (p * rzs[-1]).sum(axis=1, keepdims=True)
        rdz = (p * rzs[-1] - p * inner) / yb.size
        out = [None] * len(layers)
        for li in range(len(layers) - 1, -1, -1):
            w, _ = layers[li]
            vw, _ = tangents[li]
            out[li] = (rdz.T @ a[li] + dz.T @ ra[li], rdz.sum(axis=0))
            if li > 0:
                da = dz @ w
                rda = rdz @ w + dz @ vw
                rdz = rda * d1s[li - 1] + da * d2s[li - 1] * rzs[li - 1]
                dz = da * d1s[li - 1]
        return np.concatenate([np.concatenate([hw.ravel(), hb]) for hw, hb in out])

    def logits(self, params: ArrayLike, features: np.ndarray) -> np.ndarray:
        params = self.check_params(params)
        layers = self.unpack(params)
        _, zs = self._forward(layers, np.asarray(features, dtype=np.float64))
        return zs[-1]

    def predict(self, params: ArrayLike, features: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(params, features), axis=1)

    def accuracy(self, params: ArrayLike, dataset: Dataset | None = None) -> float:
        data = self.dataset if dataset is None else dataset
        return float(np.mean(self.predict(params, data.features) == data.targets))

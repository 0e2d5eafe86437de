"""Differentiable models and the proximally regularized client objective.

Two model families are supported, both operating on a single flat float64
parameter vector:

* ``mlr``  -- multinomial logistic regression with an L2 penalty,
  loss = mean softmax cross-entropy + (l2_coeff / 2) * ||params||^2.
* ``mlp1`` -- one-hidden-layer ReLU network with a softmax output.

The flat layout is fixed: layer by layer, row-major weight matrix first,
then the bias vector. Gradients are hand-derived and checked against a
finite-difference oracle in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError

MLR = "mlr"
MLP1 = "mlp1"


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; all parameter vectors are validated against it."""

    kind: str
    input_dim: int
    num_classes: int
    hidden_dim: int = 0
    l2_coeff: float = 0.0

    def __post_init__(self):
        if self.kind not in (MLR, MLP1):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1 or self.num_classes < 1:
            raise ConfigError("input_dim and num_classes must be positive")
        if self.l2_coeff < 0:
            raise ConfigError("l2_coeff must be non-negative")
        if self.kind == MLR and self.hidden_dim != 0:
            raise ConfigError("mlr has no hidden layer; set hidden_dim=0")
        if self.kind == MLP1:
            if self.hidden_dim < 1:
                raise ConfigError("mlp1 requires hidden_dim >= 1")
            if self.l2_coeff != 0.0:
                raise ConfigError("l2_coeff is mlr-only; set 0 for mlp1")

    @property
    def dim(self) -> int:
        """Length of the flat parameter vector."""
        f, h, c = self.input_dim, self.hidden_dim, self.num_classes
        if self.kind == MLR:
            return c * f + c
        return h * f + h + c * h + c


@dataclass
class Batch:
    """A mini-batch: features (b, input_dim) and integer labels (b,)."""

    features: np.ndarray
    labels: np.ndarray


def validate_batch(spec: ModelSpec, batch: Batch) -> None:
    if batch.features.ndim != 2 or batch.features.shape[1] != spec.input_dim:
        raise ConfigError(
            f"batch features shape {batch.features.shape} does not match "
            f"input_dim={spec.input_dim}"
        )
    if batch.features.shape[0] < 1:
        raise ConfigError("batch must contain at least one sample")
    if batch.labels.shape != (batch.features.shape[0],):
        raise ConfigError("labels must be one integer per sample")
    if batch.labels.min() < 0 or batch.labels.max() >= spec.num_classes:
        raise ConfigError("label out of range for num_classes")


def _check_params(spec: ModelSpec, params: np.ndarray) -> None:
    if params.shape != (spec.dim,):
        raise ConfigError(
            f"parameter vector has shape {params.shape}, expected ({spec.dim},)"
        )


def unflatten(spec: ModelSpec, params: np.ndarray) -> tuple[np.ndarray, ...]:
    """Views of the weight/bias blocks: (W, b) for mlr, (W1, b1, W2, b2) for mlp1."""
    _check_params(spec, params)
    f, h, c = spec.input_dim, spec.hidden_dim, spec.num_classes
    if spec.kind == MLR:
        return params[: c * f].reshape(c, f), params[c * f :]
    o1 = h * f
    o2 = o1 + h
    o3 = o2 + c * h
    return (
        params[:o1].reshape(h, f),
        params[o1:o2],
        params[o2:o3].reshape(c, h),
        params[o3:],
    )


def init_params(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Draw a flat parameter vector, each layer uniform in [-s, s], s = 1/sqrt(fan_in)."""
    f, h, c = spec.input_dim, spec.hidden_dim, spec.num_classes
    if spec.kind == MLR:
        s = 1.0 / np.sqrt(f)
        return rng.uniform(-s, s, size=spec.dim)
    s1 = 1.0 / np.sqrt(f)
    s2 = 1.0 / np.sqrt(h)
    parts = [
        rng.uniform(-s1, s1, size=h * f + h),
        rng.uniform(-s2, s2, size=c * h + c),
    ]
    return np.concatenate(parts)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    # max-subtraction keeps exp() finite for any logit magnitude
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _forward_mlp1(spec, params, x):
    w1, b1, w2, b2 = unflatten(spec, params)
    pre = x @ w1.T + b1
    hidden = np.maximum(pre, 0.0)
    return pre, hidden, hidden @ w2.T + b2


def logits(spec: ModelSpec, params: np.ndarray, features: np.ndarray) -> np.ndarray:
    if spec.kind == MLR:
        w, b = unflatten(spec, params)
        return features @ w.T + b
    return _forward_mlp1(spec, params, features)[2]


def predict(spec: ModelSpec, params: np.ndarray, features: np.ndarray) -> np.ndarray:
    """Argmax class labels; ties resolve to the lowest class index."""
    return np.argmax(logits(spec, params, features), axis=1)


def loss(spec: ModelSpec, params: np.ndarray, batch: Batch) -> float:
    """Mean cross-entropy over the batch, plus the mlr L2 penalty."""
    validate_batch(spec, batch)
    logp = _log_softmax(logits(spec, params, batch.features))
    value = -float(np.mean(logp[np.arange(batch.labels.size), batch.labels]))
    if spec.kind == MLR and spec.l2_coeff > 0.0:
        value += 0.5 * spec.l2_coeff * float(params @ params)
    if not np.isfinite(value):
        raise NumericalError("non-finite loss")
    return value


def grad(spec: ModelSpec, params: np.ndarray, batch: Batch) -> np.ndarray:
    """Analytic gradient of :func:`loss` with respect to the flat parameters."""
    validate_batch(spec, batch)
    x, y = batch.features, batch.labels
    b = y.size
    out = np.empty(spec.dim)
    if spec.kind == MLR:
        w, bias = unflatten(spec, params)
        logp = _log_softmax(x @ w.T + bias)
        dz = np.exp(logp)
        dz[np.arange(b), y] -= 1.0
        dz /= b
        gw, gb = unflatten(spec, out)
        np.matmul(dz.T, x, out=gw)
        np.sum(dz, axis=0, out=gb)
        if spec.l2_coeff > 0.0:
            out += spec.l2_coeff * params
    else:
        w1, b1, w2, b2 = unflatten(spec, params)
        pre, hidden, z = _forward_mlp1(spec, params, x)
        dz = np.exp(_log_softmax(z))
        dz[np.arange(b), y] -= 1.0
        dz /= b
        dpre = (dz @ w2) * (pre > 0.0)
        gw1, gb1, gw2, gb2 = unflatten(spec, out)
        np.matmul(dpre.T, x, out=gw1)
        np.sum(dpre, axis=0, out=gb1)
        np.matmul(dz.T, hidden, out=gw2)
        np.sum(dz, axis=0, out=gb2)
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite gradient")
    return out


def personalized_objective(
    spec: ModelSpec,
    theta: np.ndarray,
    omega: np.ndarray,
    batch: Batch,
    lam: float,
) -> float:
    """loss(theta) + (lam / 2) * ||theta - omega||^2."""
    if theta.shape != omega.shape:
        raise ConfigError("theta and omega must have the same dimension")
    if lam < 0:
        raise ConfigError("lam must be non-negative")
    diff = theta - omega
    return loss(spec, theta, batch) + 0.5 * lam * float(diff @ diff)


def personalized_grad(
    spec: ModelSpec,
    theta: np.ndarray,
    omega: np.ndarray,
    batch: Batch,
    lam: float,
) -> np.ndarray:
    """grad(theta) + lam * (theta - omega)."""
    if theta.shape != omega.shape:
        raise ConfigError("theta and omega must have the same dimension")
    if lam < 0:
        raise ConfigError("lam must be non-negative")
    return grad(spec, theta, batch) + lam * (theta - omega)

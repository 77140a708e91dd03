"""Sigmoid MLP training in an arbitrary scalar format.

Every scalar operation of the forward pass, the loss, backpropagation and
the weight update goes through :mod:`hetfed.kernels` in the model's format,
with a fixed sequential accumulation order. The loss is mean binary
cross-entropy, so the output-layer delta is ``y_hat - y``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .kernels import Kernel, from_bits, kernel_for, to_bits
from .numfmt import F64, ScalarFormat, encode, decode
from .rng import SplitMix64

DEFAULT_DIMS = (5, 10, 10, 10, 10, 10, 1)
LOSS_EPS = 1e-7


class ShapeMismatch(ValueError):
    pass


class EmptyDataset(ValueError):
    pass


def default_layer_dims(features: int = 5, hidden_layers: int = 5, width: int = 10) -> tuple[int, ...]:
    """Input, ``hidden_layers`` sigmoid layers of ``width``, one sigmoid output."""
    return (features,) + (width,) * hidden_layers + (1,)


@dataclass(frozen=True)
class Matrix:
    """Dense row-major matrix of values of one format (held in a numpy carrier)."""

    values: np.ndarray
    fmt: ScalarFormat

    @classmethod
    def encode(cls, data, fmt: ScalarFormat) -> "Matrix":
        arr = np.atleast_2d(np.asarray(data, dtype=np.float64))
        return cls(kernel_for(fmt).round(arr), fmt)

    @classmethod
    def from_bits(cls, bits, fmt: ScalarFormat) -> "Matrix":
        return cls(from_bits(np.atleast_2d(bits), fmt), fmt)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def size(self) -> int:
        return self.values.size

    def bits(self) -> np.ndarray:
        return to_bits(self.values, self.fmt)

    def to(self, fmt: ScalarFormat) -> "Matrix":
        if fmt == self.fmt:
            return self
        return Matrix(kernel_for(fmt).round(self.values.astype(np.float64)), fmt)

    def as_float(self) -> np.ndarray:
        return self.values.astype(np.float64)

    def bit_equal(self, other: "Matrix") -> bool:
        return self.fmt == other.fmt and np.array_equal(self.bits(), other.bits())


@dataclass(frozen=True)
class Dataset:
    features: Matrix
    labels: Matrix  # (n, 1) of 0/1 in the features' format

    @classmethod
    def from_arrays(cls, x, y, fmt: ScalarFormat = F64) -> "Dataset":
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
        if x.shape[0] != y.shape[0]:
            raise ShapeMismatch(f"{x.shape[0]} feature rows but {y.shape[0]} labels")
        if not np.isin(y, (0.0, 1.0)).all():
            raise ValueError("labels must be 0 or 1")
        return cls(Matrix.encode(x, fmt), Matrix.encode(y, fmt))

    @property
    def n(self) -> int:
        return self.features.rows

    @property
    def d(self) -> int:
        return self.features.cols

    @property
    def fmt(self) -> ScalarFormat:
        return self.features.fmt

    def to(self, fmt: ScalarFormat) -> "Dataset":
        return Dataset(self.features.to(fmt), self.labels.to(fmt))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            Matrix(self.features.values[idx], self.fmt),
            Matrix(self.labels.values[idx], self.fmt),
        )


@dataclass(frozen=True)
class MlpModel:
    layer_dims: tuple[int, ...]
    weights: tuple[Matrix, ...]
    biases: tuple[Matrix, ...]  # each (1, width)
    fmt: ScalarFormat
    activation: str = "sigmoid"

    def __post_init__(self):
        dims = self.layer_dims
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ShapeMismatch("one weight matrix and bias vector per layer transition")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (1, dims[i + 1]):
                raise ShapeMismatch(f"layer {i}: weight {w.shape}, bias {b.shape} vs dims {dims}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def n_weights(self) -> int:
        return sum(w.size for w in self.weights)

    @property
    def n_params(self) -> int:
        return self.n_weights + sum(b.size for b in self.biases)

    def with_params(self, weights, biases) -> "MlpModel":
        return replace(self, weights=tuple(weights), biases=tuple(biases))

    def bit_equal(self, other: "MlpModel") -> bool:
        return (
            self.layer_dims == other.layer_dims
            and self.fmt == other.fmt
            and all(a.bit_equal(b) for a, b in zip(self.weights, other.weights))
            and all(a.bit_equal(b) for a, b in zip(self.biases, other.biases))
        )


@dataclass(frozen=True)
class GradientSet:
    weights: tuple[Matrix, ...]
    biases: tuple[Matrix, ...]
    fmt: ScalarFormat
    sample_count: int

    def to(self, fmt: ScalarFormat) -> "GradientSet":
        return GradientSet(
            tuple(w.to(fmt) for w in self.weights),
            tuple(b.to(fmt) for b in self.biases),
            fmt,
            self.sample_count,
        )

    def bit_equal(self, other: "GradientSet") -> bool:
        return (
            self.fmt == other.fmt
            and all(a.bit_equal(b) for a, b in zip(self.weights, other.weights))
            and all(a.bit_equal(b) for a, b in zip(self.biases, other.biases))
        )

    @classmethod
    def zeros_like(cls, model: MlpModel, sample_count: int = 1) -> "GradientSet":
        k = kernel_for(model.fmt)
        return cls(
            tuple(Matrix(k.round(np.zeros(w.shape)), model.fmt) for w in model.weights),
            tuple(Matrix(k.round(np.zeros(b.shape)), model.fmt) for b in model.biases),
            model.fmt,
            sample_count,
        )


@dataclass(frozen=True)
class ActivationTrace:
    pre: tuple[np.ndarray, ...]  # z for each layer
    post: tuple[np.ndarray, ...]  # a0 = input, then a1..aL

    @property
    def output(self) -> np.ndarray:
        return self.post[-1]


SIGMOID_GAIN = 4.0


def init_model(layer_dims, fmt: ScalarFormat = F64, seed: int = 0, gain: float = SIGMOID_GAIN) -> MlpModel:
    """Glorot-uniform weights U(-r, r), r = gain * sqrt(6 / (fan_in + fan_out)); zero biases.

    Weights come from one SplitMix64 stream, layer by layer, row-major. The
    default gain of 4 is Glorot and Bengio's bound for sigmoid units; with
    gain 1 a five-hidden-layer sigmoid stack mostly stalls near ln 2 loss.
    """
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2 or min(dims) < 1:
        raise ValueError(f"need at least two layers of positive width, got {dims}")
    rng = SplitMix64(seed)
    k = kernel_for(fmt)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = gain * math.sqrt(6.0 / (fan_in + fan_out))
        u = rng.uniform(fan_in * fan_out).reshape(fan_in, fan_out)
        weights.append(Matrix(k.round((2.0 * u - 1.0) * limit), fmt))
        biases.append(Matrix(k.round(np.zeros((1, fan_out))), fmt))
    return MlpModel(dims, tuple(weights), tuple(biases), fmt)


def _compute_weights(model: MlpModel, k: Kernel):
    # weights stored in another format (affine codes) are dequantized into the compute format
    return [w.values if w.fmt == model.fmt else k.round(w.as_float()) for w in model.weights]


def _batch_values(model: MlpModel, batch) -> np.ndarray:
    if isinstance(batch, Dataset):
        batch = batch.features
    if isinstance(batch, Matrix):
        values = batch.values if batch.fmt == model.fmt else kernel_for(model.fmt).round(batch.as_float())
    else:
        values = kernel_for(model.fmt).round(np.atleast_2d(np.asarray(batch, dtype=np.float64)))
    if values.ndim != 2 or values.shape[1] != model.layer_dims[0]:
        raise ShapeMismatch(f"batch shape {values.shape} vs input width {model.layer_dims[0]}")
    return values


def forward(model: MlpModel, batch) -> ActivationTrace:
    k = kernel_for(model.fmt)
    a = _batch_values(model, batch)
    if a.shape[0] == 0:
        raise EmptyDataset("empty batch")
    pre, post = [], [a]
    with np.errstate(all="ignore"):
        for w, b in zip(_compute_weights(model, k), model.biases):
            z = k.add(k.dot(a, w), b.values)
            a = k.sigmoid(z)
            pre.append(z)
            post.append(a)
    return ActivationTrace(tuple(pre), tuple(post))


def _labels(model: MlpModel, labels, n: int) -> np.ndarray:
    if isinstance(labels, Dataset):
        labels = labels.labels
    if isinstance(labels, Matrix):
        labels = labels.as_float()
    y = kernel_for(model.fmt).round(np.asarray(labels, dtype=np.float64).reshape(-1, 1))
    if y.shape[0] != n:
        raise ShapeMismatch(f"{y.shape[0]} labels for {n} samples")
    return y


def bce_loss(y_hat: np.ndarray, y: np.ndarray, fmt: ScalarFormat) -> float:
    """Mean binary cross-entropy computed in ``fmt``, probabilities clamped to [eps, 1-eps]."""
    k = kernel_for(fmt)
    with np.errstate(all="ignore"):
        eps = k.scalar(LOSS_EPS)
        one = k.scalar(1.0)
        p = k.minimum(k.maximum(y_hat, eps), k.sub(one, eps))
        q = k.maximum(k.sub(one, p), eps)
        terms = k.add(k.mul(y, k.log(p)), k.mul(k.sub(one, y), k.log(q)))
        total = k.sum(terms.ravel(), axis=0)
        mean = k.div(total, k.scalar(float(y.shape[0])))
    return -float(mean)


def loss(model: MlpModel, data: Dataset) -> float:
    trace = forward(model, data)
    return bce_loss(trace.output, _labels(model, data, data.n), model.fmt)


def backward(model: MlpModel, trace: ActivationTrace, labels) -> GradientSet:
    """Gradients of mean BCE by backpropagation in the model's format."""
    k = kernel_for(model.fmt)
    n = trace.output.shape[0]
    if len(trace.post) != model.n_layers + 1:
        raise ShapeMismatch("trace does not belong to this model")
    y = _labels(model, labels, n)
    weights = _compute_weights(model, k)
    count = k.scalar(float(n))
    one = k.scalar(1.0)
    gw = [None] * model.n_layers
    gb = [None] * model.n_layers
    with np.errstate(all="ignore"):
        delta = k.sub(trace.output, y)
        for layer in range(model.n_layers - 1, -1, -1):
            a_prev = trace.post[layer]
            gw[layer] = Matrix(k.div(k.outer_sum(a_prev, delta), count), model.fmt)
            gb[layer] = Matrix(k.div(k.sum(delta, axis=0), count).reshape(1, -1), model.fmt)
            if layer:
                back = k.dot(delta, np.ascontiguousarray(weights[layer].T))
                slope = k.mul(a_prev, k.sub(one, a_prev))
                delta = k.mul(back, slope)
    return GradientSet(tuple(gw), tuple(gb), model.fmt, n)


def apply_update(model: MlpModel, grads: GradientSet, lr: float) -> MlpModel:
    """``w <- w - lr * g`` elementwise; the step is formed in the model's format."""
    if len(grads.weights) != model.n_layers:
        raise ShapeMismatch("gradient set does not match model")
    k = kernel_for(model.fmt)
    lr_c = k.scalar(lr)
    new_w, new_b = [], []
    with np.errstate(all="ignore"):
        for w, g in zip(model.weights, grads.weights):
            if w.shape != g.shape:
                raise ShapeMismatch(f"weight {w.shape} vs gradient {g.shape}")
            step = k.mul(lr_c, g.to(model.fmt).values)
            wk = kernel_for(w.fmt)
            new_w.append(Matrix(wk.sub(w.values, step if w.fmt == model.fmt else step.astype(np.float64)), w.fmt))
        for b, g in zip(model.biases, grads.biases):
            if b.shape != g.shape:
                raise ShapeMismatch(f"bias {b.shape} vs gradient {g.shape}")
            new_b.append(Matrix(k.sub(b.values, k.mul(lr_c, g.to(model.fmt).values)), model.fmt))
    return model.with_params(new_w, new_b)


def train_epoch(model: MlpModel, train: Dataset, lr: float) -> tuple[MlpModel, float]:
    """One full-batch gradient step; returns the new model and the pre-update loss."""
    if train.n == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    trace = forward(model, train)
    y = _labels(model, train, train.n)
    pre_loss = bce_loss(trace.output, y, model.fmt)
    grads = backward(model, trace, y)
    return apply_update(model, grads, lr), pre_loss


def predict(model: MlpModel, data) -> np.ndarray:
    """Class predictions; an output of exactly 0.5 counts as class 1."""
    return (forward(model, data).output.astype(np.float64) >= 0.5).astype(np.float64).ravel()


def evaluate(model: MlpModel, data: Dataset) -> float:
    if data.n == 0:
        raise EmptyDataset("cannot evaluate on an empty dataset")
    return float(np.mean(predict(model, data) == data.labels.as_float().ravel()))


def _extended_loss(weights, biases, x, y) -> np.longdouble:
    """Straight-line mean BCE in long double (independent of the kernels)."""
    a = x
    for w, b in zip(weights, biases):
        a = 1 / (1 + np.exp(-(a @ w + b)))
    return -np.mean(y * np.log(a) + (1 - y) * np.log(1 - a))


def grad_check(model: MlpModel, batch: Dataset, eps: float = 1e-5) -> float:
    """Max relative error between backprop and central differences over all parameters.

    Relative error is ``|g - cd| / max(|g|, |cd|, 1e-12)``. The perturbed
    losses are evaluated in long double so that differences of nearly equal
    losses keep enough digits for gradients far below the loss scale.
    Requires a binary64 model.
    """
    if model.fmt != F64:
        raise ValueError("grad_check needs a binary64 model")
    if not eps > 0:
        raise ValueError("eps must be positive")
    grads = backward(model, forward(model, batch), batch)
    ld = np.longdouble
    x = batch.features.as_float().astype(ld)
    y = batch.labels.as_float().astype(ld)
    weights = [w.as_float().astype(ld) for w in model.weights]
    biases = [b.as_float().astype(ld) for b in model.biases]
    step = ld(eps)
    worst = 0.0
    for params, analytic in ((weights, grads.weights), (biases, grads.biases)):
        for layer, p in enumerate(params):
            for idx in np.ndindex(p.shape):
                orig = p[idx]
                p[idx] = orig + step
                up = _extended_loss(weights, biases, x, y)
                p[idx] = orig - step
                down = _extended_loss(weights, biases, x, y)
                p[idx] = orig
                cd = float((up - down) / (2 * step))
                g = float(analytic[layer].values[idx])
                worst = max(worst, abs(g - cd) / max(abs(g), abs(cd), 1e-12))
    return worst


def warm_up(fmt: ScalarFormat) -> None:
    """Run one tiny training step so compiled kernels are loaded before anything is timed."""
    data = Dataset.from_arrays([[0.5, -0.5], [-0.5, 0.5]], [1, 0], fmt)
    train_epoch(init_model((2, 2, 1), fmt, seed=0), data, 0.1)

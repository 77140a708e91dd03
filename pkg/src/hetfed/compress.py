"""Pruning, weight clustering and quantization of MLP models.

A compressed model keeps dense weight shapes: pruned positions hold an
exact zero and are excluded by a mask, clustered layers hold repeated
centroid values indexed by a codebook, and affine-quantized layers store
their weights as per-layer integer codes. Gradients computed on a
compressed model are mapped back to global coordinates by :func:`expand`.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .kernels import kernel_for
from .mlp import GradientSet, Matrix, MlpModel
from .numfmt import OutOfRange, ScalarFormat, decode, encode, make_format
from .rng import SplitMix64, derive_seed

MAX_LLOYD_ITERATIONS = 100
AFFINE_MIN_BITS, AFFINE_MAX_BITS = 2, 16


class StateMismatch(ValueError):
    pass


class DegenerateRange(UserWarning):
    """A layer's retained weights span a zero-width range (all equal)."""


@dataclass(frozen=True)
class CompressionPlan:
    """Per-device recipe, applied as prune -> cluster -> quantize."""

    prune_ratio: float = 0.0
    target_format: ScalarFormat | None = None
    cluster_k: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.prune_ratio <= 1.0:
            raise OutOfRange(f"prune ratio must lie in [0, 1], got {self.prune_ratio}")
        if self.cluster_k is not None and int(self.cluster_k) < 1:
            raise OutOfRange(f"cluster count must be >= 1, got {self.cluster_k}")
        if self.target_format is not None and not self.target_format.is_float:
            bits = self.target_format.bit_width
            if not AFFINE_MIN_BITS <= bits <= AFFINE_MAX_BITS:
                raise OutOfRange(f"affine quantization supports 2..16 bits, got {bits}")

    @classmethod
    def from_dict(cls, d: dict | None) -> "CompressionPlan":
        d = dict(d or {})
        unknown = set(d) - {"prune", "format", "clusters"}
        if unknown:
            raise ValueError(f"unknown plan keys: {sorted(unknown)}")
        fmt = d.get("format")
        k = d.get("clusters")
        return cls(
            prune_ratio=float(d.get("prune", 0.0)),
            target_format=None if fmt is None else make_format(fmt),
            cluster_k=None if k is None else int(k),
        )

    def to_dict(self) -> dict:
        out: dict = {}
        if self.prune_ratio:
            out["prune"] = self.prune_ratio
        if self.target_format is not None:
            out["format"] = self.target_format.descriptor
        if self.cluster_k is not None:
            out["clusters"] = self.cluster_k
        return out

    @property
    def is_empty(self) -> bool:
        return self.prune_ratio == 0 and self.target_format is None and self.cluster_k is None

    @property
    def structural(self) -> bool:
        """True when the plan removes or ties weights (pruning or clustering)."""
        return self.prune_ratio > 0 or self.cluster_k is not None


@dataclass(frozen=True)
class Codebook:
    centroids: np.ndarray  # (k,) ascending, values of the layer's format
    index: np.ndarray  # int64, weight shape; -1 at masked positions

    @property
    def k(self) -> int:
        return len(self.centroids)


@dataclass(frozen=True)
class CompressedState:
    plan: CompressionPlan
    origin_format: ScalarFormat
    local_format: ScalarFormat
    layer_dims: tuple[int, ...]
    masks: tuple[np.ndarray, ...]  # bool, True = retained
    codebooks: tuple[Codebook | None, ...]
    affine: tuple[ScalarFormat | None, ...] = field(default=())

    def __post_init__(self):
        if not self.affine:
            object.__setattr__(self, "affine", (None,) * len(self.masks))
        for mask, book in zip(self.masks, self.codebooks):
            expected = mask.size - prune_count(mask.size, self.plan.prune_ratio)
            if int(mask.sum()) != expected:
                raise StateMismatch(f"mask keeps {int(mask.sum())} of {mask.size}, expected {expected}")
            if book is not None and (book.index[mask] >= book.k).any():
                raise StateMismatch("codebook index out of range")

    @property
    def pruned(self) -> bool:
        return self.plan.prune_ratio > 0

    @property
    def retained(self) -> tuple[int, ...]:
        return tuple(int(m.sum()) for m in self.masks)


def full_masks(model: MlpModel) -> tuple[np.ndarray, ...]:
    return tuple(np.ones(w.shape, dtype=bool) for w in model.weights)


def prune_count(count: int, ratio: float) -> int:
    # the tiny slack keeps e.g. 0.3 * 10 from flooring to 2
    return min(count, math.floor(ratio * count + 1e-9))


def prune(model: MlpModel, ratio: float) -> tuple[MlpModel, tuple[np.ndarray, ...]]:
    """Zero the ``floor(ratio * count)`` smallest-magnitude weights of every matrix.

    Ties in magnitude are broken by ascending row-major index. Biases are
    never pruned.
    """
    if not 0.0 <= ratio <= 1.0:
        raise OutOfRange(f"prune ratio must lie in [0, 1], got {ratio}")
    weights, masks = [], []
    for w in model.weights:
        flat = w.as_float().ravel()
        n_cut = prune_count(flat.size, ratio)
        order = np.lexsort((np.arange(flat.size), np.abs(flat)))
        mask = np.ones(flat.size, dtype=bool)
        mask[order[:n_cut]] = False
        mask = mask.reshape(w.shape)
        masks.append(mask)
        weights.append(_zero_masked(w, mask))
    return model.with_params(weights, model.biases), tuple(masks)


def _zero_masked(w: Matrix, mask: np.ndarray) -> Matrix:
    if mask.all():
        return w
    values = w.values.copy()
    values[~mask] = 0
    return Matrix(values, w.fmt)


def exact_mean(values) -> Fraction:
    return sum((Fraction(float(v)) for v in values), Fraction(0)) / len(values)


def round_to(x, fmt: ScalarFormat) -> float:
    """Round an exact value (int, float or Fraction) once into ``fmt``."""
    return float(decode(encode(x, fmt)))


def _kmeans_pp(points: np.ndarray, k: int, rng: SplitMix64) -> np.ndarray:
    centroids = [points[rng.below(len(points))]]
    while len(centroids) < k:
        d2 = np.min((points[:, None] - np.array(centroids)[None, :]) ** 2, axis=1)
        total = math.fsum(d2)
        if total == 0:
            break  # every distinct value already chosen
        target = rng.random() * total
        pick = int(np.searchsorted(np.cumsum(d2), target, side="right"))
        centroids.append(points[min(pick, len(points) - 1)])
    return np.array(centroids)


def _assign(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return np.argmin(np.abs(points[:, None] - centroids[None, :]), axis=1)  # ties: lowest index


def kmeans_1d(points, k: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """k-means++ seeding then Lloyd iterations; returns (ascending centroids, labels).

    Lloyd iterations stop at an assignment fixpoint or after 100 rounds.
    Final centroids are the exact member means rounded once to float64.
    """
    points = np.asarray(points, dtype=np.float64)
    if k < 1:
        raise OutOfRange(f"cluster count must be >= 1, got {k}")
    if points.size == 0:
        return np.empty(0), np.empty(0, dtype=np.int64)
    centroids = _kmeans_pp(points, k, SplitMix64(seed))
    labels = _assign(points, centroids)
    for _ in range(MAX_LLOYD_ITERATIONS):
        for c in range(len(centroids)):
            members = points[labels == c]
            if members.size:
                centroids[c] = math.fsum(members) / members.size
        new = _assign(points, centroids)
        if np.array_equal(new, labels):
            break
        labels = new
    used = np.unique(labels)  # drop clusters that ended up empty
    final = np.array([float(exact_mean(points[labels == c])) for c in used])
    order = np.argsort(final, kind="stable")
    remap = np.empty(len(used), dtype=np.int64)
    remap[order] = np.arange(len(used))
    return final[order], remap[np.searchsorted(used, labels)]


def cluster(
    model: MlpModel, k: int, seed: int = 0, masks: tuple[np.ndarray, ...] | None = None
) -> tuple[MlpModel, tuple[Codebook, ...]]:
    """Replace each layer's retained weights by their k-means centroid."""
    if k < 1:
        raise OutOfRange(f"cluster count must be >= 1, got {k}")
    masks = masks or full_masks(model)
    weights, books = [], []
    for layer, (w, mask) in enumerate(zip(model.weights, masks)):
        centroids, labels = kmeans_1d(w.as_float()[mask], k, derive_seed(seed, layer))
        centroids = kernel_for(w.fmt).round(centroids)
        index = np.full(w.shape, -1, dtype=np.int64)
        index[mask] = labels
        values = w.values.copy()
        values[mask] = centroids[labels]
        weights.append(Matrix(values, w.fmt))
        books.append(Codebook(centroids, index))
    return model.with_params(weights, model.biases), tuple(books)


def quantize_format(model: MlpModel, to: ScalarFormat) -> MlpModel:
    """Convert every weight and bias to ``to``; training then runs in ``to``."""
    if to == model.fmt:
        return model
    if not to.is_float:
        raise OutOfRange("use quantize_affine for integer formats")
    return MlpModel(
        model.layer_dims,
        tuple(w.to(to) for w in model.weights),
        tuple(b.to(to) for b in model.biases),
        to,
        model.activation,
    )


def affine_params(values, bits: int) -> ScalarFormat:
    """Per-layer affine format from the min/max of ``values``.

    ``scale = (max - min) / (2**bits - 1)`` and ``zero_point = round(-min / scale)``
    (half to even, clamped). A constant layer is degenerate: scale becomes
    ``|c|`` (1 for an all-zero layer) with the zero point chosen so that the
    constant is itself a code, keeping the round trip exact.
    """
    if not AFFINE_MIN_BITS <= bits <= AFFINE_MAX_BITS:
        raise OutOfRange(f"affine quantization supports 2..16 bits, got {bits}")
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return ScalarFormat.affine(bits, 1.0, 0)
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        warnings.warn(f"constant layer value {lo!r}", DegenerateRange, stacklevel=3)
        if lo == 0:
            return ScalarFormat.affine(bits, 1.0, 0)
        return ScalarFormat.affine(bits, abs(lo), 1 if lo < 0 else 0)
    scale = (hi - lo) / (2**bits - 1)
    zero_point = min(max(round(-lo / scale), 0), 2**bits - 1)
    return ScalarFormat.affine(bits, scale, zero_point)


def quantize_affine(
    model: MlpModel, bits: int, masks: tuple[np.ndarray, ...] | None = None
) -> tuple[MlpModel, tuple[ScalarFormat, ...]]:
    """Store each weight matrix as affine integer codes calibrated on its retained weights.

    Biases and the compute format are left unchanged; masked positions stay
    exactly zero (they are absent from the compressed model).
    """
    masks = masks or full_masks(model)
    weights, formats = [], []
    for w, mask in zip(model.weights, masks):
        fmt = affine_params(w.as_float()[mask], bits)
        values = np.zeros(w.shape)
        values[mask] = kernel_for(fmt).round(w.as_float()[mask])
        weights.append(Matrix(values, fmt))
        formats.append(fmt)
    return model.with_params(weights, model.biases), tuple(formats)


def _requantized(book: Codebook | None, weights: Matrix) -> Codebook | None:
    """The codebook after quantization: each centroid takes its members' stored value."""
    if book is None:
        return None
    flat, index = weights.values.ravel(), book.index.ravel()
    first = np.array([np.flatnonzero(index == c)[0] for c in range(book.k)])
    return Codebook(flat[first].astype(np.float64), book.index)


def apply_plan(global_model: MlpModel, plan: CompressionPlan, seed: int = 0) -> tuple[MlpModel, CompressedState]:
    """Compress the global model for one device: prune, then cluster, then quantize."""
    model = global_model
    masks = full_masks(model)
    books: tuple[Codebook | None, ...] = (None,) * model.n_layers
    affine: tuple[ScalarFormat | None, ...] = (None,) * model.n_layers
    if plan.prune_ratio > 0:
        model, masks = prune(model, plan.prune_ratio)
    if plan.cluster_k is not None:
        model, books = cluster(model, plan.cluster_k, seed, masks)
    fmt = plan.target_format
    if fmt is not None:
        if fmt.is_float:
            model = quantize_format(model, fmt)
        else:
            model, affine = quantize_affine(model, fmt.bit_width, masks)
        books = tuple(_requantized(b, w) for b, w in zip(books, model.weights))
    state = CompressedState(plan, global_model.fmt, model.fmt, model.layer_dims, masks, books, affine)
    return model, state


def _check_shapes(grads: GradientSet, state: CompressedState) -> None:
    dims = state.layer_dims
    if len(grads.weights) != len(dims) - 1 or len(grads.biases) != len(dims) - 1:
        raise StateMismatch("gradient set and compressed state have different layer counts")
    for i, (g, b) in enumerate(zip(grads.weights, grads.biases)):
        if g.shape != (dims[i], dims[i + 1]) or b.shape != (1, dims[i + 1]):
            raise StateMismatch(f"layer {i}: gradient {g.shape}/{b.shape} vs dims {dims}")


def project(grads: GradientSet, state: CompressedState) -> GradientSet:
    """Map raw gradients onto the compressed parameterization, in ``grads.fmt``.

    Each cluster receives the mean of its members' gradients (rounded once),
    and masked positions receive +0.
    """
    _check_shapes(grads, state)
    if not state.pruned and all(b is None for b in state.codebooks):
        return grads
    weights = []
    for g, mask, book in zip(grads.weights, state.masks, state.codebooks):
        values = g.values.copy()
        if book is not None:
            for c in range(book.k):
                members = book.index == c
                if members.any():
                    values[members] = round_to(exact_mean(g.values[members]), grads.fmt)
        values[~mask] = 0
        weights.append(Matrix(values, grads.fmt))
    return GradientSet(tuple(weights), grads.biases, grads.fmt, grads.sample_count)


def expand(grads: GradientSet, state: CompressedState) -> tuple[GradientSet, tuple[np.ndarray, ...]]:
    """Compressed-domain gradients -> global format, plus per-weight coverage masks."""
    _check_shapes(grads, state)
    return project(grads.to(state.origin_format), state), tuple(m.copy() for m in state.masks)


def enforce(model: MlpModel, state: CompressedState) -> MlpModel:
    """Re-zero masked weights (a rounding step in a format without 0 could move them)."""
    if not state.pruned:
        return model
    return model.with_params([_zero_masked(w, m) for w, m in zip(model.weights, state.masks)], model.biases)

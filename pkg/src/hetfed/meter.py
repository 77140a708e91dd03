"""Round-time breakdown, analytic memory accounting, payload sizes and timing."""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass, fields

from .compress import CompressedState
from .mlp import GradientSet, MlpModel
from .numfmt import OutOfRange, ScalarFormat

HEADER_BYTES = 64
AFFINE_PARAM_BYTES = 12  # float64 scale + uint32 zero point


@dataclass(frozen=True)
class TimeBreakdown:
    """Seconds spent per round by one device: local training, upload, server, download."""

    t_local: float
    t_upload: float
    t_global: float
    t_download: float

    @property
    def total(self) -> float:
        return self.t_local + self.t_upload + self.t_global + self.t_download

    def as_ms(self) -> dict[str, float]:
        return {
            "t_local_ms": self.t_local * 1e3,
            "t_upload_ms": self.t_upload * 1e3,
            "t_global_ms": self.t_global * 1e3,
            "t_download_ms": self.t_download * 1e3,
            "t_total_ms": self.total * 1e3,
        }


@dataclass(frozen=True)
class MemoryAccount:
    weights_bytes: int
    biases_bytes: int
    gradients_bytes: int
    activations_bytes: int
    deltas_bytes: int
    inputs_bytes: int
    labels_bytes: int

    @property
    def total_bytes(self) -> int:
        return sum(getattr(self, f.name) for f in fields(self))


def time_breakdown(
    measured_local: float, profile, upload_bytes: int, download_bytes: int, measured_global: float
) -> TimeBreakdown:
    """Scale measured local time by the device slowdown; transfers use the profile bandwidths."""
    for name, v in (
        ("measured_local", measured_local),
        ("upload_bytes", upload_bytes),
        ("download_bytes", download_bytes),
        ("measured_global", measured_global),
    ):
        if v < 0:
            raise OutOfRange(f"{name} must be non-negative, got {v}")
    return TimeBreakdown(
        t_local=measured_local * profile.slowdown,
        t_upload=upload_bytes / profile.up_bw,
        t_global=measured_global,
        t_download=download_bytes / profile.down_bw,
    )


def memory_footprint(model: MlpModel, batch_n: int, fmt: ScalarFormat | None = None) -> MemoryAccount:
    """Bytes of every scalar buffer that one full-batch training step keeps alive."""
    if batch_n < 1:
        raise OutOfRange(f"batch size must be >= 1, got {batch_n}")
    width = (fmt or model.fmt).nbytes
    dims = model.layer_dims
    n_w = sum(a * b for a, b in zip(dims[:-1], dims[1:]))
    n_b = sum(dims[1:])
    per_sample = sum(dims[1:])
    return MemoryAccount(
        weights_bytes=n_w * width,
        biases_bytes=n_b * width,
        gradients_bytes=(n_w + n_b) * width,
        activations_bytes=batch_n * per_sample * width,
        deltas_bytes=batch_n * per_sample * width,
        inputs_bytes=batch_n * dims[0] * width,
        labels_bytes=batch_n * width,
    )


def _index_bits(k: int) -> int:
    return max(1, math.ceil(math.log2(k))) if k > 1 else 0


def state_payload_bytes(state: CompressedState) -> int:
    """Serialized size of a compressed model (or of a gradient on it)."""
    total = HEADER_BYTES
    dims = state.layer_dims
    for layer, mask in enumerate(state.masks):
        kept = int(mask.sum())
        wfmt = state.affine[layer] or state.local_format
        book = state.codebooks[layer]
        if state.pruned:
            total += math.ceil(mask.size / 8)
        if book is not None:
            total += book.k * wfmt.nbytes + math.ceil(kept * _index_bits(book.k) / 8)
        else:
            total += kept * wfmt.nbytes
        if state.affine[layer] is not None:
            total += AFFINE_PARAM_BYTES
        total += dims[layer + 1] * state.local_format.nbytes
    return total


def payload_bytes(obj) -> int:
    """Size on the wire of a model, a gradient set or a compressed state."""
    if isinstance(obj, CompressedState):
        return state_payload_bytes(obj)
    if isinstance(obj, (MlpModel, GradientSet)):
        mats = obj.weights + obj.biases
        return HEADER_BYTES + sum(m.size * m.fmt.nbytes for m in mats)
    raise TypeError(f"cannot size {type(obj).__name__}")


class Stopwatch:
    """Monotonic wall-clock scope: ``with Stopwatch("epoch") as sw: ...; sw.ms``."""

    def __init__(self, label: str = ""):
        self.label = label
        self.seconds = 0.0
        self._start: float | None = None

    def __enter__(self) -> "Stopwatch":
        self._start = time.perf_counter()
        return self

    def __exit__(self, *exc) -> None:
        self.seconds = time.perf_counter() - self._start

    @property
    def ms(self) -> float:
        return self.seconds * 1e3


def stopwatch(label: str = "") -> Stopwatch:
    return Stopwatch(label)


@dataclass(frozen=True)
class Summary:
    n: int
    mean: float
    median: float
    stddev: float

    @classmethod
    def of(cls, values) -> "Summary":
        values = [float(v) for v in values]
        if not values:
            raise ValueError("nothing to summarize")
        sd = statistics.stdev(values) if len(values) > 1 else 0.0
        return cls(len(values), statistics.fmean(values), statistics.median(values), sd)

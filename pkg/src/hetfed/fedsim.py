"""Federated rounds over heterogeneous, individually compressed devices.

Each round the server broadcasts the global model, every device compresses
it with its own plan, trains on its local partition in its own format and
uploads either a gradient (FedSGD, hetero) or its parameters (FedAvg). The
server aggregates in the global format, in ascending device id, updates
the global model and evaluates it on the validation set.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .compress import CompressedState, CompressionPlan, StateMismatch, apply_plan, enforce, expand, project
from .kernels import kernel_for
from .meter import MemoryAccount, Stopwatch, TimeBreakdown, memory_footprint, payload_bytes, time_breakdown
from .mlp import (
    DEFAULT_DIMS,
    SIGMOID_GAIN,
    Dataset,
    GradientSet,
    Matrix,
    MlpModel,
    ShapeMismatch,
    _labels,
    apply_update,
    backward,
    bce_loss,
    default_layer_dims,
    evaluate,
    forward,
    init_model,
    warm_up,
)
from .numfmt import F64, OutOfRange, ScalarFormat, make_format
from .rng import SplitMix64, derive_seed
from .synthdata import DataSpec, generate

AGGREGATORS = ("fedsgd", "fedavg", "hetero")
PARTITION_STREAM = 3


class ConfigError(ValueError):
    pass


class MemoryExceeded(RuntimeError):
    def __init__(self, device_id: int, needed: int, cap: float):
        super().__init__(f"device {device_id} needs {needed} bytes, cap is {cap:g}")
        self.device_id, self.needed, self.cap = device_id, needed, cap


class EmptyUpdateSet(ValueError):
    pass


@dataclass(frozen=True)
class DeviceProfile:
    id: int
    slowdown: float = 1.0
    up_bw: float = 1e6  # bytes / second
    down_bw: float = 1e6
    mem_cap: float = math.inf  # bytes
    plan: CompressionPlan = field(default_factory=CompressionPlan)
    local_epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.slowdown > 0:
            raise ConfigError(f"device {self.id}: slowdown must be > 0")
        if not (self.up_bw > 0 and self.down_bw > 0):
            raise ConfigError(f"device {self.id}: bandwidths must be > 0")
        if not self.mem_cap > 0:
            raise ConfigError(f"device {self.id}: mem_cap must be > 0")
        if self.local_epochs < 1:
            raise ConfigError(f"device {self.id}: local_epochs must be >= 1")


@dataclass(frozen=True)
class SessionConfig:
    global_format: ScalarFormat = F64
    rounds: int = 10
    lr: float = 0.5
    aggregator: str = "fedsgd"
    data: DataSpec = field(default_factory=DataSpec)
    devices: tuple[DeviceProfile, ...] = (DeviceProfile(0),)
    seed: int | None = None  # model init and partitioning; defaults to the data seed
    hidden_layers: int = 5
    width: int = 10
    init_gain: float = SIGMOID_GAIN

    def __post_init__(self):
        if self.aggregator not in AGGREGATORS:
            raise ConfigError(f"aggregator must be one of {AGGREGATORS}, got {self.aggregator!r}")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if not self.devices:
            raise ConfigError("at least one device is required")
        if [d.id for d in self.devices] != list(range(len(self.devices))):
            raise ConfigError("device ids must be 0..n-1 in order")
        if len(self.devices) > self.data.n_train:
            raise ConfigError("more devices than training samples")
        if self.aggregator == "fedsgd" and any(d.plan.structural for d in self.devices):
            raise ConfigError("fedsgd needs uncompressed shapes; use the hetero aggregator with pruning/clustering")
        if self.hidden_layers < 0 or self.width < 1:
            raise ConfigError("hidden_layers must be >= 0 and width >= 1")

    @property
    def model_seed(self) -> int:
        return self.data.seed if self.seed is None else self.seed

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return default_layer_dims(self.data.features, self.hidden_layers, self.width)


_TOP_KEYS = {"global_format", "rounds", "lr", "aggregator", "data", "devices", "seed", "hidden_layers", "width", "init_gain"}
_DEVICE_KEYS = {"id", "slowdown", "up_bw", "down_bw", "mem_cap", "plan", "local_epochs", "seed"}
_DATA_KEYS = set(DataSpec.__dataclass_fields__)


def _reject_unknown(d: dict, allowed: set, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


def config_from_dict(d: dict) -> SessionConfig:
    _reject_unknown(d, _TOP_KEYS, "config")
    try:
        data = d.get("data", {})
        _reject_unknown(data, _DATA_KEYS, "data")
        devices = []
        for i, dev in enumerate(d.get("devices", [{}])):
            _reject_unknown(dev, _DEVICE_KEYS, f"devices[{i}]")
            if dev.get("id", i) != i:
                raise ConfigError(f"devices[{i}] has id {dev['id']}; ids must be 0..n-1 in order")
            devices.append(
                DeviceProfile(
                    id=i,
                    slowdown=float(dev.get("slowdown", 1.0)),
                    up_bw=float(dev.get("up_bw", 1e6)),
                    down_bw=float(dev.get("down_bw", 1e6)),
                    mem_cap=float(dev.get("mem_cap", math.inf)),
                    plan=CompressionPlan.from_dict(dev.get("plan")),
                    local_epochs=int(dev.get("local_epochs", 1)),
                    seed=int(dev.get("seed", i)),
                )
            )
        return SessionConfig(
            global_format=make_format(d.get("global_format", "f64")),
            rounds=int(d.get("rounds", 10)),
            lr=float(d.get("lr", 0.5)),
            aggregator=str(d.get("aggregator", "fedsgd")),
            data=DataSpec(**data),
            devices=tuple(devices),
            seed=None if d.get("seed") is None else int(d["seed"]),
            hidden_layers=int(d.get("hidden_layers", 5)),
            width=int(d.get("width", 10)),
            init_gain=float(d.get("init_gain", SIGMOID_GAIN)),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> SessionConfig:
    """Parse a JSON session config; syntax errors carry line and column."""
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return config_from_dict(raw)


def partition(data: Dataset, n_devices: int, seed: int) -> list[Dataset]:
    """Seeded shuffle then round-robin split; each part keeps original sample order."""
    if not 1 <= n_devices <= data.n:
        raise OutOfRange(f"cannot split {data.n} samples over {n_devices} devices")
    perm = SplitMix64(derive_seed(seed, PARTITION_STREAM)).permutation(data.n)
    return [data.subset(np.sort(perm[i::n_devices])) for i in range(n_devices)]


@dataclass(frozen=True)
class DeviceUpdate:
    device_id: int
    payload: GradientSet | MlpModel
    sample_count: int
    coverage: tuple[np.ndarray, ...]
    payload_bytes: int
    local_seconds: float
    loss: float
    state: CompressedState
    memory: MemoryAccount

    def __post_init__(self):
        if self.sample_count <= 0:
            raise ValueError("sample_count must be positive")


def train_compressed_epoch(model: MlpModel, state: CompressedState, data: Dataset, lr: float) -> tuple[MlpModel, float]:
    """One full-batch step that keeps the compression valid (frozen masks, shared clusters)."""
    trace = forward(model, data)
    y = _labels(model, data, data.n)
    pre_loss = bce_loss(trace.output, y, model.fmt)
    grads = project(backward(model, trace, y), state)
    return enforce(apply_update(model, grads, lr), state), pre_loss


def _pseudo_gradient(before: MlpModel, after: MlpModel, lr: float, n: int) -> GradientSet:
    k = kernel_for(before.fmt)
    lr_c = k.scalar(lr)

    def diff(a: Matrix, b: Matrix) -> Matrix:
        a_v, b_v = k.round(a.as_float()), k.round(b.as_float())
        return Matrix(k.div(k.sub(a_v, b_v), lr_c), before.fmt)

    return GradientSet(
        tuple(diff(a, b) for a, b in zip(before.weights, after.weights)),
        tuple(diff(a, b) for a, b in zip(before.biases, after.biases)),
        before.fmt,
        n,
    )


def local_step(device: DeviceProfile, global_model: MlpModel, part: Dataset, lr: float, mode: str) -> DeviceUpdate:
    """Compress, train locally and build the upload for one device."""
    if part.n == 0:
        raise ValueError(f"device {device.id} has no data")
    with Stopwatch() as sw:
        local, state = apply_plan(global_model, device.plan, device.seed)
        mem = memory_footprint(local, part.n)
        if mem.total_bytes > device.mem_cap:
            raise MemoryExceeded(device.id, mem.total_bytes, device.mem_cap)
        if mode == "fedavg":
            model, loss = local, None
            for _ in range(device.local_epochs):
                model, epoch_loss = train_compressed_epoch(model, state, part, lr)
                loss = epoch_loss if loss is None else loss
            payload = model
        elif mode == "hetero" and device.local_epochs > 1:
            model, loss = local, None
            for _ in range(device.local_epochs):
                model, epoch_loss = train_compressed_epoch(model, state, part, lr)
                loss = epoch_loss if loss is None else loss
            payload = _pseudo_gradient(local, model, lr, part.n)
        else:
            trace = forward(local, part)
            y = _labels(local, part, part.n)
            loss = bce_loss(trace.output, y, local.fmt)
            payload = project(backward(local, trace, y), state)
    return DeviceUpdate(
        device_id=device.id,
        payload=payload,
        sample_count=part.n,
        coverage=tuple(m.copy() for m in state.masks),
        payload_bytes=payload_bytes(state),
        local_seconds=sw.seconds,
        loss=loss,
        state=state,
        memory=mem,
    )


def _coefficients(counts, fmt: ScalarFormat):
    k = kernel_for(fmt)
    total = k.scalar(float(sum(counts)))
    return [k.div(k.scalar(float(n)), total) for n in counts]


def _weighted_sum(terms, coefs, fmt: ScalarFormat):
    k = kernel_for(fmt)
    acc = k.mul(coefs[0], terms[0])
    for c, t in zip(coefs[1:], terms[1:]):
        acc = k.add(acc, k.mul(c, t))
    return acc


def _sorted(updates) -> list[DeviceUpdate]:
    updates = sorted(updates, key=lambda u: u.device_id)
    if not updates:
        raise EmptyUpdateSet("no device updates to aggregate")
    return updates


def _check_congruent(mats: list[list[Matrix]]) -> None:
    for other in mats[1:]:
        if [m.shape for m in other] != [m.shape for m in mats[0]]:
            raise ShapeMismatch("updates have different shapes")


def fedsgd_aggregate(updates, fmt: ScalarFormat = F64) -> GradientSet:
    """Sample-weighted mean gradient, weights n_i / sum(n) formed in ``fmt``."""
    updates = _sorted(updates)
    grads = [u.payload.to(fmt) for u in updates]
    _check_congruent([list(g.weights + g.biases) for g in grads])
    coefs = _coefficients([u.sample_count for u in updates], fmt)
    n_w = len(grads[0].weights)
    mats = []
    for j in range(n_w * 2):
        pick = (lambda g: g.weights[j]) if j < n_w else (lambda g: g.biases[j - n_w])
        mats.append(Matrix(_weighted_sum([pick(g).values for g in grads], coefs, fmt), fmt))
    return GradientSet(tuple(mats[:n_w]), tuple(mats[n_w:]), fmt, sum(u.sample_count for u in updates))


def fedavg_aggregate(updates, fmt: ScalarFormat = F64) -> MlpModel:
    """Sample-weighted mean of the uploaded parameters, in ``fmt``."""
    updates = _sorted(updates)
    models = [u.payload for u in updates]
    _check_congruent([list(m.weights + m.biases) for m in models])
    coefs = _coefficients([u.sample_count for u in updates], fmt)

    def mean(pick) -> Matrix:
        return Matrix(_weighted_sum([pick(m).to(fmt).values for m in models], coefs, fmt), fmt)

    first = models[0]
    weights = [mean(lambda m, j=j: m.weights[j]) for j in range(first.n_layers)]
    biases = [mean(lambda m, j=j: m.biases[j]) for j in range(first.n_layers)]
    return MlpModel(first.layer_dims, tuple(weights), tuple(biases), fmt, first.activation)


def _covered_mean(values, covers, counts, fmt: ScalarFormat) -> np.ndarray:
    """Per position: sum over covering devices of n_i g_i / (sum of their n_i)."""
    k = kernel_for(fmt)
    shape = values[0].shape
    total = np.zeros(shape)
    for c, n in zip(covers, counts):
        total = total + np.where(c, float(n), 0.0)  # exact integer sums
    denom = k.round(np.where(total > 0, total, 1.0))
    acc = k.round(np.zeros(shape))
    started = np.zeros(shape, dtype=bool)
    for v, c, n in zip(values, covers, counts):
        term = k.mul(k.div(k.scalar(float(n)), denom), v)
        acc = np.where(c & started, k.add(acc, term), np.where(c, term, acc))
        started |= c
    return k.round(np.where(started, acc, 0.0))


def hetero_aggregate(updates, fmt: ScalarFormat = F64) -> tuple[GradientSet, tuple[np.ndarray, ...]]:
    """Coverage-weighted mean of expanded gradients; returns it and per-weight coverage counts.

    Positions no device retains get +0, so the global weight stays put there.
    Biases are always covered.
    """
    updates = _sorted(updates)
    expanded = []
    for u in updates:
        if u.state.origin_format != fmt:
            raise StateMismatch(f"device {u.device_id} state targets {u.state.origin_format}, not {fmt}")
        expanded.append(expand(u.payload, u.state))
    counts = [u.sample_count for u in updates]
    n_layers = len(expanded[0][0].weights)
    weights, biases, coverage = [], [], []
    for j in range(n_layers):
        covers = [cov[j] for _, cov in expanded]
        vals = [g.weights[j].values for g, _ in expanded]
        if any(v.shape != vals[0].shape for v in vals):
            raise StateMismatch("updates have different shapes")
        weights.append(Matrix(_covered_mean(vals, covers, counts, fmt), fmt))
        coverage.append(np.sum(covers, axis=0))
        bvals = [g.biases[j].values for g, _ in expanded]
        full = [np.ones(bvals[0].shape, dtype=bool)] * len(bvals)
        biases.append(Matrix(_covered_mean(bvals, full, counts, fmt), fmt))
    return GradientSet(tuple(weights), tuple(biases), fmt, sum(counts)), tuple(coverage)


@dataclass(frozen=True)
class DeviceRound:
    device_id: int
    skipped: bool
    loss: float | None
    epochs: int
    times: TimeBreakdown
    mem_bytes: int
    payload_up: int
    payload_down: int


@dataclass(frozen=True)
class RoundReport:
    round: int
    accuracy: float
    devices: tuple[DeviceRound, ...]
    coverage: tuple[np.ndarray, ...]  # per weight matrix: number of devices retaining each position

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy outside [0, 1]")


@dataclass
class SessionResult:
    reports: list[RoundReport]
    model: MlpModel
    initial_model: MlpModel

    def __iter__(self):
        return iter(self.reports)

    def __len__(self) -> int:
        return len(self.reports)

    def __getitem__(self, i):
        return self.reports[i]


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("HETFED_THREADS", "1")))
    except ValueError:
        return 1


def _skip_record(device: DeviceProfile, exc: MemoryExceeded) -> DeviceRound:
    zero = TimeBreakdown(0.0, 0.0, 0.0, 0.0)
    return DeviceRound(device.id, True, None, 0, zero, exc.needed, 0, 0)


def run_session(cfg: SessionConfig, on_round=None) -> SessionResult:
    """Run ``cfg.rounds`` federated rounds; deterministic apart from wall-clock fields."""
    fmt = cfg.global_format
    for f in {fmt, *(d.plan.target_format or fmt for d in cfg.devices)}:
        if f.is_float:
            warm_up(f)
    train, val, _ = generate(cfg.data, fmt)
    model = init_model(cfg.layer_dims, fmt, cfg.model_seed, cfg.init_gain)
    initial = model
    parts = partition(train, len(cfg.devices), cfg.model_seed)
    mode = cfg.aggregator
    reports: list[RoundReport] = []
    workers = thread_count()

    def run_device(i: int):
        try:
            return local_step(cfg.devices[i], model, parts[i], cfg.lr, mode)
        except MemoryExceeded as exc:
            return exc

    for r in range(cfg.rounds):
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                outcomes = list(pool.map(run_device, range(len(cfg.devices))))
        else:
            outcomes = [run_device(i) for i in range(len(cfg.devices))]
        updates = [u for u in outcomes if isinstance(u, DeviceUpdate)]
        coverage = tuple(np.zeros(w.shape, dtype=np.int64) for w in model.weights)
        with Stopwatch() as sw:
            if updates:
                if mode == "fedavg":
                    model = fedavg_aggregate(updates, fmt)
                    coverage = tuple(c + len(updates) for c in coverage)
                else:
                    if mode == "hetero":
                        grads, coverage = hetero_aggregate(updates, fmt)
                    else:
                        grads = fedsgd_aggregate(updates, fmt)
                        coverage = tuple(c + len(updates) for c in coverage)
                    model = apply_update(model, grads, cfg.lr)
        accuracy = evaluate(model, val)
        rows = []
        for device, out in zip(cfg.devices, outcomes):
            if isinstance(out, MemoryExceeded):
                rows.append(_skip_record(device, out))
                continue
            times = time_breakdown(out.local_seconds, device, out.payload_bytes, out.payload_bytes, sw.seconds)
            epochs = 1 if mode == "fedsgd" else device.local_epochs
            rows.append(
                DeviceRound(device.id, False, out.loss, epochs, times, out.memory.total_bytes, out.payload_bytes, out.payload_bytes)
            )
        report = RoundReport(r, accuracy, tuple(rows), coverage)
        reports.append(report)
        if on_round is not None:
            on_round(report)
    return SessionResult(reports, model, initial)

import json
import math

import numpy as np
import pytest

from hetfed.compress import CompressedState, CompressionPlan, apply_plan
from hetfed.fedsim import (
    ConfigError,
    DeviceProfile,
    DeviceUpdate,
    EmptyUpdateSet,
    SessionConfig,
    _pseudo_gradient,
    config_from_dict,
    fedavg_aggregate,
    fedsgd_aggregate,
    hetero_aggregate,
    load_config,
    local_step,
    partition,
    run_session,
    train_compressed_epoch,
)
from hetfed.meter import memory_footprint
from hetfed.mlp import GradientSet, Matrix, backward, forward, init_model
from hetfed.numfmt import F16, F32, F64, OutOfRange
from hetfed.synthdata import DataSpec, generate

SMALL = DataSpec(n_train=200, n_val=200, n_test=10, seed=4)


@pytest.fixture(scope="module")
def small_data():
    return generate(SMALL)


def const_grads(model, value, fmt=F64, n=1):
    return GradientSet(
        tuple(Matrix(np.full(w.shape, float(value)), fmt) for w in model.weights),
        tuple(Matrix(np.full(b.shape, float(value)), fmt) for b in model.biases),
        fmt,
        n,
    )


def random_grads(model, seed, fmt=F64):
    rng = np.random.default_rng(seed)
    return GradientSet(
        tuple(Matrix(rng.normal(size=w.shape), fmt) for w in model.weights),
        tuple(Matrix(rng.normal(size=b.shape), fmt) for b in model.biases),
        fmt,
        1,
    )


def update(model, payload, n, dev=0, state=None):
    if state is None:
        _, state = apply_plan(model, CompressionPlan())
    return DeviceUpdate(dev, payload, n, state.masks, 0, 0.0, 0.0, state, memory_footprint(model, 1))


# ---- partition ------------------------------------------------------------


def test_partition_examples(small_data):
    train = small_data[0]
    (whole,) = partition(train, 1, 0)
    assert np.array_equal(whole.features.as_float(), train.features.as_float())
    parts = partition(train, 4, 7)
    assert [p.n for p in parts] == [50] * 4
    rows = np.concatenate([p.features.as_float() for p in parts])
    assert sorted(map(tuple, rows)) == sorted(map(tuple, train.features.as_float()))
    again = partition(train, 4, 7)
    assert all(np.array_equal(a.features.as_float(), b.features.as_float()) for a, b in zip(parts, again))
    assert [p.n for p in partition(train, 3, 0)] == [67, 67, 66]
    with pytest.raises(OutOfRange):
        partition(train, 201, 0)


# ---- local_step -----------------------------------------------------------


def test_fedsgd_local_step_is_plain_backward(default_model, small_data):
    part = partition(small_data[0], 2, 0)[1]
    u = local_step(DeviceProfile(1), default_model, part, 0.5, "fedsgd")
    trace = forward(default_model, part)
    assert u.payload.bit_equal(backward(default_model, trace, part.labels))
    assert u.sample_count == part.n and all(c.all() for c in u.coverage)


def test_full_prune_uploads_nothing(default_model, small_data):
    dev = DeviceProfile(0, plan=CompressionPlan(prune_ratio=1.0))
    u = local_step(dev, default_model, small_data[0], 0.5, "hetero")
    assert all((w.values == 0).all() for w in u.payload.weights)
    assert not any(c.any() for c in u.coverage)


def test_single_epoch_pseudo_gradient(default_model, small_data):
    train = small_data[0]
    _, state = apply_plan(default_model, CompressionPlan())
    g = backward(default_model, forward(default_model, train), train.labels)
    after, _ = train_compressed_epoch(default_model, state, train, 0.5)
    pseudo = _pseudo_gradient(default_model, after, 0.5, train.n)
    params = default_model.weights + default_model.biases
    for a, b, w in zip(pseudo.weights + pseudo.biases, g.weights + g.biases, params):
        # (w - (w - lr g)) / lr == g up to the rounding of the update: ulp(w) / lr
        tol = np.spacing(np.abs(w.values) + 0.5 * np.abs(b.values)) / 0.5
        assert (np.abs(a.values - b.values) <= tol).all()
    one = local_step(DeviceProfile(0, local_epochs=1), default_model, train, 0.5, "hetero")
    assert one.payload.bit_equal(g)


def test_memory_cap_raises_in_local_step(default_model, small_data):
    from hetfed.fedsim import MemoryExceeded

    with pytest.raises(MemoryExceeded):
        local_step(DeviceProfile(0, mem_cap=1000), default_model, small_data[0], 0.5, "fedsgd")


# ---- aggregators ----------------------------------------------------------


def test_fedsgd_examples(default_model):
    g = random_grads(default_model, 0)
    assert fedsgd_aggregate([update(default_model, g, 37)]).bit_equal(g)
    neg = GradientSet(tuple(Matrix(-m.values, F64) for m in g.weights), tuple(Matrix(-m.values, F64) for m in g.biases), F64, 1)
    zero = fedsgd_aggregate([update(default_model, g, 5, 0), update(default_model, neg, 5, 1)])
    assert all((m.values == 0).all() for m in zero.weights + zero.biases)
    mix = fedsgd_aggregate([update(default_model, const_grads(default_model, 1.0), 100, 0),
                            update(default_model, const_grads(default_model, 2.0), 300, 1)])
    assert all((m.values == 1.75).all() for m in mix.weights + mix.biases)
    with pytest.raises(EmptyUpdateSet):
        fedsgd_aggregate([])


def test_fedavg_examples(default_model):
    ups = [update(default_model, default_model, 10, i) for i in range(4)]
    assert fedavg_aggregate(ups).bit_equal(default_model)
    # coefficients like 1/3 are rounded, so identity holds to within an ulp
    three = fedavg_aggregate([update(default_model, default_model, 10, i) for i in range(3)])
    for a, b in zip(three.weights + three.biases, default_model.weights + default_model.biases):
        assert (np.abs(a.values - b.values) <= np.spacing(np.abs(b.values))).all()
    w0 = default_model.with_params(*(tuple(Matrix(np.full(m.shape, v), F64) for m in ms) for v, ms in ((0.0, default_model.weights), (0.0, default_model.biases))))
    w1 = default_model.with_params(*(tuple(Matrix(np.full(m.shape, v), F64) for m in ms) for v, ms in ((1.0, default_model.weights), (1.0, default_model.biases))))
    avg = fedavg_aggregate([update(default_model, w0, 8, 0), update(default_model, w1, 8, 1)])
    assert all((m.values == 0.5).all() for m in avg.weights + avg.biases)


def test_hetero_full_coverage_equals_fedsgd(default_model):
    ups = [update(default_model, random_grads(default_model, s), n, s) for s, n in enumerate((30, 50, 20, 77))]
    fed = fedsgd_aggregate(ups)
    het, cov = hetero_aggregate(ups)
    assert het.bit_equal(fed)
    assert all((c == 4).all() for c in cov)


def checkerboard_state(model, parity):
    masks = tuple((np.indices(w.shape).sum(axis=0) % 2 == parity) for w in model.weights)
    return CompressedState(CompressionPlan(0.5), F64, F64, model.layer_dims, masks, (None,) * len(masks))


def test_hetero_stitches_complementary_masks(default_model):
    states = [checkerboard_state(default_model, p) for p in (0, 1)]
    grads = [random_grads(default_model, 10 + p) for p in (0, 1)]
    ups = [update(default_model, g, n, i, s) for i, (g, n, s) in enumerate(zip(grads, (40, 160), states))]
    out, cov = hetero_aggregate(ups)
    for j, w in enumerate(out.weights):
        # brute force: each position from its only coverer
        for pos in np.ndindex(w.shape):
            owner = 0 if states[0].masks[j][pos] else 1
            assert w.values[pos] == grads[owner].weights[j].values[pos]
        assert (cov[j] == 1).all()
    for j, b in enumerate(out.biases):
        expected = 0.2 * grads[0].biases[j].values + 0.8 * grads[1].biases[j].values
        assert np.array_equal(b.values, expected)


def test_hetero_single_coverer(default_model):
    _, pruned = apply_plan(default_model, CompressionPlan(0.5))
    _, full = apply_plan(default_model, CompressionPlan())
    g_full, g_half = random_grads(default_model, 1), random_grads(default_model, 2)
    for j, m in enumerate(g_half.weights):
        m.values[~pruned.masks[j]] = 0.0
    ups = [update(default_model, g_full, 10, 0, full), update(default_model, g_half, 30, 1, pruned)]
    out, cov = hetero_aggregate(ups)
    for j, w in enumerate(out.weights):
        only = ~pruned.masks[j]
        assert np.array_equal(w.values[only], g_full.weights[j].values[only])
        assert (cov[j][only] == 1).all() and (cov[j][~only] == 2).all()


@pytest.mark.parametrize("agg", [fedsgd_aggregate, hetero_aggregate])
def test_aggregation_is_permutation_invariant(default_model, agg):
    ups = [update(default_model, random_grads(default_model, s), 10 + 7 * s, s) for s in range(5)]
    a = agg(ups)
    b = agg(ups[::-1])
    c = agg([ups[2], ups[0], ups[4], ups[1], ups[3]])
    pick = (lambda r: r[0]) if agg is hetero_aggregate else (lambda r: r)
    assert pick(a).bit_equal(pick(b)) and pick(a).bit_equal(pick(c))


def test_scaled_counts_within_one_ulp(default_model):
    grads = [random_grads(default_model, s) for s in range(3)]
    base = fedsgd_aggregate([update(default_model, g, n, i) for i, (g, n) in enumerate(zip(grads, (3, 5, 11)))])
    scaled = fedsgd_aggregate([update(default_model, g, 7 * n, i) for i, (g, n) in enumerate(zip(grads, (3, 5, 11)))])
    for a, b in zip(base.weights + base.biases, scaled.weights + scaled.biases):
        ulp = np.spacing(np.maximum(np.abs(a.values), np.abs(b.values)))
        # three rounded coefficients and two additions: allow one ulp of the largest term
        scale = np.max([np.abs(g.weights[0].values).max() for g in grads])
        assert (np.abs(a.values - b.values) <= np.maximum(ulp, np.spacing(scale))).all()


# ---- sessions -------------------------------------------------------------


def test_zero_rounds(default_model):
    res = run_session(SessionConfig(rounds=0, data=SMALL))
    assert len(res) == 0 and res.model.bit_equal(res.initial_model)


def test_single_device_fedavg_is_local_training():
    cfg = SessionConfig(rounds=1, aggregator="fedavg", data=SMALL, devices=(DeviceProfile(0, local_epochs=3),))
    res = run_session(cfg)
    train, _, _ = generate(SMALL)
    model = res.initial_model
    _, state = apply_plan(model, CompressionPlan())
    for _ in range(3):
        model, _ = train_compressed_epoch(model, state, train, cfg.lr)
    assert res.model.bit_equal(model)


def test_uncovered_weights_unchanged():
    devs = tuple(DeviceProfile(i, plan=CompressionPlan(0.5), seed=i) for i in range(2))
    res = run_session(SessionConfig(rounds=3, aggregator="hetero", data=SMALL, devices=devs))
    # both devices prune the same smallest half of the first-round model
    cov = res[0].coverage
    assert any((c == 0).any() for c in cov)
    first = run_session(SessionConfig(rounds=1, aggregator="hetero", data=SMALL, devices=devs))
    for w0, w1, c in zip(first.initial_model.weights, first.model.weights, cov):
        assert np.array_equal(w0.values[c == 0], w1.values[c == 0])


def test_memory_capped_device_is_skipped():
    devs = (DeviceProfile(0), DeviceProfile(1, mem_cap=100.0))
    res = run_session(SessionConfig(rounds=2, data=SMALL, devices=devs))
    for r in res:
        d0, d1 = r.devices
        assert not d0.skipped and d1.skipped
        assert d1.times.total == 0 and d1.payload_up == 0 and d1.mem_bytes > 100


def test_session_is_deterministic():
    devs = (DeviceProfile(0), DeviceProfile(1, plan=CompressionPlan(0.3, F16, 4), seed=5))
    cfg = SessionConfig(rounds=3, aggregator="hetero", data=SMALL, devices=devs)
    a, b = run_session(cfg), run_session(cfg)
    assert a.model.bit_equal(b.model)
    assert [r.accuracy for r in a] == [r.accuracy for r in b]


def test_f32_global_session_runs():
    res = run_session(SessionConfig(rounds=2, global_format=F32, data=SMALL))
    assert res.model.fmt == F32 and len(res) == 2


# ---- configuration --------------------------------------------------------


def test_config_from_dict():
    cfg = config_from_dict(
        {
            "global_format": "f32",
            "rounds": 5,
            "aggregator": "hetero",
            "data": {"n_train": 100, "seed": 2},
            "devices": [{"slowdown": 2.0}, {"plan": {"prune": 0.5, "format": "f16"}, "local_epochs": 2}],
        }
    )
    assert cfg.global_format == F32 and cfg.data.n_train == 100
    assert cfg.devices[1].plan == CompressionPlan(0.5, F16) and cfg.devices[1].seed == 1
    assert cfg.devices[0].slowdown == 2.0


@pytest.mark.parametrize(
    "bad",
    [
        {"rounds": -1},
        {"aggregator": "median"},
        {"lr": 0},
        {"colour": "blue"},
        {"devices": [{"plan": {"prune": 0.5}}]},  # fedsgd cannot stitch pruned shapes
        {"devices": [{"slowdown": 0}]},
        {"devices": [{"bandwidth": 3}]},
        {"devices": []},
        {"global_format": "f99"},
    ],
)
def test_config_errors(bad):
    with pytest.raises((ConfigError, ValueError)):
        config_from_dict(bad)


def test_load_config_reports_position(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text('{\n  "rounds": 3,\n  "lr": ,\n}\n')
    with pytest.raises(ConfigError, match=r"cfg\.json:3:9"):
        load_config(p)
    p.write_text(json.dumps({"rounds": 2}))
    assert load_config(p).rounds == 2

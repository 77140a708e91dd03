import math

import numpy as np
import pytest

from hetfed.kernels import kernel_for
from hetfed.mlp import (
    DEFAULT_DIMS,
    Dataset,
    EmptyDataset,
    GradientSet,
    Matrix,
    MlpModel,
    ShapeMismatch,
    apply_update,
    backward,
    default_layer_dims,
    evaluate,
    forward,
    grad_check,
    init_model,
    loss,
    train_epoch,
)
from hetfed.numfmt import F16, F32, F64, arith_values, decode, make_format, transcend_value, ulp
from hetfed.synthdata import DataSpec, generate


def tiny_model(w: float, b: float = 0.0, fmt=F64) -> MlpModel:
    return MlpModel((1, 1), (Matrix.encode([[w]], fmt),), (Matrix.encode([[b]], fmt),), fmt)


def zero_model(dims=DEFAULT_DIMS, fmt=F64) -> MlpModel:
    m = init_model(dims, fmt)
    return m.with_params([Matrix.encode(np.zeros(w.shape), fmt) for w in m.weights], m.biases)


def scalar_layer(a, w, b, fmt):
    """Independent straight-line evaluation with the scalar softfloat (extended sigmoid)."""
    n, k = a.shape
    out = np.empty((n, w.shape[1]))
    for s in range(n):
        for j in range(w.shape[1]):
            acc = decode(arith_values("mul", float(a[s, 0]), float(w[0, j]), fmt))
            for i in range(1, k):
                p = decode(arith_values("mul", float(a[s, i]), float(w[i, j]), fmt))
                acc = decode(arith_values("add", float(acc), float(p), fmt))
            z = decode(arith_values("add", float(acc), float(b[0, j]), fmt))
            out[s, j] = float(decode(transcend_value("sigmoid", float(z), fmt)))
    return out


# ---- structure ------------------------------------------------------------


def test_default_architecture_has_511_parameters(default_model):
    assert default_model.layer_dims == (5, 10, 10, 10, 10, 10, 1)
    assert default_model.n_params == 511
    assert default_model.n_weights == 460
    assert default_layer_dims(5, 4, 10) == (5, 10, 10, 10, 10, 1)


def test_init_is_deterministic_with_zero_biases():
    a = init_model(DEFAULT_DIMS, F32, seed=42)
    b = init_model(DEFAULT_DIMS, F32, seed=42)
    assert a.bit_equal(b)
    assert not a.bit_equal(init_model(DEFAULT_DIMS, F32, seed=43))
    assert all((bias.values == 0).all() for bias in a.biases)


def test_init_bounds():
    m = init_model(DEFAULT_DIMS, F64, seed=0, gain=1.0)
    for w, (fi, fo) in zip(m.weights, zip(DEFAULT_DIMS[:-1], DEFAULT_DIMS[1:])):
        assert np.abs(w.values).max() <= math.sqrt(6 / (fi + fo))


@pytest.mark.parametrize("dims", [(), (5,), (5, 0, 1)])
def test_init_rejects_bad_dims(dims):
    with pytest.raises(ValueError):
        init_model(dims)


def test_shape_errors(default_model):
    with pytest.raises(ShapeMismatch):
        forward(default_model, np.zeros((3, 4)))
    with pytest.raises(ShapeMismatch):
        MlpModel((2, 1), (Matrix.encode(np.zeros((1, 1)), F64),), (Matrix.encode([[0.0]], F64),), F64)
    g = GradientSet.zeros_like(init_model((5, 3, 1)))
    with pytest.raises(ShapeMismatch):
        apply_update(default_model, g, 0.1)


# ---- forward --------------------------------------------------------------


def test_zero_model_outputs_half():
    trace = forward(zero_model(), np.random.default_rng(0).normal(size=(4, 5)))
    assert all((a == 0.5).all() for a in trace.post[1:])


def test_single_unit_at_zero_input():
    assert forward(tiny_model(1.0), [[0.0]]).output[0, 0] == 0.5


@pytest.mark.parametrize("spec", ["f32", "f16", "float(6,12)"])
def test_forward_matches_scalar_oracle_bit_exactly(spec):
    fmt = make_format(spec)
    m = init_model(DEFAULT_DIMS, fmt, seed=3)
    x = kernel_for(fmt).round(np.random.default_rng(3).normal(size=(6, 5)))
    a = x.astype(np.float64)
    for w, b in zip(m.weights, m.biases):
        a = scalar_layer(a, w.as_float(), b.as_float(), fmt)
    assert np.array_equal(forward(m, x).output.astype(np.float64), a)


def test_forward_binary64_within_one_ulp_per_layer():
    m = init_model(DEFAULT_DIMS, F64, seed=3)
    x = np.random.default_rng(3).normal(size=(6, 5))
    trace = forward(m, x)
    for layer, (w, b) in enumerate(zip(m.weights, m.biases)):
        ref = scalar_layer(trace.post[layer], w.values, b.values, F64)
        u = np.vectorize(lambda v: ulp(v, F64))(ref)
        assert (np.abs(trace.post[layer + 1] - ref) <= u).all()


# ---- backward -------------------------------------------------------------


def test_output_delta_vanishes_when_prediction_is_exact():
    m = zero_model((2, 1))
    # zero model predicts 0.5 everywhere; backprop with labels 0.5 gives a zero delta
    trace = forward(m, np.ones((3, 2)))
    g = backward(m, trace, np.full(3, 0.5))
    assert (g.weights[0].values == 0).all() and (g.biases[0].values == 0).all()


def test_single_weight_chain_rule():
    w, x, y = 0.5, 2.0, 1.0
    g = backward(tiny_model(w), forward(tiny_model(w), [[x]]), [y])
    y_hat = 1 / (1 + math.exp(-w * x))
    assert g.weights[0].values[0, 0] == pytest.approx((y_hat - y) * x, rel=1e-15)
    assert g.biases[0].values[0, 0] == pytest.approx(y_hat - y, rel=1e-15)


def test_grad_check_single_parameter():
    batch = Dataset.from_arrays([[0.7], [-1.3], [2.0]], [1, 0, 1])
    assert grad_check(tiny_model(0.3, 0.1), batch) <= 1e-9


@pytest.mark.parametrize("seed", range(3))
def test_grad_check_default_architecture(seed):
    train, _, _ = generate(DataSpec(n_train=16, n_val=1, n_test=1, seed=seed))
    assert grad_check(init_model(DEFAULT_DIMS, F64, seed=seed), train) <= 1e-5


def test_grad_check_arguments():
    batch = Dataset.from_arrays([[1.0]], [1])
    with pytest.raises(ValueError):
        grad_check(tiny_model(0.3), batch, eps=0)
    with pytest.raises(ValueError):
        grad_check(tiny_model(0.3, fmt=F32), batch.to(F32))


# ---- update / epoch -------------------------------------------------------


def test_update_examples(default_model):
    g = backward(default_model, forward(default_model, np.ones((2, 5))), [1, 0])
    assert apply_update(default_model, g, 0.0).bit_equal(default_model)
    assert apply_update(default_model, GradientSet.zeros_like(default_model), 0.5).bit_equal(default_model)
    m = tiny_model(1.0)
    g1 = GradientSet((Matrix.encode([[0.5]], F64),), (Matrix.encode([[0.0]], F64),), F64, 1)
    assert apply_update(m, g1, 0.1).weights[0].values[0, 0] == 0.95


def test_train_epoch_is_the_composition():
    train, _, _ = generate(DataSpec(n_train=64, seed=2), F32)
    m = init_model(DEFAULT_DIMS, F32, seed=2)
    trace = forward(m, train)
    manual = apply_update(m, backward(m, trace, train), 0.5)
    stepped, pre_loss = train_epoch(m, train, 0.5)
    assert stepped.bit_equal(manual)
    assert pre_loss == loss(m, train)


def test_zero_rate_epochs_change_nothing(default_model):
    train, _, _ = generate(DataSpec(n_train=32))
    a, _ = train_epoch(default_model, train, 0.0)
    b, _ = train_epoch(a, train, 0.0)
    assert a.bit_equal(b) and a.bit_equal(default_model)


def test_empty_dataset():
    m = tiny_model(1.0)
    empty = Dataset.from_arrays(np.zeros((0, 1)), np.zeros(0))
    with pytest.raises(EmptyDataset):
        train_epoch(m, empty, 0.1)
    with pytest.raises(EmptyDataset):
        evaluate(m, empty)


def test_plain_glorot_initial_loss_near_ln2():
    train, _, _ = generate(DataSpec(n_train=1000, seed=0))
    for seed in range(20):
        assert abs(loss(init_model(DEFAULT_DIMS, F64, seed, gain=1.0), train) - math.log(2)) <= 0.3


def test_training_is_deterministic():
    train, _, _ = generate(DataSpec(n_train=100, seed=5), F16)
    runs = []
    for _ in range(2):
        m = init_model(DEFAULT_DIMS, F16, seed=5)
        for _ in range(5):
            m, _ = train_epoch(m, train, 0.5)
        runs.append(m)
    assert runs[0].bit_equal(runs[1])


def test_formats_share_structure():
    shapes = []
    for fmt in (F32, F64):
        train, _, _ = generate(DataSpec(n_train=50), fmt)
        m, _ = train_epoch(init_model(DEFAULT_DIMS, fmt, 1), train, 0.5)
        shapes.append([w.shape for w in m.weights] + [b.shape for b in m.biases])
    assert shapes[0] == shapes[1]


def test_loss_monotone_after_warmup():
    """Full-batch loss is non-increasing over epochs 10-500 in at least 18 of 20 seeds."""
    ok = 0
    for seed in range(20):
        train, _, _ = generate(DataSpec(n_train=500, seed=seed))
        m = init_model(DEFAULT_DIMS, F64, seed)
        losses = []
        for _ in range(500):
            m, l = train_epoch(m, train, 0.5)
            losses.append(l)
        ok += bool(np.all(np.diff(losses[9:]) <= 0))
    assert ok >= 18


# ---- evaluate -------------------------------------------------------------


def test_evaluate_examples():
    _, val, _ = generate(DataSpec(n_val=1000))
    assert evaluate(zero_model(), val) == 0.5
    x = np.array([[1.0] * 5, [-1.0] * 5, [2.0] * 5, [-0.5] * 5])
    data = Dataset.from_arrays(x, [1, 0, 1, 0])
    m = init_model((5, 1))
    perfect = m.with_params([Matrix.encode(np.full((5, 1), 20.0), F64)], m.biases)
    assert evaluate(perfect, data) == 1.0


def test_tie_counts_as_class_one():
    data = Dataset.from_arrays([[0.0]], [1])
    assert evaluate(tiny_model(3.0), data) == 1.0

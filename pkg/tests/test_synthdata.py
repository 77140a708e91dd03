import math

import numpy as np
import pytest

from hetfed.numfmt import F16
from hetfed.synthdata import DataSpec, balanced_labels, generate, read_csv, write_csv

BAYES = 0.5 * math.erfc(-math.sqrt(5) / math.sqrt(2))  # 1 - Phi(-sqrt 5)


def test_bayes_constant():
    assert BAYES == pytest.approx(0.98733, abs=1e-5)


def test_deterministic():
    a = generate(DataSpec(seed=9))
    b = generate(DataSpec(seed=9))
    for x, y in zip(a, b):
        assert x.features.bit_equal(y.features) and x.labels.bit_equal(y.labels)


def test_class_balance():
    assert balanced_labels(5).tolist() == [1, 0, 1, 0, 1]
    for n in (1, 2, 999, 1000):
        train, _, _ = generate(DataSpec(n_train=n))
        ones = int(train.labels.values.sum())
        assert ones == (n + 1) // 2


def test_streams_are_independent():
    _, val_a, test_a = generate(DataSpec(n_train=100, seed=3))
    _, val_b, test_b = generate(DataSpec(n_train=2000, seed=3))
    assert val_a.features.bit_equal(val_b.features)
    assert test_a.features.bit_equal(test_b.features)


def test_degenerate_std_recovers_means():
    train, _, _ = generate(DataSpec(std=1e-9, mean0=-1.5, mean1=0.25))
    x = train.features.values
    y = train.labels.values.ravel()
    assert np.round(x[y == 0].mean(axis=0), 6).tolist() == [-1.5] * 5
    assert np.round(x[y == 1].mean(axis=0), 6).tolist() == [0.25] * 5


def test_class_means_within_clt_bound():
    spec = DataSpec(n_train=4000)
    train, _, _ = generate(spec)
    x, y = train.features.values, train.labels.values.ravel()
    for label, mean in ((0, spec.mean0), (1, spec.mean1)):
        part = x[y == label]
        assert np.all(np.abs(part.mean(axis=0) - mean) <= 4 * spec.std / math.sqrt(len(part)))


def test_linear_rule_reaches_bayes_accuracy():
    train, _, _ = generate(DataSpec(n_train=100_000, n_val=1, n_test=1, seed=1))
    pred = (train.features.values.sum(axis=1) >= 0).astype(float)
    acc = float((pred == train.labels.values.ravel()).mean())
    assert abs(acc - BAYES) <= 0.015


@pytest.mark.parametrize("kwargs", [dict(std=0), dict(std=-1), dict(n_train=0), dict(features=0)])
def test_invalid_spec(kwargs):
    with pytest.raises(ValueError):
        DataSpec(**kwargs)


def test_encoded_in_requested_format():
    train, _, _ = generate(DataSpec(n_train=10), F16)
    assert train.fmt == F16 and train.features.values.dtype == np.float16


def test_csv_round_trip(tmp_path):
    train, _, _ = generate(DataSpec(n_train=20, features=3))
    write_csv(train, tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "f0,f1,f2,label"
    back = read_csv(tmp_path / "t.csv")
    assert back.features.bit_equal(train.features) and back.labels.bit_equal(train.labels)

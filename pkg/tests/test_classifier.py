from __future__ import annotations

import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calfplay.classifier import (LAYER_SIZES, PARAM_COUNT, EarlyStopping, TrainConfig, adam_init, adam_step,
                                 backward, count_params, cross_entropy, evaluate, evaluate_predictions, forward,
                                 init_mlp, load_checkpoint, save_checkpoint, softmax, train)
from calfplay.errors import CalfplayError
from oracles import adam_scalar, fd_gradient_errors


def test_parameter_count_and_shapes():
    p = init_mlp(0)
    assert count_params(p) == PARAM_COUNT == 656_899
    assert p["W3"].shape == (256, 3) and not any(p[f"b{k}"].any() for k in (1, 2, 3))
    bound = 1 / math.sqrt(1024)
    assert np.abs(p["W1"]).max() <= bound


def test_same_seed_bit_identical():
    a, b = init_mlp(3), init_mlp(3)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert init_mlp(4)["W1"].tobytes() != a["W1"].tobytes()


def toy_params():
    return {
        "W1": np.array([[0.3, -0.7], [0.2, 0.5]]), "b1": np.array([1.0, -2.0]),
        "W2": np.array([[2.0, -1.0], [3.0, 4.0]]), "b2": np.array([0.5, 0.5]),
        "W3": np.array([[1.0, 2.0], [3.0, 4.0]]), "b3": np.array([0.1, -0.1]),
    }


def test_toy_zero_input_by_hand():
    # h1 = relu(1, -2) = (1, 0); h2 = relu((2, -1) + 0.5) = (2.5, 0); logits = (2.5, 5) + (0.1, -0.1)
    logits, _ = forward(toy_params(), np.zeros((1, 2)))
    np.testing.assert_allclose(logits, [[2.6, 4.9]], rtol=0, atol=1e-12)


def test_eval_mode_deterministic_and_input_checks():
    p = init_mlp(1)
    x = np.random.default_rng(0).normal(size=(4, 1024))
    assert np.array_equal(forward(p, x)[0], forward(p, x)[0])
    with pytest.raises(ValueError):
        forward(p, np.full((1, 1024), np.nan))
    with pytest.raises(ValueError):
        forward(p, np.zeros((1, 1000)))


def test_dropout_expectation_linear_case():
    # positive weights and inputs keep every ReLU in its linear region
    rng = np.random.default_rng(0)
    p = {"W1": rng.uniform(0.1, 1, (2, 2)), "b1": np.full(2, 0.2), "W2": rng.uniform(0.1, 1, (2, 2)),
         "b2": np.full(2, 0.2), "W3": rng.uniform(0.1, 1, (2, 2)), "b3": np.zeros(2)}
    x = np.ones((10_000, 2))
    train_logits, _ = forward(p, x, train=True, rng=np.random.default_rng(1), dropout_p=0.5)
    eval_logits, _ = forward(p, x[:1])
    np.testing.assert_allclose(train_logits.mean(axis=0), eval_logits[0], rtol=0.02)


def test_cross_entropy_examples():
    loss, _ = cross_entropy(np.zeros((1, 3)), np.array([2]))
    assert loss == pytest.approx(math.log(3), abs=1e-15)
    loss, _ = cross_entropy(np.array([[30.0, -30.0, -30.0]]), np.array([0]))
    assert loss == pytest.approx(0.0, abs=1e-20)
    logits = np.random.default_rng(2).normal(size=(5, 3))
    y = np.array([0, 1, 2, 1, 0])
    a, ga = cross_entropy(logits, y)
    b, gb = cross_entropy(logits + 100, y)
    assert a == pytest.approx(b, abs=1e-12)
    np.testing.assert_allclose(ga, gb, atol=1e-12)


@given(st.lists(st.floats(-500, 500), min_size=3, max_size=3))
def test_softmax_sums_to_one(row):
    assert abs(softmax(np.array([row])).sum() - 1) <= 1e-12


def batch_loss(params, x, y, seed, dropout_p):
    rng = np.random.default_rng(seed)  # same masks on every call
    logits, cache = forward(params, x, train=dropout_p > 0, rng=rng, dropout_p=dropout_p)
    loss, dlogits = cross_entropy(logits, y)
    return loss, cache, dlogits


@pytest.mark.parametrize("dropout_p", [0.0, 0.5])
def test_gradients_match_finite_differences(dropout_p):
    rng = np.random.default_rng(5)
    params = init_mlp(0, dtype=np.float64)
    for b in range(5):
        x = rng.normal(size=(16, 1024))
        y = rng.integers(0, 3, 16)
        _, cache, dlogits = batch_loss(params, x, y, b, dropout_p)
        grads = backward(params, cache, dlogits)
        errors = fd_gradient_errors(lambda: batch_loss(params, x, y, b, dropout_p)[0], params, grads, 20, rng)
        assert max(errors) < 1e-4, errors


@settings(max_examples=10)
@given(st.integers(0, 2**31 - 1))
def test_gradient_check_property(seed):
    rng = np.random.default_rng(seed)
    sizes = (int(rng.integers(2, 9)), int(rng.integers(2, 9)), int(rng.integers(2, 9)), 3)
    params = init_mlp(seed, sizes, dtype=np.float64)
    for k in params:
        if k.startswith("b"):
            params[k] += rng.normal(0, 0.1, params[k].shape)
    x = rng.normal(size=(16, sizes[0]))
    y = rng.integers(0, 3, 16)
    _, cache, dlogits = batch_loss(params, x, y, seed, 0.5)
    grads = backward(params, cache, dlogits)
    assert max(fd_gradient_errors(lambda: batch_loss(params, x, y, seed, 0.5)[0], params, grads, 20, rng)) < 1e-4


def test_zero_upstream_gradient():
    p = init_mlp(0, (6, 5, 4, 3), dtype=np.float64)
    _, cache = forward(p, np.ones((2, 6)))
    grads = backward(p, cache, np.zeros((2, 3)))
    assert all(not g.any() for g in grads.values())
    with pytest.raises(ValueError):
        backward(p, cache, np.zeros((3, 3)))


def test_single_sample_equals_duplicated_batch():
    p = init_mlp(0, (6, 5, 4, 3), dtype=np.float64)
    x = np.random.default_rng(1).normal(size=(1, 6))
    one = backward(p, *batch_loss(p, x, np.array([1]), 0, 0.0)[1:])
    many = backward(p, *batch_loss(p, np.repeat(x, 8, 0), np.full(8, 1), 0, 0.0)[1:])
    for k in one:
        np.testing.assert_allclose(one[k], many[k], rtol=1e-12, atol=1e-15)


def scalar_adam(w0, lr, steps, grad_scale=1.0):
    p = {"w": np.array([w0])}
    state = adam_init(p)
    for _ in range(steps):
        adam_step(p, {"w": grad_scale * 2 * p["w"]}, state, lr)
    return float(p["w"][0])


def test_adam_zero_gradient_no_change():
    p = {"w": np.array([1.5, -2.0])}
    state = adam_init(p)
    for _ in range(10):
        adam_step(p, {"w": np.zeros(2)}, state, 0.001)
    assert p["w"].tolist() == [1.5, -2.0]


def test_adam_quadratic_matches_scalar_oracle():
    for lr, steps in [(0.001, 2000), (0.01, 2000)]:
        got = scalar_adam(5.0, lr, steps)
        assert got == pytest.approx(adam_scalar(5.0, lambda w: 2 * w, lr, steps), rel=1e-12, abs=1e-15)
    # steps are bounded by about lr, so 2,000 steps at lr 0.001 move w by at most about 2
    assert 5.0 - scalar_adam(5.0, 0.001, 2000) <= 2000 * 0.001 * 1.001
    assert abs(scalar_adam(5.0, 0.01, 2000)) < 0.1


@pytest.mark.parametrize("scale", [1e-3, 1.0, 1e3])
def test_adam_first_step_is_lr(scale):
    assert abs(5.0 - scalar_adam(5.0, 0.001, 1, scale)) == pytest.approx(0.001, rel=0.05)


def test_adam_weight_decay_enters_gradient():
    p = {"w": np.array([2.0])}
    state = adam_init(p)
    adam_step(p, {"w": np.zeros(1)}, state, 0.01, weight_decay=1e-5)
    g = 1e-5 * 2.0
    assert p["w"][0] == pytest.approx(2.0 - 0.01 * g / (g + 1e-8), rel=1e-12)


def test_early_stopping_patience_example():
    stop = EarlyStopping(5)
    epochs = 0
    for epoch, loss in enumerate([1.0, 0.9, 0.91, 0.92, 0.93, 0.94, 0.95, 0.5], start=1):
        stop.update(epoch, loss)
        epochs = epoch
        if stop.should_stop:
            break
    assert (epochs, stop.best_epoch, stop.best_loss) == (7, 2, 0.9)


def test_monotone_improvement_runs_all_epochs():
    stop = EarlyStopping(5)
    ran = 0
    for epoch in range(1, 51):
        stop.update(epoch, 1.0 / epoch)
        ran = epoch
        if stop.should_stop:
            break
    assert ran == 50 and stop.best_epoch == 50


def test_equal_loss_is_not_improvement():
    stop = EarlyStopping(2)
    assert stop.update(1, 0.5) and not stop.update(2, 0.5)


def clusters(per_class, seed, separation=6.0):
    rng = np.random.default_rng(seed)
    means = np.zeros((3, 1024))
    for c in range(3):
        means[c, c] = separation / math.sqrt(2)  # pairwise distance = separation
    y = np.repeat(np.arange(3), per_class)
    x = means[y] + rng.normal(size=(len(y), 1024))
    perm = rng.permutation(len(y))
    return x[perm].astype(np.float32), y[perm]


def test_train_on_separable_clusters_and_log():
    x, y = clusters(300, 0, separation=12.0)
    log = io.StringIO()
    res = train(x[:600], y[:600], x[600:], y[600:], TrainConfig(seed=1), log, {"seed": 1})
    lines = [json.loads(line) for line in log.getvalue().splitlines()]
    assert lines[0]["type"] == "header" and lines[0]["param_count"] == PARAM_COUNT
    assert lines[-1]["type"] == "final" and len(lines) == res.epochs_run + 2
    first = next(h["epoch"] for h in res.history if h["val_accuracy"] >= 0.99)
    assert first < 50
    best = min(h["val_loss"] for h in res.history)
    assert res.best_val_loss == best
    from calfplay.classifier import loss_and_accuracy
    assert loss_and_accuracy(res.params, x[600:], y[600:])[0] == pytest.approx(best, rel=1e-6)


def test_training_deterministic():
    x, y = clusters(40, 1)
    cfg = TrainConfig(max_epochs=3, seed=2)
    a = train(x[:90], y[:90], x[90:], y[90:], cfg)
    b = train(x[:90], y[:90], x[90:], y[90:], cfg)
    assert a.history == b.history
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


def test_train_rejects_empty_split():
    with pytest.raises(ValueError):
        train(np.zeros((0, 1024)), np.zeros(0), np.zeros((1, 1024)), np.zeros(1))


def test_eval_precision_recall_example():
    # class 0: TP 90, FP 10, FN 5
    y_true = [0] * 95 + [1] * 10 + [2] * 100
    y_pred = [0] * 90 + [1] * 5 + [0] * 10 + [2] * 100
    r = evaluate_predictions(y_true, y_pred, ["a", "b", "c"])
    assert r.precision[0] == pytest.approx(0.90)
    assert round(r.recall[0], 3) == 0.947 and round(r.f1[0], 3) == 0.923


def test_eval_constant_and_perfect():
    y = [0, 1, 2] * 10
    r = evaluate_predictions(y, [1] * 30, ["a", "b", "c"])
    assert r.accuracy == pytest.approx(1 / 3) and r.recall[1] == 1.0 and r.precision[1] == pytest.approx(1 / 3)
    assert r.precision[0] is None and r.f1[0] is None
    r = evaluate_predictions(y, y, ["a", "b", "c"])
    assert r.accuracy == 1.0 and r.f1 == [1.0] * 3 and r.counts == (np.eye(3, dtype=int) * 10).tolist()


def test_eval_absent_class_recall_null():
    r = evaluate_predictions([0, 0, 1], [0, 2, 1], ["a", "b", "c"])
    assert r.recall[2] is None and r.precision[2] == 0.0 and r.row_percent[2] == [None] * 3


@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=200))
def test_eval_matches_sklearn(pairs):
    from sklearn.metrics import confusion_matrix, precision_recall_fscore_support
    y_true, y_pred = map(list, zip(*pairs))
    r = evaluate_predictions(y_true, y_pred, ["a", "b", "c"])
    cm = confusion_matrix(y_true, y_pred, labels=[0, 1, 2])
    assert r.counts == cm.tolist()
    assert r.accuracy == np.trace(cm) / cm.sum()
    p, rec, f, s = precision_recall_fscore_support(y_true, y_pred, labels=[0, 1, 2], zero_division=np.nan)
    for mine, ref in [(r.precision, p), (r.recall, rec)]:
        for a, b in zip(mine, ref):
            assert (a is None and np.isnan(b)) or a == pytest.approx(b)
    for a, b, pi, ri in zip(r.f1, f, r.precision, r.recall):
        if pi is not None and ri is not None:
            assert a == pytest.approx(0.0 if np.isnan(b) else b)
    assert [sum(row) for row in r.counts] == r.support == s.tolist()
    for row in r.row_percent:
        if row[0] is not None:
            assert sum(row) == pytest.approx(100.0)


def test_evaluate_uses_argmax():
    p = init_mlp(0, (4, 3, 3, 3), dtype=np.float64)
    x = np.random.default_rng(0).normal(size=(20, 4))
    logits, _ = forward(p, x)
    r = evaluate(p, x, np.argmax(logits, axis=1), ["a", "b", "c"])
    assert r.accuracy == 1.0


def test_checkpoint_roundtrip(tmp_path):
    p = init_mlp(7)
    path = tmp_path / "m.bin"
    save_checkpoint(path, p, {"lr": 0.001}, {"seed": 7})
    back, header = load_checkpoint(path)
    assert header["config"] == {"lr": 0.001} and header["provenance"] == {"seed": 7}
    assert all(back[k].tobytes() == p[k].tobytes() for k in p)
    data = path.read_bytes()
    assert data[:8] == b"CALFMLP1"
    (tmp_path / "cut.bin").write_bytes(data[:-4])
    with pytest.raises(CalfplayError):
        load_checkpoint(tmp_path / "cut.bin")
    (tmp_path / "bad.bin").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(CalfplayError):
        load_checkpoint(tmp_path / "bad.bin")


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(dropout_p=1.0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    assert LAYER_SIZES == (1024, 512, 256, 3)

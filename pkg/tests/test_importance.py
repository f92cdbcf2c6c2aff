"""Importance estimators against two independent oracles: a closed-form
two-class linear model computed by hand, and an explicit batch-size-1 loop
through the engine's own gradient."""

import numpy as np
import pytest

from wclab.data import Dataset
from wclab.importance import (TaskSnapshot, fisher_diagonal, load_snapshot,
                              mas_importance, online_ewc_accumulate, save_snapshot)
from wclab.nn import MlpModel, ce_loss_and_grad, make_rng, softmax


def two_class_model():
    # no trunk: a single 1-input 2-way head, 4 parameters (W 1x2, b 2)
    model = MlpModel(1, [], [2], make_rng(2))
    return model


def test_fisher_matches_hand_computed_logistic_mean():
    model = two_class_model()
    w, b = model.layer(0)
    xs = np.array([[0.2], [0.5], [0.9], [0.1]])
    ys = np.array([0, 1, 1, 0])
    data = Dataset(xs, ys)

    # hand computation: per sample, d(-log p_y)/dz = p - onehot(y),
    # dW[0, j] = x * dz_j, db[j] = dz_j; fisher = mean of squares
    grads = []
    for x, y in zip(xs, ys):
        z = x @ w + b
        p = np.exp(z - z.max())
        p /= p.sum()
        dz = p.copy()
        dz[y] -= 1.0
        grads.append(np.concatenate([x[0] * dz, dz]))
    expected = np.mean(np.square(grads), axis=0)

    got = fisher_diagonal(model, data, 0)
    assert got.shape == model.params.shape
    assert np.allclose(got, expected, atol=1e-10)


def test_mas_matches_hand_computed_linear_sensitivity():
    model = two_class_model()
    w, b = model.layer(0)
    xs = np.array([[0.3], [0.8], [0.5]])
    data = Dataset(xs, np.zeros(3, dtype=int))

    grads = []
    for x in xs:
        z = x @ w + b  # d(0.5*||z||^2)/dz = z
        grads.append(np.concatenate([x[0] * z, z]))
    expected = np.mean(np.abs(grads), axis=0)
    got = mas_importance(model, data, 0)
    assert np.allclose(got, expected, atol=1e-10)


def test_fisher_matches_batch_size_one_loop_on_mlp():
    rng = make_rng(11)
    model = MlpModel(6, [7], [3, 4], rng)
    xs = rng.random((23, 6))
    ys = rng.integers(0, 4, size=23)
    data = Dataset(xs, ys)

    acc = np.zeros_like(model.params)
    for i in range(23):
        # gradient of -log p equals gradient of log p up to sign; squares agree
        _, g = ce_loss_and_grad(model, xs[i:i + 1], ys[i:i + 1], 1)
        acc += g * g
    expected = acc / 23

    got = fisher_diagonal(model, data, 1, chunk=8)
    assert np.allclose(got, expected, rtol=1e-12, atol=1e-14)


def test_importance_nonnegative_zero_for_inactive_heads_and_cap():
    rng = make_rng(12)
    model = MlpModel(5, [6], [3, 3], rng)
    xs = rng.random((50, 5))
    ys = rng.integers(0, 3, size=50)
    data = Dataset(xs, ys)
    for fn in (fisher_diagonal, mas_importance):
        imp = fn(model, data, 0)
        assert np.all(imp >= 0.0)
        w1, b1 = model.layer(model.head_layer_index(1))
        tail = w1.size + b1.size
        assert np.all(imp[-tail:] == 0.0)
        assert np.any(imp[:-tail] > 0.0)
    capped = fisher_diagonal(model, data, 0, sample_cap=10)
    first10 = fisher_diagonal(model, Dataset(xs[:10], ys[:10]), 0)
    assert np.array_equal(capped, first10)


def test_softmax_route_in_fisher_is_stable():
    model = two_class_model()
    model.params *= 2000.0  # extreme logits must not produce NaN
    data = Dataset(np.array([[1.0], [0.5]]), np.array([0, 1]))
    assert np.isfinite(fisher_diagonal(model, data, 0)).all()
    assert np.isfinite(softmax(np.array([[1e6, -1e6]]))).all()


def test_online_accumulation_and_length_check():
    prev = np.array([1.0, 2.0])
    new = np.array([0.5, 0.5])
    assert np.allclose(online_ewc_accumulate(prev, new, gamma=0.9), [1.4, 2.3])
    assert np.allclose(online_ewc_accumulate(prev, new), [1.5, 2.5])  # gamma 1
    with pytest.raises(ValueError):
        online_ewc_accumulate(prev, np.zeros(3))


def test_snapshot_sidecar_round_trip(tmp_path):
    rng = make_rng(13)
    snap = TaskSnapshot(task_id=7, theta_star=rng.standard_normal(11),
                        importance=rng.random(11))
    path = str(tmp_path / "snap.bin")
    save_snapshot(snap, path)
    back = load_snapshot(path)
    assert back.task_id == 7
    assert np.array_equal(back.theta_star, snap.theta_star)
    assert np.array_equal(back.importance, snap.importance)
    # a second save of the loaded snapshot is byte-identical
    path2 = str(tmp_path / "snap2.bin")
    save_snapshot(back, path2)
    assert open(path, "rb").read() == open(path2, "rb").read()


def test_snapshot_sidecar_rejects_garbage(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOTASNAP" + b"\x00" * 32)
    with pytest.raises(ValueError, match="bad snapshot magic"):
        load_snapshot(str(path))
    good = tmp_path / "good.bin"
    save_snapshot(TaskSnapshot(0, np.ones(4), np.ones(4)), str(good))
    trunc = tmp_path / "trunc.bin"
    trunc.write_bytes(good.read_bytes()[:-9])
    with pytest.raises(ValueError):
        load_snapshot(str(trunc))
    with pytest.raises(ValueError):
        TaskSnapshot(0, np.ones(3), np.ones(4))

import numpy as np
import pytest

from permflow import dynamics as dyn
from permflow import flow, training
from permflow.dynamics import DynamicsConfig
from permflow.flow import FlowModel, TrainConfig
from permflow.ode import SolverConfig


def _toy_1d_records(rng, count, n=2):
    """1-D non-overlap toy: centers from the prior, rejected at |dx| < 1."""
    data = []
    for _ in range(count):
        xs = []
        while len(xs) < n:
            c = rng.standard_normal()
            if all(abs(c - q) >= 1.0 for q in xs):
                xs.append(c)
        data.append((np.array(xs).reshape(n, 1), None))
    return data


def _small_model(rng, d=1, hidden=16, n_layers=2, n_steps=8):
    cfg = DynamicsConfig(use_time=True)
    params = dyn.init_dynamics(rng, d, cfg, hidden=hidden, n_layers=n_layers)
    return FlowModel(params=params, cfg=cfg, solver=SolverConfig(n_steps=n_steps), d=d)


def test_zero_epochs_returns_initial_model():
    rng = np.random.default_rng(0)
    model = _small_model(rng)
    before = [a.copy() for _, a in model.named_leaves()]
    data = _toy_1d_records(rng, 8)
    res = training.train(model, data, data, TrainConfig(epochs=0, batch_size=4), track_eval_nfe=False)
    after = [a for _, a in res.model.named_leaves()]
    for b, a in zip(before, after):
        assert np.array_equal(b, a)
    assert res.history == []


def test_zero_lr_keeps_parameters_bit_identical():
    rng = np.random.default_rng(1)
    model = _small_model(rng)
    before = [a.copy() for _, a in model.named_leaves()]
    data = _toy_1d_records(rng, 12)
    tc = TrainConfig(epochs=2, batch_size=6, lr=0.0, patience=10)
    res = training.train(model, data, data, tc, track_eval_nfe=False)
    for b, a in zip(before, [a for _, a in res.model.named_leaves()]):
        assert np.array_equal(b, a)


def test_toy_training_val_nll_strictly_decreases():
    rng = np.random.default_rng(0)
    data = _toy_1d_records(rng, 240)
    model = _small_model(np.random.default_rng(0))
    tc = TrainConfig(
        epochs=5, batch_size=60, lr=3e-3, patience=10, seed=0,
        lambda_l2=0.0, lambda_l2div=0.0,
    )
    res = training.train(model, data[:200], data[200:], tc, track_eval_nfe=False)
    vals = [row["val_nll"] for row in res.history]
    assert len(vals) == 5
    assert all(a > b for a, b in zip(vals[:-1], vals[1:]))


def test_training_is_deterministic():
    def run():
        rng = np.random.default_rng(3)
        data = _toy_1d_records(rng, 40)
        model = _small_model(np.random.default_rng(4))
        tc = TrainConfig(epochs=2, batch_size=20, lr=1e-3, patience=10, seed=5)
        res = training.train(model, data[:30], data[30:], tc, track_eval_nfe=False)
        return res.history, [a.copy() for _, a in res.model.named_leaves()]

    h1, p1 = run()
    h2, p2 = run()
    assert h1 == h2
    for a, b in zip(p1, p2):
        assert np.array_equal(a, b)


def test_early_stopping_on_patience():
    rng = np.random.default_rng(6)
    data = _toy_1d_records(rng, 30)
    model = _small_model(np.random.default_rng(7))
    tc = TrainConfig(epochs=50, batch_size=15, lr=0.0, patience=2, seed=0)
    res = training.train(model, data[:20], data[20:], tc, track_eval_nfe=False)
    assert res.stopped_reason == "early_stop"
    assert len(res.history) == 2  # lr=0 never improves; patience expires immediately


def test_best_checkpoint_restored():
    rng = np.random.default_rng(8)
    data = _toy_1d_records(rng, 60)
    model = _small_model(np.random.default_rng(9))
    tc = TrainConfig(epochs=4, batch_size=30, lr=5e-3, patience=10, seed=1)
    res = training.train(model, data[:40], data[40:], tc, track_eval_nfe=False)
    best_epoch = int(np.argmin([r["val_nll"] for r in res.history]))
    final_val = training.dataset_nll(res.model, data[40:], tc)
    assert final_val == pytest.approx(res.history[best_epoch]["val_nll"], abs=1e-9)


def test_history_csv_format():
    rows = [{"epoch": 0, "train_nll": 1.5, "val_nll": 2.0, "nfe_mean": 32.0}]
    csv = training.history_to_csv(rows)
    lines = csv.strip().split("\n")
    assert lines[0] == "epoch,train_nll,val_nll,nfe_mean"
    assert lines[1].startswith("0,1.5")


def test_dataset_nll_matches_single_log_prob():
    rng = np.random.default_rng(10)
    model = _small_model(rng, d=2, n_steps=64)
    data = [(rng.standard_normal((3, 2)), None) for _ in range(3)]
    got = training.dataset_nll(model, data, TrainConfig())
    want = -np.mean([flow.log_prob(model, x) for x, _ in data])
    assert got == pytest.approx(want, abs=1e-5)


def test_adam_reduces_quadratic():
    leaves = [np.array([5.0, -3.0])]
    opt = training.adam_init(leaves, lr=0.1)
    for _ in range(200):
        grads = [2 * leaves[0]]
        training.adam_step(opt, leaves, grads)
    assert np.max(np.abs(leaves[0])) < 1e-2

import dataclasses
import math

import numpy as np
import pytest

import aqfusion.train as train_mod
from aqfusion import tensor as T
from aqfusion.data import Sample, fit_scalers, generate_synthetic, stratified_split, to_arrays
from aqfusion.errors import ContractError, DataError, DivergenceError, ParameterError
from aqfusion.evaluation import evaluate
from aqfusion.model import ModelConfig, ParameterStore, composite_loss, forward, init_params, zero_params
from aqfusion.rng import Rng
from aqfusion.tensor import Tensor
from aqfusion.train import (AdamState, Checkpoint, EarlyStopping, TrainConfig, adamw_step, cosine_lr,
                            evaluate_epoch, train, train_step)

SMALL = ModelConfig(image_size=16, base_width=4, embed_dim=16, fusion_dim=16, proj_hidden=16)


@pytest.fixture(scope="module")
def small_corpus():
    return stratified_split(generate_synthetic(40, 16, seed=3))


def scalar_store(value):
    return ParameterStore({"theta": Tensor(np.array([value], dtype=np.float64), requires_grad=True)})


# -------------------------------------------------------------- optimizer
def test_adamw_zero_grad_no_decay_is_noop(high):
    p = scalar_store(1.5)
    p["theta"].grad = np.zeros(1)
    adamw_step(p, AdamState(), 1e-2, 0.0)
    assert p["theta"].data[0] == 1.5


def test_adamw_zero_grad_pure_shrink(high):
    p = scalar_store(2.0)
    p["theta"].grad = np.zeros(1)
    adamw_step(p, AdamState(), 1e-2, 0.1)
    assert p["theta"].data[0] == pytest.approx(2.0 * (1 - 1e-2 * 0.1), abs=1e-15)


def test_adamw_hand_recursion(high):
    lr, wd, b1, b2, eps, g = 1e-2, 1e-2, 0.9, 0.999, 1e-8, 0.5
    p, st = scalar_store(1.0), AdamState()
    theta, m, v = 1.0, 0.0, 0.0
    for t in range(1, 6):
        p["theta"].grad = np.array([g])
        adamw_step(p, st, lr, wd, (b1, b2), eps)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta * (1 - lr * wd) - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        assert p["theta"].data[0] == pytest.approx(theta, abs=1e-14)
        if t == 1:    # bias correction makes the first step exactly -lr * g / (|g| + eps)
            assert theta == pytest.approx(1.0 * (1 - lr * wd) - lr * g / (abs(g) + eps), abs=1e-15)


def test_adamw_requires_grads():
    with pytest.raises(ContractError):
        adamw_step(scalar_store(1.0), AdamState(), 1e-3, 0.0)


# ---------------------------------------------------------------- schedule
def test_cosine_values():
    assert cosine_lr(0, 35, 3e-4) == 3e-4
    assert cosine_lr(35, 35, 3e-4) == pytest.approx(0.0, abs=1e-20)
    assert cosine_lr(17.5, 35, 3e-4) == pytest.approx(1.5e-4, rel=1e-12)


def test_cosine_clamps_past_end(caplog):
    assert cosine_lr(40, 35, 3e-4) == 0.0
    assert "clamped" in caplog.text
    with pytest.raises(ParameterError):
        cosine_lr(-1, 35, 3e-4)


def test_train_config_validation():
    with pytest.raises(ParameterError):
        TrainConfig(patience=35, max_epochs=35)
    with pytest.raises(ParameterError):
        TrainConfig(lr=0)
    with pytest.raises(ParameterError):
        TrainConfig(batch_size=0)
    with pytest.raises(ParameterError):
        TrainConfig(alpha=1.2)


# ---------------------------------------------------------- early stopping
def test_early_stopping_counter():
    es = EarlyStopping(patience=7)
    stops = []
    for epoch, loss in enumerate([1.0] + [1.0 + e for e in range(1, 20)], start=1):
        es.step(epoch, loss)
        if es.should_stop:
            stops.append(epoch)
            break
    assert stops == [8] and es.best_epoch == 1


def test_train_stops_at_epoch_8_and_restores_best(monkeypatch, small_corpus):
    losses = iter([5.0] + [5.0 + k for k in range(1, 30)])
    monkeypatch.setattr(train_mod, "evaluate_epoch", lambda *a, **k: (next(losses), 1.0, 0.5))
    snapshots = {}
    ckpt = train(small_corpus, SMALL, TrainConfig(max_epochs=20, patience=7, batch_size=8),
                 on_epoch_end=lambda e, p, r: snapshots.__setitem__(e, p.state()))
    assert ckpt.stop_epoch == 8 and len(ckpt.history) == 8
    assert ckpt.epoch == 1 and ckpt.best_val_loss == 5.0
    for name, arr in snapshots[1].items():
        assert np.array_equal(ckpt.params[name].data, arr)
    assert not all(np.array_equal(ckpt.params[n].data, a) for n, a in snapshots[8].items())


def test_restored_params_never_worse(small_corpus):
    ckpt = train(small_corpus, SMALL, TrainConfig(max_epochs=6, patience=2, batch_size=8, lr=1e-3))
    assert ckpt.best_val_loss == min(h["val_loss"] for h in ckpt.history)
    val = [s for s in small_corpus if s.split == "val"]
    loss, _, _ = evaluate_epoch(ckpt.params, val, SMALL, ckpt.scalers, 0.4)
    assert loss == ckpt.best_val_loss


def test_divergence_raises(monkeypatch, small_corpus):
    monkeypatch.setattr(train_mod, "train_step", lambda *a, **k: (float("nan"), 0.0, 0.0))
    with pytest.raises(DivergenceError) as info:
        train(small_corpus, SMALL, TrainConfig(max_epochs=3, patience=1, batch_size=8))
    assert info.value.epoch == 1 and info.value.batch == 0


def test_train_needs_train_and_val(small_corpus):
    only_train = [dataclasses.replace(s, split="train") for s in small_corpus]
    with pytest.raises(ParameterError):
        train(only_train, SMALL, TrainConfig(max_epochs=3, patience=1))


# ----------------------------------------------------- training behaviour
def test_alpha_zero_leaves_sensor_head_at_init(small_corpus):
    cfg = TrainConfig(max_epochs=2, patience=1, batch_size=8, alpha=0.0, weight_decay=0.0, lr=1e-3)
    ckpt = train(small_corpus, SMALL, cfg)
    init = init_params(SMALL, Rng(cfg.seed).split("init"))
    for name in ("sensor_head.W_sensor", "sensor_head.b_sensor"):
        assert np.array_equal(ckpt.params[name].data, init[name].data)
    assert not np.array_equal(ckpt.params["aqi_head.w_AQI"].data, init["aqi_head.w_AQI"].data)


def test_single_step_decreases_loss_for_small_lr(high):
    s = generate_synthetic(1, 16, seed=11)[0]
    s.split = "train"
    stats = fit_scalers([s])
    arr = to_arrays([s], stats)
    from aqfusion.data import normalize_image
    img = normalize_image(arr.images)
    for lr in (1e-5, 1e-6):
        params = init_params(SMALL, Rng(0))
        rng = Rng(1)

        def loss():
            return composite_loss(forward(img, arr.sensors, params, SMALL, "train", rng), arr.aqi, arr.sensors, 0.4)[0]

        before = loss().item()
        train_step(params, AdamState(), img, arr.sensors, arr.aqi, arr.mask, SMALL, TrainConfig(), lr, rng)
        assert loss().item() < before


def test_training_loss_mostly_decreasing():
    corpus = stratified_split(generate_synthetic(300, 32, seed=42))
    cfg = ModelConfig(image_size=32)
    ckpt = train(corpus, cfg, TrainConfig(max_epochs=6, patience=5, batch_size=16, lr=1e-3))
    losses = [h["train_loss"] for h in ckpt.history]
    assert len(losses) == 6
    assert sum(b <= a for a, b in zip(losses, losses[1:])) >= 4


def test_lr_history_follows_schedule(small_corpus):
    cfg = TrainConfig(max_epochs=4, patience=3, batch_size=8)
    ckpt = train(small_corpus, SMALL, cfg)
    assert [h["lr"] for h in ckpt.history] == [cosine_lr(e - 1, 4, cfg.lr) for e in range(1, 5)]


# ---------------------------------------------------------------- evaluate
def _constant_model(value):
    params = zero_params(SMALL)
    params["aqi_head.b_AQI"].data[:] = value
    return params


def _samples(aqis):
    return [Sample(np.full((3, 16, 16), 0.5), np.ones(6) * (i + 1), a, f"e{i}", split="train")
            for i, a in enumerate(aqis)]


def test_evaluate_epoch_perfect_model():
    samples = _samples([75.0] * 5)
    stats = fit_scalers(samples)
    loss, rmse, acc = evaluate_epoch(_constant_model(75.0), samples, SMALL, stats, 0.0)
    assert rmse == pytest.approx(0.0, abs=1e-4) and acc == 1.0 and loss == pytest.approx(0.0, abs=1e-6)


def test_evaluate_epoch_constant_predictor_rmse_is_std():
    y = np.array([20.0, 60.0, 130.0, 180.0, 260.0, 420.0])
    samples = _samples(y)
    stats = fit_scalers(samples)
    _, rmse, _ = evaluate_epoch(_constant_model(y.mean()), samples, SMALL, stats, 0.4)
    assert rmse == pytest.approx(y.std(), rel=1e-6)


def test_evaluate_epoch_order_invariant(small_corpus):
    stats = fit_scalers([s for s in small_corpus if s.split == "train"])
    params = init_params(SMALL, Rng(3))
    a = evaluate_epoch(params, small_corpus, SMALL, stats, 0.4)
    b = evaluate_epoch(params, small_corpus[::-1], SMALL, stats, 0.4)
    assert a[2] == b[2] and a[1] == pytest.approx(b[1], rel=1e-12)


# -------------------------------------------------------------- checkpoint
def test_checkpoint_determinism_and_round_trip(tmp_path, small_corpus):
    cfg = TrainConfig(max_epochs=2, patience=1, batch_size=8)
    a, b = train(small_corpus, SMALL, cfg), train(small_corpus, SMALL, cfg)
    assert a.to_bytes() == b.to_bytes()
    path = a.save(tmp_path / "ckpt.bin")
    back = Checkpoint.load(path)
    assert back.to_bytes() == a.to_bytes()
    meta = dict(line.split("=", 1) for line in (tmp_path / "ckpt.bin.meta").read_text().splitlines())
    assert meta["sha256"] == a.sha256() and int(meta["num_params"]) == a.params.num_params()
    test = to_arrays([s for s in small_corpus if s.split == "test"], a.scalers)
    r1, s1 = evaluate(a.params, SMALL, test, a.scalers, bootstrap=50)
    r2, s2 = evaluate(back.params, back.model_config, test, back.scalers, bootstrap=50)
    assert r1.to_json() == r2.to_json() and np.array_equal(s1, s2)


def test_checkpoint_rejects_garbage(tmp_path):
    with pytest.raises(DataError):
        Checkpoint.from_bytes(b"NOTACKPT" + b"\0" * 16)
    with pytest.raises(DataError):
        Checkpoint.load(tmp_path / "missing.bin")

import json
import math

import numpy as np
import pytest

from shapeformer.autodiff import checkpoint_digest
from shapeformer.autodiff import ops as F
from shapeformer.data_io import normalize, split_train_val
from shapeformer.discovery import discover, extract_candidates, score_candidates
from shapeformer.errors import ArtifactMismatch, ContractViolation, InputError
from shapeformer.model import ShapeFormer
from shapeformer.train import (RunReport, TrainConfig, evaluate, fit, load_checkpoint, save_checkpoint,
                               top_gain_sum, train, tune_window)

from conftest import make_dataset, motif_dataset
from oracles import info_gain_ref, psd_ref

SMALL = dict(d_spe=8, d_gen=8, heads=2, dropout=0.1, window=10, shapelets_per_class=2, batch_size=4)


@pytest.fixture(scope="module")
def small_data():
    ds = motif_dataset(n_per_class=8, T=24, noise=0.3, seed=3)
    pool = discover(ds, per_class=2)
    return ds, pool


def test_config_defaults_and_validation():
    c = TrainConfig()
    assert (c.lr, c.beta1, c.beta2, c.weight_decay, c.batch_size, c.epochs) == (0.01, 0.9, 0.999, 5e-4, 16, 200)
    assert (c.heads, c.d_spe, c.d_gen, c.dropout, c.npip_ratio, c.val_fraction) == (16, 128, 32, 0.4, 0.2, 0.2)
    for bad in ({"epochs": 0}, {"dropout": 1.0}, {"val_fraction": 1.0}, {"batch_size": -1}):
        with pytest.raises(ContractViolation):
            TrainConfig(**bad)
    with pytest.raises(InputError):
        TrainConfig.from_dict({"learning_rate": 0.1})
    assert TrainConfig.from_dict(c.to_dict()) == c


def test_initial_loss_is_log_classes(basic_motions):
    train_ds, _ = basic_motions
    data, _ = normalize(train_ds)
    pool = discover(data, per_class=1)
    m = ShapeFormer(pool)
    loss = F.cross_entropy(m.forward(data.X[:16], training=True, rng=np.random.default_rng(0)), data.y[:16])
    assert loss.item() == pytest.approx(math.log(4), abs=1e-6)


def test_report_and_best_checkpoint(small_data):
    ds, pool = small_data
    cfg = TrainConfig(epochs=8, **SMALL)
    model, rep = train(ds, cfg, pool)
    assert rep.epochs_run == 8 == len(rep.train_loss) == len(rep.val_accuracy)
    assert all(0 <= a <= 1 for a in rep.val_accuracy)
    assert rep.best_val_accuracy == max(rep.val_accuracy) >= rep.val_accuracy[0]
    # ties go to the later epoch
    assert rep.best_epoch == max(i + 1 for i, a in enumerate(rep.val_accuracy) if a == rep.best_val_accuracy)
    _, val = split_train_val(ds, 0.8, cfg.seed)
    assert evaluate(model, val).accuracy == rep.best_val_accuracy
    assert rep.pool_digest == pool.digest() and rep.config == cfg.to_dict()
    assert RunReport.from_dict(json.loads(json.dumps(rep.to_dict()))) == rep


def test_overfit_smoke(basic_motions):
    train_ds, _ = basic_motions
    data, _ = normalize(train_ds)
    idx = np.concatenate([np.flatnonzero(data.y == c)[:2] for c in range(4)])
    sub = data.subset(idx)
    pool = discover(sub, per_class=3)
    model, rep = train(sub, TrainConfig(window=100, shapelets_per_class=3), pool, val=False)
    assert rep.epochs_run == 200
    assert evaluate(model, sub).accuracy == 1.0


def test_refuses_test_split_and_empty_class(small_data):
    ds, pool = small_data
    cfg = TrainConfig(epochs=1, **SMALL)
    with pytest.raises(ContractViolation, match="test"):
        train(ds.with_split("test"), cfg, pool)
    with pytest.raises(ContractViolation, match="test"):
        train(ds, cfg, pool, val=ds.with_split("test"))
    only_a = ds.subset(np.flatnonzero(ds.y == 0))
    with pytest.raises(ContractViolation, match="no instances"):
        train(only_a, cfg, pool)


def test_training_does_not_mutate_inputs(small_data):
    ds, pool = small_data
    before = ds.X.copy()
    pool_digest = pool.digest()
    train(ds, TrainConfig(epochs=2, **SMALL), pool)
    np.testing.assert_array_equal(ds.X, before)
    assert pool.digest() == pool_digest


def test_evaluate_counts(basic_motions):
    train_ds, test_ds = basic_motions
    pool = discover(train_ds, per_class=1)
    m = ShapeFormer(pool)  # zero head -> constant prediction
    res = evaluate(m, test_ds)
    assert res.accuracy == 0.25
    np.testing.assert_array_equal(res.confusion.sum(axis=1), test_ds.class_counts())
    assert np.trace(res.confusion) / len(test_ds) == res.accuracy
    assert res.per_class_accuracy[train_ds.classes[0]] == 1.0
    other = make_dataset(test_ds.X, test_ds.y, ("w", "x", "y", "z"))
    with pytest.raises(ContractViolation):
        evaluate(m, other)


def test_checkpoint_round_trip(tmp_path, small_data):
    ds, pool = small_data
    model, _ = train(ds, TrainConfig(epochs=2, **SMALL), pool)
    save_checkpoint(tmp_path / "ck", model, meta={"k": 1})
    back, meta, _ = load_checkpoint(tmp_path / "ck", pool)
    assert meta["k"] == 1
    assert back.predict_logits(ds.X).tobytes() == model.predict_logits(ds.X).tobytes()
    other_pool = discover(ds, per_class=1)
    with pytest.raises(ArtifactMismatch):
        load_checkpoint(tmp_path / "ck", other_pool)
    (tmp_path / "ck" / "manifest.json").write_text("garbage")
    with pytest.raises(InputError):
        load_checkpoint(tmp_path / "ck", pool)


def test_resume_matches_straight_run(tmp_path, small_data):
    ds, pool = small_data
    cfg = TrainConfig(epochs=6, **SMALL)
    straight, rep_a = train(ds, cfg, pool, checkpoint_dir=tmp_path / "a")
    train(ds, cfg, pool, checkpoint_dir=tmp_path / "b", stop_after=3)
    resumed, rep_b = train(ds, cfg, pool, checkpoint_dir=tmp_path / "b", resume=True)
    for k, v in straight.state_arrays().items():
        assert v.tobytes() == resumed.state_arrays()[k].tobytes(), k
    assert rep_a.train_loss == rep_b.train_loss and rep_a.val_accuracy == rep_b.val_accuracy
    assert checkpoint_digest(tmp_path / "a") == checkpoint_digest(tmp_path / "b")


def test_same_seed_identical_checkpoints(tmp_path, small_data):
    ds, pool = small_data
    cfg = TrainConfig(epochs=3, **SMALL)
    digests = []
    for run in ("x", "y"):
        m, _ = train(ds, cfg, pool)
        digests.append(save_checkpoint(tmp_path / run, m))
    assert digests[0] == digests[1]
    m, _ = train(ds, TrainConfig(epochs=3, **{**SMALL, "seed": 1}), pool)
    assert save_checkpoint(tmp_path / "z", m) != digests[0]


def test_fit_refits_for_best_epoch(small_data):
    ds, pool = small_data
    model, rep = fit(ds, TrainConfig(epochs=4, **SMALL), pool, test=ds.with_split("test"))
    assert rep.refit_epochs == rep.best_epoch
    assert 0.0 <= rep.test_accuracy <= 1.0


def test_tune_window_singleton_and_sum():
    ds = motif_dataset(n_per_class=4, T=20)
    assert tune_window(ds, [50]) == 50
    assert top_gain_sum(np.array([0.1, 0.9, 0.5]), top=2) == 1.4
    assert top_gain_sum(np.array([]), top=5) == 0.0
    with pytest.raises(ContractViolation):
        tune_window(ds, [])


def test_tune_window_prefers_wider_window_under_drift():
    ds = motif_dataset(n_per_class=6, T=80, drift=15, seed=7, motif=(0.0, 3.0, 6.0, 3.0, 0.0), noise=0.05)
    cands = extract_candidates(ds, 16)
    g10, _ = score_candidates(cands, ds, window=10)
    g20, _ = score_candidates(cands, ds, window=20)
    assert top_gain_sum(g20) > top_gain_sum(g10)
    assert tune_window(ds, [10, 20], npip_ratio=0.2) == 20
    # spot-check windowed gains against loop-based scans
    for k in np.argsort(-g20)[:5]:
        c = cands[k]
        sub = list(ds.X[c.instance, c.variable, c.start:c.end])
        for w, gains in ((10, g10), (20, g20)):
            lo, hi = max(0, c.start - w), min(80 - c.length, c.start + w)
            dist = [psd_ref(list(ds.X[i, c.variable]), sub, lo, hi)[0] for i in range(len(ds))]
            target = [bool(ds.y[i] == ds.y[c.instance]) for i in range(len(ds))]
            assert gains[k] == pytest.approx(info_gain_ref(dist, target)[0], abs=1e-9)

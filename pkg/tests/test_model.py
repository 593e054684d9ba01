import json
import math

import numpy as np
import pytest

from shapeformer.autodiff import Tensor, no_grad
from shapeformer.autodiff import ops as F
from shapeformer.errors import ContractViolation
from shapeformer.metrics import cid
from shapeformer.model import ModelConfig, ShapeFormer, best_fit_indices, find_best_fit, resolve_heads

from conftest import tiny_pool
from gradcheck import ABS_FLOOR, REL_TOL, STEP
from oracles import psd_ref

TINY = ModelConfig(d_spe=8, d_gen=8, heads=2, dropout=0.0, window=4)


@pytest.fixture(scope="module")
def tiny():
    pool, ds = tiny_pool()
    return pool, ds


def test_best_fit_full_window_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(50):
        T = int(rng.integers(8, 40))
        L = int(rng.integers(2, T + 1))
        series = rng.normal(size=(2, T))
        if rng.random() < 0.3:
            series = np.round(series)  # provoke ties
        shp = rng.normal(size=L)
        start = int(rng.integers(0, T - L + 1))
        idx, vals = find_best_fit(series, shp, start, 1, window=T)
        _, ref = psd_ref(list(series[1]), list(shp))
        assert idx == ref
        np.testing.assert_array_equal(vals, series[1, idx:idx + L])


def test_best_fit_on_source_and_zero_window(tiny):
    pool, ds = tiny
    s = pool[0]
    src = ds.X[ds.ids.index(s.source_instance)]
    idx, vals = find_best_fit(src, s.values, s.start, s.variable, window=5)
    assert idx == s.start and cid(vals, s.values) == 0.0
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 16))
    assert find_best_fit(x, rng.normal(size=4), 7, 0, window=0)[0] == 7
    # a start past T - l clamps to the last valid offset
    assert find_best_fit(x, rng.normal(size=4), 14, 0, window=0)[0] == 12
    with pytest.raises(ContractViolation):
        find_best_fit(x, np.ones(3), 0, 5, window=2)


def test_best_fit_restricted_window_stays_in_range():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(6, 1, 30))
    idx = best_fit_indices(X, rng.normal(size=(1, 5)), [10], [0], [5], window=3)
    assert np.all((idx >= 7) & (idx <= 13))


def test_structure_mirrors_pool(tiny):
    pool, _ = tiny
    m = ShapeFormer(pool, TINY)
    assert m.num_shapelets == len(pool)
    assert list(m.starts) == [s.start for s in pool]
    assert list(m.variables) == [s.variable for s in pool]
    assert m.params["proj_I.weight"].shape == m.params["proj_S.weight"].shape
    assert not np.array_equal(m.params["proj_I.weight"].data, m.params["proj_S.weight"].data)
    assert m.params["gen.conv1.weight"].shape == (8, 1, 1, 8)
    assert m.params["gen.conv2.weight"].shape == (8, 8, 2, 1)
    assert m.params["head.weight"].shape == (16, 2)


def test_default_widths():
    pool, ds = tiny_pool(T=16)
    m = ShapeFormer(pool)
    with no_grad():
        assert m.class_specific_forward(ds.X[:2]).shape == (2, 128)
        assert m.generic_forward(ds.X[:2]).shape == (2, 32)


def test_tied_projections_leave_position_embedding(tiny):
    pool, ds = tiny
    m = ShapeFormer(pool, TINY, dtype=np.float64)
    m.params["proj_I.weight"].data = m.params["proj_S.weight"].data.copy()
    m.params["proj_I.bias"].data = m.params["proj_S.bias"].data.copy()
    s = pool[0]
    src = ds.X[ds.ids.index(s.source_instance)][None]
    with no_grad():
        tokens = m.difference_tokens(src).data
        pe = m._position_embedding(m.starts, m.ends, m.variables).data
    assert tokens.shape == (1, len(pool), 8)
    np.testing.assert_array_equal(tokens[0, 0], pe[0])


def test_token_locality(tiny):
    pool, ds = tiny
    m = ShapeFormer(pool, TINY, dtype=np.float64)
    with no_grad():
        before = m.difference_tokens(ds.X[:3]).data
        m.params["shapelets"].data[1, 0] += 0.5
        after = m.difference_tokens(ds.X[:3]).data
    np.testing.assert_array_equal(before[:, 0], after[:, 0])
    assert not np.allclose(before[:, 1], after[:, 1])


def test_position_terms_do_not_depend_on_input(tiny):
    pool, ds = tiny
    m = ShapeFormer(pool, TINY, dtype=np.float64)
    m.params["proj_I.weight"].data[:] = 0
    with no_grad():
        a = m.difference_tokens(ds.X[0:1]).data
        b = m.difference_tokens(ds.X[5:6]).data
    np.testing.assert_array_equal(a, b)
    m_bf = ShapeFormer(pool, ModelConfig(**{**TINY.to_dict(), "position_source": "best_fit"}), dtype=np.float64)
    m_bf.params["proj_I.weight"].data[:] = 0
    shifted = np.roll(ds.X[0:1], 3, axis=2)
    with no_grad():
        c = m_bf.difference_tokens(ds.X[0:1], index=np.array([[0, 0]])).data
        d = m_bf.difference_tokens(shifted, index=np.array([[5, 5]])).data
    assert not np.allclose(c, d)


def test_attention_rows_and_singleton(tiny):
    pool, ds = tiny
    m = ShapeFormer(pool, TINY)
    out = m.export_analysis(ds.X[:3])
    json.dumps(out)
    for name, att in out["attention"].items():
        att = np.array(att)
        np.testing.assert_allclose(att.sum(axis=-1), 1.0, atol=1e-6)
    x = Tensor(np.random.default_rng(0).normal(size=(2, 1, 8)).astype(np.float32))
    m.last_attention = {}
    with no_grad():
        m.encoder_forward(x, "spe", 2, record=True)
    np.testing.assert_array_equal(m.last_attention["spe.enc0"], 1.0)


def test_encoder_permutation_equivariant(tiny):
    pool, _ = tiny
    m = ShapeFormer(pool, TINY, dtype=np.float64)
    x = np.random.default_rng(3).normal(size=(2, 5, 8))
    perm = np.array([3, 0, 4, 1, 2])
    with no_grad():
        a = m.encoder_forward(Tensor(x), "spe", 2).data
        b = m.encoder_forward(Tensor(x[:, perm]), "spe", 2).data
    np.testing.assert_allclose(a[:, perm], b, atol=1e-12)
    with pytest.raises(ContractViolation):
        m.encoder_forward(Tensor(np.zeros((1, 2, 6))), "spe", 2)


def test_class_token_policies_differ(tiny):
    pool, ds = tiny
    outs = {}
    for policy in ("first", "mean", "learnable"):
        m = ShapeFormer(pool, ModelConfig(**{**TINY.to_dict(), "class_token": policy}), seed=0)
        with no_grad():
            outs[policy] = m.class_specific_forward(ds.X[:2]).data
    assert not np.allclose(outs["first"], outs["mean"])
    assert "cls_token" in ShapeFormer(pool, ModelConfig(**{**TINY.to_dict(), "class_token": "learnable"})).params


def test_first_token_follows_pool_order(tiny):
    pool, ds = tiny
    from shapeformer.discovery import ShapeletPool
    swapped = ShapeletPool(list(reversed(pool.shapelets)), pool.per_class_count, pool.classes,
                           pool.num_variables, pool.series_length, pool.discovery_config)
    a = ShapeFormer(pool, TINY, seed=0)
    b = ShapeFormer(swapped, TINY, seed=0)
    with no_grad():
        assert not np.allclose(a.class_specific_forward(ds.X[:2]).data, b.class_specific_forward(ds.X[:2]).data)


def test_generic_branch_shapes_and_constant_input(tiny):
    pool, _ = tiny
    m = ShapeFormer(pool, TINY, dtype=np.float64)
    X = np.full((2, 2, 16), 0.7)
    with no_grad():
        tok = m.generic_tokens(X).data
    assert tok.shape == (2, 16, 8)
    # 'same' padding is zeros, so only tokens away from both edges see a constant window
    inner = tok[:, 3:12]
    np.testing.assert_allclose(inner, inner[:, :1].repeat(inner.shape[1], axis=1), atol=1e-12)
    with pytest.raises(ContractViolation):
        m.generic_tokens(np.zeros((1, 3, 16)))


def test_forward_contract(tiny):
    pool, ds = tiny
    m = ShapeFormer(pool, TINY)
    logits = m.forward(ds.X[:4])
    assert logits.shape == (4, 2)
    loss = F.cross_entropy(logits, ds.y[:4])
    assert loss.item() == pytest.approx(math.log(2), abs=1e-6)
    z = np.random.default_rng(0).normal(size=(10, 5))
    assert np.array_equal(np.argmax(F.softmax(Tensor(z)).data, axis=1), np.argmax(z, axis=1))
    m.params["head.weight"].data = np.random.default_rng(1).normal(size=(16, 2)).astype(np.float32)
    a = m.predict_logits(ds.X)
    b = m.predict_logits(ds.X)
    assert a.tobytes() == b.tobytes()


def test_heads_clamped_with_warning():
    with pytest.warns(UserWarning):
        assert resolve_heads(8, 16) == 8
    with pytest.raises(ContractViolation):
        resolve_heads(10, 4)
    assert resolve_heads(128, 16) == 16


def test_state_round_trip_and_astype(tiny):
    pool, ds = tiny
    m = ShapeFormer(pool, TINY, seed=3)
    other = ShapeFormer(pool, TINY, seed=4)
    other.load_state_arrays(m.copy_state())
    assert m.predict_logits(ds.X).tobytes() == other.predict_logits(ds.X).tobytes()
    m64 = m.astype(np.float64)
    assert m64.params["shapelets"].dtype == np.float64 and m.params["shapelets"].dtype == np.float32
    with pytest.raises(ContractViolation):
        other.load_state_arrays({})


# ---------------------------------------------------------------------------
# full-model gradient check


def model_gradient_errors(m, X, y, training, probes_per_param=3, seed=0):
    """Worst relative error per parameter between backprop and central differences."""
    def loss_value():
        rng = np.random.default_rng(seed)
        with no_grad():
            return F.cross_entropy(m.forward(X, training=training, rng=rng), y).item()

    for p in m.params.values():
        p.grad = None
    rng = np.random.default_rng(seed)
    saved = {k: b.copy() for k, b in m.buffers.items()}
    F.cross_entropy(m.forward(X, training=training, rng=rng), y).backward()
    pick = np.random.default_rng(99)
    errors = {}
    for name, p in m.params.items():
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1)
        idx = pick.choice(flat.size, size=min(probes_per_param, flat.size), replace=False)
        worst = 0.0
        for i in idx:
            old = flat[i]
            flat[i] = old + STEP
            hi = loss_value()
            flat[i] = old - STEP
            lo = loss_value()
            flat[i] = old
            num = (hi - lo) / (2 * STEP)
            denom = max(abs(num), abs(grad[i]), ABS_FLOOR)
            worst = max(worst, abs(num - grad[i]) / denom)
        errors[name] = worst
    for k, b in saved.items():
        m.buffers[k][...] = b
    return errors


def tiny_model(config=TINY):
    pool, ds = tiny_pool(V=2, T=16)
    m = ShapeFormer(pool, config, seed=0).astype(np.float64)
    rng = np.random.default_rng(5)
    m.params["head.weight"].data = rng.normal(size=m.params["head.weight"].shape)
    m.params["head.bias"].data = rng.normal(size=m.params["head.bias"].shape)
    return m, ds


@pytest.mark.parametrize("training", [False, True])
def test_full_model_gradients(training):
    cfg = ModelConfig(**{**TINY.to_dict(), "dropout": 0.2 if training else 0.0})
    m, ds = tiny_model(cfg)
    assert m.num_shapelets == 2
    errors = model_gradient_errors(m, ds.X[:5], ds.y[:5], training)
    bad = {k: v for k, v in errors.items() if v > REL_TOL}
    assert not bad, bad


def test_shapelet_gradient_nonzero():
    m, ds = tiny_model()
    F.cross_entropy(m.forward(ds.X), ds.y).backward()
    g = m.params["shapelets"].grad
    assert np.any(np.abs(g * m.mask) > 0)
    # padded positions never receive gradient
    assert np.all(g[m.mask == 0] == 0)

"""Observation and action token embeddings.

The oracle here is a dense numpy recomputation of the sum
proj(pool(F)) + orient(delta) + time[t] + type, written against the raw
parameter arrays rather than the module's own ops.
"""
import numpy as np
import pytest

from navspeak import autodiff as ad
from navspeak.autodiff import Tensor
from navspeak.config import RunConfig
from navspeak.encoder import STOP_ORIENTATION, PerspectiveEncoder, pool_features
from navspeak.errors import ValidationError
from navspeak.gradcheck import grad_check
from navspeak.nn import ParameterStore


def make_encoder(seed=0, **overrides):
    cfg = RunConfig(**overrides)
    store = ParameterStore()
    enc = PerspectiveEncoder(store, cfg, np.random.default_rng(seed))
    return cfg, store, enc


def random_view(rng, cfg):
    return rng.standard_normal((cfg.d_patch, cfg.feat_hw, cfg.feat_hw))


def orientation_code(heading, elevation=0.0):
    return np.array([np.cos(heading), np.sin(heading),
                     np.cos(elevation), np.sin(elevation)])


def dense_oracle(store, prefix, feats, delta, t, type_name):
    """Recompute one token with plain numpy from the raw parameter arrays."""
    pooled = feats.reshape(feats.shape[0], -1).mean(axis=1)
    w = store.get(f"encoder.{prefix}.w").data
    b = store.get(f"encoder.{prefix}.b").data
    wd = store.get("encoder.orient_proj.w").data
    bd = store.get("encoder.orient_proj.b").data
    et = store.get("encoder.time_table").data[t]
    ty = store.get(f"encoder.{type_name}").data
    return pooled @ w + b + delta @ wd + bd + et + ty


def test_zero_parameters_give_zero_token():
    cfg, store, enc = make_encoder()
    for p in store.parameters():
        p.tensor.data[...] = 0.0
    rng = np.random.default_rng(3)
    out = enc.embed_perspective(Tensor(random_view(rng, cfg)),
                                orientation_code(0.7), t=2)
    np.testing.assert_array_equal(out.data, np.zeros(cfg.d_model))


def test_orientation_difference_is_linear():
    cfg, store, enc = make_encoder(seed=5)
    rng = np.random.default_rng(11)
    feats = Tensor(random_view(rng, cfg))
    d1, d2 = orientation_code(0.3, 0.1), orientation_code(-1.2, 0.0)
    p1 = enc.embed_perspective(feats, d1, t=4)
    p2 = enc.embed_perspective(feats, d2, t=4)
    wd = store.get("encoder.orient_proj.w").data
    np.testing.assert_allclose(p1.data - p2.data, (d1 - d2) @ wd,
                               rtol=0, atol=1e-12)


def test_perspective_matches_dense_recomputation():
    cfg, store, enc = make_encoder(seed=9)
    rng = np.random.default_rng(23)
    for trial in range(5):
        feats = random_view(rng, cfg)
        delta = orientation_code(rng.uniform(-np.pi, np.pi),
                                 rng.uniform(-0.5, 0.5))
        t = int(rng.integers(cfg.t_max))
        got = enc.embed_perspective(Tensor(feats), delta, t)
        want = dense_oracle(store, "view_proj", feats, delta, t, "type_obs")
        np.testing.assert_allclose(got.data, want, rtol=1e-12, atol=1e-12)


def test_action_matches_dense_recomputation():
    cfg, store, enc = make_encoder(seed=9)
    rng = np.random.default_rng(29)
    feats = random_view(rng, cfg)
    delta = orientation_code(np.pi / 2)
    got = enc.embed_action(Tensor(feats), delta, t=3, view_index=2)
    want = dense_oracle(store, "action_proj", feats, delta, 3, "type_act")
    np.testing.assert_allclose(got.data, want, rtol=1e-12, atol=1e-12)


def test_observation_vs_action_difference():
    # Same F, delta, t under both maps: difference is the two linear heads
    # plus the type vectors; orientation and time components cancel.
    cfg, store, enc = make_encoder(seed=2)
    rng = np.random.default_rng(31)
    feats = random_view(rng, cfg)
    delta = orientation_code(0.0)
    p = enc.embed_perspective(Tensor(feats), delta, t=1)
    a = enc.embed_action(Tensor(feats), delta, t=1, view_index=1)
    pooled = feats.reshape(cfg.d_patch, -1).mean(axis=1)
    wp, bp = store.get("encoder.view_proj.w").data, store.get("encoder.view_proj.b").data
    wa, ba = store.get("encoder.action_proj.w").data, store.get("encoder.action_proj.b").data
    want = (pooled @ wp + bp) - (pooled @ wa + ba) \
        + store.get("encoder.type_obs").data - store.get("encoder.type_act").data
    np.testing.assert_allclose(p.data - a.data, want, rtol=0, atol=1e-12)


def test_stop_action_ignores_observation():
    cfg, store, enc = make_encoder(seed=7)
    rng = np.random.default_rng(37)
    a1 = enc.embed_action(Tensor(random_view(rng, cfg)), STOP_ORIENTATION,
                          t=5, view_index=0)
    a2 = enc.embed_action(None, STOP_ORIENTATION, t=5, view_index=0)
    np.testing.assert_array_equal(a1.data, a2.data)
    stop = store.get("encoder.stop_feature").data
    wa, ba = store.get("encoder.action_proj.w").data, store.get("encoder.action_proj.b").data
    wd, bd = store.get("encoder.orient_proj.w").data, store.get("encoder.orient_proj.b").data
    want = stop @ wa + ba + STOP_ORIENTATION @ wd + bd \
        + store.get("encoder.time_table").data[5] + store.get("encoder.type_act").data
    np.testing.assert_allclose(a2.data, want, rtol=1e-12, atol=1e-12)


def test_additivity_zeroing_each_term():
    cfg, store, enc = make_encoder(seed=13)
    rng = np.random.default_rng(41)
    feats = Tensor(random_view(rng, cfg))
    delta = orientation_code(1.0, 0.2)
    full = enc.embed_perspective(feats, delta, t=6).data.copy()

    removable = {
        "encoder.time_table": store.get("encoder.time_table").data[6].copy(),
        "encoder.type_obs": store.get("encoder.type_obs").data.copy(),
    }
    for name, contribution in removable.items():
        saved = store.get(name).data.copy()
        store.get(name).data[...] = 0.0
        reduced = enc.embed_perspective(feats, delta, t=6).data
        np.testing.assert_allclose(full - reduced, contribution,
                                   rtol=0, atol=1e-12)
        store.get(name).data[...] = saved


def test_time_step_sensitivity():
    cfg, store, enc = make_encoder(seed=17)
    rng = np.random.default_rng(43)
    feats = Tensor(random_view(rng, cfg))
    delta = orientation_code(-0.4)
    p3 = enc.embed_perspective(feats, delta, t=3)
    p9 = enc.embed_perspective(feats, delta, t=9)
    table = store.get("encoder.time_table").data
    np.testing.assert_allclose(p3.data - p9.data, table[3] - table[9],
                               rtol=0, atol=1e-12)


def test_batched_matches_per_view_loop():
    cfg, store, enc = make_encoder(seed=19)
    rng = np.random.default_rng(47)
    K = cfg.n_views
    feats = rng.standard_normal((K, cfg.d_patch, cfg.feat_hw, cfg.feat_hw))
    deltas = np.stack([orientation_code(k * np.pi / 2) for k in range(K)])
    batched = enc.embed_observation(Tensor(feats), deltas, t=2)
    assert batched.shape == (K, cfg.d_model)
    for k in range(K):
        single = enc.embed_perspective(Tensor(feats[k]), deltas[k], t=2)
        np.testing.assert_allclose(batched.data[k], single.data,
                                   rtol=1e-14, atol=1e-14)


def test_step_and_index_range_errors():
    cfg, store, enc = make_encoder()
    rng = np.random.default_rng(53)
    feats = Tensor(random_view(rng, cfg))
    delta = orientation_code(0.0)
    with pytest.raises(ValidationError):
        enc.embed_perspective(feats, delta, t=cfg.t_max)
    with pytest.raises(ValidationError):
        enc.embed_perspective(feats, delta, t=-1)
    with pytest.raises(ValidationError):
        enc.embed_action(feats, delta, t=0, view_index=cfg.n_views + 1)
    with pytest.raises(ValidationError):
        enc.embed_action(None, delta, t=0, view_index=1)


def test_action_gradient_wrt_orientation_weights():
    cfg, store, enc = make_encoder(seed=23)
    rng = np.random.default_rng(59)
    feats = random_view(rng, cfg)
    delta = orientation_code(0.8, -0.1)
    probe = rng.standard_normal(cfg.d_model)

    def objective():
        a = enc.embed_action(Tensor(feats), delta, t=4, view_index=3)
        return (a * probe).sum()

    params = [store.get("encoder.orient_proj.w"), store.get("encoder.orient_proj.b")]
    assert grad_check(objective, params) <= 1e-4


def test_pool_features_rejects_flat_input():
    with pytest.raises(ValidationError):
        pool_features(Tensor(np.zeros((4, 8))))

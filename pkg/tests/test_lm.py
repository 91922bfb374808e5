"""Decoder, prompt builder, and language-model loss tests.

The load-bearing oracles: a full numpy recompute of a one-head decoder with
nonzero gates and perturbed scales (pins the gated-attention wiring and the
scale-vector algebra), exact zero-gate/unit-scale identities, and causality
as bit-equality of prefix logits under suffix edits.
"""
import dataclasses

import numpy as np
import pytest
from scipy.special import erf

from navspeak import lm as L
from navspeak.autodiff import Tensor
from navspeak.config import desk_preset
from navspeak.errors import ShapeError, ValidationError
from navspeak.gradcheck import grad_check
from navspeak.grammar import BOS, END, vocabulary
from navspeak.nn import FROZEN, TUNED, ParameterStore


def tiny_cfg(**kw):
    base = dict(d_model=12, n_queries=3, n_prompts=3, d_lm=16, lm_layers=2,
                lm_heads=2, lm_ffn_mult=2, n_gated_layers=1, max_text_len=24)
    base.update(kw)
    cfg = dataclasses.replace(desk_preset(), **base)
    cfg.validate()
    return cfg


def make_decoder(cfg, seed=0, vocab_size=None):
    store = ParameterStore()
    rng = np.random.default_rng(seed)
    v = len(vocabulary()) if vocab_size is None else vocab_size
    return store, L.Decoder(store, cfg, v, rng)


def rand_prompts(cfg, rows, seed=1):
    rng = np.random.default_rng(seed)
    return Tensor(rng.standard_normal((rows, cfg.d_lm)))


def set_gates(store, cfg, value):
    first = cfg.lm_layers - cfg.n_gated_layers
    for i in range(first, cfg.lm_layers):
        store.get(f"adapt.layer{i}.gate").data[:] = value


# -- identities --------------------------------------------------------------


def test_zero_gate_prompt_content_identity():
    cfg = tiny_cfg()
    store, dec = make_decoder(cfg)
    ids = np.array([BOS, 7, 12, 9, 3, 25])
    with_prompts = dec(rand_prompts(cfg, 6), ids)
    with_zeros = dec(Tensor(np.zeros((6, cfg.d_lm))), ids)
    without = dec(None, ids)
    assert np.array_equal(with_prompts.data, with_zeros.data)
    assert np.array_equal(with_prompts.data, without.data)


def test_nonzero_gate_breaks_the_identity():
    cfg = tiny_cfg()
    store, dec = make_decoder(cfg)
    set_gates(store, cfg, 0.5)
    ids = np.array([BOS, 7, 12, 9])
    a = dec(rand_prompts(cfg, 4, seed=2), ids)
    b = dec(None, ids)
    assert np.abs(a.data - b.data).max() > 1e-9


def test_scaled_linear_unit_scales_bit_identical():
    store = ParameterStore()
    rng = np.random.default_rng(3)
    lin = L.ScaledLinear(store, "probe", 5, 7, rng, FROZEN, scaled=True)
    x = Tensor(rng.standard_normal((4, 5)))
    w = store.get("lm.probe.w").data
    b = store.get("lm.probe.b").data
    assert np.array_equal(lin(x).data, x.data @ w + b)


def test_scale_vectors_round_trip_restores_base_output():
    cfg = tiny_cfg()
    store, dec = make_decoder(cfg)
    ids = np.array([BOS, 4, 4, 19])
    before = dec(None, ids).data
    scales = [p for p in store.parameters(TUNED) if p.name.endswith((".s_w", ".s_b"))]
    assert scales
    rng = np.random.default_rng(4)
    for p in scales:
        p.tensor.data[:] = 1.0 + 0.3 * rng.standard_normal(p.tensor.data.shape)
    assert np.abs(dec(None, ids).data - before).max() > 1e-9
    for p in scales:
        p.tensor.data[:] = 1.0
    assert np.array_equal(dec(None, ids).data, before)


def test_causality_prefix_logits_unchanged_by_suffix_edit():
    cfg = tiny_cfg()
    store, dec = make_decoder(cfg)
    set_gates(store, cfg, 0.4)
    prompts = rand_prompts(cfg, 5, seed=5)
    ids = np.array([BOS, 10, 3, 17, 8, 22, 6, 14])
    base = dec(prompts, ids).data
    for j in [2, 4, 7]:
        edited = ids.copy()
        edited[j] = (edited[j] + 5) % 28
        out = dec(prompts, edited).data
        assert np.array_equal(out[:j], base[:j])
        assert np.abs(out[j:] - base[j:]).max() > 0.0


# -- dense oracle -------------------------------------------------------------


def np_layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def np_gelu(x):
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def np_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def test_decoder_forward_dense_single_head_oracle():
    cfg = tiny_cfg(d_lm=8, lm_heads=1, n_queries=2, n_prompts=2)
    store, dec = make_decoder(cfg, seed=6, vocab_size=13)
    rng = np.random.default_rng(7)
    store.get("adapt.layer1.gate").data[:] = 0.37
    for p in store.parameters(TUNED):
        if p.name.endswith((".s_w", ".s_b")):
            p.tensor.data[:] = 1.0 + 0.2 * rng.standard_normal(p.tensor.data.shape)

    n_prompt, ids = 3, np.array([1, 5, 9, 2])
    prompts = rng.standard_normal((n_prompt, cfg.d_lm))
    got = dec(Tensor(prompts), ids).data

    def lin(name, x, scaled):
        w = store.get(f"lm.{name}.w").data
        b = store.get(f"lm.{name}.b").data
        if not scaled:
            return x @ w + b
        return (x @ w) * store.get(f"adapt.{name}.s_w").data \
            + b * store.get(f"adapt.{name}.s_b").data

    h = np.concatenate(
        [prompts, store.get("lm.embed").data[ids] + store.get("lm.pos").data[: ids.size]]
    )
    scale = 1.0 / np.sqrt(cfg.d_lm)
    for i, (scaled, gated) in enumerate([(False, False), (True, True)]):
        base = f"layer{i}"
        x = np_layer_norm(h, store.get(f"lm.{base}.norm1.gamma").data,
                          store.get(f"lm.{base}.norm1.beta").data)
        q = lin(f"{base}.attn.wq", x, scaled)
        k = lin(f"{base}.attn.wk", x, scaled)
        v = lin(f"{base}.attn.wv", x, scaled)
        qt, kt, vt = q[n_prompt:], k[n_prompt:], v[n_prompt:]
        length = ids.size
        st = qt @ kt.T * scale + np.triu(np.full((length, length), -np.inf), k=1)
        at = np_softmax(st) @ vt
        qp, kp, vp = q[:n_prompt], k[:n_prompt], v[:n_prompt]
        ap = np_softmax(qp @ kp.T * scale) @ vp
        if gated:
            gate = store.get(f"adapt.{base}.gate").data[0]
            at = at + np.tanh(gate) * (np_softmax(qt @ kp.T * scale) @ vp)
        h = h + lin(f"{base}.attn.wo", np.concatenate([ap, at]), scaled)
        x = np_layer_norm(h, store.get(f"lm.{base}.norm2.gamma").data,
                          store.get(f"lm.{base}.norm2.beta").data)
        h = h + lin(f"{base}.ffn.fc2", np_gelu(lin(f"{base}.ffn.fc1", x, scaled)), scaled)
    text = np_layer_norm(h[n_prompt:], store.get("lm.final_norm.gamma").data,
                         store.get("lm.final_norm.beta").data)
    want = lin("head", text, scaled=False)
    np.testing.assert_allclose(got, want, atol=1e-10)


# -- loss ----------------------------------------------------------------------


def test_uniform_logits_loss_is_log_vocab():
    v = 28
    logits = Tensor(np.zeros((5, v)))
    loss = L.lm_loss(logits, np.array([0, 3, 9, 27, 1]), np.ones(5))
    assert abs(loss.data - np.log(v)) < 1e-12


def test_lm_loss_matches_dense_recompute():
    rng = np.random.default_rng(8)
    logits = rng.standard_normal((6, 11))
    targets = rng.integers(11, size=6)
    mask = np.array([1, 0, 1, 1, 0, 1])
    loss = L.lm_loss(Tensor(logits), targets, mask)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    want = -logp[np.arange(6), targets][mask == 1].mean()
    assert abs(loss.data - want) < 1e-12


def test_lm_loss_rejects_empty_mask_and_bad_shapes():
    logits = Tensor(np.zeros((4, 9)))
    with pytest.raises(ValidationError):
        L.lm_loss(logits, np.zeros(4, dtype=int), np.zeros(4))
    with pytest.raises(ShapeError):
        L.lm_loss(logits, np.zeros(3, dtype=int), np.ones(3))
    with pytest.raises(ShapeError):
        L.lm_loss(logits, np.zeros(4, dtype=int), np.ones(5))


# -- gradients ------------------------------------------------------------------


def test_gradients_through_gated_decoder_and_prompts():
    cfg = tiny_cfg()
    store = ParameterStore()
    rng = np.random.default_rng(9)
    dec = L.Decoder(store, cfg, 13, rng)
    builder = L.PromptBuilder(store, cfg, rng)
    set_gates(store, cfg, 0.2)
    obs = Tensor(rng.standard_normal((2, cfg.n_queries, cfg.d_model)))
    ids = np.array([1, 5, 9, 2, 11, 7])
    targets = np.array([5, 9, 2, 11, 7, 2])
    mask = np.array([1, 1, 0, 1, 1, 1])

    def objective():
        return L.lm_loss(dec(builder(obs), ids), targets, mask)

    names = [
        f"adapt.layer{cfg.lm_layers - 1}.gate",
        f"adapt.layer{cfg.lm_layers - 1}.attn.wq.s_w",
        f"adapt.layer{cfg.lm_layers - 1}.ffn.fc2.s_b",
        "prompt.bank",
        "prompt.bridge.w",
        "lm.embed",
        "lm.pos",
        "lm.layer0.attn.wq.w",
        "lm.layer1.ffn.fc1.w",
        "lm.head.w",
    ]
    params = [store.get(n) for n in names]
    err = grad_check(objective, params, max_entries=5, rng=np.random.default_rng(10))
    assert err <= 1e-4


# -- generation -------------------------------------------------------------------


def test_generate_greedy_is_deterministic():
    cfg = tiny_cfg()
    _, dec = make_decoder(cfg, seed=11)
    prompts = rand_prompts(cfg, 4, seed=12)
    a = dec.generate(prompts, [BOS], max_len=10)
    b = dec.generate(prompts, [BOS], max_len=10)
    assert a == b
    assert a[0] == BOS
    assert len(a) <= 10
    assert a[-1] == END or len(a) == 10


def test_generate_temperature_same_seed_same_output():
    cfg = tiny_cfg()
    _, dec = make_decoder(cfg, seed=13)
    a = dec.generate(None, [BOS], max_len=12, temperature=0.8,
                     rng=np.random.default_rng(42))
    b = dec.generate(None, [BOS], max_len=12, temperature=0.8,
                     rng=np.random.default_rng(42))
    assert a == b
    assert all(0 <= t < dec.vocab_size for t in a)


def test_generate_zero_gates_ignore_prompt_content():
    cfg = tiny_cfg()
    _, dec = make_decoder(cfg, seed=14)
    a = dec.generate(rand_prompts(cfg, 6, seed=15), [BOS], max_len=9)
    b = dec.generate(Tensor(np.zeros((6, cfg.d_lm))), [BOS], max_len=9)
    c = dec.generate(None, [BOS], max_len=9)
    assert a == b == c


def test_generate_prefix_preserved_and_edge_lengths():
    cfg = tiny_cfg()
    _, dec = make_decoder(cfg, seed=16)
    prefix = [BOS, 7, 9]
    out = dec.generate(None, prefix, max_len=6)
    assert out[:3] == prefix
    assert len(out) <= 6
    short = dec.generate(None, [BOS], max_len=2)
    assert len(short) == 2 and short[0] == BOS
    with pytest.raises(ValidationError):
        dec.generate(None, [BOS], max_len=1)


def test_generate_validation_errors():
    cfg = tiny_cfg()
    _, dec = make_decoder(cfg, seed=17)
    with pytest.raises(ValidationError):
        dec.generate(None, [])
    with pytest.raises(ValidationError):
        dec.generate(None, [BOS], temperature=0.5)
    with pytest.raises(ValidationError):
        dec.generate(None, [BOS], temperature=-1.0, rng=np.random.default_rng(0))
    with pytest.raises(ValidationError):
        dec.generate(None, [BOS], max_len=cfg.max_text_len + 1)


# -- prompt builder -----------------------------------------------------------------


def test_build_prompts_rows_and_zero_bank_is_plain_bridge():
    cfg = tiny_cfg()
    store = ParameterStore()
    rng = np.random.default_rng(18)
    builder = L.PromptBuilder(store, cfg, rng)
    store.get("prompt.bank").data[:] = 0.0
    obs = rng.standard_normal((3, cfg.n_queries, cfg.d_model))
    out = builder(Tensor(obs))
    assert out.shape == (3 * cfg.n_prompts, cfg.d_lm)
    w = store.get("prompt.bridge.w").data
    b = store.get("prompt.bridge.b").data
    np.testing.assert_allclose(out.data, obs.reshape(-1, cfg.d_model) @ w + b, atol=1e-13)


def test_build_prompts_bank_shift_is_bridged_bank_image():
    cfg = tiny_cfg()
    store = ParameterStore()
    rng = np.random.default_rng(19)
    builder = L.PromptBuilder(store, cfg, rng)
    obs = Tensor(rng.standard_normal((2, cfg.n_queries, cfg.d_model)))
    bank = store.get("prompt.bank")
    with_bank = builder(obs).data
    saved = bank.data.copy()
    bank.data[:] = 0.0
    without = builder(obs).data
    bank.data[:] = saved
    w = store.get("prompt.bridge.w").data
    shift = np.tile(saved @ w, (2, 1))
    np.testing.assert_allclose(with_bank - without, shift, atol=1e-12)


def test_build_prompts_single_step_and_shape_errors():
    cfg = tiny_cfg()
    store = ParameterStore()
    rng = np.random.default_rng(20)
    builder = L.PromptBuilder(store, cfg, rng)
    out = builder(Tensor(rng.standard_normal((cfg.n_queries, cfg.d_model))))
    assert out.shape == (cfg.n_prompts, cfg.d_lm)
    with pytest.raises(ShapeError):
        builder(Tensor(rng.standard_normal((2, cfg.n_queries + 1, cfg.d_model))))
    with pytest.raises(ShapeError):
        builder(Tensor(rng.standard_normal((2, cfg.n_queries, cfg.d_model + 1))))
    with pytest.raises(ShapeError):
        builder(Tensor(rng.standard_normal((2, 2, cfg.n_queries, cfg.d_model))))


# -- parameter partition ---------------------------------------------------------


def test_parameter_tags_follow_the_adaptation_contract():
    cfg = tiny_cfg()
    store = ParameterStore()
    rng = np.random.default_rng(21)
    L.Decoder(store, cfg, 28, rng)
    L.PromptBuilder(store, cfg, rng)
    for p in store.parameters():
        if p.name.startswith("lm."):
            assert p.tag == FROZEN, p.name
        else:
            assert p.name.startswith(("adapt.", "prompt.")), p.name
            assert p.tag == TUNED, p.name


def test_gates_start_at_zero_and_scales_at_one():
    cfg = tiny_cfg(lm_layers=3, n_gated_layers=2)
    store = ParameterStore()
    L.Decoder(store, cfg, 28, np.random.default_rng(22))
    gates = [p for p in store.parameters() if p.name.endswith(".gate")]
    assert [p.name for p in gates] == ["adapt.layer1.gate", "adapt.layer2.gate"]
    for p in gates:
        assert np.array_equal(p.tensor.data, np.zeros(cfg.lm_heads))
    scales = [p for p in store.parameters() if p.name.endswith((".s_w", ".s_b"))]
    assert scales and all(np.array_equal(p.tensor.data, np.ones_like(p.tensor.data))
                          for p in scales)
    assert not any(p.name.startswith("adapt.layer0.") for p in scales)
    assert not any(p.name.startswith("adapt.head") for p in scales)


def test_scale_all_linears_extends_scales_to_every_layer_and_head():
    cfg = tiny_cfg(scale_all_linears=True)
    store = ParameterStore()
    L.Decoder(store, cfg, 28, np.random.default_rng(23))
    assert "adapt.layer0.attn.wq.s_w" in store
    assert "adapt.head.s_w" in store


# -- input validation -------------------------------------------------------------


def test_decoder_rejects_bad_ids_and_prompts():
    cfg = tiny_cfg()
    _, dec = make_decoder(cfg, seed=24)
    with pytest.raises(ValidationError):
        dec(None, [])
    with pytest.raises(ValidationError):
        dec(None, np.zeros(3))
    with pytest.raises(ValidationError):
        dec(None, np.zeros(cfg.max_text_len + 1, dtype=int))
    with pytest.raises(ValidationError):
        dec(None, [1, 28])
    with pytest.raises(ValidationError):
        dec(None, [1, -1])
    with pytest.raises(ShapeError):
        dec(Tensor(np.zeros((4, cfg.d_lm + 1))), [1, 2])
    with pytest.raises(ShapeError):
        dec(Tensor(np.zeros((2, 4, cfg.d_lm))), [1, 2])


def test_tuned_fraction_delegates_to_the_store():
    cfg = tiny_cfg()
    store, _ = make_decoder(cfg, seed=25)
    assert L.tuned_parameter_fraction(store) == store.tuned_fraction()
    assert 0.0 < L.tuned_parameter_fraction(store) < 1.0

"""Decoder-only language model with gated visual-prompt injection.

The base decoder (token/position embeddings, attention and feed-forward
stacks, output head) is a conventional pre-norm transformer registered under
the ``lm.`` prefix. Adaptation happens through three small parameter groups
that leave the base weights untouched:

- a prompt bank plus linear bridge (``prompt.``) that turns compressed
  observation tokens into decoder-width prompt rows,
- per-head tanh gates (``adapt.layerN.gate``) that scale the attention
  contribution of prompt positions in the topmost layers,
- output scale vectors (``adapt.*.s_w`` / ``.s_b``) on the linear maps of
  those same layers.

Gates start at exactly zero and scales at exactly one, so an adapted model
is bit-identical to the frozen base until tuning moves them. Text positions
attend causally among themselves; prompt positions attend only each other
and are visible to text queries solely through the gated path.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import ShapeError, ValidationError
from .grammar import END

__all__ = [
    "Decoder",
    "PromptBuilder",
    "lm_loss",
    "tuned_parameter_fraction",
]


class ScaledLinear:
    """Linear map with optional learned output scales.

    The weight and bias live under ``lm.<name>`` and follow the base tag;
    the scale vectors live under ``adapt.<name>`` and are always tuned.
    With scales at their init value of one the output is bit-identical to
    the plain linear, which is what keeps the frozen-base contract exact.
    """

    def __init__(self, store: nn.ParameterStore, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator, base_tag: str, scaled: bool):
        self.base = nn.Linear(store, f"lm.{name}", d_in, d_out, rng, base_tag)
        if scaled:
            self.s_w = store.add(f"adapt.{name}.s_w", np.ones(d_out), nn.TUNED)
            self.s_b = store.add(f"adapt.{name}.s_b", np.ones(d_out), nn.TUNED)
        else:
            self.s_w = None
            self.s_b = None

    def __call__(self, x: Tensor) -> Tensor:
        if self.s_w is None:
            return self.base(x)
        return ad.matmul(x, self.base.w) * self.s_w + self.base.b * self.s_b


class _DecoderLayer:
    def __init__(self, store: nn.ParameterStore, cfg, index: int,
                 rng: np.random.Generator, base_tag: str, scaled: bool, gated: bool):
        d = cfg.d_lm
        self.n_heads = cfg.lm_heads
        self.d_head = d // cfg.lm_heads
        base = f"layer{index}"
        self.norm1 = nn.LayerNorm(store, f"lm.{base}.norm1", d, base_tag)
        self.norm2 = nn.LayerNorm(store, f"lm.{base}.norm2", d, base_tag)
        self.wq = ScaledLinear(store, f"{base}.attn.wq", d, d, rng, base_tag, scaled)
        self.wk = ScaledLinear(store, f"{base}.attn.wk", d, d, rng, base_tag, scaled)
        self.wv = ScaledLinear(store, f"{base}.attn.wv", d, d, rng, base_tag, scaled)
        self.wo = ScaledLinear(store, f"{base}.attn.wo", d, d, rng, base_tag, scaled)
        hidden = cfg.lm_ffn_mult * d
        self.fc1 = ScaledLinear(store, f"{base}.ffn.fc1", d, hidden, rng, base_tag, scaled)
        self.fc2 = ScaledLinear(store, f"{base}.ffn.fc2", hidden, d, rng, base_tag, scaled)
        if gated:
            self.gate = store.add(f"adapt.{base}.gate", np.zeros(cfg.lm_heads), nn.TUNED)
        else:
            self.gate = None

    def _split(self, x: Tensor) -> Tensor:
        s, d = x.shape
        return x.reshape(s, self.n_heads, self.d_head).transpose((1, 0, 2))

    def _merge(self, x: Tensor) -> Tensor:
        h, s, dh = x.shape
        return x.transpose((1, 0, 2)).reshape(s, h * dh)

    def _attend(self, h: Tensor, n_prompt: int) -> Tensor:
        length = h.shape[0] - n_prompt
        q = self._split(self.wq(h))
        k = self._split(self.wk(h))
        v = self._split(self.wv(h))
        qt = q[:, n_prompt:]
        kt = k[:, n_prompt:]
        vt = v[:, n_prompt:]
        out_text = nn.sdpa(qt, kt, vt, mask=nn.causal_mask(length))
        if n_prompt == 0:
            return self.wo(self._merge(out_text))
        kp = k[:, :n_prompt]
        vp = v[:, :n_prompt]
        out_prompt = nn.sdpa(q[:, :n_prompt], kp, vp)
        if self.gate is not None:
            # Separate softmax over the prompt keys; the per-head gate scales
            # this contribution before it joins the text-only result, so a
            # zero gate leaves the base model's output untouched exactly.
            cross = nn.sdpa(qt, kp, vp)
            out_text = out_text + ad.tanh(self.gate).reshape(-1, 1, 1) * cross
        out = ad.concat([out_prompt, out_text], axis=1)
        return self.wo(self._merge(out))

    def __call__(self, h: Tensor, n_prompt: int) -> Tensor:
        h = h + self._attend(self.norm1(h), n_prompt)
        return h + self.fc2(ad.gelu(self.fc1(self.norm2(h))))


class Decoder:
    """Pre-norm transformer decoder over the instruction vocabulary.

    ``base_tag`` tags everything under ``lm.`` (the warm-up stage trains it,
    the tuning stage freezes it); adaptation parameters are always tuned.
    The topmost ``n_gated_layers`` layers carry prompt gates and, by default,
    the output scale vectors; ``scale_all_linears`` extends the scales to
    every layer and the output head.
    """

    def __init__(self, store: nn.ParameterStore, cfg, vocab_size: int,
                 rng: np.random.Generator, base_tag: str = nn.FROZEN):
        if cfg.d_lm % cfg.lm_heads:
            raise ValidationError(f"d_lm {cfg.d_lm} not divisible by lm_heads {cfg.lm_heads}")
        if vocab_size < 1:
            raise ValidationError(f"vocab_size must be positive, got {vocab_size}")
        self.cfg = cfg
        self.vocab_size = vocab_size
        d = cfg.d_lm
        self.embed = store.add("lm.embed", 0.02 * rng.standard_normal((vocab_size, d)), base_tag)
        self.pos = store.add("lm.pos", 0.02 * rng.standard_normal((cfg.max_text_len, d)), base_tag)
        first_gated = cfg.lm_layers - cfg.n_gated_layers
        self.layers = []
        for i in range(cfg.lm_layers):
            gated = i >= first_gated
            scaled = cfg.scale_all_linears or gated
            self.layers.append(_DecoderLayer(store, cfg, i, rng, base_tag, scaled, gated))
        self.final_norm = nn.LayerNorm(store, "lm.final_norm", d, base_tag)
        self.head = ScaledLinear(store, "head", d, vocab_size, rng, base_tag,
                                 scaled=cfg.scale_all_linears)

    def _check_ids(self, ids) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.ndim != 1 or ids.size == 0:
            raise ValidationError(f"token ids must be a nonempty 1-d sequence, got shape {ids.shape}")
        if ids.dtype.kind not in "iu":
            raise ValidationError(f"token ids must be integers, got dtype {ids.dtype}")
        if ids.size > self.cfg.max_text_len:
            raise ValidationError(
                f"text length {ids.size} exceeds max_text_len {self.cfg.max_text_len}"
            )
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise ValidationError(f"token id out of range for vocabulary of {self.vocab_size}")
        return ids

    def __call__(self, prompts: Tensor | None, ids) -> Tensor:
        """Logits (L, V) for the text positions of the sequence [prompts, ids].

        Text positions use learned absolute positions starting at zero
        regardless of the prompt count, so the base model's view of the text
        is the same with and without prompts in front of it.
        """
        ids = self._check_ids(ids)
        n_prompt = 0
        if prompts is not None and prompts.shape[0] > 0:
            if prompts.ndim != 2 or prompts.shape[1] != self.cfg.d_lm:
                raise ShapeError(f"prompts must be (P, {self.cfg.d_lm}), got {prompts.shape}")
            n_prompt = prompts.shape[0]
        h = ad.embedding(self.embed, ids) + self.pos[: ids.size]
        if n_prompt:
            h = ad.concat([prompts, h], axis=0)
        for layer in self.layers:
            h = layer(h, n_prompt)
        text = h[n_prompt:] if n_prompt else h
        return self.head(self.final_norm(text))

    def generate(self, prompts: Tensor | None, prefix, max_len: int | None = None,
                 temperature: float | None = None,
                 rng: np.random.Generator | None = None) -> list[int]:
        """Extend prefix token by token until <end> or max_len total tokens.

        Greedy argmax by default; with a temperature, samples from the scaled
        softmax using the supplied generator. Returns the full token list
        including the prefix.
        """
        if max_len is None:
            max_len = self.cfg.max_text_len
        if max_len < 1 or max_len > self.cfg.max_text_len:
            raise ValidationError(f"max_len must be in [1, {self.cfg.max_text_len}], got {max_len}")
        ids = [int(t) for t in prefix]
        if not ids:
            raise ValidationError("generation prefix must contain at least one token")
        if len(ids) >= max_len:
            raise ValidationError(f"prefix length {len(ids)} must be < max_len {max_len}")
        if temperature is not None:
            if temperature <= 0.0:
                raise ValidationError(f"temperature must be positive, got {temperature}")
            if rng is None:
                raise ValidationError("temperature sampling requires a random generator")
        with ad.no_grad():
            while len(ids) < max_len:
                logits = self(prompts, ids).data[-1]
                if temperature is None:
                    nxt = int(np.argmax(logits))
                else:
                    scaled = logits / temperature
                    p = np.exp(scaled - scaled.max())
                    p /= p.sum()
                    nxt = int(rng.choice(self.vocab_size, p=p))
                ids.append(nxt)
                if nxt == END:
                    break
        return ids


class PromptBuilder:
    """Turns per-step observation tokens into decoder prompt rows.

    Each step's tokens are shifted by a shared learnable bank (one entry per
    token slot, identical across steps) and mapped through a linear bridge
    from encoder width to decoder width. Steps are distinguished by content,
    not position: the upstream encoder already stamps step indices into the
    tokens.
    """

    def __init__(self, store: nn.ParameterStore, cfg, rng: np.random.Generator,
                 tag: str = nn.TUNED):
        self.n_prompts = cfg.n_prompts
        self.bank = store.add(
            "prompt.bank", 0.02 * rng.standard_normal((cfg.n_prompts, cfg.d_model)), tag
        )
        self.bridge = nn.Linear(store, "prompt.bridge", cfg.d_model, cfg.d_lm, rng, tag)

    def __call__(self, observations: Tensor) -> Tensor:
        """(T, N_q, D) or (N_q, D) observation tokens -> (T * N_p, d_lm) prompts."""
        obs = observations
        if obs.ndim == 2:
            obs = obs.reshape(1, *obs.shape)
        if obs.ndim != 3:
            raise ShapeError(f"observations must be (T, N_q, D) or (N_q, D), got {observations.shape}")
        if obs.shape[1] != self.n_prompts:
            raise ShapeError(
                f"{obs.shape[1]} observation tokens per step, expected n_prompts={self.n_prompts}"
            )
        if obs.shape[2] != self.bank.shape[1]:
            raise ShapeError(
                f"observation width {obs.shape[2]} does not match prompt bank width {self.bank.shape[1]}"
            )
        steps, rows, _ = obs.shape
        out = self.bridge(obs + self.bank)
        return out.reshape(steps * rows, -1)


def lm_loss(logits: Tensor, targets, mask) -> Tensor:
    """Mean negative log-likelihood of targets over masked positions.

    logits: (L, V); targets: (L,) integer ids; mask: (L,) nonzero where the
    position is supervised. An all-zero mask is a contract violation.
    """
    targets = np.asarray(targets)
    mask = np.asarray(mask)
    if targets.shape != logits.shape[:-1] or mask.shape != targets.shape:
        raise ShapeError(
            f"lm_loss shapes disagree: logits {logits.shape}, targets {targets.shape}, "
            f"mask {mask.shape}"
        )
    return nn.masked_mean(ad.cross_entropy(logits, targets), mask)


def tuned_parameter_fraction(store: nn.ParameterStore) -> float:
    """Fraction of all stored scalars carrying the tuned tag."""
    return store.tuned_fraction()

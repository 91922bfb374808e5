"""Perspective-BEV fusion and the fixed-size query compressor.

Two pieces. FusionStack lets every BEV token attend to the step's context
tokens (the K perspective embeddings plus the action embedding) with
interleaved self-attention, keeping the BEV token count unchanged.
QueryCompressor then reduces the H_b*W_b fused tokens to a small learned
bank of N_q output tokens, so the downstream decoder sees a constant number
of visual tokens per step no matter how fine the BEV grid is.

BEV tokens act as attention queries throughout: they carry the geometry,
the context tokens are plain keys/values with no positional encoding, so
both stages are invariant to key order by construction.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeError
from .nn import FeedForward, LayerNorm, Linear, MultiHeadAttention, ParameterStore


def _context_tokens(perspective: Tensor, action: Tensor) -> Tensor:
    """[P_t, a_t]: (B, K + 1, D) context for cross-attention."""
    return ad.concat([perspective, action.reshape(action.shape[0], 1, -1)], axis=1)


class FusionStack:
    """Transformer over BEV tokens with per-step context cross-attention."""

    def __init__(self, store: ParameterStore, cfg, rng: np.random.Generator,
                 tag: str = "tuned", name: str = "fusion"):
        d = cfg.d_model
        self.d_model = d
        self.blocks = []
        for i in range(cfg.fo_blocks):
            base = f"{name}.block{i}"
            self.blocks.append({
                "self": MultiHeadAttention(store, f"{base}.self", d,
                                           cfg.fusion_heads, rng, tag),
                "norm1": LayerNorm(store, f"{base}.norm1", d, tag),
                "cross": MultiHeadAttention(store, f"{base}.cross", d,
                                            cfg.fusion_heads, rng, tag),
                "norm2": LayerNorm(store, f"{base}.norm2", d, tag),
                "ffn": FeedForward(store, f"{base}.ffn", d, cfg.fusion_ffn_hidden,
                                   rng, tag),
                "norm3": LayerNorm(store, f"{base}.norm3", d, tag),
            })

    def __call__(self, bev: Tensor, perspective: Tensor, action: Tensor) -> Tensor:
        """Fused tokens, same shape as bev.

        bev: (Q, D) or (B, Q, D); perspective: (K, D) or (B, K, D); action:
        (D,) or (B, D). The batch dimension covers trajectory steps.
        """
        bev = ad._wrap(bev)
        perspective = ad._wrap(perspective)
        action = ad._wrap(action)
        batched = bev.ndim == 3
        if not batched:
            bev = bev.reshape(1, *bev.shape)
            perspective = perspective.reshape(1, *perspective.shape)
            action = action.reshape(1, -1)
        if bev.shape[-1] != self.d_model or perspective.shape[-1] != self.d_model \
                or action.shape[-1] != self.d_model or bev.ndim != 3 \
                or perspective.ndim != 3 or bev.shape[0] != perspective.shape[0] \
                or action.shape[0] != bev.shape[0]:
            raise ShapeError(
                f"fuse: inconsistent shapes bev {bev.shape}, perspective "
                f"{perspective.shape}, action {action.shape} for D={self.d_model}")
        ctx = _context_tokens(perspective, action)
        x = bev
        for blk in self.blocks:
            x = blk["norm1"](x + blk["self"](x, x))
            x = blk["norm2"](x + blk["cross"](x, ctx))
            x = blk["norm3"](x + blk["ffn"](x))
        return x if batched else x.reshape(*x.shape[1:])


class QueryCompressor:
    """N_q learnable queries cross-attending the fused token set."""

    def __init__(self, store: ParameterStore, cfg, rng: np.random.Generator,
                 tag: str = "tuned", name: str = "compress"):
        d = cfg.d_model
        self.d_model = d
        self.n_queries = cfg.n_queries
        self.queries = store.add(f"{name}.queries",
                                 0.02 * rng.standard_normal((cfg.n_queries, d)), tag)
        self.blocks = []
        for i in range(cfg.q_blocks):
            base = f"{name}.block{i}"
            self.blocks.append({
                "cross": MultiHeadAttention(store, f"{base}.cross", d,
                                            cfg.fusion_heads, rng, tag),
                "norm1": LayerNorm(store, f"{base}.norm1", d, tag),
                "ffn": FeedForward(store, f"{base}.ffn", d, cfg.fusion_ffn_hidden,
                                   rng, tag),
                "norm2": LayerNorm(store, f"{base}.norm2", d, tag),
            })

    def __call__(self, fused: Tensor) -> Tensor:
        """O_t: (N_q, D) per step; (B, N_q, D) for batched input."""
        fused = ad._wrap(fused)
        batched = fused.ndim == 3
        if not batched:
            fused = fused.reshape(1, *fused.shape)
        if fused.ndim != 3 or fused.shape[-1] != self.d_model:
            raise ShapeError(f"compress: expected (*, {self.d_model}) tokens, "
                             f"got {fused.shape}")
        b = fused.shape[0]
        x = self.queries.reshape(1, self.n_queries, -1) * np.ones((b, 1, 1))
        for blk in self.blocks:
            x = blk["norm1"](x + blk["cross"](x, fused))
            x = blk["norm2"](x + blk["ffn"](x))
        return x if batched else x.reshape(*x.shape[1:])


def fuse_and_compress(stack: FusionStack, compressor: QueryCompressor,
                      bev: Tensor, perspective: Tensor, action: Tensor) -> Tensor:
    return compressor(stack(bev, perspective, action))

"""Speaker assembly: observation pathways feeding the prompt-tuned decoder.

One parameter store holds every component. The BEV encoder arrives frozen
from detection pretraining; the perspective encoder, fusion stack, query
compressor, and prompt builder belong to the tuned set; the decoder base is
trained text-only once and then frozen, leaving its gates and scale vectors
as the only language-side tuned parameters.

A variant switch mirrors the component-removal study: each row enables a
subset of {perspective, bev, fusion, refinement} and the per-step visual
tokens are assembled accordingly before compression. Every variant ends in
the same (T, N_q, D) observation shape, so the prompt and decoder machinery
downstream is identical across rows.

Components draw from independent seed streams: removing one pathway never
shifts another's initialization, which keeps variants comparable and the
warm-up shareable across rows.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import grammar as G
from .autodiff import Tensor
from .bev import BEVEncoder, cameras_from_rig
from .checkpoint import load_checkpoint
from .encoder import STOP_ORIENTATION, PerspectiveEncoder
from .errors import ValidationError
from .fusion import FusionStack, QueryCompressor
from .lm import Decoder, PromptBuilder
from .nn import FROZEN, TUNED, ParameterStore
from .world import rig_from_config


@dataclass(frozen=True)
class Variant:
    """Component flags for one study row."""

    perspective: bool = True
    bev: bool = True
    fusion: bool = True
    refinement: bool = True

    def __post_init__(self):
        if not (self.perspective or self.bev):
            raise ValidationError("variant needs at least one visual pathway")
        if self.fusion and not (self.perspective and self.bev):
            raise ValidationError("fusion requires both perspective and bev")


VARIANTS = {
    "perspective": Variant(perspective=True, bev=False, fusion=False, refinement=False),
    "bev": Variant(perspective=False, bev=True, fusion=False, refinement=False),
    "concat": Variant(perspective=True, bev=True, fusion=False, refinement=False),
    "fusion": Variant(perspective=True, bev=True, fusion=True, refinement=False),
    "refine": Variant(perspective=True, bev=True, fusion=False, refinement=True),
    "full": Variant(perspective=True, bev=True, fusion=True, refinement=True),
}

FULL = VARIANTS["full"]

# seed streams, one per component
_S_BEV, _S_PERSP, _S_FUSION, _S_COMPRESS, _S_PROMPT, _S_DECODER = (
    4219, 6101, 6229, 6367, 6473, 5807)


class InstructionModel:
    """The assembled speaker for one variant.

    ``base_tag`` is the tag given to the decoder base: TUNED while the
    warm-up stage owns it, FROZEN when the base will be filled from a
    warmed-up checkpoint. The BEV encoder is always created frozen; its
    values come from the detection pretraining checkpoint.
    """

    def __init__(self, cfg, variant: Variant = FULL, seed: int = 0,
                 base_tag: str = FROZEN):
        cfg.validate()
        self.cfg = cfg
        self.variant = variant
        self.seed = seed
        self.store = ParameterStore()
        self.vocab = G.vocabulary()
        rig = rig_from_config(cfg)
        self.cams = cameras_from_rig(rig)
        self.view_codes = np.stack([rig.orientation_code(off)
                                    for off in rig.view_offsets()])

        def rng(stream):
            return np.random.default_rng([stream, seed])

        self.perspective = (PerspectiveEncoder(self.store, cfg, rng(_S_PERSP))
                            if variant.perspective else None)
        self.bev = (BEVEncoder(self.store, cfg, rng(_S_BEV), tag=FROZEN)
                    if variant.bev else None)
        self.fusion = (FusionStack(self.store, cfg, rng(_S_FUSION))
                       if variant.fusion else None)
        self.compressor = QueryCompressor(self.store, cfg, rng(_S_COMPRESS))
        self.prompt_builder = PromptBuilder(self.store, cfg, rng(_S_PROMPT))
        self.decoder = Decoder(self.store, cfg, len(self.vocab), rng(_S_DECODER),
                               base_tag=base_tag)

    # -- perception --------------------------------------------------------------

    def load_bev(self, path: str, expect_hash: str | None = None) -> None:
        """Fill the BEV encoder from a detection pretraining checkpoint.

        Only ``bev.`` parameters are read; the detection head in the same
        file is ignored. The loaded weights are forced frozen regardless of
        the tag they trained under.
        """
        if self.bev is None:
            raise ValidationError("variant has no BEV pathway to load into")
        load_checkpoint(path, self.store, expect_hash, prefix="bev.")
        self.store.retag("bev.", FROZEN)

    def bev_tokens(self, episode) -> np.ndarray:
        """(T, Q, D) BEV features for every step, gradient-free.

        The encoder is frozen and episode features are fixed, so these are
        constants of the run; callers cache them keyed by episode id.
        """
        if self.bev is None:
            raise ValidationError("variant has no BEV pathway")
        feats = episode.features.astype(np.float64)
        poses = [episode.pose_at(t) for t in range(len(episode))]
        with ad.no_grad():
            out = self.bev.encode_batch(feats, self.cams, poses)
        return out.data

    def _perspective_tokens(self, feats: np.ndarray) -> Tensor:
        """Per-step view tokens (T, K, D)."""
        t_len, k = feats.shape[:2]
        codes = np.broadcast_to(self.view_codes, (t_len, k, 4))
        steps = np.broadcast_to(np.arange(t_len)[:, None], (t_len, k))
        return self.perspective.embed_perspective(Tensor(feats), codes, steps)

    def _action_tokens(self, episode, feats: np.ndarray) -> Tensor:
        acts = []
        for t in range(feats.shape[0]):
            v = int(episode.view_indices[t])
            if v == 0:
                fmap, code = None, STOP_ORIENTATION
            else:
                fmap, code = Tensor(feats[t, v - 1]), self.view_codes[v - 1]
            acts.append(self.perspective.embed_action(fmap, code, t, v))
        return ad.stack(acts, axis=0)

    def encode_episode(self, episode, bev_steps: np.ndarray | None = None) -> Tensor:
        """O_{1:T}: (T, N_q, D) observation tokens under the variant's wiring.

        bev_steps, when given, is a precomputed ``bev_tokens(episode)`` array;
        otherwise the frozen encoder runs here.
        """
        feats = episode.features.astype(np.float64)
        t_len = feats.shape[0]
        if t_len == 0:
            raise ValidationError(f"episode {episode.id} has no steps")
        parts = []
        if self.bev is not None:
            bev = bev_steps if bev_steps is not None else self.bev_tokens(episode)
            if bev.shape[0] != t_len:
                raise ValidationError(
                    f"episode {episode.id}: {bev.shape[0]} BEV steps for {t_len} poses")
            parts.append(Tensor(np.asarray(bev, dtype=np.float64)))
        if self.perspective is not None:
            p = self._perspective_tokens(feats)
            a = self._action_tokens(episode, feats)
            if self.fusion is not None:
                tokens = self.fusion(parts[0], p, a)
            else:
                parts.extend([p, a.reshape(t_len, 1, -1)])
                tokens = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
        else:
            tokens = parts[0]
        return self.compressor(tokens)

    def prompts_for(self, episode, bev_steps: np.ndarray | None = None) -> Tensor:
        """(T * N_p) x d_lm prompt rows for one episode."""
        return self.prompt_builder(self.encode_episode(episode, bev_steps))

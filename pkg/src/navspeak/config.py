"""Run configuration: every dimension and hyperparameter in one flat record.

Three presets exist. The desk preset is the default and what the test suite
runs. The paper preset keeps the published constants for documentation; it
is far too large to train here. The micro preset is a shrunken desk config
for fast determinism and pipeline tests.

Config files are flat `key = value` text, one pair per line; `#` comments
and blank lines are tolerated, unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass

from .errors import ValidationError


@dataclass
class RunConfig:
    seed: int = 0
    dtype: str = "float64"

    # world and rendering
    grid_cells: int = 9            # world is grid_cells x grid_cells meters, 1 m cells
    n_objects: int = 6
    n_wall_runs: int = 3
    camera_height: float = 1.2
    max_range: float = 8.0
    image_size: int = 32
    patch_size: int = 4
    n_views: int = 4               # K
    focal: float = 16.0
    min_actions: int = 3
    max_actions: int = 12
    salience_radius: float = 2.0
    success_radius: float = 1.5    # cells

    # embedding dims
    d_model: int = 64              # D
    t_max: int = 16

    # BEV
    bev_cells: int = 9             # H_b = W_b (paper preset: 15)
    bev_range: float = 4.5         # meters, plane spans [-r, r] (paper: 5.0)
    n_ref: int = 4
    ref_height_min: float = -1.2
    ref_height_max: float = 2.0
    n_depth_bins: int = 8
    depth_min: float = 0.5
    depth_max: float = 8.0
    fd_blocks: int = 2             # paper: 6
    bev_heads: int = 2
    bev_points: int = 2            # sampling offsets per head per reference point
    bev_ffn_hidden: int = 64
    depth_head_hidden: int = 16

    # detection
    det_slots: int = 12
    det_blocks: int = 1
    lambda_cls: float = 1.0
    lambda_box: float = 5.0
    det_no_object_weight: float = 0.1   # background term weight during pretraining
    det_iters: int = 3200
    det_lr: float = 2e-3
    det_batch: int = 8

    # fusion
    fo_blocks: int = 2             # paper: 6
    q_blocks: int = 2              # paper: 8
    n_queries: int = 10            # N_q
    n_prompts: int = 10            # N_p
    fusion_heads: int = 4
    fusion_ffn_hidden: int = 64

    # language model
    d_lm: int = 160
    lm_layers: int = 4             # M_L
    lm_heads: int = 4
    lm_ffn_mult: int = 4
    n_gated_layers: int = 3        # N_a
    scale_all_linears: bool = False
    max_text_len: int = 128

    # training
    lr: float = 1e-3               # paper preset: 1e-4
    batch_size: int = 8
    train_iters: int = 5000
    warmup_iters: int = 800
    warmup_lr: float = 3e-3
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    landmark_ratio: float = 0.5    # Landmarks : Instructions task sampling, 0.5 = 1:1
    refine_steps: int = 1
    ablate_iters: int = 260
    ablate_seeds: int = 3

    # dataset
    split_train: int = 256
    split_seen: int = 32
    split_unseen: int = 32
    train_scenes: int = 64
    unseen_scenes: int = 8

    # -- derived ---------------------------------------------------------------

    @property
    def n_categories(self) -> int:
        from .grammar import CATEGORY_NAMES

        return len(CATEGORY_NAMES)

    @property
    def n_colors(self) -> int:
        from .grammar import COLOR_NAMES

        return len(COLOR_NAMES)

    @property
    def d_patch(self) -> int:
        """D_p: category histogram (C+1), color histogram, mean+min depth."""
        return self.n_categories + 1 + self.n_colors + 2

    @property
    def feat_hw(self) -> int:
        return self.image_size // self.patch_size

    def validate(self) -> None:
        if self.image_size % self.patch_size:
            raise ValidationError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.n_prompts != self.n_queries:
            raise ValidationError(
                f"n_prompts ({self.n_prompts}) must equal n_queries ({self.n_queries}) "
                "under the broadcast prompt scheme"
            )
        if self.n_gated_layers >= self.lm_layers:
            raise ValidationError(
                f"n_gated_layers ({self.n_gated_layers}) must be < lm_layers ({self.lm_layers})"
            )
        if self.grid_cells < 6:
            raise ValidationError(f"grid_cells must be >= 6 (got {self.grid_cells})")
        if self.n_objects < 1:
            raise ValidationError("n_objects must be >= 1")
        if self.n_ref < 1 or self.n_depth_bins < 2:
            raise ValidationError("need n_ref >= 1 and n_depth_bins >= 2")
        if not (self.depth_min < self.depth_max and self.ref_height_min < self.ref_height_max):
            raise ValidationError("depth/height ranges must be well ordered")
        if self.max_actions > self.t_max:
            raise ValidationError(
                f"max_actions ({self.max_actions}) exceeds the time-step table t_max ({self.t_max})"
            )
        if self.dtype not in ("float32", "float64"):
            raise ValidationError(f"dtype must be float32 or float64, got {self.dtype!r}")

    # -- serialization -----------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for field in dataclasses.fields(self):
            lines.append(f"{field.name} = {getattr(self, field.name)}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path) as fh:
            text = fh.read()
        return cls.from_text(text)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"config line {lineno}: expected 'key = value', got {raw!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in fields:
                raise ValidationError(f"config line {lineno}: unknown key {key!r}")
            values[key] = _coerce(fields[key].type, key, value)
        cfg = cls(**values)
        cfg.validate()
        return cfg


def _coerce(type_name, key: str, value: str):
    # dataclass field types arrive as strings under `from __future__ import annotations`
    tn = type_name if isinstance(type_name, str) else type_name.__name__
    try:
        if tn == "int":
            return int(value)
        if tn == "float":
            return float(value)
        if tn == "bool":
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(value)
        return value
    except ValueError:
        raise ValidationError(f"config key {key!r}: cannot parse {value!r} as {tn}") from None


def desk_preset() -> RunConfig:
    return RunConfig()


def paper_preset() -> RunConfig:
    """Published constants; documented but not runnable at desk scale."""
    return RunConfig(
        d_model=768,
        bev_cells=15,
        bev_range=5.0,
        fd_blocks=6,
        fo_blocks=6,
        q_blocks=8,
        d_lm=4096,
        lm_layers=32,
        lm_heads=32,
        n_gated_layers=31,
        lr=1e-4,
        train_iters=20000,
        image_size=56,
        patch_size=4,
    )


def micro_preset() -> RunConfig:
    """Tiny settings for pipeline and determinism tests."""
    return RunConfig(
        grid_cells=7,
        n_objects=4,
        n_wall_runs=1,
        d_model=32,
        bev_cells=5,
        bev_range=2.5,
        fd_blocks=1,
        fo_blocks=1,
        q_blocks=1,
        n_queries=4,
        n_prompts=4,
        d_lm=48,
        lm_layers=2,
        lm_heads=2,
        n_gated_layers=1,
        det_slots=8,
        det_iters=40,
        det_batch=4,
        train_iters=40,
        warmup_iters=40,
        ablate_iters=20,
        batch_size=4,
        split_train=10,
        split_seen=3,
        split_unseen=3,
        train_scenes=5,
        unseen_scenes=2,
        max_actions=8,
        depth_head_hidden=8,
        bev_ffn_hidden=32,
        fusion_ffn_hidden=32,
        fusion_heads=2,
    )

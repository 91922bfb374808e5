"""Bird's-eye-view feature construction.

A learnable query grid covers the ground plane around the agent. Each query
lifts a column of 3D reference points, projects them into every camera, and
gathers image features by deformable sampling: bilinear reads at the
projected pixel plus small learned offsets, mixed by a per-head softmax over
all visible samples. Every sample is additionally weighted by a depth
consistency score, the cosine between the depth distribution a small
convolutional head predicts at that pixel and the parameter-free distribution
implied by the reference point's actual camera depth. Queries whose column is
invisible in every camera pass through the encoder unchanged.

Pixel coordinates here are corner-origin continuous: the image spans
[0, image_size] and the center of pixel i is at i + 0.5. The rig renders
rays through pixel centers with offsets (i + 0.5 - pp) / focal, so pp (the
center of pixel image_size/2 - 1) is the principal point in these same
units and an on-axis point projects exactly onto that pixel's center.
Feature maps are patch grids, so image coordinate u lands at texel
coordinate (u - patch/2) / patch, with integer values at texel centers, the
convention bilinear_sample expects.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ValidationError
from .nn import FeedForward, LayerNorm, Linear, ParameterStore
from .world import Pose

NEG_INF = -1e9


# -- camera geometry ---------------------------------------------------------------


@dataclass(frozen=True)
class CameraModel:
    """One pinhole view: intrinsics plus its mounting on the agent."""

    focal: float
    principal: tuple[float, float]      # corner-origin continuous (pu, pv)
    image_size: tuple[float, float]     # (width, height) frustum bounds, pixels
    heading_offset: float = 0.0         # rig yaw relative to the agent heading
    mount_height: float = 0.0

    def __post_init__(self):
        if self.focal <= 0:
            raise ValidationError(f"focal must be positive, got {self.focal}")


def cameras_from_rig(rig) -> list[CameraModel]:
    """The rig's K views as projection models, front first."""
    c = rig.principal
    return [CameraModel(focal=rig.focal, principal=(c, c),
                        image_size=(float(rig.image_size), float(rig.image_size)),
                        heading_offset=off, mount_height=rig.mount_height)
            for off in rig.view_offsets()]


def _camera_frame(cam: CameraModel, pose: Pose):
    """World-frame origin and forward/right/down basis of one camera."""
    h = pose.heading + cam.heading_offset
    origin = np.array([pose.x, pose.y, pose.z + cam.mount_height])
    fwd = np.array([np.cos(h), np.sin(h), 0.0])
    right = np.array([np.sin(h), -np.cos(h), 0.0])
    down = np.array([0.0, 0.0, -1.0])
    return origin, fwd, right, down


def _project_points(points: np.ndarray, cam: CameraModel, pose: Pose):
    """Vectorized pinhole projection of (N, 3) world points.

    Returns (u, v, depth, visible); u, v, depth are only meaningful where
    visible is True. Depth is the camera-frame forward distance.
    """
    origin, fwd, right, down = _camera_frame(cam, pose)
    d = np.asarray(points, dtype=float) - origin
    zf = d @ fwd
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.principal[0] + cam.focal * (d @ right) / zf
        v = cam.principal[1] + cam.focal * (d @ down) / zf
    visible = (zf > 1e-9) \
        & (u >= 0.0) & (u <= cam.image_size[0]) \
        & (v >= 0.0) & (v <= cam.image_size[1])
    return u, v, zf, visible


def project_reference_point(p, cam: CameraModel, pose: Pose):
    """Project one world point; None when behind the camera or off-frustum."""
    u, v, zf, visible = _project_points(np.asarray(p, dtype=float)[None, :], cam, pose)
    if not visible[0]:
        return None
    return float(u[0]), float(v[0]), float(zf[0])


def unproject_point(u: float, v: float, depth: float, cam: CameraModel,
                    pose: Pose) -> np.ndarray:
    """Exact inverse of project_reference_point for visible points."""
    origin, fwd, right, down = _camera_frame(cam, pose)
    a = (u - cam.principal[0]) / cam.focal
    b = (v - cam.principal[1]) / cam.focal
    return origin + depth * (fwd + a * right + b * down)


# -- depth distributions -----------------------------------------------------------


def depth_bin_centers(cfg) -> np.ndarray:
    return np.linspace(cfg.depth_min, cfg.depth_max, cfg.n_depth_bins)


def depth_to_distribution(d, centers: np.ndarray) -> np.ndarray:
    """Parameter-free depth encoding: mass split linearly between the two
    nearest bin centers; depths outside the bin range clamp to the edge bins.

    d may be a scalar or any array; the bin axis is appended last.
    """
    centers = np.asarray(centers, dtype=float)
    n = len(centers)
    d = np.clip(np.asarray(d, dtype=float), centers[0], centers[-1])
    lo = np.clip(np.searchsorted(centers, d, side="right") - 1, 0, n - 2)
    frac = (d - centers[lo]) / (centers[lo + 1] - centers[lo])
    out = np.zeros(d.shape + (n,))
    flat, lo_f, fr_f = out.reshape(-1, n), lo.reshape(-1), frac.reshape(-1)
    rows = np.arange(flat.shape[0])
    flat[rows, lo_f] = 1.0 - fr_f
    flat[rows, lo_f + 1] += fr_f
    return out


class DepthNet:
    """Per-pixel depth distribution head: two 3x3 conv stages, softmax over bins."""

    def __init__(self, store: ParameterStore, cfg, rng: np.random.Generator,
                 tag: str = "tuned", name: str = "bev.depth_net"):
        d_p, hid, n_d = cfg.d_patch, cfg.depth_head_hidden, cfg.n_depth_bins
        self.d_patch = d_p
        scale1, scale2 = (9 * d_p) ** -0.5, (9 * hid) ** -0.5
        self.w1 = store.add(f"{name}.conv1.w",
                            scale1 * rng.standard_normal((9 * d_p, hid)), tag)
        self.b1 = store.add(f"{name}.conv1.b", np.zeros(hid), tag)
        self.w2 = store.add(f"{name}.conv2.w",
                            scale2 * rng.standard_normal((9 * hid, n_d)), tag)
        self.b2 = store.add(f"{name}.conv2.b", np.zeros(n_d), tag)


def _conv3x3(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-padding 3x3 convolution on (B, C, H, W) via shifted slices.

    Taps are gathered tap-major into a (B, 9C, H, W) stack, so weight rows
    run over (tap, channel) pairs in that order.
    """
    B, C, H, W = x.shape
    xp = ad.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    taps = [xp[:, :, i:i + H, j:j + W] for i in range(3) for j in range(3)]
    stacked = ad.concat(taps, axis=1)                       # (B, 9C, H, W)
    flat = stacked.transpose((0, 2, 3, 1)).reshape(B * H * W, 9 * C)
    out = ad.matmul(flat, w) + b
    return out.reshape(B, H, W, -1).transpose((0, 3, 1, 2))


def predict_depth_distribution(net: DepthNet, features) -> Tensor:
    """(K, D_p, H, W) view features -> (K, N_d, H, W) per-pixel distributions."""
    x = ad._wrap(features)
    squeeze = x.ndim == 3
    if squeeze:
        x = x.reshape(1, *x.shape)
    if x.ndim != 4 or x.shape[1] != net.d_patch:
        raise ValidationError(
            f"expected (..., {net.d_patch}, H, W) feature maps, got {x.shape}")
    h = ad.gelu(_conv3x3(x, net.w1, net.b1))
    logits = _conv3x3(h, net.w2, net.b2)
    out = ad.softmax(logits, axis=1)
    return out.reshape(*out.shape[1:]) if squeeze else out


def depth_consistency_weight(pred, target) -> Tensor:
    """Cosine similarity of two nonnegative depth distributions, in [0, 1]."""
    pred, target = ad._wrap(pred), ad._wrap(target)
    if np.any(pred.data < 0.0) or np.any(target.data < 0.0):
        raise ValidationError("depth distributions must be nonnegative")
    return ad.cosine_similarity(pred, target)


# -- BEV query grid ----------------------------------------------------------------


def bev_cell_centers(cfg) -> np.ndarray:
    """Agent-frame (x, y) centers of the BEV cells, row-major: index
    iy * W_b + ix, x forward along the heading, y to the left."""
    n, r = cfg.bev_cells, cfg.bev_range
    axis = -r + (2.0 * r / n) * (np.arange(n) + 0.5)
    xs, ys = np.meshgrid(axis, axis, indexing="xy")
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


class BEVGrid:
    """Learnable queries plus a positional encoding of relative cell coords."""

    def __init__(self, store: ParameterStore, cfg, rng: np.random.Generator,
                 tag: str = "tuned", name: str = "bev.grid"):
        self.centers = bev_cell_centers(cfg)
        self.n_cells = cfg.bev_cells
        self.cell = 2.0 * cfg.bev_range / cfg.bev_cells
        self.bev_range = cfg.bev_range
        self.queries = store.add(
            f"{name}.queries",
            0.02 * rng.standard_normal((len(self.centers), cfg.d_model)), tag)
        self.pos_proj = Linear(store, f"{name}.pos", 2, cfg.d_model, rng, tag)

    def tokens(self) -> Tensor:
        """Q + E_p: the encoder input, one row per cell."""
        rel = Tensor(self.centers / self.bev_range)
        return self.queries + self.pos_proj(rel)

    def cell_index(self, x: float, y: float) -> int:
        """Query index of the cell containing the agent-frame point (x, y)."""
        ix = int(np.floor((x + self.bev_range) / self.cell))
        iy = int(np.floor((y + self.bev_range) / self.cell))
        if not (0 <= ix < self.n_cells and 0 <= iy < self.n_cells):
            raise ValidationError(f"point ({x}, {y}) outside the BEV plane")
        return iy * self.n_cells + ix


def reference_heights(cfg, mount_height: float) -> np.ndarray:
    """World z of the N_ref points over an agent at ground level.

    The configured height range is relative to the camera center, so the
    lowest default point sits exactly on the floor.
    """
    return mount_height + np.linspace(cfg.ref_height_min, cfg.ref_height_max,
                                      cfg.n_ref)


def _reference_world_points(cfg, cams, pose: Pose) -> np.ndarray:
    """(Q, N_ref, 3) world positions of every query's reference column."""
    mounts = {cam.mount_height for cam in cams}
    if len(mounts) != 1:
        raise ValidationError(f"cameras disagree on mount height: {sorted(mounts)}")
    centers = bev_cell_centers(cfg)
    heights = reference_heights(cfg, mounts.pop())
    cos_h, sin_h = np.cos(pose.heading), np.sin(pose.heading)
    wx = pose.x + centers[:, 0] * cos_h - centers[:, 1] * sin_h
    wy = pose.y + centers[:, 0] * sin_h + centers[:, 1] * cos_h
    pts = np.empty((len(centers), len(heights), 3))
    pts[:, :, 0] = wx[:, None]
    pts[:, :, 1] = wy[:, None]
    pts[:, :, 2] = pose.z + heights[None, :]
    return pts


def _project_references(cfg, cams, pose: Pose):
    """Project every reference point into every camera.

    Returns feature-texel base locations (K, Q, N_ref, 2), forward depths
    (K, Q, N_ref), and the visibility mask (K, Q, N_ref). Locations of
    invisible points are clamped to the map origin so later bilinear reads
    stay finite; their results are masked out.
    """
    pts = _reference_world_points(cfg, cams, pose)
    flat = pts.reshape(-1, 3)
    ps = float(cfg.patch_size)
    locs, depths, vis = [], [], []
    for cam in cams:
        u, v, zf, visible = _project_points(flat, cam, pose)
        fu = np.where(visible, (u - ps / 2.0) / ps, 0.0)
        fv = np.where(visible, (v - ps / 2.0) / ps, 0.0)
        locs.append(np.stack([fu, fv], axis=-1).reshape(pts.shape[:2] + (2,)))
        depths.append(np.where(visible, zf, cfg.depth_min).reshape(pts.shape[:2]))
        vis.append(visible.reshape(pts.shape[:2]))
    return np.stack(locs), np.stack(depths), np.stack(vis)


def visible_sample_counts(cfg, cams, pose: Pose) -> np.ndarray:
    """Per-query count of visible (camera, reference point) samples."""
    _, _, vis = _project_references(cfg, cams, pose)
    return vis.sum(axis=(0, 2))


# -- deformable sample aggregation ---------------------------------------------------


def aggregate_samples(values: Tensor, logits: Tensor, consistency, visible) -> Tensor:
    """The Eq.-style weighted sum over deformable samples.

    values: (..., heads, S, dh); logits: (..., heads, S); consistency and
    visible: (..., S), shared across heads. Leading dimensions (query, and
    optionally batch) broadcast through. Per head, invisible samples are
    masked out of the softmax; each visible sample is weighted by attention
    times its depth consistency and the results are summed over S and
    concatenated across heads -> (..., heads * dh). With uniform logits and
    unit consistency this is exactly the mean of the visible samples.
    """
    mask = np.asarray(visible, dtype=float)[..., None, :]      # (..., 1, S)
    masked_logits = logits + (1.0 - mask) * NEG_INF
    attn = ad.softmax(masked_logits, axis=-1) * mask           # (..., heads, S)
    cons = ad._wrap(consistency)
    w = attn * cons.reshape(*cons.shape[:-1], 1, cons.shape[-1])
    out = (values * w.reshape(*w.shape, 1)).sum(axis=-2)       # (..., heads, dh)
    return out.reshape(*out.shape[:-2], -1)


class _BEVBlock:
    """One deformable-attention block of the BEV encoder (post-norm)."""

    def __init__(self, store: ParameterStore, cfg, rng: np.random.Generator,
                 tag: str, name: str):
        d, heads = cfg.d_model, cfg.bev_heads
        if d % heads:
            raise ValidationError(f"d_model {d} not divisible by bev_heads {heads}")
        self.heads, self.d_head = heads, d // heads
        self.n_views, self.n_ref, self.n_pts = cfg.n_views, cfg.n_ref, cfg.bev_points
        n_logits = heads * cfg.n_views * cfg.n_ref * cfg.bev_points
        self.attn_proj = Linear(store, f"{name}.attn", d, n_logits, rng, tag)
        self.values = [Linear(store, f"{name}.value{h}", cfg.d_patch,
                              self.d_head, rng, tag) for h in range(heads)]
        self.offsets = store.add(f"{name}.offsets",
                                 np.zeros((heads, cfg.n_ref, cfg.bev_points, 2)), tag)
        self.out_proj = Linear(store, f"{name}.out", d, d, rng, tag)
        self.norm1 = LayerNorm(store, f"{name}.norm1", d, tag)
        self.ffn = FeedForward(store, f"{name}.ffn", d, cfg.bev_ffn_hidden, rng, tag)
        self.norm2 = LayerNorm(store, f"{name}.norm2", d, tag)

    def _sample_values(self, features: Tensor, base_locs: np.ndarray) -> Tensor:
        """Deformable reads: (B, Q, heads, K * N_ref * n_pts, d_head) values.

        features is the flattened view stack (B * K, D_p, H, W); base_locs is
        (B, K, Q, N_ref, 2) in feature texels.
        """
        Bb, K, Q, N = base_locs.shape[:4]
        H, P = self.heads, self.n_pts
        base = Tensor(base_locs[:, :, :, :, None, None, :])    # (B, K, Q, N, 1, 1, 2)
        offs = (self.offsets.transpose((1, 0, 2, 3))
                .reshape(1, 1, 1, self.n_ref, H, P, 2))
        locs = base + offs                                     # (B, K, Q, N, H, P, 2)
        per_head = []
        for h in range(H):
            head_locs = locs[:, :, :, :, h].reshape(Bb * K, Q * N * P, 2)
            raw = ad.bilinear_sample(features, head_locs)      # (B*K, D_p, Q*N*P)
            raw = raw.transpose((0, 2, 1))                     # (B*K, Q*N*P, D_p)
            v = self.values[h](raw).reshape(Bb, K, Q, N, P, self.d_head)
            per_head.append(v.transpose((0, 2, 1, 3, 4, 5))
                            .reshape(Bb, Q, K * N * P, self.d_head))
        return ad.stack(per_head, axis=2)                      # (B, Q, H, S, dh)

    def __call__(self, x: Tensor, features: Tensor, base_locs: np.ndarray,
                 consistency: Tensor, visible: np.ndarray) -> Tensor:
        Bb, K, Q, N = base_locs.shape[:4]
        H, P = self.heads, self.n_pts
        vis_flat = np.repeat(visible.transpose(0, 2, 1, 3).reshape(Bb, Q, K * N),
                             P, axis=-1)
        logits = self.attn_proj(x).reshape(Bb, Q, H, self.n_views, N, P)
        logits = logits[:, :, :, :K].reshape(Bb, Q, H, K * N * P)
        wc = consistency.transpose((0, 2, 1, 3)).reshape(Bb, Q, K * N)
        wc = ad.stack([wc] * P, axis=-1).reshape(Bb, Q, K * N * P)
        values = self._sample_values(features, base_locs)
        gathered = aggregate_samples(values, logits, wc, vis_flat)
        y = self.norm1(x + self.out_proj(gathered))
        z = self.norm2(y + self.ffn(y))
        gate = Tensor((vis_flat.sum(axis=-1) > 0).astype(float)[:, :, None])
        return z * gate + x * (1.0 - gate)


class BEVEncoder:
    """Stacked deformable blocks from view features to the BEV plane."""

    def __init__(self, store: ParameterStore, cfg, rng: np.random.Generator,
                 tag: str = "tuned"):
        self.cfg = cfg
        self.grid = BEVGrid(store, cfg, rng, tag)
        self.depth_net = DepthNet(store, cfg, rng, tag)
        self.bin_centers = depth_bin_centers(cfg)
        self.blocks = [_BEVBlock(store, cfg, rng, tag, f"bev.block{i}")
                       for i in range(cfg.fd_blocks)]

    def _consistency(self, features: Tensor, base_locs: np.ndarray,
                     depths: np.ndarray, visible: np.ndarray) -> Tensor:
        """w^c per (batch, camera, query, reference point), zero where invisible."""
        Bb, K, Q, N = base_locs.shape[:4]
        pred_maps = predict_depth_distribution(self.depth_net, features)
        pred = ad.bilinear_sample(pred_maps,
                                  Tensor(base_locs.reshape(Bb * K, Q * N, 2)))
        pred = pred.transpose((0, 2, 1))                       # (B*K, Q*N, N_d)
        target = depth_to_distribution(depths.reshape(Bb * K, Q * N), self.bin_centers)
        dot = (pred * target).sum(axis=-1)
        norm = ((pred * pred).sum(axis=-1) ** 0.5) * np.linalg.norm(target, axis=-1)
        wc = (dot / norm).reshape(Bb, K, Q, N)
        return wc * visible.astype(float)

    def encode(self, features, cams, pose: Pose) -> Tensor:
        cfg = self.cfg
        feats = ad._wrap(features)
        if feats.ndim != 4 or feats.shape[1] != cfg.d_patch \
                or feats.shape[0] != len(cams):
            raise ValidationError(
                f"expected ({len(cams)}, {cfg.d_patch}, H, W) features, got {feats.shape}")
        return self.encode_batch(feats.reshape(1, *feats.shape), cams, [pose])[0]

    def encode_batch(self, features, cams, poses) -> Tensor:
        """(B, Q, D) BEV features for B observations sharing one camera rig.

        features: (B, K, D_p, H, W). Batching shares the projection geometry
        work per pose but runs every sample through one joint graph, which is
        what makes minibatch pretraining affordable.
        """
        cfg = self.cfg
        feats = ad._wrap(features)
        if feats.ndim != 5 or feats.shape[2] != cfg.d_patch \
                or feats.shape[1] != len(cams) or feats.shape[0] != len(poses):
            raise ValidationError(
                f"expected ({len(poses)}, {len(cams)}, {cfg.d_patch}, H, W) "
                f"features, got {feats.shape}")
        if len(cams) > cfg.n_views:
            raise ValidationError(
                f"{len(cams)} cameras exceed the configured maximum {cfg.n_views}")
        Bb = feats.shape[0]
        flat = feats.reshape(Bb * len(cams), *feats.shape[2:])
        per_pose = [_project_references(cfg, cams, p) for p in poses]
        base_locs = np.stack([locs for locs, _, _ in per_pose])
        depths = np.stack([d for _, d, _ in per_pose])
        visible = np.stack([v for _, _, v in per_pose])
        consistency = self._consistency(flat, base_locs, depths, visible)
        x = self.grid.tokens().reshape(1, -1, cfg.d_model) * np.ones((Bb, 1, 1))
        for block in self.blocks:
            x = block(x, flat, base_locs, consistency, visible)
        return x


def encode_bev(encoder: BEVEncoder, features, cams, pose: Pose) -> Tensor:
    """B_t: (H_b * W_b, D) BEV features for one observation."""
    return encoder.encode(features, cams, pose)

"""Training stages over the episode corpus.

Stage 1 (this part of the module) pretrains the BEV pathway with a set
prediction objective: encode each stored observation onto the BEV plane,
decode object slots, Hungarian-match them to geometric ground truth, and
minimize the matching loss. Everything under bev.* and det.* trains here
and is frozen afterwards.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import bev as B
from . import detection as D
from . import world as W
from .autodiff import Tensor
from .errors import TrainingError
from .grammar import CATEGORY_NAMES
from .nn import ParameterStore
from .optim import AdamW


@dataclass
class DetectionSample:
    scene_id: int
    pose: W.Pose
    features: np.ndarray                      # (K, D_p, H, W) float64
    gt: list[tuple[int, np.ndarray]]


def detection_samples(data, cfg, split: str = "train") -> list[DetectionSample]:
    """One sample per distinct (scene, pose) visited by the split's episodes.

    Episodes revisit poses (turn-in-place, shared starts); deduplicating keeps
    the pretraining distribution flat over viewpoints instead of over steps.
    """
    rig = W.rig_from_config(cfg)
    samples = []
    seen = set()
    for ep in data.split(split):
        scene = data.scene_of(ep)
        for t in range(len(ep.poses)):
            pose = ep.pose_at(t)
            key = (ep.scene_id, round(pose.x, 6), round(pose.y, 6),
                   round(pose.heading, 6))
            if key in seen:
                continue
            seen.add(key)
            samples.append(DetectionSample(
                scene_id=ep.scene_id,
                pose=pose,
                features=ep.features[t].astype(np.float64),
                gt=D.ground_truth_boxes(scene, pose, cfg, rig),
            ))
    return samples


def build_detection_model(cfg, seed: int):
    """Fresh BEV encoder + detection head sharing one parameter store."""
    store = ParameterStore()
    rng = np.random.default_rng([4219, seed])
    encoder = B.BEVEncoder(store, cfg, rng)
    head = D.DetectionHead(store, cfg, rng)
    return store, encoder, head


def detection_batch_loss(encoder, head, cams, batch, cfg) -> Tensor:
    features = np.stack([s.features for s in batch])
    bev = encoder.encode_batch(features, cams, [s.pose for s in batch])
    boxes, logits = head(bev)                  # (B, M, 6), (B, M, C+1)
    total = None
    for b, sample in enumerate(batch):
        assignment, _ = D.hungarian_match(boxes.data[b], logits.data[b],
                                          sample.gt, cfg.lambda_cls, cfg.lambda_box)
        loss = D.detection_loss(boxes[b], logits[b], sample.gt, assignment,
                                cfg.lambda_cls, cfg.lambda_box,
                                cfg.det_no_object_weight)
        total = loss if total is None else total + loss
    return total * (1.0 / len(batch))


def train_detection(cfg, data, seed: int | None = None, iters: int | None = None,
                    on_log=None):
    """Run stage-1 pretraining; returns (store, encoder, head, loss history)."""
    seed = cfg.seed if seed is None else seed
    iters = cfg.det_iters if iters is None else iters
    store, encoder, head = build_detection_model(cfg, seed)
    cams = B.cameras_from_rig(W.rig_from_config(cfg))
    samples = detection_samples(data, cfg, "train")
    if not samples:
        raise TrainingError("detection pretraining: no training samples")
    opt = AdamW(store, lr=cfg.det_lr, betas=(cfg.adam_beta1, cfg.adam_beta2),
                eps=cfg.adam_eps, weight_decay=cfg.weight_decay,
                grad_clip=cfg.grad_clip)
    rng = np.random.default_rng([2903, seed])
    losses = []
    for step in range(iters):
        batch = [samples[i] for i in
                 rng.integers(len(samples), size=cfg.det_batch)]
        opt.zero_grad()
        loss = detection_batch_loss(encoder, head, cams, batch, cfg)
        if not np.isfinite(loss.data):
            raise TrainingError(f"non-finite detection loss at step {step}")
        loss.backward()
        opt.step()
        losses.append(float(loss.data))
        if on_log is not None and (step + 1) % 100 == 0:
            on_log(step + 1, float(np.mean(losses[-100:])))
    return store, encoder, head, losses


def evaluate_detection(encoder, head, cams, samples, cfg, chunk: int = 16):
    """mAP@0.5 and per-class AP over a sample list, gradients off."""
    preds, gts = [], []
    with ad.no_grad():
        for lo in range(0, len(samples), chunk):
            part = samples[lo:lo + chunk]
            features = np.stack([s.features for s in part])
            bev = encoder.encode_batch(features, cams, [s.pose for s in part])
            boxes, logits = head(bev)
            for b, sample in enumerate(part):
                preds.append(D.decode_predictions(boxes.data[b], logits.data[b]))
                gts.append(sample.gt)
    return D.eval_map(preds, gts)


def detection_report(held_in, unseen=None) -> str:
    """Text table of per-class AP plus mAP for one or two evaluation splits."""
    columns = [("held-in", held_in)]
    if unseen is not None:
        columns.append(("unseen", unseen))
    classes = sorted(set().union(*(per_class for _, (_, per_class) in columns)))
    width = max([len(n) for n in CATEGORY_NAMES] + [len("class")])
    lines = ["class".ljust(width) + "".join(f"  {name:>8}" for name, _ in columns)]
    for c in classes:
        row = CATEGORY_NAMES[c - 1].ljust(width)
        for _, (_, per_class) in columns:
            row += f"  {per_class[c]:>8.3f}" if c in per_class else f"  {'-':>8}"
        lines.append(row)
    footer = "mAP@0.5".ljust(width)
    for _, (mean, _) in columns:
        footer += f"  {mean:>8.3f}"
    lines.append(footer)
    return "\n".join(lines)

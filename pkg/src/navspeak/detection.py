"""3D detection supervision over the BEV plane.

A small set-prediction head decodes M learned slot queries against the BEV
features. Each slot outputs an axis-aligned box (cx, cy, cz, w, l, h) in the
agent frame plus class logits whose index 0 means "no object"; categories
keep their world ids 1..C. The planar center is decoded by attention over
the BEV cells, a softmax-weighted average of cell coordinates plus a learned
residual, so localization rides on the grid's geometry instead of being
regressed from scratch; height and extents come straight off the slot. Slots
are matched to ground truth by a minimum-cost bipartite assignment under the
same class/box terms the loss uses, and evaluation reports mean average
precision at an IoU threshold.

Ground-truth boxes are only defined for cardinal headings: the world's boxes
are axis-aligned, and only quarter-turn rotations keep them that way in the
agent frame. Trajectory poses are snapped to cardinals, so this covers every
pose the pipeline produces.
"""
from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from . import world as W
from .autodiff import Tensor
from .bev import bev_cell_centers
from .errors import ValidationError
from .nn import (FeedForward, LayerNorm, Linear, MultiHeadAttention,
                 ParameterStore)

NO_OBJECT = 0


# -- ground truth --------------------------------------------------------------------


def ground_truth_boxes(scene: W.Scene, pose: W.Pose, cfg, rig) -> list[tuple[int, np.ndarray]]:
    """Agent-frame (category, box) targets for one pose.

    Includes objects whose center lies on the BEV plane and is visible from
    the camera mount (walls and other objects occlude). The quarter-turn into
    the agent frame is done with exact integer rotations; a non-cardinal
    heading is refused rather than silently producing a sheared box.
    """
    k = W.cardinal_index(pose.heading)
    if abs(W.normalize_angle(pose.heading - W.CARDINAL_ANGLES[k])) > 1e-9:
        raise ValidationError(
            f"ground-truth boxes need a cardinal heading, got {pose.heading}")
    eye = np.array([pose.x, pose.y, pose.z + rig.mount_height])
    out = []
    for i, obj in enumerate(scene.objects):
        dx, dy = obj.center[0] - pose.x, obj.center[1] - pose.y
        rx, ry = ((dx, dy), (dy, -dx), (-dx, -dy), (-dy, dx))[k]
        if abs(rx) > cfg.bev_range or abs(ry) > cfg.bev_range:
            continue
        if not W.line_of_sight(scene, eye, np.asarray(obj.center), ignore_object=i):
            continue
        w, l, h = obj.size
        if k % 2:
            w, l = l, w
        box = np.array([rx, ry, obj.center[2] - pose.z, w, l, h])
        out.append((obj.category, box))
    return out


# -- the head ------------------------------------------------------------------------


class DetectionHead:
    """Slot queries decoded against B_t; boxes and class logits per slot."""

    def __init__(self, store: ParameterStore, cfg, rng: np.random.Generator,
                 tag: str = "tuned", name: str = "det"):
        d = cfg.d_model
        self.n_slots = cfg.det_slots
        self.slots = store.add(f"{name}.slots",
                               0.02 * rng.standard_normal((cfg.det_slots, d)), tag)
        self.blocks = []
        for i in range(cfg.det_blocks):
            base = f"{name}.block{i}"
            self.blocks.append({
                "self": MultiHeadAttention(store, f"{base}.self", d,
                                           cfg.bev_heads, rng, tag),
                "norm1": LayerNorm(store, f"{base}.norm1", d, tag),
                "cross": MultiHeadAttention(store, f"{base}.cross", d,
                                            cfg.bev_heads, rng, tag),
                "norm2": LayerNorm(store, f"{base}.norm2", d, tag),
                "ffn": FeedForward(store, f"{base}.ffn", d, cfg.bev_ffn_hidden,
                                   rng, tag),
                "norm3": LayerNorm(store, f"{base}.norm3", d, tag),
            })
        self.box_head = Linear(store, f"{name}.box", d, 6, rng, tag)
        self.cls_head = Linear(store, f"{name}.cls", d, cfg.n_categories + 1,
                               rng, tag)
        self.loc_q = Linear(store, f"{name}.loc_q", d, d, rng, tag)
        self.loc_k = Linear(store, f"{name}.loc_k", d, d, rng, tag)
        self.cell_xy = bev_cell_centers(cfg)
        self.d_model = d

    def __call__(self, bev: Tensor) -> tuple[Tensor, Tensor]:
        """Per-slot (boxes, class logits); accepts (Q, D) or a (B, Q, D) batch."""
        batched = bev.ndim == 3
        kv = bev if batched else bev.reshape(1, *bev.shape)
        x = self.slots.reshape(1, *self.slots.shape) * np.ones((kv.shape[0], 1, 1))
        for blk in self.blocks:
            x = blk["norm1"](x + blk["self"](x, x))
            x = blk["norm2"](x + blk["cross"](x, kv))
            x = blk["norm3"](x + blk["ffn"](x))
        scores = ad.matmul(self.loc_q(x), self.loc_k(kv).transpose((0, 2, 1)))
        alpha = ad.softmax(scores * self.d_model ** -0.5, axis=-1)  # (B, M, Q)
        xy = ad.matmul(alpha, self.cell_xy)
        raw = self.box_head(x)
        boxes = ad.concat([raw[:, :, :2] + xy, raw[:, :, 2:]], axis=-1)
        logits = self.cls_head(x)
        if not batched:
            return boxes.reshape(*boxes.shape[1:]), logits.reshape(*logits.shape[1:])
        return boxes, logits


# -- matching and loss ---------------------------------------------------------------


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=float)


def _log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def match_cost_matrix(boxes, logits, gt, lambda_cls: float,
                      lambda_box: float) -> np.ndarray:
    """(M, |gt|) assignment costs: class NLL plus box l1, same as the loss."""
    boxes, logits = _as_array(boxes), _as_array(logits)
    logp = _log_softmax_np(logits)
    cost = np.zeros((boxes.shape[0], len(gt)))
    for g, (cls, box) in enumerate(gt):
        cost[:, g] = (lambda_cls * -logp[:, cls]
                      + lambda_box * np.abs(boxes - box).sum(axis=1))
    return cost


def hungarian_match(boxes, logits, gt, lambda_cls: float = 1.0,
                    lambda_box: float = 5.0) -> tuple[np.ndarray, float]:
    """Minimum-cost slot assignment: entry m is the gt index or -1 (no object).

    Returns the assignment and its total cost.
    """
    M = _as_array(boxes).shape[0]
    assignment = np.full(M, -1, dtype=int)
    if not gt:
        return assignment, 0.0
    if len(gt) > M:
        raise ValidationError(f"{len(gt)} objects exceed {M} slots")
    cost = match_cost_matrix(boxes, logits, gt, lambda_cls, lambda_box)
    rows, cols = linear_sum_assignment(cost)
    assignment[rows] = cols
    return assignment, float(cost[rows, cols].sum())


def detection_loss(boxes: Tensor, logits: Tensor, gt, assignment,
                   lambda_cls: float = 1.0, lambda_box: float = 5.0,
                   no_object_weight: float = 1.0) -> Tensor:
    """Cross-entropy over every slot plus l1 over matched boxes, summed.

    no_object_weight scales the cross-entropy of unmatched slots; training
    sets it below 1 so the background class (most slots, most of the time)
    does not drown out the objects.
    """
    assignment = np.asarray(assignment)
    targets = np.zeros(len(assignment), dtype=int)
    matched = assignment >= 0
    targets[matched] = [gt[g][0] for g in assignment[matched]]
    ce = ad.cross_entropy(logits, targets)
    loss = lambda_cls * (ce * np.where(matched, 1.0, no_object_weight)).sum()
    if matched.any():
        want = np.stack([gt[g][1] for g in assignment[matched]])
        diff = boxes[matched] - want
        loss = loss + lambda_box * ad.absolute(diff).sum()
    return loss


# -- evaluation ----------------------------------------------------------------------


def iou_3d(a, b) -> float:
    """Axis-aligned 3D IoU of two (cx, cy, cz, w, l, h) boxes."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    lo = np.maximum(a[:3] - a[3:] / 2.0, b[:3] - b[3:] / 2.0)
    hi = np.minimum(a[:3] + a[3:] / 2.0, b[:3] + b[3:] / 2.0)
    inter = float(np.prod(np.clip(hi - lo, 0.0, None)))
    union = float(np.prod(a[3:]) + np.prod(b[3:])) - inter
    return inter / union if union > 0.0 else 0.0


def decode_predictions(boxes, logits) -> list[tuple[int, float, np.ndarray]]:
    """Slot outputs as (category, confidence, box), no-object slots dropped."""
    boxes, logits = _as_array(boxes), _as_array(logits)
    probs = np.exp(_log_softmax_np(logits))
    out = []
    for m in range(boxes.shape[0]):
        cls = int(probs[m].argmax())
        if cls != NO_OBJECT:
            out.append((cls, float(probs[m, cls]), boxes[m]))
    return out


def _average_precision(records, n_positive: int) -> float:
    """All-points interpolated AP from (confidence, is_tp) records."""
    if n_positive == 0:
        return 0.0
    if not records:
        return 0.0
    order = sorted(records, key=lambda r: -r[0])
    tp = np.cumsum([r[1] for r in order])
    fp = np.cumsum([not r[1] for r in order])
    recall = tp / n_positive
    precision = tp / (tp + fp)
    # precision envelope, then sum the area under each recall step
    r = np.concatenate([[0.0], recall, [recall[-1]]])
    p = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(p) - 2, -1, -1):
        p[i] = max(p[i], p[i + 1])
    steps = np.nonzero(r[1:] != r[:-1])[0]
    return float(((r[steps + 1] - r[steps]) * p[steps + 1]).sum())


def eval_map(preds, gts, iou_threshold: float = 0.5) -> tuple[float, dict[int, float]]:
    """mAP and per-class AP over a corpus.

    preds: per scene, a list of (category, confidence, box); gts: per scene,
    a list of (category, box). Within a class, predictions are ranked by
    confidence and greedily matched to the best still-unmatched ground truth
    of their scene at or above the IoU threshold. Classes absent from the
    ground truth carry no AP.
    """
    if len(preds) != len(gts):
        raise ValidationError(f"{len(preds)} prediction lists vs {len(gts)} scenes")
    classes = sorted({cls for gt in gts for cls, _ in gt})
    per_class = {}
    for cls in classes:
        n_positive = sum(1 for gt in gts for c, _ in gt if c == cls)
        records = []
        for scene_preds, scene_gt in zip(preds, gts):
            boxes = [box for c, box in scene_gt if c == cls]
            taken = [False] * len(boxes)
            ranked = sorted((p for p in scene_preds if p[0] == cls),
                            key=lambda p: -p[1])
            for _, conf, box in ranked:
                ious = [0.0 if taken[i] else iou_3d(box, b)
                        for i, b in enumerate(boxes)]
                best = int(np.argmax(ious)) if ious else -1
                if best >= 0 and ious[best] >= iou_threshold:
                    taken[best] = True
                    records.append((conf, True))
                else:
                    records.append((conf, False))
        per_class[cls] = _average_precision(records, n_positive)
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return mean, per_class

"""Closed instruction grammar: vocabulary, templater, and clause parser.

Instructions are sequences of period-terminated clauses. Motion clauses
("walk forward", "turn left", "turn right", "stop") mirror trajectory
actions one-to-one. Landmark clauses ("pass the <color> <category>",
"stop at the <color> <category>", "go toward the <color> <category>")
mention objects near the path. The surface separator "." is tokenized as
the <sep> special, so instructions and landmark drafts share one id space.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from . import world as W

PAD, BOS, END, SEP, LMK = 0, 1, 2, 3, 4
SPECIAL_NAMES = ["<pad>", "<bos>", "<end>", "<sep>", "<lmk>"]

COLOR_NAMES = ["red", "green", "blue", "white"]
CATEGORY_NAMES = ["door", "table", "sofa", "chair", "lamp", "shelf", "plant", "bed"]

_FUNCTION_WORDS = ["walk", "forward", "turn", "left", "right", "stop",
                   "pass", "the", "at", "go", "toward"]

# Clause kinds. The first four map one-to-one onto trajectory actions.
FORWARD, TURN_LEFT, TURN_RIGHT, STOP = "forward", "turn_left", "turn_right", "stop"
PASS, STOP_AT, TOWARD = "pass", "stop_at", "toward"

_MOTION_SURFACE = {
    FORWARD: ["walk", "forward"],
    TURN_LEFT: ["turn", "left"],
    TURN_RIGHT: ["turn", "right"],
    STOP: ["stop"],
}
_LANDMARK_PREFIX = {
    PASS: ["pass", "the"],
    STOP_AT: ["stop", "at", "the"],
    TOWARD: ["go", "toward", "the"],
}


class Vocabulary:
    """Fixed token table: 5 specials followed by the grammar words."""

    def __init__(self):
        self.id_to_word = list(SPECIAL_NAMES) + _FUNCTION_WORDS + COLOR_NAMES + CATEGORY_NAMES
        self.word_to_id = {w: i for i, w in enumerate(self.id_to_word)}
        if len(self.word_to_id) != len(self.id_to_word):
            raise ValidationError("vocabulary contains duplicate words")
        self.color_ids = [self.word_to_id[w] for w in COLOR_NAMES]
        self.category_ids = [self.word_to_id[w] for w in CATEGORY_NAMES]

    def __len__(self) -> int:
        return len(self.id_to_word)

    def tokenize(self, text: str) -> list[int]:
        ids = []
        for word in text.split():
            if word == ".":
                ids.append(SEP)
                continue
            if word not in self.word_to_id:
                raise ValidationError(f"word {word!r} not in the grammar vocabulary")
            ids.append(self.word_to_id[word])
        return ids

    def detokenize(self, ids) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i == SEP:
                words.append(".")
            elif i in (PAD, BOS, END):
                continue
            else:
                words.append(self.id_to_word[i])
        return " ".join(words)

    def landmark_token_ids(self) -> list[int]:
        """Ids a landmark draft may contain: colors, categories, <sep>, <end>."""
        return sorted(self.color_ids + self.category_ids + [SEP, END])

    def color_index(self, token_id: int) -> int:
        return self.color_ids.index(token_id)

    def category_index(self, token_id: int) -> int:
        """Scene category index (1-based; 0 is free space) of a category word."""
        return self.category_ids.index(token_id) + 1


_VOCAB = None


def vocabulary() -> Vocabulary:
    global _VOCAB
    if _VOCAB is None:
        _VOCAB = Vocabulary()
    return _VOCAB


@dataclass
class Clause:
    kind: str
    color: int | None = None      # color index into COLOR_NAMES
    category: int | None = None   # scene category index (1-based)

    @property
    def is_motion(self) -> bool:
        return self.kind in _MOTION_SURFACE


def render_clause(clause: Clause, vocab: Vocabulary | None = None) -> list[int]:
    """Token ids of one clause including its trailing separator."""
    vocab = vocab or vocabulary()
    if clause.kind in _MOTION_SURFACE:
        words = _MOTION_SURFACE[clause.kind]
        return [vocab.word_to_id[w] for w in words] + [SEP]
    if clause.kind not in _LANDMARK_PREFIX:
        raise ValidationError(f"unknown clause kind {clause.kind!r}")
    words = _LANDMARK_PREFIX[clause.kind]
    ids = [vocab.word_to_id[w] for w in words]
    ids.append(vocab.color_ids[clause.color])
    ids.append(vocab.category_ids[clause.category - 1])
    return ids + [SEP]


def _match_clause(ids: list[int], vocab: Vocabulary) -> Clause | None:
    words = [vocab.id_to_word[i] if 0 <= i < len(vocab) else None for i in ids]
    for kind, surface in _MOTION_SURFACE.items():
        if words == surface:
            return Clause(kind=kind)
    for kind, prefix in _LANDMARK_PREFIX.items():
        if len(words) == len(prefix) + 2 and words[:len(prefix)] == prefix:
            color_id, cat_id = ids[-2], ids[-1]
            if color_id in vocab.color_ids and cat_id in vocab.category_ids:
                return Clause(kind=kind, color=vocab.color_index(color_id),
                              category=vocab.category_index(cat_id))
    return None


def parse_clauses(ids, vocab: Vocabulary | None = None) -> tuple[list[Clause], int]:
    """Split a token sequence on <sep> and parse each chunk as a clause.

    Returns (clauses, skipped) where skipped counts unparseable chunks.
    <bos>/<end>/<pad> are ignored; a trailing chunk without a separator is
    still parsed.
    """
    vocab = vocab or vocabulary()
    clauses: list[Clause] = []
    skipped = 0
    chunk: list[int] = []
    for raw in list(ids) + [SEP]:
        i = int(raw)
        if i in (PAD, BOS, END):
            continue
        if i != SEP:
            chunk.append(i)
            continue
        if not chunk:
            continue
        clause = _match_clause(chunk, vocab)
        if clause is None:
            skipped += 1
        else:
            clauses.append(clause)
        chunk = []
    return clauses, skipped


def extract_landmark_phrases(ids, vocab: Vocabulary | None = None) -> list[tuple[int, int]]:
    """(color, category) pairs of landmark clauses, in order of mention."""
    clauses, _ = parse_clauses(ids, vocab)
    return [(c.color, c.category) for c in clauses if not c.is_motion]


def landmark_tokens(phrases, vocab: Vocabulary | None = None) -> list[int]:
    """Encode (color, category) phrases as a <sep>-joined draft sequence."""
    vocab = vocab or vocabulary()
    ids: list[int] = []
    for color, category in phrases:
        if ids:
            ids.append(SEP)
        ids.append(vocab.color_ids[color])
        ids.append(vocab.category_ids[category - 1])
    return ids


# -- ground-truth synthesis -----------------------------------------------------


def synthesize_instruction(scene: W.Scene, traj: W.Trajectory, cfg,
                           rig: W.CameraRig | None = None) -> tuple[list[int], list[int]]:
    """Ground-truth instruction and landmark draft for a trajectory.

    An object is mentioned once: at the first pose where it is within the
    salience radius and has clear line of sight, except that the object
    nearest the final pose is claimed by the terminal "stop at" clause.
    A mention becomes "go toward" only when the follower's own grounding
    of the phrase at that pose would snap to the current heading (so the
    clause is exactly a no-op on replay); anything else is "pass".
    Trajectories passing nothing salient come out as pure motion clauses.
    """
    vocab = vocabulary()
    rig = rig or W.rig_from_config(cfg)
    # All emission-time geometry runs on snapped poses: the follower snaps
    # too, so its grounding decisions reproduce these exactly.
    poses = [W.snap_pose(p) for p in traj.poses]

    mention_step: dict[int, int] = {}
    for s, pose in enumerate(poses):
        eye = np.array([pose.x, pose.y, pose.z + rig.mount_height])
        for i, obj in enumerate(scene.objects):
            if i in mention_step:
                continue
            if W.planar_distance(pose, obj) > cfg.salience_radius:
                continue
            if W.line_of_sight(scene, eye, np.asarray(obj.center), ignore_object=i):
                mention_step[i] = s

    final = poses[-1]
    terminal: int | None = None
    best_dist = None
    for i in sorted(mention_step):
        obj = scene.objects[i]
        d = W.planar_distance(final, obj)
        if d > cfg.salience_radius:
            continue
        eye = np.array([final.x, final.y, final.z + rig.mount_height])
        if not W.line_of_sight(scene, eye, np.asarray(obj.center), ignore_object=i):
            continue
        if best_dist is None or d < best_dist:
            terminal, best_dist = i, d

    by_step: dict[int, list[int]] = {}
    for i, s in mention_step.items():
        if i != terminal:
            by_step.setdefault(s, []).append(i)
    for s in by_step:
        by_step[s].sort(key=lambda i: (abs(W.bearing_to(poses[s], scene.objects[i])), i))

    def landmark_clause(kind: str, obj: W.SceneObject) -> Clause:
        return Clause(kind=kind, color=obj.color, category=obj.category)

    clauses: list[Clause] = []
    phrases: list[tuple[int, int]] = []

    def mention_at(s: int):
        pose = poses[s]
        for i in by_step.get(s, []):
            obj = scene.objects[i]
            grounded = W.ground_landmark(scene, pose, obj.color, obj.category, rig)
            safe_toward = (
                grounded is not None
                and W.cardinal_index(np.arctan2(
                    scene.objects[grounded].center[1] - pose.y,
                    scene.objects[grounded].center[0] - pose.x,
                )) == W.cardinal_index(pose.heading)
            )
            clauses.append(landmark_clause(TOWARD if safe_toward else PASS, obj))
            phrases.append((obj.color, obj.category))

    mention_at(0)
    motion_of = {W.FORWARD: FORWARD, W.TURN_LEFT: TURN_LEFT, W.TURN_RIGHT: TURN_RIGHT}
    for t, action in enumerate(traj.actions):
        if action.kind == W.STOP:
            if terminal is not None:
                obj = scene.objects[terminal]
                clauses.append(landmark_clause(STOP_AT, obj))
                phrases.append((obj.color, obj.category))
            else:
                clauses.append(Clause(kind=STOP))
        else:
            clauses.append(Clause(kind=motion_of[action.kind]))
            mention_at(t + 1)

    ids: list[int] = []
    for clause in clauses:
        ids.extend(render_clause(clause, vocab))
    if len(ids) > cfg.max_text_len:
        raise ValidationError(
            f"instruction length {len(ids)} exceeds budget {cfg.max_text_len}")
    return ids, landmark_tokens(phrases, vocab)

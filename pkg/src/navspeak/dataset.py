"""Episode corpus generation, on-disk format, and loading.

A dataset directory holds four files:

  episodes.jsonl   one JSON record per episode (text, trajectory, offsets)
  features.bin     little-endian float32 view features, referenced by offset
  scenes.json      full geometry of every scene, keyed by scene id
  manifest.json    config hash, split counts, format tag

Keeping floats out of the JSON makes records small and the feature bytes
exact; keeping scenes separate lets training recompute geometric ground
truth (detection boxes, shortest paths) without re-running generation.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import grammar as G
from . import world as W
from .errors import ValidationError

FORMAT_TAG = "navspeak-dataset-v1"
SPLITS = ("train", "seen", "unseen")


@dataclass
class Episode:
    id: int
    scene_id: int
    split: str
    poses: np.ndarray          # (T, 4): x, y, z, heading
    actions: list[str]
    view_indices: np.ndarray   # (T,) ints in [0, K]
    instruction: list[int]
    landmarks: list[int]
    features: np.ndarray       # (T, K, D_p, H, W) float32

    def __len__(self) -> int:
        return len(self.actions)

    def pose_at(self, t: int) -> W.Pose:
        x, y, z, heading = self.poses[t]
        return W.Pose(float(x), float(y), float(z), float(heading))

    @property
    def start_pose(self) -> W.Pose:
        return self.pose_at(0)


def scene_to_dict(scene: W.Scene) -> dict:
    return {
        "id": scene.id,
        "grid_cells": scene.grid_cells,
        "walls": [list(wall) for wall in scene.walls],
        "objects": [
            {"category": o.category, "color": o.color,
             "center": list(o.center), "size": list(o.size)}
            for o in scene.objects
        ],
        "start": list(scene.start_cell),
        "goal": list(scene.goal_cell),
    }


def scene_from_dict(d: dict) -> W.Scene:
    return W.Scene(
        id=d["id"],
        grid_cells=d["grid_cells"],
        walls=[tuple(wall) for wall in d["walls"]],
        objects=[
            W.SceneObject(category=o["category"], color=o["color"],
                          center=tuple(o["center"]), size=tuple(o["size"]))
            for o in d["objects"]
        ],
        start_cell=tuple(d["start"]),
        goal_cell=tuple(d["goal"]),
    )


def episode_features(scene: W.Scene, traj: W.Trajectory, cfg,
                     rig: W.CameraRig) -> np.ndarray:
    """(T, K, D_p, H, W) patch features for every step of a trajectory."""
    t_len = len(traj)
    h = cfg.image_size // cfg.patch_size
    out = np.zeros((t_len, cfg.n_views, cfg.d_patch, h, h), dtype=np.float32)
    for t, pose in enumerate(traj.poses):
        obs = W.render_observation(scene, pose, rig, t=t)
        for k, view in enumerate(obs.views):
            feat = W.extract_view_features(view, cfg.patch_size,
                                           cfg.n_categories, cfg.n_colors)
            out[t, k] = feat.astype(np.float32)
    return out


def build_dataset(cfg, out_dir: str) -> dict:
    """Generate the full episode corpus into out_dir; returns the manifest.

    Scene pools are disjoint between train/seen and unseen: the seen split
    reuses training scenes with fresh trajectories, the unseen split draws
    from scenes that never appear in training.
    """
    os.makedirs(out_dir, exist_ok=True)
    rig = W.rig_from_config(cfg)
    vocab = G.vocabulary()

    train_pool = [W.generate_scene(i, cfg) for i in range(cfg.train_scenes)]
    unseen_pool = [W.generate_scene(100000 + i, cfg) for i in range(cfg.unseen_scenes)]
    pools = {"train": train_pool, "seen": train_pool, "unseen": unseen_pool}
    counts = {"train": cfg.split_train, "seen": cfg.split_seen, "unseen": cfg.split_unseen}

    blob_path = os.path.join(out_dir, "features.bin")
    jsonl_path = os.path.join(out_dir, "episodes.jsonl")
    episode_id = 0
    offset = 0
    per_split = {}
    with open(blob_path, "wb") as blob, open(jsonl_path, "w") as lines:
        for split_index, split in enumerate(SPLITS):
            per_split[split] = 0
            pool = pools[split]
            for e in range(counts[split]):
                rng = np.random.default_rng([8317, cfg.seed, split_index, e])
                scene = pool[int(rng.integers(len(pool)))]
                traj = W.sample_trajectory(scene, int(rng.integers(2**31)))
                feats = episode_features(scene, traj, cfg, rig)
                instruction, landmarks = G.synthesize_instruction(scene, traj, cfg, rig)

                raw = np.ascontiguousarray(feats, dtype="<f4").tobytes()
                record = {
                    "id": episode_id,
                    "scene": scene.id,
                    "split": split,
                    "poses": [[p.x, p.y, p.z, p.heading] for p in traj.poses],
                    "actions": [a.kind for a in traj.actions],
                    "views": [a.view_index for a in traj.actions],
                    "instruction": instruction,
                    "landmarks": landmarks,
                    "feat_offset": offset,
                    "feat_shape": list(feats.shape),
                }
                blob.write(raw)
                lines.write(json.dumps(record, sort_keys=True) + "\n")
                offset += len(raw)
                episode_id += 1
                per_split[split] += 1

    scenes = {}
    for pool in (train_pool, unseen_pool):
        for scene in pool:
            scenes[str(scene.id)] = scene_to_dict(scene)
    with open(os.path.join(out_dir, "scenes.json"), "w") as fh:
        json.dump(scenes, fh, sort_keys=True, indent=1)

    manifest = {
        "format": FORMAT_TAG,
        "config_hash": cfg.config_hash(),
        "episodes": episode_id,
        "splits": per_split,
        "blob_bytes": offset,
        "vocab_size": len(vocab),
        "scene_ids": {
            "train": sorted(s.id for s in train_pool),
            "unseen": sorted(s.id for s in unseen_pool),
        },
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
    return manifest


@dataclass
class Dataset:
    episodes: list[Episode]
    scenes: dict[int, W.Scene]
    manifest: dict

    def split(self, name: str) -> list[Episode]:
        if name not in SPLITS:
            raise ValidationError(f"unknown split {name!r}, expected one of {SPLITS}")
        return [e for e in self.episodes if e.split == name]

    def scene_of(self, episode: Episode) -> W.Scene:
        return self.scenes[episode.scene_id]


def load_dataset(path: str) -> Dataset:
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise ValidationError(f"{path}: not a dataset directory (no manifest.json)")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != FORMAT_TAG:
        raise ValidationError(f"{path}: unknown dataset format {manifest.get('format')!r}")

    with open(os.path.join(path, "scenes.json")) as fh:
        scenes = {int(k): scene_from_dict(v) for k, v in json.load(fh).items()}
    with open(os.path.join(path, "features.bin"), "rb") as fh:
        blob = fh.read()
    if len(blob) != manifest["blob_bytes"]:
        raise ValidationError(
            f"{path}: feature blob is {len(blob)} bytes, manifest says {manifest['blob_bytes']}")

    episodes = []
    with open(os.path.join(path, "episodes.jsonl")) as fh:
        for line in fh:
            r = json.loads(line)
            shape = tuple(r["feat_shape"])
            count = int(np.prod(shape))
            if r["feat_offset"] + count * 4 > len(blob):
                raise ValidationError(f"episode {r['id']}: feature slice out of range")
            feats = np.frombuffer(blob, dtype="<f4", count=count,
                                  offset=r["feat_offset"]).reshape(shape)
            episodes.append(Episode(
                id=r["id"], scene_id=r["scene"], split=r["split"],
                poses=np.array(r["poses"]),
                actions=list(r["actions"]),
                view_indices=np.array(r["views"], dtype=np.int64),
                instruction=list(r["instruction"]),
                landmarks=list(r["landmarks"]),
                features=feats,
            ))
    return Dataset(episodes=episodes, scenes=scenes, manifest=manifest)

"""Dataset export/load tests: determinism, split hygiene, blob integrity."""

import dataclasses
import filecmp
import os

import numpy as np
import pytest

from navspeak import dataset as D
from navspeak import follower as F
from navspeak import grammar as G
from navspeak import world as W
from navspeak.config import desk_preset
from navspeak.errors import ValidationError


@pytest.fixture(scope="module")
def small_cfg():
    return dataclasses.replace(desk_preset(), split_train=6, split_seen=3,
                               split_unseen=3, train_scenes=4, unseen_scenes=2)


@pytest.fixture(scope="module")
def built(small_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "corpus"
    manifest = D.build_dataset(small_cfg, str(out))
    return str(out), manifest


def test_manifest_counts(built, small_cfg):
    _, manifest = built
    assert manifest["splits"] == {"train": 6, "seen": 3, "unseen": 3}
    assert manifest["episodes"] == 12
    assert manifest["config_hash"] == small_cfg.config_hash()


def test_split_hygiene(built):
    """Unseen-split scene ids never appear in train or seen episodes."""
    out, manifest = built
    ds = D.load_dataset(out)
    train_scenes = {e.scene_id for e in ds.episodes if e.split in ("train", "seen")}
    unseen_scenes = {e.scene_id for e in ds.episodes if e.split == "unseen"}
    assert train_scenes.isdisjoint(unseen_scenes)
    assert unseen_scenes <= set(manifest["scene_ids"]["unseen"])
    assert train_scenes <= set(manifest["scene_ids"]["train"])


def test_export_byte_identical(small_cfg, tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    D.build_dataset(small_cfg, str(a))
    D.build_dataset(small_cfg, str(b))
    for name in ("episodes.jsonl", "features.bin", "scenes.json", "manifest.json"):
        assert filecmp.cmp(a / name, b / name, shallow=False), name


def test_load_round_trip_features_exact(built, small_cfg):
    """Blob features equal a fresh render of the recorded trajectory."""
    out, _ = built
    ds = D.load_dataset(out)
    rig = W.rig_from_config(small_cfg)
    ep = ds.episodes[0]
    scene = ds.scene_of(ep)
    poses = [ep.pose_at(t) for t in range(len(ep))]
    for t in (0, len(ep) - 1):
        obs = W.render_observation(scene, poses[t], rig, t=t)
        for k, view in enumerate(obs.views):
            fresh = W.extract_view_features(view, small_cfg.patch_size,
                                            small_cfg.n_categories,
                                            small_cfg.n_colors).astype(np.float32)
            np.testing.assert_array_equal(ep.features[t, k], fresh)


def test_episode_shapes_and_tokens(built, small_cfg):
    out, _ = built
    ds = D.load_dataset(out)
    vocab = G.vocabulary()
    for ep in ds.episodes:
        t_len = len(ep)
        assert 3 <= t_len <= 12
        assert ep.features.shape == (t_len, small_cfg.n_views, small_cfg.d_patch,
                                     small_cfg.feat_hw, small_cfg.feat_hw)
        assert ep.features.dtype == np.float32
        assert ep.actions[-1] == W.STOP
        assert ep.view_indices[-1] == 0
        assert all(0 <= i < len(vocab) for i in ep.instruction)
        assert all(0 <= i < len(vocab) for i in ep.landmarks)
        assert len(ep.instruction) <= small_cfg.max_text_len


def test_corpus_round_trip_success(built, small_cfg):
    """Every stored instruction still drives the follower to the goal."""
    out, _ = built
    ds = D.load_dataset(out)
    rig = W.rig_from_config(small_cfg)
    results = [
        F.follow_instruction(ds.scene_of(ep), ep.start_pose, ep.instruction,
                             small_cfg, rig)
        for ep in ds.episodes
    ]
    assert F.success_rate(results) == 1.0


def test_load_rejects_missing_manifest(tmp_path):
    with pytest.raises(ValidationError, match="manifest"):
        D.load_dataset(str(tmp_path))


def test_load_rejects_truncated_blob(built, tmp_path):
    out, _ = built
    import shutil
    broken = tmp_path / "broken"
    shutil.copytree(out, broken)
    blob = broken / "features.bin"
    blob.write_bytes(blob.read_bytes()[:100])
    with pytest.raises(ValidationError):
        D.load_dataset(str(broken))


def test_dataset_split_accessor(built):
    out, _ = built
    ds = D.load_dataset(out)
    assert len(ds.split("train")) == 6
    with pytest.raises(ValidationError):
        ds.split("validation")

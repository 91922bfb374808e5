"""Scene generation, rendering, and trajectory tests.

Geometry oracles here are computed independently of the renderer: analytic
ray lengths for hand-built scenes, breadth-first search for connectivity,
and a replay interpreter for pose/action consistency.
"""

import numpy as np
import pytest

from navspeak import world as W
from navspeak.config import desk_preset
from navspeak.errors import GenerationError, ValidationError


@pytest.fixture(scope="module")
def cfg():
    return desk_preset()


@pytest.fixture(scope="module")
def rig(cfg):
    return W.rig_from_config(cfg)


def corridor_scene(goal=(5, 4)):
    """Empty 9x9 room with start (0,4), no interior walls, no objects."""
    return W.Scene(id=0, grid_cells=9, walls=W._perimeter_walls(9), objects=[],
                   start_cell=(0, 4), goal_cell=goal)


def scene_with(objects, walls=(), goal=(5, 4)):
    return W.Scene(id=0, grid_cells=9, walls=W._perimeter_walls(9) + list(walls),
                   objects=list(objects), start_cell=(0, 4), goal_cell=goal)


def obj(category, color, cell, size=None):
    w, l, h = size or W.CANONICAL_FOOTPRINTS[category]
    return W.SceneObject(category=category, color=color,
                         center=(cell[0] + 0.5, cell[1] + 0.5, h / 2.0),
                         size=(w, l, h))


# -- scene generation ---------------------------------------------------------------


def test_generate_scene_deterministic(cfg):
    a = W.generate_scene(0, cfg)
    b = W.generate_scene(0, cfg)
    assert a.walls == b.walls
    assert a.start_cell == b.start_cell and a.goal_cell == b.goal_cell
    assert [(o.category, o.color, o.center) for o in a.objects] == \
           [(o.category, o.color, o.center) for o in b.objects]


def test_generate_scene_rejects_zero_objects(cfg):
    import dataclasses
    bad = dataclasses.replace(cfg, n_objects=0)
    with pytest.raises(ValidationError):
        W.generate_scene(0, bad)


@pytest.mark.parametrize("seed", range(1, 101))
def test_generated_scenes_connected(cfg, seed):
    """BFS oracle: a start-to-goal path must exist in every generated scene."""
    scene = W.generate_scene(seed, cfg)
    path = W._bfs_path(scene.grid_cells, scene.blocked_cells(),
                       scene.blocked_edges(), scene.start_cell, scene.goal_cell)
    assert path is not None
    assert 2 <= len(path) - 1 <= 6
    for o in scene.objects:
        assert 0 <= o.center[0] <= scene.grid_cells
        assert 0 <= o.center[1] <= scene.grid_cells


def test_scene_invariants_object_cells_distinct(cfg):
    scene = W.generate_scene(3, cfg)
    cells = [o.cell for o in scene.objects]
    assert len(set(cells)) == len(cells)
    assert scene.start_cell not in cells and scene.goal_cell not in cells


# -- trajectories --------------------------------------------------------------------


def test_corridor_gives_pure_forward_run():
    traj = W.sample_trajectory(corridor_scene(), seed=0)
    kinds = [a.kind for a in traj.actions]
    assert kinds == [W.FORWARD] * 5 + [W.STOP]
    assert traj.poses[0].heading == 0.0
    assert (traj.poses[-1].x, traj.poses[-1].y) == (5.5, 4.5)


def test_trajectory_deterministic(cfg):
    scene = W.generate_scene(7, cfg)
    a = W.sample_trajectory(scene, seed=11)
    b = W.sample_trajectory(scene, seed=11)
    assert [x.kind for x in a.actions] == [x.kind for x in b.actions]
    assert all(p.x == q.x and p.y == q.y and p.heading == q.heading
               for p, q in zip(a.poses, b.poses))


@pytest.mark.parametrize("seed", range(100))
def test_trajectory_replay_oracle(cfg, seed):
    """Re-applying the recorded actions from the first pose must reproduce
    every pose exactly, end at the goal, and end with stop."""
    scene = W.generate_scene(seed % 20, cfg)
    traj = W.sample_trajectory(scene, seed)
    t = len(traj.actions)
    assert 3 <= t <= 12
    assert traj.actions[-1].kind == W.STOP
    assert traj.actions[-1].view_index == 0
    pose = traj.poses[0]
    for step in range(t - 1):
        pose = W.apply_action(pose, traj.actions[step].kind)
        ref = traj.poses[step + 1]
        assert (pose.x, pose.y, pose.heading) == (ref.x, ref.y, ref.heading)
    gx, gy = W.cell_center(scene.goal_cell)
    assert abs(traj.poses[-1].x - gx) < 1e-9 and abs(traj.poses[-1].y - gy) < 1e-9
    blocked = scene.blocked_cells()
    for p in traj.poses:
        assert (int(np.floor(p.x)), int(np.floor(p.y))) not in blocked


def test_trajectory_view_indices(cfg):
    scene = W.generate_scene(2, cfg)
    traj = W.sample_trajectory(scene, seed=5)
    for a in traj.actions:
        assert a.view_index == W.ACTION_VIEW_INDEX[a.kind]


# -- rendering ----------------------------------------------------------------------


def test_depth_exact_on_axis_wall(rig):
    """Analytic oracle: wall 2 m ahead, on-axis pixel sees exactly 2.0 m."""
    scene = scene_with([], walls=[(2.5, 3.0, 2.5, 6.0)])
    pose = W.Pose(0.5, 4.5, 0.0, 0.0)
    obs = W.render_observation(scene, pose, rig)
    front = obs.views[0]
    assert abs(front.depth[15, 15] - 2.0) <= 1e-9
    assert front.category[15, 15] == 0


def test_depth_exact_oblique_pixel(rig):
    """Off-axis columns hit the same wall at length 2*sqrt(1+x^2), with
    x = (col-15)/16; checked against the closed form, not the renderer."""
    scene = scene_with([], walls=[(2.5, 0.0, 2.5, 9.0)])
    pose = W.Pose(0.5, 4.5, 0.0, 0.0)
    view = W.render_observation(scene, pose, rig).views[0]
    for col in (10, 15, 20, 25):
        x = (col - 15) / 16.0
        expected = 2.0 * np.sqrt(1.0 + x * x)
        assert abs(view.depth[15, col] - expected) <= 1e-9


def test_empty_direction_is_max_range(rig):
    scene = corridor_scene()
    pose = W.Pose(4.5, 4.5, 0.0, 0.0)
    view = W.render_observation(scene, pose, rig).views[0]
    # upper rows look above the wall tops into open space
    assert view.depth[0, 15] == rig.max_range
    assert view.category[0, 15] == 0


def test_floor_hit_depth(rig):
    """Downward pixel hits the floor at 1.2/|dz| along the unit ray."""
    scene = corridor_scene()
    pose = W.Pose(4.5, 4.5, 0.0, 0.0)
    view = W.render_observation(scene, pose, rig).views[0]
    row, col = 31, 15
    y = (row - 15) / 16.0
    d = np.array([1.0, 0.0, -y])
    d /= np.linalg.norm(d)
    expected = 1.2 / -d[2]
    assert abs(view.depth[row, col] - expected) <= 1e-9


def test_object_fully_in_view_has_its_category(rig):
    scene = scene_with([obj(3, 1, (3, 4))])  # sofa two meters ahead
    pose = W.Pose(0.5, 4.5, 0.0, 0.0)
    view = W.render_observation(scene, pose, rig).views[0]
    assert (view.category == 3).any()
    assert (view.color[view.category == 3] == 1).all()
    # every hit is at least as far as the closest box point (the top edge of
    # the near face: the sofa is lower than the camera) and well under range
    w, l, h = W.CANONICAL_FOOTPRINTS[3]
    near_face = 3.5 - w / 2.0 - 0.5
    closest = np.sqrt(near_face**2 + (1.2 - h) ** 2)
    hit = view.depth[view.category == 3].min()
    assert closest - 1e-9 <= hit <= rig.max_range / 2.0


def test_view_rig_covers_four_directions(rig):
    scene = scene_with([obj(5, 2, (6, 4)), obj(7, 0, (2, 4))])
    pose = W.Pose(4.5, 4.5, 0.0, 0.0)
    obs = W.render_observation(scene, pose, rig)
    assert len(obs.views) == 4
    assert (obs.views[0].category == 5).any()   # lamp ahead (+x)
    assert (obs.views[2].category == 7).any()   # plant behind (-x)
    assert not (obs.views[1].category > 0).any()  # nothing north


def test_render_outside_bounds_raises(rig):
    with pytest.raises(ValidationError):
        W.render_observation(corridor_scene(), W.Pose(-1.0, 4.5), rig)


def test_render_deterministic(cfg, rig):
    scene = W.generate_scene(4, cfg)
    pose = W.Pose(*W.cell_center(scene.start_cell), 0.0, np.pi / 2.0)
    a = W.render_observation(scene, pose, rig)
    b = W.render_observation(scene, pose, rig)
    for va, vb in zip(a.views, b.views):
        np.testing.assert_array_equal(va.depth, vb.depth)
        np.testing.assert_array_equal(va.category, vb.category)


# -- features -----------------------------------------------------------------------


def test_features_uniform_free_space(rig, cfg):
    """A view of pure open space: category-0 one, depth channels at range."""
    view = W.RenderedView(category=np.zeros((32, 32), dtype=int),
                          color=np.zeros((32, 32), dtype=int),
                          depth=np.full((32, 32), rig.max_range),
                          heading=0.0, elevation=0.0)
    feat = W.extract_view_features(view, cfg.patch_size, cfg.n_categories, cfg.n_colors)
    assert feat.shape == (cfg.d_patch, 8, 8)
    np.testing.assert_array_equal(feat[0], 1.0)
    np.testing.assert_array_equal(feat[1:cfg.n_categories + 1], 0.0)
    np.testing.assert_array_equal(feat[cfg.n_categories + 1:-2], 0.0)  # no object pixels
    np.testing.assert_array_equal(feat[-2], rig.max_range)
    np.testing.assert_array_equal(feat[-1], rig.max_range)


def test_feature_histograms_normalized(cfg, rig):
    scene = W.generate_scene(9, cfg)
    pose = W.Pose(*W.cell_center(scene.start_cell), 0.0, 0.0)
    view = W.render_observation(scene, pose, rig).views[0]
    feat = W.extract_view_features(view, cfg.patch_size, cfg.n_categories, cfg.n_colors)
    np.testing.assert_allclose(feat[:cfg.n_categories + 1].sum(axis=0), 1.0, atol=1e-12)
    color_sum = feat[cfg.n_categories + 1:cfg.n_categories + 1 + cfg.n_colors].sum(axis=0)
    has_obj = feat[1:cfg.n_categories + 1].sum(axis=0) > 0
    np.testing.assert_allclose(color_sum[has_obj], 1.0, atol=1e-12)
    np.testing.assert_array_equal(color_sum[~has_obj], 0.0)


def test_features_reject_bad_patch_size(rig, cfg):
    view = W.RenderedView(category=np.zeros((32, 32), dtype=int),
                          color=np.zeros((32, 32), dtype=int),
                          depth=np.full((32, 32), 8.0), heading=0.0, elevation=0.0)
    with pytest.raises(ValidationError):
        W.extract_view_features(view, 5, cfg.n_categories, cfg.n_colors)


# -- visibility helpers --------------------------------------------------------------


def test_line_of_sight_blocked_by_wall():
    scene = scene_with([], walls=[(3.0, 0.0, 3.0, 9.0)])
    a = np.array([0.5, 4.5, 1.2])
    b = np.array([5.5, 4.5, 1.0])
    assert not W.line_of_sight(scene, a, b)
    assert W.line_of_sight(scene, a, np.array([2.5, 4.5, 1.0]))


def test_ground_landmark_prefers_nearest(rig):
    near = obj(4, 2, (2, 4))
    far = obj(4, 2, (6, 4))
    scene = scene_with([far, near])
    pose = W.Pose(0.5, 4.5, 0.0, 0.0)
    assert W.ground_landmark(scene, pose, 2, 4, rig) == 1
    assert W.ground_landmark(scene, pose, 3, 4, rig) is None  # wrong color


def test_cardinal_index_wraps():
    assert W.cardinal_index(0.0) == 0
    assert W.cardinal_index(np.pi / 2) == 1
    assert W.cardinal_index(-np.pi / 2) == 3
    assert W.cardinal_index(np.pi + 0.1) == 2
    assert W.cardinal_index(2 * np.pi - 0.01) == 0

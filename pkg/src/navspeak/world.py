"""Procedural 2.5D indoor scenes with an analytic raycast renderer.

Scenes live on a square grid of 1 m cells. Walls are vertical rectangles
standing on cell edges, objects are axis-aligned boxes centered in cells,
and the floor is the z=0 plane. Everything is a vertical prism over a flat
floor, so every camera ray has a closed-form first hit and rendered depth
is exact rather than sampled. Headings are cardinal (multiples of pi/2).
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import GenerationError, ValidationError

WALL_HEIGHT = 2.5

# Per-category box footprint (width, length, height) in meters. One object
# occupies one cell, so footprints stay under the 1 m cell size. Category 0
# is reserved for free space and bare structure (floor, walls).
CANONICAL_FOOTPRINTS = {
    1: (0.90, 0.14, 2.10),  # door
    2: (0.80, 0.80, 0.75),  # table
    3: (0.92, 0.85, 0.80),  # sofa
    4: (0.50, 0.50, 0.95),  # chair
    5: (0.30, 0.30, 1.55),  # lamp
    6: (0.90, 0.35, 1.80),  # shelf
    7: (0.40, 0.40, 1.10),  # plant
    8: (0.90, 0.95, 0.60),  # bed
}

# Movement action kinds and their action-view indices. Index 0 is reserved
# for STOP; index a in 1..K names rig view a-1 (front, left, back, right).
STOP, FORWARD, TURN_LEFT, TURN_RIGHT = "stop", "forward", "turn_left", "turn_right"
ACTION_VIEW_INDEX = {STOP: 0, FORWARD: 1, TURN_LEFT: 2, TURN_RIGHT: 4}

# Cardinal unit steps in heading order: 0 = +x, pi/2 = +y, pi = -x, 3pi/2 = -y.
_CARDINAL_STEPS = ((1, 0), (0, 1), (-1, 0), (0, -1))


def normalize_angle(a: float) -> float:
    """Wrap an angle into [0, 2*pi)."""
    return float(a % (2.0 * np.pi))


@dataclass
class Pose:
    x: float
    y: float
    z: float = 0.0
    heading: float = 0.0
    elevation: float = 0.0

    def __post_init__(self):
        self.heading = normalize_angle(self.heading)

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


@dataclass
class SceneObject:
    category: int
    color: int
    center: tuple[float, float, float]
    size: tuple[float, float, float]

    def __post_init__(self):
        if min(self.size) <= 0:
            raise ValidationError(f"object size must be positive, got {self.size}")

    @property
    def cell(self) -> tuple[int, int]:
        return int(np.floor(self.center[0])), int(np.floor(self.center[1]))


@dataclass
class ActionStep:
    kind: str
    view_index: int

    def __post_init__(self):
        if (self.view_index == 0) != (self.kind == STOP):
            raise ValidationError(
                f"view index 0 is reserved for stop, got kind={self.kind!r} index={self.view_index}"
            )


@dataclass
class Trajectory:
    poses: list[Pose]
    actions: list[ActionStep]

    def __len__(self) -> int:
        return len(self.actions)


@dataclass
class Scene:
    id: int
    grid_cells: int
    walls: list[tuple[float, float, float, float]]  # (x0, y0, x1, y1) on grid lines
    objects: list[SceneObject]
    start_cell: tuple[int, int]
    goal_cell: tuple[int, int]

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        g = float(self.grid_cells)
        return (0.0, 0.0, g, g)

    def contains(self, x: float, y: float) -> bool:
        x0, y0, x1, y1 = self.bounds
        return x0 <= x <= x1 and y0 <= y <= y1

    def blocked_cells(self) -> set[tuple[int, int]]:
        return {o.cell for o in self.objects}

    def blocked_edges(self) -> set[frozenset]:
        """Cell-to-cell transitions blocked by an interior wall segment."""
        edges = set()
        g = self.grid_cells
        for x0, y0, x1, y1 in self.walls:
            if x0 == x1:  # vertical wall on line x=x0 spanning y in [y0, y1]
                gx = int(round(x0))
                if gx <= 0 or gx >= g:
                    continue
                for gy in range(int(round(y0)), int(round(y1))):
                    edges.add(frozenset({(gx - 1, gy), (gx, gy)}))
            else:  # horizontal wall on line y=y0
                gy = int(round(y0))
                if gy <= 0 or gy >= g:
                    continue
                for gx in range(int(round(x0)), int(round(x1))):
                    edges.add(frozenset({(gx, gy - 1), (gx, gy)}))
        return edges


@dataclass
class RenderedView:
    category: np.ndarray  # (H, W) int
    color: np.ndarray     # (H, W) int, meaningful only where category > 0
    depth: np.ndarray     # (H, W) meters, exact ray length to first hit
    heading: float
    elevation: float


@dataclass
class Observation:
    views: list[RenderedView]
    t: int


@dataclass
class CameraRig:
    """K pinhole cameras at fixed heading offsets around the agent.

    The principal point sits at the center of pixel (pp, pp) in corner-origin
    coordinates, so that one pixel lies exactly on the optical axis and the
    analytic depth checks are exact. With a 32 px image and focal 16 px the
    field of view is 90 degrees up to that half-pixel asymmetry.
    """

    n_views: int = 4
    image_size: int = 32
    focal: float = 16.0
    mount_height: float = 1.2
    max_range: float = 8.0

    @property
    def principal(self) -> float:
        return self.image_size / 2.0 - 0.5

    def view_offsets(self) -> list[float]:
        return [2.0 * np.pi * k / self.n_views for k in range(self.n_views)]

    def orientation_code(self, heading: float, elevation: float = 0.0) -> np.ndarray:
        return np.array([np.cos(heading), np.sin(heading),
                         np.cos(elevation), np.sin(elevation)])


def rig_from_config(cfg) -> CameraRig:
    return CameraRig(n_views=cfg.n_views, image_size=cfg.image_size,
                     focal=cfg.focal, mount_height=cfg.camera_height,
                     max_range=cfg.max_range)


# -- raycasting -------------------------------------------------------------------


def _ray_vs_wall(origin, dirs, wall):
    """Hit distances of unit rays against one vertical wall rectangle.

    Returns an array of t values with inf where the wall is missed.
    """
    x0, y0, x1, y1 = wall
    if x0 == x1:
        axis, lo, hi, plane = 0, min(y0, y1), max(y0, y1), x0
        other = 1
    else:
        axis, lo, hi, plane = 1, min(x0, x1), max(x0, x1), y0
        other = 0
    d = dirs[:, axis]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (plane - origin[axis]) / d
        p_other = origin[other] + t * dirs[:, other]
        p_z = origin[2] + t * dirs[:, 2]
    ok = (t > 1e-9) & np.isfinite(t)
    ok &= (p_other >= lo) & (p_other <= hi)
    ok &= (p_z >= 0.0) & (p_z <= WALL_HEIGHT)
    return np.where(ok, t, np.inf)


def _ray_vs_box(origin, dirs, center, size):
    """Slab-test entry distances of unit rays against one axis-aligned box."""
    lo = np.asarray(center) - np.asarray(size) / 2.0
    hi = np.asarray(center) + np.asarray(size) / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (lo - origin) / dirs
        t1 = (hi - origin) / dirs
    # A component with zero direction yields +-inf or nan; nan means the ray
    # is parallel and outside the slab caught below via the origin test.
    parallel = dirs == 0.0
    outside = parallel & ((origin < lo) | (origin > hi))
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    t_near = tmin.max(axis=1)
    t_far = tmax.min(axis=1)
    ok = (t_near <= t_far) & (t_far > 1e-9) & ~outside.any(axis=1)
    t = np.where(t_near > 1e-9, t_near, t_far)  # inside the box: exit distance
    return np.where(ok, t, np.inf)


def _ray_vs_floor(origin, dirs):
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -origin[2] / dz
    return np.where((dz < 0.0) & (t > 1e-9), t, np.inf)


def render_view(scene: Scene, origin: np.ndarray, heading: float,
                rig: CameraRig, elevation: float = 0.0) -> RenderedView:
    if elevation != 0.0:
        raise ValidationError("renderer supports zero elevation only")
    n = rig.image_size
    pp, f = rig.principal, rig.focal
    cols, rows = np.meshgrid(np.arange(n), np.arange(n))
    # rays pass through pixel centers (corner-origin coordinate i + 0.5);
    # with pp = 15.5 the center of pixel (15, 15) lies exactly on-axis
    x_img = (cols.ravel() + 0.5 - pp) / f   # rightward offset
    y_img = (rows.ravel() + 0.5 - pp) / f   # downward offset
    fwd = np.array([np.cos(heading), np.sin(heading), 0.0])
    right = np.array([np.sin(heading), -np.cos(heading), 0.0])
    down = np.array([0.0, 0.0, -1.0])
    dirs = fwd[None, :] + x_img[:, None] * right[None, :] + y_img[:, None] * down[None, :]
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

    best_t = _ray_vs_floor(origin, dirs)
    best_cat = np.zeros(n * n, dtype=np.int64)
    best_col = np.zeros(n * n, dtype=np.int64)
    for wall in scene.walls:
        t = _ray_vs_wall(origin, dirs, wall)
        best_t = np.minimum(best_t, t)  # walls and floor share category 0
    for obj in scene.objects:
        t = _ray_vs_box(origin, dirs, obj.center, obj.size)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_cat = np.where(closer, obj.category, best_cat)
        best_col = np.where(closer, obj.color, best_col)

    miss = best_t > rig.max_range
    depth = np.where(miss, rig.max_range, best_t)
    cat = np.where(miss, 0, best_cat)
    col = np.where(miss, 0, best_col)
    return RenderedView(category=cat.reshape(n, n), color=col.reshape(n, n),
                        depth=depth.reshape(n, n), heading=normalize_angle(heading),
                        elevation=elevation)


def render_observation(scene: Scene, pose: Pose, rig: CameraRig, t: int = 0) -> Observation:
    """Render the K-view surround observation at a pose."""
    if not scene.contains(pose.x, pose.y):
        raise ValidationError(
            f"pose ({pose.x}, {pose.y}) outside scene bounds {scene.bounds}")
    origin = np.array([pose.x, pose.y, pose.z + rig.mount_height])
    views = [render_view(scene, origin, pose.heading + off, rig)
             for off in rig.view_offsets()]
    return Observation(views=views, t=t)


def line_of_sight(scene: Scene, p0: np.ndarray, p1: np.ndarray,
                  ignore_object: int | None = None) -> bool:
    """True when the open segment p0->p1 crosses no wall or object box."""
    d = np.asarray(p1, dtype=float) - np.asarray(p0, dtype=float)
    length = float(np.linalg.norm(d))
    if length == 0.0:
        return True
    dirs = (d / length)[None, :]
    origin = np.asarray(p0, dtype=float)
    limit = length - 1e-9
    for wall in scene.walls:
        if _ray_vs_wall(origin, dirs, wall)[0] < limit:
            return False
    for i, obj in enumerate(scene.objects):
        if i == ignore_object:
            continue
        if _ray_vs_box(origin, dirs, obj.center, obj.size)[0] < limit:
            return False
    return True


def visible_objects(scene: Scene, pose: Pose, rig: CameraRig) -> list[int]:
    """Indices of objects with clear line of sight from the camera, in range."""
    eye = np.array([pose.x, pose.y, pose.z + rig.mount_height])
    out = []
    for i, obj in enumerate(scene.objects):
        center = np.asarray(obj.center)
        if np.linalg.norm(center - eye) > rig.max_range:
            continue
        if line_of_sight(scene, eye, center, ignore_object=i):
            out.append(i)
    return out


def bearing_to(pose: Pose, obj: SceneObject) -> float:
    """Signed angle from the pose heading to the object center, in (-pi, pi]."""
    dx = obj.center[0] - pose.x
    dy = obj.center[1] - pose.y
    raw = np.arctan2(dy, dx) - pose.heading
    wrapped = (raw + np.pi) % (2.0 * np.pi) - np.pi
    return float(wrapped if wrapped != -np.pi else np.pi)


def planar_distance(pose: Pose, obj: SceneObject) -> float:
    return float(np.hypot(obj.center[0] - pose.x, obj.center[1] - pose.y))


def ground_landmark(scene: Scene, pose: Pose, color: int, category: int,
                    rig: CameraRig) -> int | None:
    """Index of the visible object matching (color, category) a landmark
    clause refers to: nearest first, then smaller bearing, then index."""
    candidates = [i for i in visible_objects(scene, pose, rig)
                  if scene.objects[i].color == color
                  and scene.objects[i].category == category]
    if not candidates:
        return None
    return min(candidates, key=lambda i: (planar_distance(pose, scene.objects[i]),
                                          abs(bearing_to(pose, scene.objects[i])), i))


# Exact cardinal headings. Poses produced by pose arithmetic drift from these
# by ulps (sin(pi) is not exactly zero); geometry that must agree between
# instruction synthesis and instruction following is computed on snapped
# poses so both sides see bit-identical inputs.
CARDINAL_ANGLES = (0.0, np.pi / 2.0, np.pi, 3.0 * (np.pi / 2.0))


def cardinal_index(angle: float) -> int:
    """Index of the cardinal direction nearest to an angle (ties round up)."""
    return int(np.floor(angle / (np.pi / 2.0) + 0.5)) % 4


def snap_pose(pose: Pose) -> Pose:
    """Round a drifted on-grid pose to its exact cell center and cardinal."""
    cx = int(np.floor(pose.x))
    cy = int(np.floor(pose.y))
    return Pose(cx + 0.5, cy + 0.5, pose.z, CARDINAL_ANGLES[cardinal_index(pose.heading)])


# -- patch features ----------------------------------------------------------------


def extract_view_features(view: RenderedView, patch_size: int,
                          n_categories: int, n_colors: int) -> np.ndarray:
    """Pool a rendered view into a (D_p, H, W) semantic feature grid.

    Per patch: normalized category histogram over categories 0..n_categories
    (walls and floor count as 0), color histogram normalized over object
    pixels only (all-zero when the patch shows no object), then mean and min
    depth in meters. D_p = n_categories + 1 + n_colors + 2.
    """
    n = view.category.shape[0]
    if n % patch_size:
        raise ValidationError(f"image size {n} not divisible by patch size {patch_size}")
    h = n // patch_size
    per = patch_size * patch_size
    cat = view.category.reshape(h, patch_size, h, patch_size).transpose(0, 2, 1, 3)
    col = view.color.reshape(h, patch_size, h, patch_size).transpose(0, 2, 1, 3)
    dep = view.depth.reshape(h, patch_size, h, patch_size).transpose(0, 2, 1, 3)
    cat = cat.reshape(h, h, per)
    col = col.reshape(h, h, per)
    dep = dep.reshape(h, h, per)

    d_p = n_categories + 1 + n_colors + 2
    feat = np.zeros((d_p, h, h))
    for c in range(n_categories + 1):
        feat[c] = (cat == c).mean(axis=2)
    is_obj = cat > 0
    obj_count = is_obj.sum(axis=2)
    for c in range(n_colors):
        hits = ((col == c) & is_obj).sum(axis=2)
        feat[n_categories + 1 + c] = np.divide(
            hits, obj_count, out=np.zeros((h, h)), where=obj_count > 0)
    feat[-2] = dep.mean(axis=2)
    feat[-1] = dep.min(axis=2)
    return feat


# -- scene generation ---------------------------------------------------------------


def _bfs(grid: int, blocked_cells: set, blocked_edges: set,
         start: tuple[int, int], order=None) -> dict:
    """Return {cell: parent} for cells reachable from start."""
    steps = list(_CARDINAL_STEPS) if order is None else [list(_CARDINAL_STEPS)[i] for i in order]
    parents = {start: None}
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        for dx, dy in steps:
            nxt = (cur[0] + dx, cur[1] + dy)
            if not (0 <= nxt[0] < grid and 0 <= nxt[1] < grid):
                continue
            if nxt in parents or nxt in blocked_cells:
                continue
            if frozenset({cur, nxt}) in blocked_edges:
                continue
            parents[nxt] = cur
            queue.append(nxt)
    return parents


def _bfs_path(grid, blocked_cells, blocked_edges, start, goal, order=None):
    parents = _bfs(grid, blocked_cells, blocked_edges, start, order)
    if goal not in parents:
        return None
    path = [goal]
    while path[-1] != start:
        path.append(parents[path[-1]])
    return path[::-1]


def shortest_path_length(scene: Scene) -> float:
    """Shortest collision-free start-to-goal distance in meters."""
    path = _bfs_path(scene.grid_cells, scene.blocked_cells(), scene.blocked_edges(),
                     scene.start_cell, scene.goal_cell)
    if path is None:
        raise GenerationError(f"scene {scene.id}: no start-to-goal path")
    return float(len(path) - 1)


def _perimeter_walls(g: int) -> list[tuple[float, float, float, float]]:
    gf = float(g)
    return [(0.0, 0.0, gf, 0.0), (gf, 0.0, gf, gf),
            (0.0, gf, gf, gf), (0.0, 0.0, 0.0, gf)]


def generate_scene(seed: int, cfg) -> Scene:
    """Build a connected scene with walls and objects; deterministic in seed.

    Start and goal are chosen with shortest-path distance in [2, 6] cells,
    which keeps sampled trajectories within the 3..12 action budget. Raises
    a generation error when no connected layout is found within the retry
    budget (pathological parameter combinations).
    """
    if cfg.n_objects < 1:
        raise ValidationError(f"n_objects must be >= 1, got {cfg.n_objects}")
    if cfg.grid_cells < 6:
        raise ValidationError(f"grid_cells must be >= 6, got {cfg.grid_cells}")
    g = cfg.grid_cells
    for attempt in range(64):
        rng = np.random.default_rng([2749, seed, attempt])
        walls = list(_perimeter_walls(g))
        for _ in range(cfg.n_wall_runs):
            vertical = bool(rng.integers(0, 2))
            line = int(rng.integers(1, g))
            length = int(rng.integers(2, 5))
            lo = int(rng.integers(0, g - length + 1))
            if vertical:
                walls.append((float(line), float(lo), float(line), float(lo + length)))
            else:
                walls.append((float(lo), float(line), float(lo + length), float(line)))

        cells = [(x, y) for x in range(g) for y in range(g)]
        picks = rng.choice(len(cells), size=cfg.n_objects, replace=False)
        objects = []
        for idx in picks:
            cx, cy = cells[idx]
            category = int(rng.integers(1, len(CANONICAL_FOOTPRINTS) + 1))
            color = int(rng.integers(0, 4))
            w, l, h = CANONICAL_FOOTPRINTS[category]
            objects.append(SceneObject(category=category, color=color,
                                       center=(cx + 0.5, cy + 0.5, h / 2.0),
                                       size=(w, l, h)))

        scene = Scene(id=seed, grid_cells=g, walls=walls, objects=objects,
                      start_cell=(0, 0), goal_cell=(0, 0))
        blocked = scene.blocked_cells()
        edges = scene.blocked_edges()
        free = [c for c in cells if c not in blocked]
        found = False
        for _ in range(40):
            i, j = rng.choice(len(free), size=2, replace=False)
            start, goal = free[i], free[j]
            path = _bfs_path(g, blocked, edges, start, goal)
            if path is not None and 2 <= len(path) - 1 <= 6:
                scene.start_cell, scene.goal_cell = start, goal
                found = True
                break
        if found:
            return scene
    raise GenerationError(f"seed {seed}: no connected scene in 64 attempts")


_HEADING_OF_STEP = {step: i * np.pi / 2.0 for i, step in enumerate(_CARDINAL_STEPS)}


def cell_center(cell: tuple[int, int]) -> tuple[float, float]:
    return (cell[0] + 0.5, cell[1] + 0.5)


def apply_action(pose: Pose, kind: str) -> Pose:
    """The follower's (and replayer's) single-step transition function."""
    if kind == FORWARD:
        return Pose(pose.x + np.cos(pose.heading), pose.y + np.sin(pose.heading),
                    pose.z, pose.heading)
    if kind == TURN_LEFT:
        return Pose(pose.x, pose.y, pose.z, pose.heading + np.pi / 2.0)
    if kind == TURN_RIGHT:
        return Pose(pose.x, pose.y, pose.z, pose.heading - np.pi / 2.0)
    if kind == STOP:
        return Pose(pose.x, pose.y, pose.z, pose.heading)
    raise ValidationError(f"unknown action kind {kind!r}")


def sample_trajectory(scene: Scene, seed: int) -> Trajectory:
    """Shortest-path trajectory from start to goal, tie-broken by seed.

    The initial heading faces the first move, so straight corridors yield
    pure forward runs. Turns appear only at path corners; with path length
    capped at 6 cells the action count T always lands in [3, 12].
    """
    rng = np.random.default_rng([5471, seed])
    order = list(rng.permutation(4))
    path = _bfs_path(scene.grid_cells, scene.blocked_cells(), scene.blocked_edges(),
                     scene.start_cell, scene.goal_cell, order=order)
    if path is None:
        raise GenerationError(f"scene {scene.id}: start and goal are disconnected")
    if len(path) < 2:
        raise GenerationError(f"scene {scene.id}: start equals goal")

    first = (path[1][0] - path[0][0], path[1][1] - path[0][1])
    heading = _HEADING_OF_STEP[first]
    x, y = cell_center(path[0])
    poses = [Pose(x, y, 0.0, heading)]
    actions: list[ActionStep] = []

    def push(kind):
        actions.append(ActionStep(kind=kind, view_index=ACTION_VIEW_INDEX[kind]))
        poses.append(apply_action(poses[-1], kind))

    for prev, nxt in zip(path, path[1:]):
        step = (nxt[0] - prev[0], nxt[1] - prev[1])
        want = _HEADING_OF_STEP[step]
        delta = normalize_angle(want - poses[-1].heading)
        if abs(delta - np.pi) < 1e-9:
            raise GenerationError("shortest path reversed direction")
        if abs(delta - np.pi / 2.0) < 1e-9:
            push(TURN_LEFT)
        elif abs(delta - 3.0 * np.pi / 2.0) < 1e-9:
            push(TURN_RIGHT)
        push(FORWARD)
    actions.append(ActionStep(kind=STOP, view_index=0))

    t = len(actions)
    if not 3 <= t <= 12:
        raise GenerationError(f"trajectory length {t} outside [3, 12]")
    if len(poses) != t:
        raise GenerationError("pose/action bookkeeping mismatch")
    return Trajectory(poses=poses, actions=actions)

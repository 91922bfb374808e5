"""Scripted instruction follower and the navigation success metrics.

The follower executes parsed clauses greedily on the cell grid. Motion
clauses move literally (a blocked forward step is a no-op rather than a
failure). Landmark clauses are advisory: "pass" and "stop at" never move,
"go toward" only rotates, to the cardinal direction of the nearest visible
object matching the phrase. Execution halts at the first stop clause.
All geometry runs on snapped poses (exact cell centers, exact cardinal
headings) so results are reproducible bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grammar as G
from . import world as W
from .errors import ValidationError


@dataclass
class FollowResult:
    success: bool
    path_length: float
    end_pose: W.Pose
    skipped_clauses: int = 0


def follow_instruction(scene: W.Scene, start: W.Pose, token_ids, cfg,
                       rig: W.CameraRig | None = None) -> FollowResult:
    """Execute an instruction from a pose; failure is a result, not an error."""
    rig = rig or W.rig_from_config(cfg)
    clauses, skipped = G.parse_clauses(token_ids)

    pose = W.snap_pose(start)
    cell = [int(np.floor(pose.x)), int(np.floor(pose.y))]
    direction = W.cardinal_index(pose.heading)
    steps = ((1, 0), (0, 1), (-1, 0), (0, -1))
    blocked_cells = scene.blocked_cells()
    blocked_edges = scene.blocked_edges()
    g = scene.grid_cells
    traveled = 0.0

    def current_pose() -> W.Pose:
        return W.Pose(cell[0] + 0.5, cell[1] + 0.5, 0.0,
                      W.CARDINAL_ANGLES[direction])

    for clause in clauses:
        if clause.kind == G.FORWARD:
            dx, dy = steps[direction]
            nxt = (cell[0] + dx, cell[1] + dy)
            if (0 <= nxt[0] < g and 0 <= nxt[1] < g
                    and nxt not in blocked_cells
                    and frozenset({tuple(cell), nxt}) not in blocked_edges):
                cell[0], cell[1] = nxt
                traveled += 1.0
        elif clause.kind == G.TURN_LEFT:
            direction = (direction + 1) % 4
        elif clause.kind == G.TURN_RIGHT:
            direction = (direction - 1) % 4
        elif clause.kind in (G.STOP, G.STOP_AT):
            break
        elif clause.kind == G.TOWARD:
            here = current_pose()
            idx = W.ground_landmark(scene, here, clause.color, clause.category, rig)
            if idx is not None:
                obj = scene.objects[idx]
                direction = W.cardinal_index(np.arctan2(obj.center[1] - here.y,
                                                        obj.center[0] - here.x))
        # "pass" clauses assert context without moving

    end = current_pose()
    gx, gy = W.cell_center(scene.goal_cell)
    success = bool(np.hypot(end.x - gx, end.y - gy) <= cfg.success_radius)
    return FollowResult(success=success, path_length=traveled, end_pose=end,
                        skipped_clauses=skipped)


def success_rate(results) -> float:
    results = list(results)
    if not results:
        return 0.0
    return sum(r.success for r in results) / len(results)


def path_length_weighted_success(results, shortest_lengths) -> float:
    """Mean of success * shortest / max(shortest, taken) over episodes."""
    results = list(results)
    shortest_lengths = list(shortest_lengths)
    if len(results) != len(shortest_lengths):
        raise ValidationError("results and shortest lengths must pair up")
    if not results:
        return 0.0
    total = 0.0
    for r, opt in zip(results, shortest_lengths):
        if r.success:
            total += opt / max(opt, r.path_length)
    return total / len(results)

"""Per-view perspective and action embeddings.

Each rendered view is reduced to a single token: the patch feature map is
mean-pooled over its spatial extent and sent through a linear layer, then
orientation, time-step, and token-type components are added on top. The
action token reuses the same recipe with its own linear map and type vector;
a stop action has no view behind it, so a learned feature stands in for the
pooled map.

The two view maps share the orientation projection: heading and elevation
mean the same thing whether the token describes an observation or the view
the agent moved toward.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ValidationError
from .nn import Linear, ParameterStore, init_linear_weight

STOP_ORIENTATION = np.array([1.0, 0.0, 1.0, 0.0])
"""Orientation code used for stop actions: straight ahead, level."""


def pool_features(features: Tensor) -> Tensor:
    """Spatial mean over the trailing H and W axes: (..., D_p, H, W) -> (..., D_p)."""
    if features.ndim < 3:
        raise ValidationError(
            f"expected a feature map with at least 3 dims, got shape {features.shape}"
        )
    return features.mean(axis=(-2, -1))


class PerspectiveEncoder:
    """Maps view feature maps to D-dimensional observation and action tokens.

    Parameters live in the shared store under the ``encoder.`` prefix:
    ``view_proj`` and ``action_proj`` are the per-role linear maps from the
    pooled patch features, ``orient_proj`` embeds the 4-vector orientation
    code, ``time_table`` is a T_max x D lookup, and ``type_obs`` / ``type_act``
    are the token-type vectors. ``stop_feature`` replaces the pooled map for
    stop actions.
    """

    def __init__(self, store: ParameterStore, cfg, rng: np.random.Generator,
                 tag: str = "tuned"):
        d_p, d = cfg.d_patch, cfg.d_model
        self.t_max = cfg.t_max
        self.n_views = cfg.n_views
        self.view_proj = Linear(store, "encoder.view_proj", d_p, d, rng, tag)
        self.action_proj = Linear(store, "encoder.action_proj", d_p, d, rng, tag)
        self.orient_proj = Linear(store, "encoder.orient_proj", 4, d, rng, tag)
        self.time_table = store.add(
            "encoder.time_table", 0.02 * rng.standard_normal((cfg.t_max, d)), tag)
        self.type_obs = store.add("encoder.type_obs", np.zeros(d), tag)
        self.type_act = store.add("encoder.type_act", np.zeros(d), tag)
        self.stop_feature = store.add(
            "encoder.stop_feature", init_linear_weight(rng, 1, d_p)[0], tag)

    def _check_step(self, t) -> np.ndarray:
        ids = np.asarray(t, dtype=np.int64)
        if np.any(ids < 0) or np.any(ids >= self.t_max):
            raise ValidationError(f"time step {t!r} outside [0, {self.t_max})")
        return ids

    def _assemble(self, proj: Linear, pooled: Tensor, orientation,
                  t, type_vec: Tensor) -> Tensor:
        ids = self._check_step(t)
        orient = ad._wrap(orientation)
        flat = pooled.ndim == 1
        if flat:
            pooled = pooled.reshape(1, -1)
            orient = orient.reshape(1, -1)
        out = (proj(pooled) + self.orient_proj(orient)
               + ad.embedding(self.time_table, ids) + type_vec)
        return out.reshape(-1) if flat else out

    def embed_perspective(self, features: Tensor, orientation, t) -> Tensor:
        """One observation token per view: (..., D_p, H, W) -> (..., D).

        ``orientation`` carries the matching (..., 4) orientation codes and
        ``t`` the time step (scalar, or an integer array matching the leading
        shape). Steps at or beyond T_max are refused.
        """
        return self._assemble(self.view_proj, pool_features(features),
                              orientation, t, self.type_obs)

    def embed_action(self, features, orientation, t, view_index: int) -> Tensor:
        """The action token for one step.

        ``view_index`` is the action code: 0 is stop, 1..K names the rig view
        the agent faced after acting. For stop the learned feature vector
        stands in for the pooled map and ``features`` may be None; otherwise
        ``features`` must hold that view's (D_p, H, W) map.
        """
        if not 0 <= view_index <= self.n_views:
            raise ValidationError(
                f"action view index {view_index} outside [0, {self.n_views}]")
        if view_index == 0:
            pooled = self.stop_feature
        elif features is None:
            raise ValidationError("non-stop action needs the view feature map")
        else:
            pooled = pool_features(ad._wrap(features))
        return self._assemble(self.action_proj, pooled, orientation, t,
                              self.type_act)

    def embed_observation(self, features: Tensor, orientations, t) -> Tensor:
        """All K views of one step at once: (K, D_p, H, W) -> (K, D)."""
        ids = np.full(features.shape[0], int(t)) if np.ndim(t) == 0 else t
        return self.embed_perspective(features, orientations, ids)

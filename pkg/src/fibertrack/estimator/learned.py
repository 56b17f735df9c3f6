"""Tracking with the network as the per-voxel orientation oracle."""
from __future__ import annotations

import numpy as np

from ..tracking import TrackerConfig, TrackingSession
from .network import forward
from .patches import PATCH, extract_patches, pad_volume


class LearnedOrientation:
    """Memoised network orientation per voxel.

    Windows come from an edge-padded copy of the volume, so voxels near the
    boundary still get a prediction.
    """

    def __init__(self, volume, params, net_config, transform="log"):
        self.params = params
        self.config = net_config
        self.transform = transform
        self.padded = pad_volume(volume.data, net_config.patch // 2)
        self.dtype = next(iter(params.values())).dtype
        self._memo = {}

    def predict(self, voxels):
        """Unit orientations ``(M, 3)`` for voxel indices ``(M, 3)``."""
        views = extract_patches(self.padded, voxels, self.transform, self.config.patch)
        return forward(self.params, self.config, views.astype(self.dtype))[0].astype(np.float64)

    def __call__(self, voxel):
        key = tuple(int(c) for c in voxel)
        v = self._memo.get(key)
        if v is None:
            v = self._memo[key] = self.predict(np.array([key]))[0]
        return v


def track_learned(seed, volume, params, net_config, config=None, *, session=None,
                  oracle=None, transform="log"):
    """Deterministic streamline following network orientations.

    At every voxel the predicted axis is signed toward the previous step,
    routed to a neighbour, and tracking stops on leaving the volume or
    dropping below ``fa_stop`` (FA from the tensor fit).
    """
    session = session or TrackingSession(volume, config or TrackerConfig())
    oracle = oracle or LearnedOrientation(volume, params, net_config, transform)
    seed = session.check_seed(seed)

    def walk(v):
        path = []
        pos = seed + session.route(v)
        while len(path) < session.config.max_steps and session._continues(pos):
            path.append(pos)
            w = oracle(pos)
            v = w if float(w @ v) >= 0 else -w
            pos = pos + session.route(v)
        return path

    v0 = oracle(seed)
    return session._join(walk(-v0), seed, walk(v0))


__all__ = ["LearnedOrientation", "track_learned", "PATCH"]

"""Training data: synthetic orientation patches and phantom patches."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dwi import fiber_tensor, synthesize_signals
from ..errors import ConfigurationError
from .patches import PATCH, extract_patches, normalize_views, pad_volume


@dataclass
class PatchDataset:
    """Views ``(N, 3, P, P, S)`` with unit targets ``(N, 3)``."""

    views: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.views = np.asarray(self.views)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if len(self.views) != len(self.targets):
            raise ConfigurationError("views and targets differ in length")
        if len(self.targets) and np.any(np.abs(np.linalg.norm(self.targets, axis=1) - 1) > 1e-9):
            raise ConfigurationError("targets must be unit vectors")
        if not np.all(np.isfinite(self.views)):
            raise ConfigurationError("patch values must be finite")

    def __len__(self):
        return len(self.targets)

    @property
    def shells(self):
        return self.views.shape[-1]

    def subset(self, idx):
        return PatchDataset(self.views[idx], self.targets[idx])

    def split(self, n_val):
        """First ``len - n_val`` samples for training, the rest for validation."""
        if not 0 < n_val < len(self):
            raise ConfigurationError("validation size must be between 1 and len - 1")
        cut = len(self) - n_val
        return self.subset(slice(0, cut)), self.subset(slice(cut, None))

    def astype(self, dtype):
        return PatchDataset(self.views.astype(dtype), self.targets)


def random_directions(n, rng):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def synthetic_dataset(n, table, rng, noise_sigma=0.02, l1_range=(1.2e-3, 2.0e-3),
                      radial_range=(0.1e-3, 0.5e-3), S0_range=(80.0, 120.0),
                      transform="log", patch=PATCH):
    """Homogeneous single-fiber patches with random orientation.

    Each sample draws an orientation, eigenvalues and ``S0``; every voxel of
    its three views carries the same tensor and independent log-domain
    Gaussian noise (the centre voxel is shared by all views).
    """
    if n < 1:
        raise ConfigurationError("dataset size must be positive")
    dirs = random_directions(n, rng)
    l1 = rng.uniform(*l1_range, size=n)
    lr = rng.uniform(*radial_range, size=n)
    comps = np.stack([fiber_tensor(d, (a, b, b)) for d, a, b in zip(dirs, l1, lr)])
    S0 = rng.uniform(*S0_range, size=n)
    clean = np.log(synthesize_signals(comps, S0, table))  # (n, S)
    S = clean.shape[1]
    logs = clean[:, None, None, None, :] + noise_sigma * rng.normal(size=(n, 3, patch, patch, S))
    c = patch // 2
    logs[:, 1:, c, c, :] = logs[:, :1, c, c, :]
    views = logs if transform == "log" else np.exp(logs)
    return PatchDataset(normalize_views(views), dirs)


def phantom_dataset(volume, truth, transform="log", patch=PATCH):
    """One sample per in-fiber voxel of a phantom (edge-padded windows)."""
    voxels = np.argwhere(truth.mask)
    data = pad_volume(volume.data, patch // 2)
    views = extract_patches(data, voxels, transform, patch)
    return PatchDataset(views, truth.directions[tuple(voxels.T)]), voxels

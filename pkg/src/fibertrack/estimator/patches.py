"""Three orthogonal 7x7 windows around a voxel, stacked across shells."""
from __future__ import annotations

import numpy as np

from ..dwi import DwiVolume
from ..errors import ConfigurationError, SkipSample

PATCH = 7
HALF = PATCH // 2
VIEW_NAMES = ("axial", "sagittal", "coronal")
TRANSFORMS = ("log", "linear")


def normalize_views(views, eps=1e-12):
    """Zero mean and unit variance per view (over its window and shells).

    Views with (near) zero spread become all zeros.
    """
    v = np.asarray(views, dtype=np.float64)
    axes = tuple(range(v.ndim - 3, v.ndim))
    mean = v.mean(axis=axes, keepdims=True)
    std = v.std(axis=axes, keepdims=True)
    return np.where(std > eps, (v - mean) / np.where(std > eps, std, 1.0), 0.0)


def _prepare(signals, transform):
    if transform == "log":
        return np.log(signals)
    if transform == "linear":
        return np.asarray(signals, dtype=np.float64)
    raise ConfigurationError(f"unknown patch transform {transform!r}")


def planes(block):
    """Axial, sagittal and coronal centre planes of a cubic block.

    ``block`` has shape ``(..., P, P, P, S)`` indexed ``(x, y, z, shell)``;
    the result is ``(..., 3, P, P, S)`` with views ordered as
    :data:`VIEW_NAMES` (xy at centre z, yz at centre x, xz at centre y).
    """
    c = block.shape[-2] // 2
    return np.stack([block[..., :, :, c, :], block[..., c, :, :, :],
                     block[..., :, c, :, :]], axis=-4)


def extract_patch(volume, voxel, transform="log", size=PATCH):
    """Normalised views ``(3, size, size, S)`` centred on ``voxel``.

    Raises
    ------
    SkipSample
        When the window would leave the volume.
    """
    h = size // 2
    data = volume.data if isinstance(volume, DwiVolume) else np.asarray(volume)
    x, y, z = (int(c) for c in voxel)
    for c, n in zip((x, y, z), data.shape[:3]):
        if c - h < 0 or c + h >= n:
            raise SkipSample(f"voxel {(x, y, z)} is closer than {h} voxels to the boundary")
    sl = (slice(x - h, x + h + 1), slice(y - h, y + h + 1), slice(z - h, z + h + 1))
    block = _prepare(data[sl], transform)
    return normalize_views(planes(block))


def pad_volume(data, width=HALF):
    """Edge-replicate the three spatial axes so every voxel has a full window."""
    return np.pad(data, ((width, width),) * 3 + ((0, 0),), mode="edge")


def extract_patches(data, voxels, transform="log", size=PATCH):
    """Batched :func:`extract_patch` on an already padded array.

    ``voxels`` are indices into the *unpadded* volume; ``data`` must be padded
    by ``size // 2`` on every spatial side.
    """
    h = size // 2
    voxels = np.asarray(voxels, dtype=np.int64).reshape(-1, 3)
    off = np.arange(-h, h + 1)
    zero = np.zeros(1, dtype=np.int64)
    out = []
    for view_axes in ((0, 1), (1, 2), (0, 2)):
        idx = []
        for ax in range(3):
            if ax == view_axes[0]:
                o = off[:, None]
            elif ax == view_axes[1]:
                o = off[None, :]
            else:
                o = zero[:, None]
            idx.append(voxels[:, ax, None, None] + h + o[None])
        out.append(data[idx[0], idx[1], idx[2]])
    views = np.stack(out, axis=1)
    return normalize_views(_prepare(views, transform))

"""Angular distance between orientation vectors and its gradients.

Two formulations are provided. ``angle_arccos`` reproduces the cosine form
whose derivative ``-1/sqrt(1 - x^2)`` blows up for (anti)parallel vectors;
``angle_atan2`` uses ``atan2(|v x w|, v . w)`` whose gradient stays bounded.
Angles are in radians throughout.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import DomainError, GradientUndefinedError

SINGULAR_TOL = 1e-12
PARALLEL_TOL = 1e-10


class ArccosResult(NamedTuple):
    theta: float
    factor: float  # d theta / d cos(theta)
    grad: np.ndarray  # d theta / d w
    singular: bool


def _norms(v, w):
    v = np.asarray(v, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    nv = np.linalg.norm(v, axis=-1)
    nw = np.linalg.norm(w, axis=-1)
    if np.any(nv == 0) or np.any(nw == 0):
        raise DomainError("angular distance is undefined for zero vectors")
    return v, w, nv, nw


def cosine_similarity(v, w):
    """``v . w / (|v| |w|)`` clipped to [-1, 1]."""
    v, w, nv, nw = _norms(v, w)
    c = np.clip(np.sum(v * w, axis=-1) / (nv * nw), -1.0, 1.0)
    return float(c) if np.ndim(c) == 0 else c


def angle_arccos(v, w):
    """Cosine-form angle with its gradient with respect to ``w``.

    Near-(anti)parallel inputs (``|cos| > 1 - 1e-12``) set ``singular``
    instead of raising; ``factor`` is then huge or infinite.
    """
    v, w, nv, nw = _norms(v, w)
    x = cosine_similarity(v, w)
    with np.errstate(divide="ignore"):
        factor = -1.0 / np.sqrt(max(1.0 - x * x, 0.0))
    dx_dw = v / (nv * nw) - x * w / (nw * nw)
    with np.errstate(invalid="ignore"):
        grad = factor * dx_dw
    return ArccosResult(float(np.arccos(x)), float(factor), grad,
                        bool(abs(x) > 1.0 - SINGULAR_TOL))


def angle_atan2(v, w):
    """``atan2(|v x w|, v . w)`` in [0, pi]; broadcasts over leading axes."""
    v, w, _, _ = _norms(v, w)
    theta = np.arctan2(np.linalg.norm(np.cross(v, w), axis=-1), np.sum(v * w, axis=-1))
    return float(theta) if np.ndim(theta) == 0 else theta


def atan2_grad_batch(v, w):
    """Gradient of :func:`angle_atan2` w.r.t. ``w`` for rows of ``v``, ``w``.

    Returns ``(grad, ok)``; rows where ``v`` and ``w`` are (anti)parallel
    get a zero gradient and ``ok = False``.
    """
    v = np.asarray(v, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    u = np.cross(v, w)
    s = np.linalg.norm(u, axis=-1)
    c = np.sum(v * w, axis=-1)
    scale = np.linalg.norm(v, axis=-1) * np.linalg.norm(w, axis=-1)
    ok = s > PARALLEL_TOL * scale
    s_safe = np.where(ok, s, 1.0)
    r2 = s_safe * s_safe + c * c
    # d s/dw = (u/s) x v,   d c/dw = v
    ds_dw = np.cross(u / s_safe[..., None], v)
    grad = (c / r2)[..., None] * ds_dw - (s_safe / r2)[..., None] * v
    return np.where(ok[..., None], grad, 0.0), ok


def grad_atan2(v, w):
    """Analytic ``d theta / d w`` of the atan2 angle, ``v`` held fixed."""
    v, w, _, _ = _norms(v, w)
    grad, ok = atan2_grad_batch(v, w)
    if not np.all(ok):
        raise GradientUndefinedError("gradient undefined for (anti)parallel vectors")
    return grad


def axial_angle(v, w):
    """Sign-agnostic angle ``min(theta(v, w), theta(v, -w))`` in [0, pi/2].

    Evaluated as ``atan2(|v x w|, |v . w|)``, which is bit-identical under
    a sign flip of either argument.
    """
    v, w, _, _ = _norms(v, w)
    theta = np.arctan2(np.linalg.norm(np.cross(v, w), axis=-1), np.abs(np.sum(v * w, axis=-1)))
    return float(theta) if np.ndim(theta) == 0 else theta


def finite_difference(f, x, h=1e-6):
    """Central-difference gradient of scalar ``f`` at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        grad[i] = (f(xp) - f(xm)) / (2.0 * h)
    return grad

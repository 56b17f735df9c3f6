"""Three-view convolutional orientation estimator with a dense block.

Per view: Conv1 -> dense block (Conv2..Conv5) -> dropout -> Conv6 ->
spatial max pool -> channel max pool -> Dense; the three 10-vectors are
concatenated and mapped to a 3-vector by a tanh FC layer, then normalised.

Dense-block wiring: every block layer after Conv2 consumes the channel
concatenation of Conv1's output and all earlier block outputs, each
centre-cropped to the current spatial size. With 7x7 input and 69 shells
this gives input depths 138, 345, 552 and 966 for Conv2..Conv5 while the
output depths are exactly 207, 207, 414 and 1656. Conv6 sees only the
(dropped-out) Conv5 output.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError
from ..losses import atan2_grad_batch
from . import layers as L

REFERENCE_SHELLS = 69
REFERENCE_DEPTHS = (138, 207, 207, 414, 1656, 828)
CONV_NAMES = ("conv1", "conv2", "conv3", "conv4", "conv5", "conv6")
DENSE_LAYERS = (1, 2, 3, 4)  # indices into CONV_NAMES forming the dense block
NORM_EPS = 1e-12
FALLBACK = np.array([1.0, 0.0, 0.0])


@dataclass(frozen=True)
class NetworkConfig:
    shells: int
    patch: int = 7
    kernels: tuple = (3, 2, 1, 1, 2, 2)
    depths: tuple = REFERENCE_DEPTHS
    pool_kernel: int = 2
    pool_outputs: int = 40
    dense_out: int = 10
    n_views: int = 3

    def __post_init__(self):
        if len(self.kernels) != 6 or len(self.depths) != 6:
            raise ConfigurationError("need 6 conv kernels and 6 depths")
        if self.pool_window < 1:
            raise ConfigurationError(
                f"conv6 depth {self.depths[5]} < {self.pool_outputs} pooled outputs")
        sizes = self.spatial_sizes()
        if L.conv_output_size(sizes[-1], self.pool_kernel) != 1:
            raise ConfigurationError(
                f"spatial pooling of {sizes[-1]}x{sizes[-1]} does not reach 1x1")

    @classmethod
    def table1(cls, shells=REFERENCE_SHELLS):
        """Reference architecture; depths scale with the shell count.

        Conv1 has two filters per input channel; later depths are the
        reference depths scaled by ``shells / 69`` and rounded up. The
        channel pool keeps 40 outputs with window ``conv6_depth // 40``.
        """
        ratio = shells / REFERENCE_SHELLS
        depths = (2 * shells,) + tuple(math.ceil(d * ratio - 1e-9) for d in REFERENCE_DEPTHS[1:])
        return cls(shells=shells, depths=depths)

    @classmethod
    def shrunken(cls, shells=2):
        """Tiny 3x3-patch variant for exhaustive gradient checks."""
        return cls(shells=shells, patch=3, kernels=(1, 2, 1, 1, 1, 1),
                   depths=(2 * shells, 2, 2, 3, 4, 5), pool_kernel=2,
                   pool_outputs=2, dense_out=3)

    @property
    def pool_window(self):
        return self.depths[5] // self.pool_outputs

    def spatial_sizes(self):
        sizes, s = [], self.patch
        for k in self.kernels:
            s = L.conv_output_size(s, k)
            sizes.append(s)
        return sizes

    def conv_input_depths(self):
        d = self.depths
        return (self.shells, d[0], d[0] + d[1], d[0] + d[1] + d[2],
                d[0] + d[1] + d[2] + d[3], d[4])


def param_shapes(config):
    shapes = {}
    cin = config.conv_input_depths()
    for v in range(config.n_views):
        for i, name in enumerate(CONV_NAMES):
            k = config.kernels[i]
            shapes[f"v{v}.{name}.W"] = (k, k, cin[i], config.depths[i])
            shapes[f"v{v}.{name}.b"] = (config.depths[i],)
        shapes[f"v{v}.dense.W"] = (config.pool_outputs, config.dense_out)
        shapes[f"v{v}.dense.b"] = (config.dense_out,)
    shapes["fc.W"] = (config.n_views * config.dense_out, 3)
    shapes["fc.b"] = (3,)
    return shapes


def init_params(config, rng, dtype=np.float64):
    """Glorot-uniform weights, zero biases, in a deterministic layer order."""
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[:-1]))
            fan_out = shape[-1] * (int(np.prod(shape[:-2])) if len(shape) == 4 else 1)
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-lim, lim, size=shape).astype(dtype)
    return params


def dropout_shape(config, batch):
    s = config.spatial_sizes()[4]
    return (batch, config.n_views, s, s, config.depths[4])


def make_dropout_masks(config, batch, rate, rng, dtype=np.float64):
    """Inverted-dropout masks for the Conv5 output of every view."""
    keep = rng.random(dropout_shape(config, batch)) >= rate
    return keep.astype(dtype) / (1.0 - rate)


class Trace(list):
    """Rows ``(layer, input_size, kernel, stride, depth, output_size)``."""


def _branch_forward(params, config, x, v, mask, trace):
    p = f"v{v}."
    caches = {}
    acts = []
    h = x
    for i, name in enumerate(CONV_NAMES[:5]):
        if i == 1:
            h = acts[0]
        elif i >= 2:
            size = acts[-1].shape[1]
            h = np.concatenate([L.center_crop(a, size) for a in acts], axis=-1)
        in_size = h.shape[1]
        z, caches[name] = L.conv2d_forward(h, params[p + name + ".W"], params[p + name + ".b"])
        a, _ = L.tanh_forward(z)
        acts.append(a)
        if trace is not None:
            label = "Conv 1" if i == 0 else f"Conv {i + 1} - Dense"
            trace.append((label, f"{in_size}x{in_size}", f"{config.kernels[i]}x{config.kernels[i]}",
                          "1x1", a.shape[-1], f"{a.shape[1]}x{a.shape[2]}"))
    a5 = acts[-1]
    a5d = a5 * mask if mask is not None else a5
    if trace is not None:
        s = a5.shape[1]
        trace.append(("Dropout", f"{s}x{s}", "-", "-", a5.shape[-1], f"{s}x{s}"))
    z6, caches["conv6"] = L.conv2d_forward(a5d, params[p + "conv6.W"], params[p + "conv6.b"])
    a6, _ = L.tanh_forward(z6)
    acts.append(a6)
    pooled, caches["pool1"] = L.maxpool2d_forward(a6, config.pool_kernel, 1)
    flat = pooled.reshape(len(x), -1)
    cp, caches["pool2"] = L.channel_pool_forward(flat, config.pool_window, config.pool_outputs)
    d, caches["dense"] = L.dense_forward(cp, params[p + "dense.W"], params[p + "dense.b"])
    if trace is not None:
        s6 = a5.shape[1]
        k6 = config.kernels[5]
        trace.append(("Conv 6", f"{s6}x{s6}", f"{k6}x{k6}", "1x1", a6.shape[-1],
                      f"{a6.shape[1]}x{a6.shape[2]}"))
        pk = config.pool_kernel
        trace.append(("Max. Pool 1", f"{a6.shape[1]}x{a6.shape[2]}", f"{pk}x{pk}", "1x1",
                      pooled.shape[-1], f"{pooled.shape[1]}x{pooled.shape[2]}"))
        w = config.pool_window
        trace.append(("Max. Pool 2", flat.shape[1], w, w, cp.shape[1], cp.shape[1]))
        trace.append(("Dense", cp.shape[1], "-", "-", "-", d.shape[1]))
    return d, (caches, acts, mask)


def forward(params, config, views, dropout_masks=None, trace=None):
    """Batched forward pass.

    Parameters
    ----------
    views : ndarray, shape (N, 3, P, P, S)
    dropout_masks : ndarray, optional
        Masks from :func:`make_dropout_masks`; ``None`` means inference.
    trace : list, optional
        Receives Table-1 style rows describing every layer.

    Returns
    -------
    pred : ndarray (N, 3)
        Unit vectors; rows whose pre-normalisation norm is below 1e-12 are
        replaced by ``+x``.
    cache : tuple
        Everything :func:`backward` needs.
    """
    views = np.asarray(views)
    N = views.shape[0]
    if views.shape[1:] != (config.n_views, config.patch, config.patch, config.shells):
        raise ConfigurationError(
            f"views must be (N, {config.n_views}, {config.patch}, {config.patch}, "
            f"{config.shells}), got {views.shape}")
    if trace is not None:
        trace.append(("Input", f"{config.patch}x{config.patch}", "-", "-", config.shells, "-"))
    outs, branch_caches = [], []
    for v in range(config.n_views):
        mask = None if dropout_masks is None else dropout_masks[:, v]
        d, bc = _branch_forward(params, config, views[:, v], v, mask,
                                trace if (trace is not None and v == 0) else None)
        outs.append(d)
        branch_caches.append(bc)
    cat = np.concatenate(outs, axis=1)
    z, fc_cache = L.dense_forward(cat, params["fc.W"], params["fc.b"])
    y, _ = L.tanh_forward(z)
    norm = np.linalg.norm(y, axis=1)
    degenerate = norm < NORM_EPS
    pred = np.where(degenerate[:, None], FALLBACK.astype(y.dtype),
                    y / np.where(degenerate, 1.0, norm)[:, None])
    if trace is not None:
        trace.append(("Concat", f"{config.dense_out} [x {config.n_views} views]", "-", "-",
                      cat.shape[1], cat.shape[1]))
        trace.append(("FC Output", cat.shape[1], "-", "-", "-", y.shape[1]))
    return pred, (branch_caches, fc_cache, y, norm, degenerate, N)


def predict(params, config, views, batch=256):
    """Inference in chunks; returns unit vectors ``(N, 3)``."""
    views = np.asarray(views)
    out = [forward(params, config, views[i:i + batch])[0] for i in range(0, len(views), batch)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, 3))


def _branch_backward(params, config, dd, v, bcache, grads):
    p = f"v{v}."
    caches, acts, mask = bcache
    dcp, grads[p + "dense.W"], grads[p + "dense.b"] = L.dense_backward(dd, caches["dense"])
    dflat = L.channel_pool_backward(dcp, caches["pool2"])
    a6 = acts[5]
    dpooled = dflat.reshape(len(dd), 1, 1, -1)
    da6 = L.maxpool2d_backward(dpooled, caches["pool1"])
    dz6 = L.tanh_backward(da6, a6)
    da5d, grads[p + "conv6.W"], grads[p + "conv6.b"] = L.conv2d_backward(dz6, caches["conv6"])
    da = [np.zeros_like(a) for a in acts[:5]]
    da[4] += da5d * mask if mask is not None else da5d
    for i in (4, 3, 2):
        dz = L.tanh_backward(da[i], acts[i])
        dh, grads[p + CONV_NAMES[i] + ".W"], grads[p + CONV_NAMES[i] + ".b"] = \
            L.conv2d_backward(dz, caches[CONV_NAMES[i]])
        start = 0
        for j in range(i):
            width = acts[j].shape[-1]
            da[j] += L.center_crop_backward(dh[..., start:start + width], acts[j].shape)
            start += width
    dz2 = L.tanh_backward(da[1], acts[1])
    dh1, grads[p + "conv2.W"], grads[p + "conv2.b"] = L.conv2d_backward(dz2, caches["conv2"])
    da[0] += dh1
    dz1 = L.tanh_backward(da[0], acts[0])
    _, grads[p + "conv1.W"], grads[p + "conv1.b"] = L.conv2d_backward(dz1, caches["conv1"])


def backward(params, config, cache, dpred):
    """Parameter gradients given ``dpred = dLoss/dpred`` of shape (N, 3).

    The normalisation ``pred = y / |y|`` is differentiated exactly;
    degenerate rows (fallback direction) contribute no gradient.
    """
    branch_caches, fc_cache, y, norm, degenerate, N = cache
    grads = {}
    safe = np.where(degenerate, 1.0, norm)[:, None]
    u = y / safe
    dy = (dpred - u * np.sum(u * dpred, axis=1, keepdims=True)) / safe
    dy = np.where(degenerate[:, None], 0.0, dy)
    dz = L.tanh_backward(dy, y)
    dcat, grads["fc.W"], grads["fc.b"] = L.dense_backward(dz, fc_cache)
    k = config.dense_out
    for v in range(config.n_views):
        _branch_backward(params, config, dcat[:, v * k:(v + 1) * k], v, branch_caches[v], grads)
    return grads


def axial_targets(targets, pred):
    """Targets flipped onto the prediction's hemisphere."""
    sign = np.where(np.sum(targets * pred, axis=1) < 0, -1.0, 1.0)
    return targets * sign[:, None]


def loss_gradient(params, config, views, targets, dropout_masks=None):
    """Summed axial atan2 loss over the batch and its parameter gradients.

    Returns ``(loss_sum, errors, grads_sum, n_degenerate)`` where ``errors``
    are per-sample angles; gradients are *sums* over samples (no L2).
    """
    pred, cache = forward(params, config, views, dropout_masks)
    t = axial_targets(np.asarray(targets, dtype=np.float64), pred.astype(np.float64))
    p64 = pred.astype(np.float64)
    errors = np.arctan2(np.linalg.norm(np.cross(t, p64), axis=1), np.sum(t * p64, axis=1))
    g, ok = atan2_grad_batch(t, p64)
    ok &= ~cache[4]
    g = np.where(ok[:, None], g, 0.0).astype(pred.dtype)
    grads = backward(params, config, cache, g)
    return float(errors.sum()), errors, grads, int((~ok).sum())


def l2_penalty(params, l2):
    """``l2 * sum(W^2)`` over weight tensors (biases excluded) and its gradient."""
    loss = 0.0
    grads = {}
    for name, w in params.items():
        if name.endswith(".W"):
            loss += float(np.sum(w.astype(np.float64) ** 2))
            grads[name] = 2.0 * l2 * w
    return l2 * loss, grads

"""Diffusion signal model, gradient tables and synthetic phantoms.

Tensors are passed around in their 6-component form
``(dxx, dyy, dzz, dxy, dxz, dyz)``; the quadratic form ``g^T D g`` is
always evaluated with the same elementwise expression so that scalar and
volume-wide synthesis agree to the last bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DataError, DomainError

#: Signals are clamped to this floor before storage so logs stay defined.
SIGNAL_FLOOR = 1e-12

GEOMETRIES = ("straight-fiber", "quarter-arc", "orthogonal-crossing")
_GEOMETRY_ALIASES = {
    "straight": "straight-fiber",
    "arc": "quarter-arc",
    "crossing": "orthogonal-crossing",
}

_UNIT_TOL = 1e-8
_RENORM_TOL = 1e-3


@dataclass(frozen=True)
class GradientTable:
    """Per-acquisition b-values (s/mm^2) and gradient directions.

    Parameters
    ----------
    bvals : array-like, shape (N,)
    bvecs : array-like, shape (N, 3)
        Unit vectors for every entry with ``b > 0``; baseline entries may
        carry a zero vector.
    """

    bvals: np.ndarray
    bvecs: np.ndarray

    def __post_init__(self):
        bvals = np.array(self.bvals, dtype=np.float64).reshape(-1)
        bvecs = np.array(self.bvecs, dtype=np.float64)
        if bvecs.ndim != 2 or bvecs.shape != (bvals.size, 3):
            raise DataError(
                f"bvecs must have shape ({bvals.size}, 3), got {bvecs.shape}")
        if not np.all(np.isfinite(bvals)) or not np.all(np.isfinite(bvecs)):
            raise DataError("gradient table contains non-finite values")
        if np.any(bvals < 0):
            raise DataError("b-values must be nonnegative")
        if not np.any(bvals == 0):
            raise DataError("gradient table needs at least one b=0 baseline")
        norms = np.linalg.norm(bvecs, axis=1)
        bad = (bvals > 0) & (np.abs(norms - 1.0) > _UNIT_TOL)
        if np.any(bad):
            raise DataError(
                f"gradient {int(np.argmax(bad))} with b>0 is not unit length")
        bvals.setflags(write=False)
        bvecs.setflags(write=False)
        object.__setattr__(self, "bvals", bvals)
        object.__setattr__(self, "bvecs", bvecs)

    def __len__(self):
        return self.bvals.size

    @property
    def entries(self):
        return [(float(b), tuple(float(c) for c in g))
                for b, g in zip(self.bvals, self.bvecs)]

    @classmethod
    def from_entries(cls, entries):
        bvals = [b for b, _ in entries]
        bvecs = [g for _, g in entries]
        return cls(np.asarray(bvals, float), np.asarray(bvecs, float).reshape(-1, 3))

    def n_directions(self, tol=1e-6):
        """Number of distinct (sign-agnostic) directions with ``b > 0``."""
        dirs = []
        for g in self.bvecs[self.bvals > 0]:
            if not any(abs(abs(float(g @ d)) - 1.0) < tol for d in dirs):
                dirs.append(g)
        return len(dirs)


@dataclass(frozen=True)
class AcquisitionParams:
    """Pulsed-gradient timing parameters in SI units."""

    gamma: float  # rad s^-1 T^-1
    G: float  # T/m
    delta: float  # s
    Delta: float  # s

    def __post_init__(self):
        for name in ("gamma", "G", "delta", "Delta"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise DomainError(f"{name} must be a finite nonnegative number")


def b_value(params):
    """Diffusion-sensitising factor in s/mm^2.

    ``(gamma G delta)^2 (Delta - delta/3)`` is evaluated in s/m^2 and scaled
    by 1e-6. Raises :class:`DomainError` when ``Delta < delta/3``.
    """
    bracket = params.Delta - params.delta / 3.0
    if bracket < 0:
        raise DomainError(
            f"Delta={params.Delta} < delta/3={params.delta / 3.0}: negative b-value")
    return (params.gamma * params.G * params.delta) ** 2 * bracket * 1e-6


def as_components(D):
    """Return the 6 unique components of a tensor given as 3x3 or 6-vector."""
    D = np.asarray(D, dtype=np.float64)
    if D.shape[-2:] == (3, 3):
        return np.stack([D[..., 0, 0], D[..., 1, 1], D[..., 2, 2],
                         D[..., 0, 1], D[..., 0, 2], D[..., 1, 2]], axis=-1)
    if D.shape[-1] == 6:
        return D
    raise ConfigurationError(f"cannot interpret tensor of shape {D.shape}")


def components_to_matrix(comps):
    comps = np.asarray(comps, dtype=np.float64)
    xx, yy, zz, xy, xz, yz = np.moveaxis(comps, -1, 0)
    return np.stack([np.stack([xx, xy, xz], -1),
                     np.stack([xy, yy, yz], -1),
                     np.stack([xz, yz, zz], -1)], axis=-2)


def quadratic_form(comps, bvecs):
    """``g^T D g`` for every tensor in ``comps[..., 6]`` and gradient row."""
    comps = np.asarray(comps, dtype=np.float64)[..., None, :]
    g = np.asarray(bvecs, dtype=np.float64)
    gx, gy, gz = g[..., 0], g[..., 1], g[..., 2]
    return (gx * gx * comps[..., 0] + gy * gy * comps[..., 1]
            + gz * gz * comps[..., 2] + 2.0 * gx * gy * comps[..., 3]
            + 2.0 * gx * gz * comps[..., 4] + 2.0 * gy * gz * comps[..., 5])


def synthesize_signals(comps, S0, table):
    """Noiseless signals for tensors ``comps[..., 6]`` over a whole table."""
    S0 = np.asarray(S0, dtype=np.float64)[..., None]
    return S0 * np.exp(-table.bvals * quadratic_form(comps, table.bvecs))


def synthesize_signal(D, S0, entry):
    """Signal ``S0 exp(-b g^T D g)`` for one ``(b, g)`` pair."""
    if S0 <= 0:
        raise DomainError("S0 must be positive")
    b, g = entry
    q = quadratic_form(as_components(D), np.asarray(g, float)[None, :])[..., 0]
    return float(S0 * np.exp(-float(b) * q))


def add_log_noise(signal, sigma, rng):
    """Perturb ``signal`` by Gaussian noise of std ``sigma`` on its log.

    ``sigma == 0`` returns an unmodified copy without touching the RNG.
    """
    if sigma < 0:
        raise DomainError("sigma must be nonnegative")
    signal = np.asarray(signal, dtype=np.float64)
    if np.any(signal <= 0):
        raise DomainError("log-domain noise requires positive signals")
    if sigma == 0:
        return signal.copy()
    return np.exp(np.log(signal) + rng.normal(0.0, sigma, size=signal.shape))


def add_linear_noise(signal, sigma, rng):
    """Additive Gaussian noise with absolute std ``sigma`` in signal units."""
    if sigma < 0:
        raise DomainError("sigma must be nonnegative")
    signal = np.asarray(signal, dtype=np.float64)
    if sigma == 0:
        return signal.copy()
    return signal + rng.normal(0.0, sigma, size=signal.shape)


# -- gradient tables --------------------------------------------------------

def six_direction_table(b=1000.0):
    """One baseline plus the 6 antipodal-pair directions of an icosahedron."""
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    dirs = np.array([[0, 1, phi], [0, -1, phi], [1, phi, 0],
                     [-1, phi, 0], [phi, 0, 1], [phi, 0, -1]], dtype=float)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return GradientTable(np.r_[0.0, np.full(6, float(b))], np.vstack([np.zeros(3), dirs]))


def dense_table(n=64, b=1000.0):
    """One baseline plus ``n`` golden-spiral directions on a hemisphere."""
    i = np.arange(n) + 0.5
    z = 1.0 - i / n
    r = np.sqrt(1.0 - z * z)
    theta = math.pi * (3.0 - math.sqrt(5.0)) * i
    dirs = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return GradientTable(np.r_[0.0, np.full(n, float(b))], np.vstack([np.zeros(3), dirs]))


def default_table(mode="six"):
    if mode in ("six", "6-shell"):
        return six_direction_table()
    if mode == "dense":
        return dense_table()
    raise ConfigurationError(f"unknown table mode {mode!r} (expected 'six' or 'dense')")


def _parse_rows(text, what):
    rows = [ln.split() for ln in text.strip().splitlines() if ln.strip()]
    try:
        return [[float(tok) for tok in row] for row in rows]
    except ValueError as exc:
        raise DataError(f"malformed number in {what}: {exc}") from None


def parse_gradient_table(bvals_text, bvecs_text):
    """Parse FSL-style ``bvals`` (one row) and ``bvecs`` (three rows) text.

    Gradients whose norm is off by at most 1e-3 are renormalised; larger
    deviations for ``b > 0`` are rejected, as are zero vectors with ``b > 0``.
    """
    bval_rows = _parse_rows(bvals_text, "bvals")
    if len(bval_rows) == 1:
        bvals = bval_rows[0]
    elif all(len(r) == 1 for r in bval_rows):
        bvals = [r[0] for r in bval_rows]
    else:
        raise DataError("bvals must be a single row of numbers")
    vec_rows = _parse_rows(bvecs_text, "bvecs")
    if len(vec_rows) != 3:
        raise DataError(f"bvecs must have 3 rows, got {len(vec_rows)}")
    n = len(bvals)
    for k, row in enumerate(vec_rows):
        if len(row) != n:
            raise DataError(
                f"column-count mismatch: bvals has {n} entries, bvecs row {k} has {len(row)}")
    vecs = np.array(vec_rows, dtype=np.float64).T
    for j in range(n):
        norm = float(np.linalg.norm(vecs[j]))
        if norm == 0.0:
            if bvals[j] > 0:
                raise DataError(f"zero gradient for entry {j} with b={bvals[j]}")
            continue
        dev = abs(norm - 1.0)
        if dev > _RENORM_TOL:
            if bvals[j] > 0:
                raise DataError(
                    f"gradient {j} has norm {norm:.6g}; deviation exceeds {_RENORM_TOL}")
            vecs[j] = vecs[j] / norm
        elif dev > 1e-12:
            # already-unit vectors are left untouched so text round-trips stay exact
            vecs[j] = vecs[j] / norm
    return GradientTable(np.array(bvals), vecs)


def format_gradient_table(table):
    """Serialise to ``(bvals_text, bvecs_text)``; exact under re-parsing."""
    bvals = " ".join(repr(float(b)) for b in table.bvals) + "\n"
    bvecs = "".join(" ".join(repr(float(c)) for c in table.bvecs[:, k]) + "\n"
                    for k in range(3))
    return bvals, bvecs


# -- volumes and phantoms ---------------------------------------------------

@dataclass(frozen=True)
class DwiVolume:
    """4D signal field indexed ``(x, y, z, shell)`` with voxel size in mm."""

    data: np.ndarray
    voxel_size: tuple
    table: GradientTable

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 4:
            raise DataError(f"DWI data must be 4D, got shape {data.shape}")
        if data.shape[3] != len(self.table):
            raise DataError(
                f"volume has {data.shape[3]} shells but table has {len(self.table)} entries")
        if np.any(~np.isfinite(data)) or np.any(data <= 0):
            raise DataError("stored signals must be finite and positive")
        vs = tuple(float(v) for v in self.voxel_size)
        if len(vs) != 3 or min(vs) <= 0:
            raise DataError("voxel_size must be three positive numbers")
        object.__setattr__(self, "voxel_size", vs)
        object.__setattr__(self, "data", data)

    @property
    def dims(self):
        return self.data.shape

    @property
    def shape3(self):
        return self.data.shape[:3]

    def contains(self, voxel):
        return all(0 <= int(v) < n for v, n in zip(voxel, self.shape3))


@dataclass(frozen=True)
class PhantomSpec:
    """Description of a synthetic phantom.

    ``noise_sigma`` is the standard deviation of the Gaussian perturbation of
    the log-signal and has no default on purpose.
    """

    geometry: str
    noise_sigma: float
    eigenvalues: tuple = (1.7e-3, 0.2e-3, 0.2e-3)
    baseline_S0: float = 100.0
    rng_seed: int = 0
    radius: float = 2.0
    noise_domain: str = "log"

    def __post_init__(self):
        geom = _GEOMETRY_ALIASES.get(self.geometry, self.geometry)
        if geom not in GEOMETRIES:
            raise ConfigurationError(f"unknown geometry {self.geometry!r}")
        object.__setattr__(self, "geometry", geom)
        l1, l2, l3 = (float(v) for v in self.eigenvalues)
        if not (l1 >= l2 >= l3 > 0):
            raise ConfigurationError("eigenvalues must satisfy l1 >= l2 >= l3 > 0")
        object.__setattr__(self, "eigenvalues", (l1, l2, l3))
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be nonnegative")
        if self.baseline_S0 <= 0:
            raise ConfigurationError("baseline_S0 must be positive")
        if self.radius < 0.5:
            raise ConfigurationError("fiber radius must be at least 0.5 voxel")
        if self.noise_domain not in ("log", "linear"):
            raise ConfigurationError("noise_domain must be 'log' or 'linear'")


@dataclass(frozen=True)
class GroundTruth:
    """Fiber tangent field, in-fiber mask and crossing-overlap mask."""

    directions: np.ndarray  # (nx, ny, nz, 3), zero outside the fiber
    mask: np.ndarray  # (nx, ny, nz) bool
    crossing: np.ndarray = field(default=None)


def fiber_tensor(direction, eigenvalues):
    """6-component tensors whose principal axis is ``direction[..., 3]``."""
    t = np.asarray(direction, dtype=np.float64)
    t = t / np.linalg.norm(t, axis=-1, keepdims=True)
    helper = np.zeros_like(t)
    helper[..., 2] = 1.0
    near_z = np.abs(t[..., 2]) > 0.9
    helper[near_z] = (1.0, 0.0, 0.0)
    e2 = np.cross(helper, t)
    e2 /= np.linalg.norm(e2, axis=-1, keepdims=True)
    e3 = np.cross(t, e2)
    l1, l2, l3 = eigenvalues
    M = (l1 * t[..., :, None] * t[..., None, :]
         + l2 * e2[..., :, None] * e2[..., None, :]
         + l3 * e3[..., :, None] * e3[..., None, :])
    return as_components(M)


def _phantom_geometry(spec, dims):
    nx, ny, nz = dims
    x, y, z = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    r = spec.radius
    tang = np.zeros((nx, ny, nz, 3))
    crossing = np.zeros((nx, ny, nz), bool)
    if spec.geometry == "straight-fiber":
        cy, cz = ny // 2, nz // 2
        if r > min(cy, cz, ny - 1 - cy, nz - 1 - cz):
            raise ConfigurationError("straight fiber radius does not fit the volume")
        mask = (y - cy) ** 2 + (z - cz) ** 2 <= r * r
        tang[mask] = (1.0, 0.0, 0.0)
    elif spec.geometry == "quarter-arc":
        R = 0.55 * min(nx, ny)
        cz = nz // 2
        if R - r < 1.0 or R + r > min(nx, ny) - 1 or r > min(cz, nz - 1 - cz):
            raise ConfigurationError("quarter arc does not fit the volume")
        rho = np.hypot(x, y)
        mask = (rho - R) ** 2 + (z - cz) ** 2 <= r * r
        phi = np.arctan2(y, x)
        tang[..., 0] = -np.sin(phi)
        tang[..., 1] = np.cos(phi)
        tang[~mask] = 0.0
    else:
        cx, cy, cz = nx // 2, ny // 2, nz // 2
        if r > min(cx, cy, cz, nx - 1 - cx, ny - 1 - cy, nz - 1 - cz):
            raise ConfigurationError("crossing fibers do not fit the volume")
        along_x = (y - cy) ** 2 + (z - cz) ** 2 <= r * r
        along_y = (x - cx) ** 2 + (z - cz) ** 2 <= r * r
        mask = along_x | along_y
        crossing = along_x & along_y
        tang[along_y] = (0.0, 1.0, 0.0)
        tang[along_x] = (1.0, 0.0, 0.0)
    return mask, tang, crossing


def generate_phantom(spec, dims, table, voxel_size=(1.5, 1.5, 1.5)):
    """Synthesize a DWI volume with known fiber geometry.

    In-fiber voxels get a tensor whose principal axis is the local fiber
    tangent; all other voxels are isotropic with the phantom's mean
    diffusivity. In the crossing phantom the overlap carries an equal-weight
    mixture of both fiber signals.

    Returns
    -------
    volume : DwiVolume
    truth : GroundTruth
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or min(dims) < 16:
        raise ConfigurationError(f"phantom dims must be >= 16 per axis, got {dims}")
    mask, tang, crossing = _phantom_geometry(spec, dims)

    md = sum(spec.eigenvalues) / 3.0
    comps = np.zeros(dims + (6,))
    comps[..., :3] = md
    comps[mask] = fiber_tensor(tang[mask], spec.eigenvalues)
    S0 = np.full(dims, spec.baseline_S0)
    data = synthesize_signals(comps, S0, table)
    if crossing.any():
        other = fiber_tensor(np.tile([0.0, 1.0, 0.0], (int(crossing.sum()), 1)),
                             spec.eigenvalues)
        data[crossing] = 0.5 * data[crossing] + 0.5 * synthesize_signals(
            other, S0[crossing], table)

    rng = np.random.default_rng(spec.rng_seed)
    if spec.noise_domain == "log":
        data = add_log_noise(data, spec.noise_sigma, rng)
    else:
        data = add_linear_noise(data, spec.noise_sigma, rng)
    data = np.maximum(data, SIGNAL_FLOOR)

    volume = DwiVolume(data, voxel_size, table)
    return volume, GroundTruth(tang, mask, crossing)


def arc_tangent(voxel):
    """Analytic tangent of the quarter-arc phantom at a voxel index."""
    phi = math.atan2(voxel[1], voxel[0])
    return np.array([-math.sin(phi), math.cos(phi), 0.0])

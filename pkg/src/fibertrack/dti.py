"""Log-linear tensor estimation, eigendecomposition and scalar maps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dwi import as_components, components_to_matrix
from .errors import ConfigurationError, FitError

#: Eigenvalue floor applied before FA/MD and nuisance parameters (mm^2/s).
EIGENVALUE_FLOOR = 1e-9

JACOBI_TOL = 1e-13
JACOBI_MAX_SWEEPS = 64
RANK_RTOL = 1e-12


@dataclass(frozen=True)
class DiffusionTensor:
    """The 6 unique components of a symmetric diffusion tensor (mm^2/s)."""

    dxx: float
    dyy: float
    dzz: float
    dxy: float
    dxz: float
    dyz: float

    @classmethod
    def from_components(cls, comps):
        return cls(*(float(c) for c in as_components(comps)))

    @property
    def components(self):
        return np.array([self.dxx, self.dyy, self.dzz, self.dxy, self.dxz, self.dyz])

    @property
    def matrix(self):
        return components_to_matrix(self.components)


@dataclass(frozen=True)
class TensorDecomposition:
    """Eigenvalues sorted descending and matching unit eigenvectors.

    ``eigenvectors[i]`` is the i-th eigenvector. Eigenvalues are the raw
    (possibly negative) values of the fit; use :meth:`clamped` before
    computing scalar maps.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def clamped(self, floor=EIGENVALUE_FLOOR):
        return TensorDecomposition(np.maximum(self.eigenvalues, floor), self.eigenvectors)

    def reconstruct(self):
        V = self.eigenvectors
        return np.einsum("i,ia,ib->ab", self.eigenvalues, V, V)


@dataclass(frozen=True)
class VoxelModelParams:
    """Parameters of the constrained single-fiber voxel model.

    ``sigma`` is the signal-domain noise level entering the likelihood; it is
    derived from the log-residual estimate as ``sigma_log * mu0`` so that the
    likelihood's ``mu_j / sigma`` weighting equals the inverse log-domain
    standard deviation at the baseline.
    """

    mu0: float
    alpha: float
    beta: float
    v_hat: np.ndarray
    sigma: float


# -- fitting ----------------------------------------------------------------

def design_matrix(table):
    """Rows ``(1, -b gx^2, -b gy^2, -b gz^2, -2b gx gy, -2b gx gz, -2b gy gz)``."""
    b = table.bvals
    g = table.bvecs
    gx, gy, gz = g[:, 0], g[:, 1], g[:, 2]
    return np.stack([np.ones_like(b), -b * gx * gx, -b * gy * gy, -b * gz * gz,
                     -2 * b * gx * gy, -2 * b * gx * gz, -2 * b * gy * gz], axis=1)


class TensorFitter:
    """Precomputed least-squares solver for one gradient table.

    The pseudo-inverse is built from an SVD (orthogonal factorisation) once
    and applied to any number of voxels.
    """

    def __init__(self, table):
        if len(table) < 7:
            raise ConfigurationError(
                f"tensor fit needs at least 7 measurements, table has {len(table)}")
        if table.n_directions() < 6:
            raise ConfigurationError(
                "tensor fit needs at least 6 distinct gradient directions with b>0")
        X = design_matrix(table)
        U, s, Vt = np.linalg.svd(X, full_matrices=False)
        if s[-1] < RANK_RTOL * s[0]:
            raise FitError(
                f"design matrix is rank deficient (singular values {s[0]:.3g}..{s[-1]:.3g})")
        self.table = table
        self.X = X
        self.pinv = (Vt.T / s) @ U.T
        self.dof = len(table) - 7

    def fit(self, signals):
        """Fit ``signals[..., N]``; returns ``(comps[..., 6], S0, sigma_log)``."""
        signals = np.asarray(signals, dtype=np.float64)
        if signals.shape[-1] != len(self.table):
            raise ConfigurationError(
                f"expected {len(self.table)} signals per voxel, got {signals.shape[-1]}")
        if np.any(signals <= 0):
            raise ConfigurationError("tensor fit requires strictly positive signals")
        y = np.log(signals)
        coef = y @ self.pinv.T
        resid = y - coef @ self.X.T
        if self.dof > 0:
            sigma = np.sqrt(np.sum(resid * resid, axis=-1) / self.dof)
        else:
            sigma = np.zeros(y.shape[:-1])
        return coef[..., 1:], np.exp(coef[..., 0]), sigma


def fit_tensor(signals, table):
    """Fit one voxel; returns ``(DiffusionTensor, S0_est, sigma_est)``."""
    comps, S0, sigma = TensorFitter(table).fit(np.asarray(signals, float))
    return DiffusionTensor.from_components(comps), float(S0), float(sigma)


# -- eigendecomposition -----------------------------------------------------

def _jacobi_rotate(A, V, p, q):
    apq = A[:, p, q]
    active = apq != 0.0
    if not active.any():
        return A, V
    safe = np.where(active, apq, 1.0)
    with np.errstate(over="ignore"):
        # |theta| = inf for denormal a_pq gives t = 0, i.e. no rotation
        theta = (A[:, q, q] - A[:, p, p]) / (2.0 * safe)
        t = np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0))
    t = np.where(theta == 0.0, 1.0, t)
    t = np.where(active, t, 0.0)
    c = 1.0 / np.sqrt(t * t + 1.0)
    s = t * c
    J = np.zeros_like(A)
    J[:, 0, 0] = J[:, 1, 1] = J[:, 2, 2] = 1.0
    J[:, p, p] = c
    J[:, q, q] = c
    J[:, p, q] = s
    J[:, q, p] = -s
    A = np.swapaxes(J, 1, 2) @ A @ J
    # annihilated entries are set exactly to restore symmetry
    A[:, p, q] = np.where(active, 0.0, A[:, p, q])
    A[:, q, p] = A[:, p, q]
    return A, V @ J


def jacobi_eigh(matrices, tol=JACOBI_TOL, max_sweeps=JACOBI_MAX_SWEEPS):
    """Cyclic Jacobi diagonalisation of a stack of symmetric 3x3 matrices.

    Converges when the off-diagonal Frobenius norm of every matrix is at most
    ``tol`` times its full Frobenius norm.

    Returns
    -------
    evals : ndarray, shape (M, 3)
        Unsorted eigenvalues (the final diagonal).
    evecs : ndarray, shape (M, 3, 3)
        Eigenvectors as columns.
    """
    A = np.array(matrices, dtype=np.float64).reshape(-1, 3, 3)
    V = np.broadcast_to(np.eye(3), A.shape).copy()
    scale = np.sqrt(np.sum(A * A, axis=(1, 2)))
    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * (A[:, 0, 1] ** 2 + A[:, 0, 2] ** 2 + A[:, 1, 2] ** 2))
        if np.all(off <= tol * scale):
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            A, V = _jacobi_rotate(A, V, p, q)
    else:
        off = np.sqrt(2.0 * (A[:, 0, 1] ** 2 + A[:, 0, 2] ** 2 + A[:, 1, 2] ** 2))
        if not np.all(off <= tol * scale):
            raise FitError(f"Jacobi iteration did not converge in {max_sweeps} sweeps")
    return np.diagonal(A, axis1=1, axis2=2).copy(), V


def eigendecompose_field(comps):
    """Vectorised eigendecomposition of ``comps[..., 6]``.

    Returns ``(evals[..., 3], evecs[..., 3, 3])`` with eigenvalues sorted
    descending and ``evecs[..., i, :]`` the i-th eigenvector, each flipped so
    its largest-magnitude component is positive (ties: earliest axis).
    """
    comps = np.asarray(comps, dtype=np.float64)
    lead = comps.shape[:-1]
    if not np.all(np.isfinite(comps)):
        raise FitError("tensor components must be finite")
    evals, V = jacobi_eigh(components_to_matrix(comps.reshape(-1, 6)))
    order = np.argsort(-evals, axis=1, kind="stable")
    evals = np.take_along_axis(evals, order, axis=1)
    vecs = np.take_along_axis(np.swapaxes(V, 1, 2), order[:, :, None], axis=1)
    big = np.argmax(np.abs(vecs), axis=2)
    sign = np.sign(np.take_along_axis(vecs, big[:, :, None], axis=2))
    sign[sign == 0] = 1.0
    vecs = vecs * sign
    return evals.reshape(lead + (3,)), vecs.reshape(lead + (3, 3))


def eigendecompose(D):
    """Eigendecomposition of a single tensor (``DiffusionTensor``, 3x3 or 6-vector)."""
    comps = D.components if isinstance(D, DiffusionTensor) else as_components(D)
    evals, vecs = eigendecompose_field(comps)
    return TensorDecomposition(evals, vecs)


# -- scalar maps ------------------------------------------------------------

def mean_diffusivity(D):
    """``(Dxx + Dyy + Dzz) / 3``; accepts tensors or ``comps[..., 6]``."""
    comps = D.components if isinstance(D, DiffusionTensor) else as_components(D)
    return (comps[..., 0] + comps[..., 1] + comps[..., 2]) / 3.0


def fractional_anisotropy(evals, with_flag=False):
    """Fractional anisotropy from eigenvalues ``evals[..., 3]``.

    Accepts a :class:`TensorDecomposition`. An all-zero spectrum yields 0;
    with ``with_flag=True`` a boolean degenerate mask is returned as well.
    """
    if isinstance(evals, TensorDecomposition):
        evals = evals.eigenvalues
    ev = np.asarray(evals, dtype=np.float64)
    l1, l2, l3 = ev[..., 0], ev[..., 1], ev[..., 2]
    denom = l1 * l1 + l2 * l2 + l3 * l3
    degenerate = denom == 0
    num = 0.5 * ((l1 - l2) ** 2 + (l2 - l3) ** 2 + (l3 - l1) ** 2)
    fa = np.sqrt(num / np.where(degenerate, 1.0, denom))
    fa = np.clip(np.where(degenerate, 0.0, fa), 0.0, 1.0)
    if fa.ndim == 0:
        fa, degenerate = float(fa), bool(degenerate)
    return (fa, degenerate) if with_flag else fa


def nuisance_params(decomp, S0_est, sigma_est):
    """Model parameters of one voxel from its (clamped) decomposition.

    ``alpha = (l2 + l3)/2``, ``beta = max(l1 - alpha, 0)``, ``v_hat = e1``,
    ``mu0 = S0_est``. ``sigma_est`` is the log-domain residual std; the
    stored ``sigma`` is its signal-domain equivalent ``sigma_est * S0_est``.
    """
    l1, l2, l3 = (float(v) for v in decomp.eigenvalues)
    alpha = 0.5 * (l2 + l3)
    beta = max(l1 - alpha, 0.0)
    return VoxelModelParams(float(S0_est), alpha, beta,
                            np.array(decomp.eigenvectors[0], dtype=float),
                            float(sigma_est) * float(S0_est))


# -- whole-volume fit -------------------------------------------------------

@dataclass(frozen=True)
class TensorField:
    """Per-voxel fit of a whole DWI volume.

    ``evals`` are clamped to :data:`EIGENVALUE_FLOOR`; ``raw_evals`` keep the
    values the solver produced.
    """

    comps: np.ndarray
    S0: np.ndarray
    sigma: np.ndarray
    raw_evals: np.ndarray
    evals: np.ndarray
    evecs: np.ndarray
    fa: np.ndarray
    md: np.ndarray

    @property
    def shape(self):
        return self.fa.shape

    @property
    def v1(self):
        return self.evecs[..., 0, :]

    def decomposition(self, voxel):
        i = tuple(int(v) for v in voxel)
        return TensorDecomposition(self.evals[i], self.evecs[i])

    def voxel_params(self, voxel, sigma_floor=0.0, sigma_override=None):
        """Model parameters at ``voxel``; the log-domain sigma is floored."""
        i = tuple(int(v) for v in voxel)
        s = float(self.sigma[i]) if sigma_override is None else float(sigma_override)
        return nuisance_params(self.decomposition(i), self.S0[i], max(s, sigma_floor))


def fit_volume(volume):
    """Fit every voxel of a :class:`~fibertrack.dwi.DwiVolume`."""
    comps, S0, sigma = TensorFitter(volume.table).fit(volume.data)
    raw, vecs = eigendecompose_field(comps)
    evals = np.maximum(raw, EIGENVALUE_FLOOR)
    return TensorField(comps, S0, sigma, raw, evals, vecs,
                       fractional_anisotropy(evals), evals.mean(axis=-1))

"""Small symmetric-matrix helpers shared by the simulator and the detector."""

import numpy as np

SYMMETRY_TOL = 1e-9
PSD_TOL = 1e-12


class MatrixError(ValueError):
    """Raised when a matrix violates a symmetry or definiteness requirement."""


def _check_symmetric(m, name):
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise MatrixError(f"{name} must be square, got shape {m.shape}")
    scale = max(1.0, float(np.max(np.abs(m))) if m.size else 1.0)
    if not np.allclose(m, m.T, atol=SYMMETRY_TOL * scale, rtol=0.0):
        raise MatrixError(f"{name} is not symmetric")
    return 0.5 * (m + m.T)


def psd_sqrt(cov, name="cov"):
    """Principal square root of a symmetric positive semidefinite matrix.

    Eigenvalues down to ``-PSD_TOL * max(1, |lambda|_max)`` are clamped to
    zero; anything more negative is treated as indefinite.
    """
    m = _check_symmetric(cov, name)
    if m.size == 0:
        return m
    w, u = np.linalg.eigh(m)
    floor = -PSD_TOL * max(1.0, float(np.max(np.abs(w))))
    if w.min() < floor:
        raise MatrixError(f"{name} is indefinite (min eigenvalue {w.min():.3e})")
    w = np.clip(w, 0.0, None)
    return (u * np.sqrt(w)) @ u.T


def inv_sqrt_spd(m, name="matrix"):
    """Principal inverse square root ``m^{-1/2}`` of a symmetric positive definite matrix."""
    m = _check_symmetric(m, name)
    w, u = np.linalg.eigh(m)
    if w.min() <= 0.0:
        raise MatrixError(f"{name} is not positive definite (min eigenvalue {w.min():.3e})")
    return (u / np.sqrt(w)) @ u.T


def psd_sqrt_stack(covs, name="cov"):
    """Principal square roots of an ``(N, s, s)`` stack of PSD matrices (batched eigh)."""
    covs = np.ascontiguousarray(np.asarray(covs, dtype=float))
    if covs.ndim != 3 or covs.shape[1] != covs.shape[2]:
        raise MatrixError(f"{name} must be an (N, s, s) stack, got shape {covs.shape}")
    if covs.shape[0] == 0 or covs.shape[1] == 0:
        return covs.copy()
    asym = np.abs(covs - np.swapaxes(covs, 1, 2)).reshape(len(covs), -1).max(axis=1)
    scale = np.maximum(1.0, np.abs(covs).reshape(len(covs), -1).max(axis=1))
    if np.any(asym > SYMMETRY_TOL * scale):
        raise MatrixError(f"{name}[{int(np.argmax(asym > SYMMETRY_TOL * scale))}] is not symmetric")
    w, u = np.linalg.eigh(0.5 * (covs + np.swapaxes(covs, 1, 2)))
    floor = -PSD_TOL * np.maximum(1.0, np.abs(w).max(axis=1))
    bad = w.min(axis=1) < floor
    if np.any(bad):
        k = int(np.argmax(bad))
        raise MatrixError(f"{name}[{k}] is indefinite (min eigenvalue {w[k].min():.3e})")
    w = np.clip(w, 0.0, None)
    return np.ascontiguousarray((u * np.sqrt(w)[:, None, :]) @ np.swapaxes(u, 1, 2))


def draw_gaussian(cov, rng):
    """Draw one sample of ``N(0, cov)`` as ``F z`` with ``F F^T = cov`` and ``z`` standard normal."""
    f = psd_sqrt(cov)
    return f @ rng.standard_normal(f.shape[0])

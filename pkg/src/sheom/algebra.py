"""Dense complex operator algebra on a finite-dimensional Hilbert space.

Operators are plain ``numpy.ndarray`` square matrices (complex128).  All
energies and rates are expressed in one arbitrary frequency unit with
``hbar = 1``; system dimensions are small (qubit to a few tens), so dense
storage is used throughout.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import DimensionError

HERM_TOL = 1e-12


def as_operator(entries) -> np.ndarray:
    """Coerce to a square complex matrix, checking shape and finiteness."""
    op = np.asarray(entries, dtype=complex)
    if op.ndim != 2 or op.shape[0] != op.shape[1]:
        raise DimensionError(f"operator must be square, got shape {op.shape}")
    if not np.all(np.isfinite(op)):
        raise ValueError("operator has non-finite entries")
    return op


def require_same_dim(*ops: np.ndarray) -> int:
    dims = {op.shape[0] for op in ops}
    if len(dims) != 1:
        raise DimensionError(f"operator dimensions differ: {sorted(dims)}")
    return dims.pop()


def dag(a: np.ndarray) -> np.ndarray:
    return a.conj().T


def hermiticity_defect(a: np.ndarray) -> float:
    """max |A - A^dag| entrywise, the absolute Hermiticity violation."""
    return float(np.max(np.abs(a - dag(a)))) if a.size else 0.0


def is_hermitian(a: np.ndarray, tol: float = HERM_TOL) -> bool:
    scale = max(float(np.max(np.abs(a))), 1.0)
    return hermiticity_defect(a) <= tol * scale


def commutator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b - b @ a


def anticommutator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b + b @ a


def dissipator(a: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Lindblad dissipator D[A] rho = A rho A^dag - {A^dag A, rho} / 2.

    Trace-free for any input; preserves Hermiticity of Hermitian ``rho``.
    """
    a = np.asarray(a, dtype=complex)
    rho = np.asarray(rho, dtype=complex)
    require_same_dim(a, rho)
    ad = dag(a)
    ada = ad @ a
    return a @ rho @ ad - 0.5 * (ada @ rho + rho @ ada)


def meas_superop(a: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """Conditioning superoperator H[A] rho = A rho + rho A^dag - Tr[(A+A^dag) rho] rho.

    This is the traceless nonlinear update produced by homodyne conditioning.
    ``rho`` is expected to carry unit trace; the trace functional makes the
    result traceless and Hermitian for Hermitian ``rho``.
    """
    a = np.asarray(a, dtype=complex)
    rho = np.asarray(rho, dtype=complex)
    require_same_dim(a, rho)
    ad = dag(a)
    scalar = np.trace((a + ad) @ rho)
    return a @ rho + rho @ ad - scalar * rho


class SpectralDecomposition(NamedTuple):
    """Eigenvalues (ascending, real) and orthonormal eigenvector columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ dag(v)


def eigendecompose(h: np.ndarray, tol: float = 1e-10) -> SpectralDecomposition:
    """Spectral decomposition of a Hermitian operator via a standard solver.

    Raises if ``h`` is not Hermitian.  Degenerate eigenvalues are allowed.
    """
    h = as_operator(h)
    scale = max(float(np.max(np.abs(h))), 1.0)
    if hermiticity_defect(h) > 1e-10 * scale:
        raise ValueError("eigendecompose requires a Hermitian operator")
    evals, evecs = np.linalg.eigh(h)
    return SpectralDecomposition(evals, evecs)


def expectation(a: np.ndarray, rho: np.ndarray) -> complex:
    """Tr[A rho]; real (within roundoff) for Hermitian A and rho."""
    a = np.asarray(a, dtype=complex)
    rho = np.asarray(rho, dtype=complex)
    require_same_dim(a, rho)
    return complex(np.trace(a @ rho))


def spectral_norm(a: np.ndarray) -> float:
    return float(np.linalg.norm(a, 2)) if a.size else 0.0


def trace_norm(a: np.ndarray) -> float:
    """Sum of singular values (nuclear norm)."""
    return float(np.sum(np.linalg.svd(a, compute_uv=False))) if a.size else 0.0


def trace_distance(rho: np.ndarray, sigma: np.ndarray) -> float:
    return 0.5 * trace_norm(np.asarray(rho) - np.asarray(sigma))


# Qubit constants, used pervasively in tests and model builders.
SIGMA_X = np.array([[0.0, 1.0], [1.0, 0.0]], dtype=complex)
SIGMA_Y = np.array([[0.0, -1.0j], [1.0j, 0.0]], dtype=complex)
SIGMA_Z = np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)
SIGMA_MINUS = np.array([[0.0, 0.0], [1.0, 0.0]], dtype=complex)  # |g><e|, basis (e, g)
SIGMA_PLUS = SIGMA_MINUS.conj().T
IDENTITY_2 = np.eye(2, dtype=complex)


def annihilation(n_levels: int) -> np.ndarray:
    """Truncated bosonic lowering operator on ``n_levels`` Fock states."""
    a = np.zeros((n_levels, n_levels), dtype=complex)
    ns = np.arange(1, n_levels)
    a[ns - 1, ns] = np.sqrt(ns)
    return a


def vec(rho: np.ndarray) -> np.ndarray:
    """Row-major flattening used by the superoperator machinery."""
    return np.asarray(rho, dtype=complex).reshape(-1)


def unvec(v: np.ndarray, dim: int) -> np.ndarray:
    return np.asarray(v, dtype=complex).reshape(dim, dim)


def spre(a: np.ndarray) -> np.ndarray:
    """Superoperator of left multiplication: vec(A rho) = spre(A) vec(rho)."""
    a = np.asarray(a, dtype=complex)
    return np.kron(a, np.eye(a.shape[0], dtype=complex))


def spost(a: np.ndarray) -> np.ndarray:
    """Superoperator of right multiplication: vec(rho A) = spost(A) vec(rho)."""
    a = np.asarray(a, dtype=complex)
    return np.kron(np.eye(a.shape[0], dtype=complex), a.T)


def comm_superop(a: np.ndarray) -> np.ndarray:
    return spre(a) - spost(a)


def dissipator_superop(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=complex)
    ada = dag(a) @ a
    return spre(a) @ spost(dag(a)) - 0.5 * (spre(ada) + spost(ada))

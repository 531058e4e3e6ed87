"""Dispersive-frame operators for a system probed by a far-detuned cavity.

Starting from a system Hamiltonian H_S, a coupling operator mu (the system
side of mu (a + a^dag)) and the cavity frequency omega_c, the frame change
produces the operators that drive everything downstream:

    X       = sum_jk mu_jk / (omega_c + W_j - W_k) |j><k|   (H_S eigenbasis)
    O_S     = [mu, X^dag - X] / 2          (the measured system observable)
    Lambda  = [X^dag, X] / 2               (reservoir-induced observable part)
    H_S^D   = H_S - (X^dag mu + mu X) / 2  (shifted system Hamiltonian)
    S~_m    = S_m - {X^dag X, S_m}/2 + X^dag S_m X
    Q_m     = (D[X] + D[X^dag]) S_m        (cavity-occupation-dependent part)
    F~_m    = S~_m + Q_m |alpha|^2
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .algebra import (
    anticommutator,
    as_operator,
    commutator,
    dag,
    dissipator,
    eigendecompose,
    require_same_dim,
    spectral_norm,
    trace_norm,
)
from .errors import ResonanceError

#: Denominators below this (frequency units) abort the frame construction.
RESONANCE_TOL = 1e-9

#: dispersive_ratio above this triggers a diagnostic warning (not an error).
DISPERSIVE_RATIO_WARN = 0.3


@dataclass(frozen=True)
class DriveSpec:
    """Classical multi-tone drive: one cavity tone plus system tones.

    ``system_tones`` is a list of (amplitude, frequency) pairs addressing
    system transitions through the X channel; the cavity tone (E_p, omega_p)
    sets the intracavity amplitude and enters the reduced dynamics only
    through it.
    """

    E_p: complex = 0.0
    omega_p: float = 0.0
    system_tones: tuple[tuple[complex, float], ...] = ()

    def __post_init__(self):
        freqs = [self.omega_p] + [w for _, w in self.system_tones]
        if not np.all(np.isfinite(freqs)):
            raise ValueError("drive frequencies must be finite")


@dataclass(frozen=True)
class DispersiveFrame:
    """All dispersive-frame operators plus validity diagnostics."""

    X: np.ndarray
    O_S: np.ndarray
    Lambda: np.ndarray
    H_S_D: np.ndarray
    S_tilde: tuple[np.ndarray, ...]
    Q: tuple[np.ndarray, ...]
    F_tilde: tuple[np.ndarray, ...]
    alpha_sq: float
    dispersive_ratio: float = 0.0
    couplings: tuple[np.ndarray, ...] = field(default=(), repr=False)

    @property
    def dim(self) -> int:
        return self.X.shape[0]

    @property
    def n_env(self) -> int:
        return len(self.S_tilde)


def build_X(h_s: np.ndarray, mu: np.ndarray, omega_c: float) -> np.ndarray:
    """Dispersive generator X in the input basis.

    Assembled element-wise in the H_S eigenbasis and rotated back.  Raises
    ``ResonanceError`` when any matrix element of ``mu`` connects levels
    whose transition frequency lies within ``RESONANCE_TOL`` of omega_c.
    """
    h_s = as_operator(h_s)
    mu = as_operator(mu)
    require_same_dim(h_s, mu)
    evals, v = eigendecompose(h_s)
    mu_eig = dag(v) @ mu @ v
    denom = omega_c + evals[:, None] - evals[None, :]
    coupled = np.abs(mu_eig) > 0
    if np.any(coupled & (np.abs(denom) < RESONANCE_TOL)):
        raise ResonanceError(
            f"omega_c = {omega_c} is resonant with a system transition "
            "addressed by the coupling operator"
        )
    x_eig = np.where(coupled, mu_eig / np.where(np.abs(denom) < RESONANCE_TOL, 1.0, denom), 0.0)
    return v @ x_eig @ dag(v)


def _dispersive_ratio(h_s: np.ndarray, mu: np.ndarray, omega_c: float) -> float:
    evals, v = eigendecompose(h_s)
    mu_eig = dag(v) @ mu @ v
    denom = omega_c + evals[:, None] - evals[None, :]
    coupled = np.abs(mu_eig) > 0
    if not np.any(coupled):
        return 0.0
    safe = np.where(np.abs(denom) < RESONANCE_TOL, np.inf, np.abs(denom))
    return float(np.max(np.abs(mu_eig)[coupled] / safe[coupled]))


def build_frame(
    h_s: np.ndarray,
    mu: np.ndarray,
    couplings: list[np.ndarray],
    omega_c: float,
    alpha_sq: float,
) -> DispersiveFrame:
    """Construct the full dispersive frame for given |alpha|^2.

    ``couplings`` are the bare system-environment operators S_m, one per
    environment.
    """
    h_s = as_operator(h_s)
    mu = as_operator(mu)
    x = build_X(h_s, mu, omega_c)
    xd = dag(x)
    o_s = 0.5 * commutator(mu, xd - x)
    lam_op = 0.5 * commutator(xd, x)
    h_s_d = h_s - 0.5 * (xd @ mu + mu @ x)

    s_tilde, q_ops, f_tilde = [], [], []
    for s in couplings:
        s = as_operator(s)
        require_same_dim(h_s, s)
        st = s - 0.5 * anticommutator(xd @ x, s) + xd @ s @ x
        q = dissipator(x, s) + dissipator(xd, s)
        s_tilde.append(st)
        q_ops.append(q)
        f_tilde.append(st + alpha_sq * q)

    ratio = _dispersive_ratio(h_s, mu, omega_c)
    if ratio >= DISPERSIVE_RATIO_WARN:
        warnings.warn(
            f"dispersive ratio {ratio:.3g} >= {DISPERSIVE_RATIO_WARN}; the "
            "frame expansion may be inaccurate",
            stacklevel=2,
        )
    return DispersiveFrame(
        X=x,
        O_S=o_s,
        Lambda=lam_op,
        H_S_D=h_s_d,
        S_tilde=tuple(s_tilde),
        Q=tuple(q_ops),
        F_tilde=tuple(f_tilde),
        alpha_sq=float(alpha_sq),
        dispersive_ratio=ratio,
        couplings=tuple(as_operator(s) for s in couplings),
    )


def steady_alpha(e_p: complex, delta: float, kappa: float) -> complex:
    """Coherent steady-state amplitude -i E_p / (i Delta + kappa)."""
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    return -1j * e_p / (1j * delta + kappa)


def effective_observable(
    frame: DispersiveFrame, kappa: float, delta: float, phi: float, alpha: complex
) -> np.ndarray:
    """Hermitian observable seen by the detector at quadrature phi.

    Returns the symmetrized form of

        kappa^2/(kappa^2 + Delta^2) (1 + Lambda) [sin(theta) O_S + kappa cos(theta) Lambda]

    with theta = phi - arg(alpha) - arctan(Delta / kappa).  The overall
    factor is normalized so that at Delta = 0 and negligible Lambda this
    reduces to sin(phi - arg alpha) O_S + kappa cos(phi - arg alpha) Lambda.
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    theta = phi - np.angle(alpha) - np.arctan2(delta, kappa)
    kernel = np.sin(theta) * frame.O_S + kappa * np.cos(theta) * frame.Lambda
    one_lam = np.eye(frame.dim, dtype=complex) + frame.Lambda
    sym = 0.5 * (one_lam @ kernel + kernel @ one_lam)
    return (kappa**2 / (kappa**2 + delta**2)) * sym


def bad_cavity_epsilon(
    frame: DispersiveFrame,
    expansions,
    kappa: float,
    delta: float,
    alpha: complex,
) -> dict:
    """Smallness parameter of the cavity-elimination expansion.

    epsilon = max over the three perturbative scales, divided by kappa:
    the coherent shift (||O_S|| + |Delta|)(1 + |alpha|^2), the terminator
    back-action sum |Gamma_m| ||Q_m||, and the occupation back-action
    |alpha|^2 lambda_m ||Q_m||; spectral norms throughout.  Also reports
    the coarse criterion kappa / (||O_S||_1 (1 + |alpha|^2)) with both the
    trace norm (as named) and the spectral norm.
    """
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    occ = 1.0 + abs(alpha) ** 2
    q_norms = [spectral_norm(q) for q in frame.Q]
    coherent = (spectral_norm(frame.O_S) + abs(delta)) * occ
    term_sum = sum(abs(e.terminator) * qn for e, qn in zip(expansions, q_norms))
    occ_sum = sum(abs(alpha) ** 2 * e.spec.lam * qn for e, qn in zip(expansions, q_norms))
    eps = max(coherent, term_sum, occ_sum) / kappa
    os_trace = trace_norm(frame.O_S)
    os_spec = spectral_norm(frame.O_S)
    return {
        "epsilon": float(eps),
        "ratio_trace_norm": float(kappa / (os_trace * occ)) if os_trace > 0 else np.inf,
        "ratio_spectral_norm": float(kappa / (os_spec * occ)) if os_spec > 0 else np.inf,
        "valid": bool(eps <= 0.05),
    }

"""Drude-Lorentz bath correlation functions as finite exponential sums.

The spectral density J(w) = 2 lambda gamma w / (w^2 + gamma^2) at inverse
temperature beta has the time correlation

    C(t) = sum_a c_a exp(-gamma_a t),   t >= 0,

with gamma_0 = gamma, gamma_a = 2 pi a / beta (Matsubara frequencies) and

    c_0 = (lambda gamma / 2) (cot(beta gamma / 2) - i)
    c_a = (2 lambda / beta) gamma gamma_a / (gamma_a^2 - gamma^2),  a >= 1.

The sum is truncated after ``L + 1`` terms; the discarded tail is folded
into a Markovian terminator coefficient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import PoleError

#: Number of Matsubara terms treated as a numerically converged reference
#: for the full correlation-function time integral.
TERMINATOR_REFERENCE_TERMS = 10_000

#: Matsubara frequencies closer than this to the cut-off are rejected.
POLE_TOL = 1e-9

#: Hard ceiling for the automatic cut-off choice.
MAX_AUTO_L = 64


@dataclass(frozen=True)
class BathSpec:
    """Drude-Lorentz environment: coupling ``lam``, cut-off ``gamma``,
    inverse temperature ``beta``, Matsubara truncation ``L``."""

    lam: float
    gamma: float
    beta: float
    L: int = 0

    def __post_init__(self):
        if not (self.lam > 0 and self.gamma > 0 and self.beta > 0):
            raise ValueError("lam, gamma and beta must all be positive")
        if self.L < 0:
            raise ValueError("L must be a non-negative integer")
        self._check_poles(self.L)

    def _check_poles(self, upto: int):
        if upto >= 1:
            a = np.arange(1, upto + 1)
            if np.any(np.abs(2.0 * np.pi * a / self.beta - self.gamma) < POLE_TOL):
                raise PoleError(
                    "a Matsubara frequency 2 pi a / beta coincides with gamma; "
                    "perturb gamma or beta"
                )


@dataclass(frozen=True)
class BathExpansion:
    """Exponential decomposition of C(t) plus its Markovian terminator."""

    coefficients: np.ndarray  # complex c_a
    rates: np.ndarray  # real gamma_a > 0
    terminator: complex
    spec: BathSpec = field(repr=False)

    @property
    def n_terms(self) -> int:
        return len(self.rates)


def _matsubara_terms(spec: BathSpec, upto: int):
    """Coefficients and rates for a = 0 .. upto (inclusive)."""
    x = 0.5 * spec.beta * spec.gamma
    c0 = 0.5 * spec.lam * spec.gamma * (1.0 / np.tan(x) - 1.0j)
    rates = np.empty(upto + 1)
    coeffs = np.empty(upto + 1, dtype=complex)
    rates[0] = spec.gamma
    coeffs[0] = c0
    if upto >= 1:
        a = np.arange(1, upto + 1)
        ga = 2.0 * np.pi * a / spec.beta
        if np.any(np.abs(ga - spec.gamma) < POLE_TOL):
            raise PoleError("Matsubara frequency within tolerance of gamma")
        rates[1:] = ga
        coeffs[1:] = (2.0 * spec.lam / spec.beta) * spec.gamma * ga / (ga**2 - spec.gamma**2)
    return coeffs, rates


def terminator(spec: BathSpec, n_reference: int = TERMINATOR_REFERENCE_TERMS) -> complex:
    """Markovian coefficient compensating the truncated Matsubara tail.

    Computed as the difference between the converged reference sum
    ``sum_{a<=n_reference} c_a / gamma_a`` (the time integral of C) and the
    retained part ``sum_{a<=L} c_a / gamma_a``.  Zero when nothing is
    truncated; real whenever the a = 0 term is retained.
    """
    upto = max(spec.L, n_reference)
    coeffs, rates = _matsubara_terms(spec, upto)
    ratios = coeffs / rates
    total = np.sum(ratios[: n_reference + 1])
    return complex(total - np.sum(ratios[: spec.L + 1]))


def matsubara_expansion(spec: BathSpec) -> BathExpansion:
    """Truncated exponential decomposition of the Drude-Lorentz correlation."""
    coeffs, rates = _matsubara_terms(spec, spec.L)
    return BathExpansion(
        coefficients=coeffs, rates=rates, terminator=terminator(spec), spec=spec
    )


def correlation_function(expansion: BathExpansion, t) -> complex | np.ndarray:
    """C(t) = sum_a c_a exp(-gamma_a t) for t >= 0 (scalar or array)."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise ValueError("correlation function is defined for t >= 0")
    vals = np.sum(
        expansion.coefficients * np.exp(-np.multiply.outer(t_arr, expansion.rates)),
        axis=-1,
    )
    return complex(vals) if np.isscalar(t) or t_arr.ndim == 0 else vals


def correlation_integral(spec: BathSpec, n_reference: int = TERMINATOR_REFERENCE_TERMS) -> complex:
    """Reference value of the full time integral of C(t)."""
    coeffs, rates = _matsubara_terms(spec, n_reference)
    return complex(np.sum(coeffs / rates))


def choose_L(spec: BathSpec, omega_max: float) -> int:
    """Smallest Matsubara cut-off whose first discarded rate exceeds dynamics.

    Returns the smallest L with 2 pi L / beta >= 10 omega_max, clamped to
    ``[0, MAX_AUTO_L]``; the terminator absorbs whatever is discarded.
    """
    if omega_max < 0:
        raise ValueError("omega_max must be non-negative")
    L = int(np.ceil(10.0 * omega_max * spec.beta / (2.0 * np.pi)))
    return max(0, min(L, MAX_AUTO_L))


def with_truncation(spec: BathSpec, L: int) -> BathSpec:
    return BathSpec(lam=spec.lam, gamma=spec.gamma, beta=spec.beta, L=L)

"""Auxiliary-operator hierarchy: index bookkeeping and equation assembly.

Bath memory is encoded in a ladder of auxiliary operators sigma^n indexed
by a vector of non-negative integers, one entry per exponential term of
each environment's correlation expansion (environment-major, term-minor
order).  The physical density matrix is sigma^{n=0}; the hierarchy is
truncated at total tier sum(n) <= K, with out-of-space neighbours
contributing zero and the bath terminator compensating the cut.

Two engines share this bookkeeping:

* the reduced (cavity-eliminated) stochastic hierarchy, where each tier is
  a system operator, and
* a validation-mode hierarchy on the full system (x) cavity space.

The functions here are straightforward per-index reference
implementations; `engine` compiles the same right-hand sides into flat
superoperators for production runs and is tested against these.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb

import numpy as np

from .algebra import (
    annihilation,
    as_operator,
    commutator,
    dag,
    dissipator,
    spectral_norm,
)
from .bath import BathExpansion
from .errors import DimensionError

MAX_INDEX_COUNT = 1_000_000

TERMINATOR_FORMS = ("double_commutator", "dissipator")


@dataclass(frozen=True)
class IndexSpace:
    """Complete enumeration of multi-indices with sum(n) <= tier.

    ``up[i, s]`` / ``down[i, s]`` give the position of the index vector
    with slot ``s`` raised / lowered by one, or -1 when outside the space.
    """

    n_slots: int
    tier: int
    indices: np.ndarray  # (count, n_slots) int64
    up: np.ndarray  # (count, n_slots) int64, -1 sentinel
    down: np.ndarray
    _lookup: dict = field(repr=False, hash=False, compare=False, default_factory=dict)

    @property
    def count(self) -> int:
        return self.indices.shape[0]

    def position(self, index: tuple[int, ...]) -> int:
        return self._lookup[tuple(index)]


def enumerate_indices(n_slots: int, tier: int) -> IndexSpace:
    """Lexicographically ordered index space with neighbour tables."""
    if n_slots < 1 or tier < 0:
        raise ValueError("need n_slots >= 1 and tier >= 0")
    count = comb(n_slots + tier, tier)
    if count > MAX_INDEX_COUNT:
        raise ValueError(
            f"index space would hold {count} entries (> {MAX_INDEX_COUNT}); "
            "reduce the tier or the number of expansion terms"
        )

    def gen(prefix, remaining, slots_left):
        if slots_left == 0:
            yield prefix
            return
        for v in range(remaining + 1):
            yield from gen(prefix + (v,), remaining - v, slots_left - 1)

    indices = sorted(gen((), tier, n_slots))
    lookup = {idx: i for i, idx in enumerate(indices)}
    arr = np.array(indices, dtype=np.int64)
    up = np.full((count, n_slots), -1, dtype=np.int64)
    down = np.full((count, n_slots), -1, dtype=np.int64)
    for i, idx in enumerate(indices):
        for s in range(n_slots):
            raised = idx[:s] + (idx[s] + 1,) + idx[s + 1 :]
            j = lookup.get(raised)
            if j is not None:
                up[i, s] = j
                down[j, s] = i
    return IndexSpace(n_slots=n_slots, tier=tier, indices=arr, up=up, down=down, _lookup=lookup)


@dataclass
class HierarchyState:
    """All auxiliary operators at one instant; ados[0] is the physical state."""

    space: IndexSpace
    ados: np.ndarray  # (count, d, d) complex
    t: float = 0.0

    @property
    def rho(self) -> np.ndarray:
        return self.ados[0]

    @property
    def dim(self) -> int:
        return self.ados.shape[-1]

    def copy(self) -> "HierarchyState":
        return HierarchyState(self.space, self.ados.copy(), self.t)


def initial_state(space: IndexSpace, rho0: np.ndarray) -> HierarchyState:
    rho0 = as_operator(rho0)
    ados = np.zeros((space.count, *rho0.shape), dtype=complex)
    ados[0] = rho0
    return HierarchyState(space=space, ados=ados, t=0.0)


def flatten_bath_terms(expansions: list[BathExpansion]):
    """Flat slot arrays (env-major, term-minor): coefficients, rates, owner."""
    coeffs, rates, owner = [], [], []
    for m, e in enumerate(expansions):
        coeffs.extend(e.coefficients)
        rates.extend(e.rates)
        owner.extend([m] * e.n_terms)
    return (
        np.asarray(coeffs, dtype=complex),
        np.asarray(rates, dtype=float),
        np.asarray(owner, dtype=np.int64),
    )


def _drive_hamiltonian(x: np.ndarray, drive, t: float) -> np.ndarray:
    """System-tone part - sum_q (E_q e^{-i w_q t} X^dag + h.c.)."""
    h = np.zeros_like(x)
    if drive is None:
        return h
    xd = dag(x)
    for amp, omega in drive.system_tones:
        z = amp * np.exp(-1j * omega * t)
        h -= z * xd + np.conj(z) * x
    return h


def _terminator_term(gamma_m: complex, f: np.ndarray, sigma: np.ndarray, form: str) -> np.ndarray:
    if form == "double_commutator":
        return -gamma_m * commutator(f, commutator(f, sigma))
    if form == "dissipator":
        return gamma_m * dissipator(f, sigma)
    raise ValueError(f"unknown terminator form {form!r}")


def shem_drift(
    state: HierarchyState,
    frame,
    expansions: list[BathExpansion],
    meas,
    drive,
    t: float | None = None,
    terminator_form: str = "double_commutator",
) -> HierarchyState:
    """Deterministic right-hand side of the reduced stochastic hierarchy.

    Implements, per index n with nu_n = sum n_s gamma_s:

    * the system Liouvillian -i[H_eff(t), .] + kappa D[X] with
      H_eff = H_S^D + |alpha|^2 O_S + 2 Re(E_p alpha*) Lambda + drive tones,
    * the tier damping -nu_n sigma^n,
    * measurement-induced dephasing
      (kappa + nu_n)|alpha|^2 / ((kappa + nu_n)^2 + Delta^2) D[O_S],
    * the cavity-pull shift i Delta |alpha|^2 / (...) [O_S^2, .],
    * the bath terminator (double-commutator form by default),
    * hierarchy coupling -i[F~_m, sigma_{n_s+1}]
      - i n_s (c_s F~_m sigma_{n_s-1} - c_s* sigma_{n_s-1} F~_m).

    With ``meas=None`` all cavity-induced terms vanish and the bare
    hierarchy for the uncoupled system remains.
    """
    if t is None:
        t = state.t
    d = state.dim
    if frame.H_S_D.shape[0] != d:
        raise DimensionError("frame dimension does not match state")
    coeffs, rates, owner = flatten_bath_terms(expansions)
    if len(rates) != state.space.n_slots:
        raise DimensionError("expansion terms do not match the index space slots")
    nus = state.space.indices @ rates

    h_eff = frame.H_S_D + _drive_hamiltonian(frame.X, drive, t)
    if meas is not None:
        alpha = meas.alpha
        h_eff = h_eff + (abs(alpha) ** 2) * frame.O_S
        h_eff = h_eff + 2.0 * np.real(meas.E_p * np.conj(alpha)) * frame.Lambda
        kappa, delta = meas.kappa, meas.delta
        o_sq = frame.O_S @ frame.O_S
        alpha_sq = abs(alpha) ** 2
    if not np.all(np.isfinite(h_eff)):
        raise ValueError("non-finite effective Hamiltonian")

    out = np.zeros_like(state.ados)
    for i in range(state.space.count):
        sig = state.ados[i]
        nu = nus[i]
        acc = -1j * commutator(h_eff, sig) - nu * sig
        if meas is not None:
            acc += kappa * dissipator(frame.X, sig)
            denom = (kappa + nu) ** 2 + delta**2
            acc += ((kappa + nu) * alpha_sq / denom) * dissipator(frame.O_S, sig)
            acc += (1j * delta * alpha_sq / denom) * commutator(o_sq, sig)
        for m, e in enumerate(expansions):
            acc += _terminator_term(e.terminator, frame.F_tilde[m], sig, terminator_form)
        for s in range(state.space.n_slots):
            f = frame.F_tilde[owner[s]]
            j_up = state.space.up[i, s]
            if j_up >= 0:
                acc += -1j * commutator(f, state.ados[j_up])
            n_s = state.space.indices[i, s]
            j_dn = state.space.down[i, s]
            if n_s > 0 and j_dn >= 0:
                lower = state.ados[j_dn]
                acc += -1j * n_s * (coeffs[s] * (f @ lower) - np.conj(coeffs[s]) * (lower @ f))
        out[i] = acc
    return HierarchyState(state.space, out, t)


def shem_backaction_operator(frame, meas) -> np.ndarray:
    """Conditioning operator of the reduced hierarchy:
    e^{-i phi} alpha / (kappa + i Delta) (i (1 + Lambda) O_S + kappa Lambda^2)."""
    one_lam = np.eye(frame.dim, dtype=complex) + frame.Lambda
    return (
        np.exp(-1j * meas.phi)
        * (meas.alpha / (meas.kappa + 1j * meas.delta))
        * (1j * one_lam @ frame.O_S + meas.kappa * frame.Lambda @ frame.Lambda)
    )


def shem_diffusion(state: HierarchyState, frame, meas) -> HierarchyState:
    """Per-dW stochastic term -sqrt(2 eta kappa) H[B] applied to every tier.

    The trace functional inside H[.] is always evaluated on the physical
    state sigma^{n=0}, so one scalar multiplies every tier.
    """
    if not (0.0 <= meas.eta <= 1.0):
        raise ValueError("eta must lie in [0, 1]")
    pref = -np.sqrt(2.0 * meas.eta * meas.kappa)
    b = shem_backaction_operator(frame, meas)
    bd = dag(b)
    scalar = np.trace((b + bd) @ state.ados[0])
    out = np.empty_like(state.ados)
    for i in range(state.space.count):
        sig = state.ados[i]
        out[i] = pref * (b @ sig + sig @ bd - scalar * sig)
    return HierarchyState(state.space, out, state.t)


# ---------------------------------------------------------------------------
# Validation-mode hierarchy on the full system (x) cavity space.


@dataclass(frozen=True)
class JointOperators:
    """Operators of the undispersed system (x) cavity hierarchy.

    Built in the frame rotating at the cavity-drive frequency; when
    ``displacement`` is nonzero the cavity is additionally displaced by the
    steady amplitude so the occupied Fock ladder stays short.
    """

    dim_system: int
    n_fock: int
    displacement: complex
    h_static: np.ndarray
    x: np.ndarray  # system decay channel, joint space
    leak: np.ndarray  # (a + alpha)(1 + Lambda)
    couplings: tuple[np.ndarray, ...]  # F_m = S~_m + Q_m (a+alpha)^dag (a+alpha)
    backaction: np.ndarray  # e^{-i phi} (a + alpha)(1 + Lambda)
    record: np.ndarray  # (1+Lambda)(e^{-i phi}(a+alpha) + h.c.)
    tone_x: np.ndarray | None  # joint X for system drive tones
    kappa: float
    eta: float

    @property
    def dim(self) -> int:
        return self.dim_system * self.n_fock


def build_joint_operators(frame, meas, drive, n_fock: int, displaced: bool = True) -> JointOperators:
    d = frame.dim
    i_s = np.eye(d, dtype=complex)
    i_c = np.eye(n_fock, dtype=complex)
    a = annihilation(n_fock)
    alpha = meas.alpha if displaced else 0.0
    a_disp = a + alpha * i_c
    n_disp = dag(a_disp) @ a_disp
    one_lam = i_s + frame.Lambda

    h = np.kron(frame.H_S_D, i_c)
    h += meas.delta * np.kron(i_s, n_disp)
    h += np.kron(frame.O_S, n_disp)
    ep = meas.E_p
    h += ep * np.kron(one_lam, dag(a_disp)) + np.conj(ep) * np.kron(one_lam, a_disp)
    if drive is not None:
        for amp, omega in drive.system_tones:
            if omega != 0.0:
                raise ValueError(
                    "joint-space validation engine supports static system tones only"
                )
            h -= amp * np.kron(dag(frame.X), i_c) + np.conj(amp) * np.kron(frame.X, i_c)

    leak = np.kron(one_lam, a_disp)
    couplings = tuple(
        np.kron(st, i_c) + np.kron(q, n_disp) for st, q in zip(frame.S_tilde, frame.Q)
    )
    backaction = np.exp(-1j * meas.phi) * leak
    record = backaction + dag(backaction)
    return JointOperators(
        dim_system=d,
        n_fock=n_fock,
        displacement=complex(alpha),
        h_static=h,
        x=np.kron(frame.X, i_c),
        leak=leak,
        couplings=couplings,
        backaction=backaction,
        record=record,
        tone_x=np.kron(frame.X, i_c),
        kappa=meas.kappa,
        eta=meas.eta,
    )


def full_heom_drift(
    state: HierarchyState,
    joint: JointOperators,
    expansions: list[BathExpansion],
    t: float | None = None,
    terminator_form: str = "double_commutator",
) -> HierarchyState:
    """Deterministic right-hand side of the system (x) cavity hierarchy:
    (L_SC + L_leak - nu_n) sigma^n + terminator + hierarchy coupling."""
    if t is None:
        t = state.t
    if state.dim != joint.dim:
        raise DimensionError("state dimension does not match the joint space")
    coeffs, rates, owner = flatten_bath_terms(expansions)
    if len(rates) != state.space.n_slots:
        raise DimensionError("expansion terms do not match the index space slots")
    nus = state.space.indices @ rates

    out = np.zeros_like(state.ados)
    for i in range(state.space.count):
        sig = state.ados[i]
        acc = -1j * commutator(joint.h_static, sig) - nus[i] * sig
        acc += joint.kappa * dissipator(joint.x, sig)
        acc += joint.kappa * dissipator(joint.leak, sig)
        for m, e in enumerate(expansions):
            acc += _terminator_term(e.terminator, joint.couplings[m], sig, terminator_form)
        for s in range(state.space.n_slots):
            f = joint.couplings[owner[s]]
            j_up = state.space.up[i, s]
            if j_up >= 0:
                acc += -1j * commutator(f, state.ados[j_up])
            n_s = state.space.indices[i, s]
            j_dn = state.space.down[i, s]
            if n_s > 0 and j_dn >= 0:
                lower = state.ados[j_dn]
                acc += -1j * n_s * (coeffs[s] * (f @ lower) - np.conj(coeffs[s]) * (lower @ f))
        out[i] = acc
    return HierarchyState(state.space, out, t)


def full_heom_diffusion(state: HierarchyState, joint: JointOperators) -> HierarchyState:
    """Per-dW term +sqrt(2 eta kappa) H[e^{-i phi}(a+alpha)(1+Lambda)] sigma^n,
    trace functional evaluated on sigma^{n=0}."""
    if not (0.0 <= joint.eta <= 1.0):
        raise ValueError("eta must lie in [0, 1]")
    pref = np.sqrt(2.0 * joint.eta * joint.kappa)
    b = joint.backaction
    bd = dag(b)
    scalar = np.trace((b + bd) @ state.ados[0])
    out = np.empty_like(state.ados)
    for i in range(state.space.count):
        sig = state.ados[i]
        out[i] = pref * (b @ sig + sig @ bd - scalar * sig)
    return HierarchyState(state.space, out, state.t)


def partial_trace_cavity(rho_joint: np.ndarray, dim_system: int, n_fock: int) -> np.ndarray:
    r = rho_joint.reshape(dim_system, n_fock, dim_system, n_fock)
    return np.einsum("injn->ij", r)


def partial_trace_system(rho_joint: np.ndarray, dim_system: int, n_fock: int) -> np.ndarray:
    r = rho_joint.reshape(dim_system, n_fock, dim_system, n_fock)
    return np.einsum("inim->nm", r)


@dataclass(frozen=True)
class TruncationReport:
    """Separation between the truncated tier's decay and the dynamics."""

    psi: float
    omega_sc: float
    ratio: float
    adequate: bool


def truncation_report(
    space: IndexSpace,
    expansions: list[BathExpansion],
    frame,
    meas=None,
    drive=None,
) -> TruncationReport:
    """Psi = min over top-tier indices of sum n_s gamma_s (= K min_s gamma_s)
    against the largest dynamical frequency; ratio < 10 flags under-truncation."""
    _, rates, _ = flatten_bath_terms(expansions)
    psi = float(space.tier * np.min(rates)) if space.tier > 0 else 0.0

    h_eff = np.array(frame.H_S_D, dtype=complex)
    scales = [0.0]
    if meas is not None:
        h_eff = h_eff + (abs(meas.alpha) ** 2) * frame.O_S
        kappa = meas.kappa
        denom = kappa**2 + meas.delta**2
        scales.append(kappa * spectral_norm(frame.X) ** 2)
        scales.append(4.0 * (abs(meas.alpha) ** 2) * kappa / denom * spectral_norm(frame.O_S) ** 2)
    if drive is not None:
        for amp, omega in drive.system_tones:
            scales.append(abs(omega))
            scales.append(2.0 * abs(amp) * spectral_norm(frame.X))
    evals = np.linalg.eigvalsh(0.5 * (h_eff + dag(h_eff)))
    scales.append(float(evals[-1] - evals[0]))
    omega_sc = max(max(scales), 1e-12)
    ratio = psi / omega_sc
    return TruncationReport(psi=psi, omega_sc=omega_sc, ratio=float(ratio), adequate=ratio >= 10.0)

"""Single-trajectory runners: conditioned evolution and detector current.

`run_trajectory` couples the compiled hierarchy generator to the batched
SDE kernel (batch of one) and synthesizes the homodyne current; the same
Wiener increment drives the state diffusion and the current shot noise.
`run_deterministic` propagates the drift alone, recovering the
unconditioned (ensemble-averaged) evolution.

Current convention: with local-oscillator amplitude and all proportionality
constants fixed to 1,

    I dt = 2 eta kappa <R> dt + sqrt(2 eta kappa) dW,

where R is the system-level record operator paired with the conditioning
superoperator (the quadrature the back-action actually reports), so signal
and back-action stay information-consistent.  Only ratios and spectral
shapes of I are physically meaningful.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import engine
from .bath import BathExpansion
from .dispersive import DispersiveFrame, DriveSpec, steady_alpha
from .hierarchy import IndexSpace, enumerate_indices, initial_state, truncation_report


@dataclass(frozen=True)
class MeasurementConfig:
    """Cavity readout parameters; alpha and Delta are derived.

    The local-oscillator amplitude convention is fixed to 1.
    """

    kappa: float
    eta: float
    phi: float
    E_p: complex
    omega_p: float = 0.0
    omega_c: float = 0.0

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if not (0.0 <= self.eta <= 1.0):
            raise ValueError("eta must lie in [0, 1]")
        vals = [self.kappa, self.eta, self.phi, self.omega_p, self.omega_c, abs(self.E_p)]
        if not np.all(np.isfinite(vals)):
            raise ValueError("measurement parameters must be finite")

    @property
    def delta(self) -> float:
        return self.omega_c - self.omega_p

    @property
    def alpha(self) -> complex:
        return steady_alpha(self.E_p, self.delta, self.kappa)


@dataclass
class SimulationModel:
    """Everything that fixes the reduced hierarchy generator."""

    frame: DispersiveFrame
    expansions: list[BathExpansion]
    meas: MeasurementConfig | None = None
    drive: DriveSpec | None = None
    tier: int = 2
    terminator_form: str = "double_commutator"

    @cached_property
    def space(self) -> IndexSpace:
        n_slots = sum(e.n_terms for e in self.expansions)
        return enumerate_indices(max(n_slots, 1), self.tier)

    @cached_property
    def generator(self) -> engine.CompiledGenerator:
        return engine.compile_reduced_generator(
            self.space,
            self.frame,
            self.expansions,
            self.meas,
            self.drive,
            terminator_form=self.terminator_form,
        )

    def truncation(self):
        return truncation_report(self.space, self.expansions, self.frame, self.meas, self.drive)


@dataclass
class TrajectoryRecord:
    """One conditioned run: current samples, conditional expectations, logs."""

    times: np.ndarray
    current: np.ndarray
    observables: dict[str, np.ndarray]
    trace: np.ndarray
    diverged: bool
    diverged_time: float | None
    seed: object
    trace_dev_max: float
    herm_defect_max: float
    purity_max: float
    dt: float
    record_stride: int


@dataclass
class DeterministicRecord:
    times: np.ndarray
    observables: dict[str, np.ndarray]
    signal: np.ndarray | None
    trace: np.ndarray
    rho: np.ndarray
    trace_dev_max: float
    herm_defect_max: float
    truncation: object


def _warn_if_invalid(model: SimulationModel):
    report = model.truncation()
    if not report.adequate and model.tier > 0:
        warnings.warn(
            f"truncation separation ratio {report.ratio:.2f} < 10; consider a "
            "higher tier or more expansion terms",
            stacklevel=3,
        )


def run_trajectory(
    model: SimulationModel,
    rho0: np.ndarray,
    dt: float,
    t_final: float,
    seed,
    observables: dict[str, np.ndarray] | None = None,
    record_stride: int = 1,
    scheme: str = "platen",
    renormalize: bool = True,
) -> TrajectoryRecord:
    """Integrate one conditioned trajectory and its detector record."""
    if model.meas is None:
        raise ValueError("run_trajectory needs a measurement configuration")
    _warn_if_invalid(model)
    gen = model.generator
    n_steps = int(round(t_final / dt))
    obs = dict(observables or {})
    names = list(obs)
    ops = [obs[k] for k in names] + [np.eye(model.frame.dim)]
    y0 = engine.state_to_vec(initial_state(model.space, rho0))
    res = engine.propagate_stochastic_batch(
        gen,
        y0,
        dt,
        n_steps,
        seeds=[seed],
        scheme=scheme,
        renormalize=renormalize,
        record_stride=record_stride,
        observables=ops,
    )
    series = {name: res.observables[i, 0] for i, name in enumerate(names)}
    return TrajectoryRecord(
        times=res.times,
        current=res.currents[0],
        observables=series,
        trace=res.observables[len(names), 0],
        diverged=bool(res.diverged[0]),
        diverged_time=None if np.isnan(res.diverged_time[0]) else float(res.diverged_time[0]),
        seed=seed,
        trace_dev_max=float(res.trace_dev_max[0]),
        herm_defect_max=float(res.herm_defect_max[0]),
        purity_max=float(res.purity_max[0]),
        dt=dt,
        record_stride=record_stride,
    )


def run_deterministic(
    model: SimulationModel,
    rho0: np.ndarray,
    dt: float,
    t_final: float,
    observables: dict[str, np.ndarray] | None = None,
    sample_stride: int = 1,
    method: str = "auto",
) -> DeterministicRecord:
    """Propagate the drift alone; expectations of the unconditioned state."""
    _warn_if_invalid(model)
    gen = model.generator
    n_steps = int(round(t_final / dt))
    y0 = engine.state_to_vec(initial_state(model.space, rho0))
    res = engine.propagate_deterministic(
        gen, y0, dt, n_steps, sample_stride=sample_stride, method=method
    )
    if res.diverged:
        raise RuntimeError(
            f"deterministic propagation diverged at t = {res.diverged_time:.4g}; "
            "raise the hierarchy tier K or the Matsubara cut-off L"
        )
    series = {}
    for name, op in (observables or {}).items():
        series[name] = np.real(np.einsum("ij,kji->k", np.asarray(op, dtype=complex), res.rho))
    trace = np.real(np.einsum("kii->k", res.rho))
    signal = None
    if model.meas is not None and gen.w_record is not None:
        d2 = model.frame.dim ** 2
        flat = res.rho.reshape(len(res.times), d2)
        signal = gen.record_const * np.real(flat @ gen.w_record)
    return DeterministicRecord(
        times=res.times,
        observables=series,
        signal=signal,
        trace=trace,
        rho=res.rho,
        trace_dev_max=res.trace_dev_max,
        herm_defect_max=res.herm_defect_max,
        truncation=model.truncation(),
    )


def derive_seed(master_seed: int, index: int):
    """Per-trajectory RNG key; independent of execution order and workers."""
    return (int(master_seed), int(index))

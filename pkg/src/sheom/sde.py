"""Ito integration of vector-valued SDEs driven by one scalar Wiener process.

Fixed-step schemes only: the noise path must be step-aligned so that the
detector record, the state diffusion and reproducibility across runs all
share one increment sequence.  Two explicit schemes are provided, the
Euler-Maruyama rule (strong order 0.5) and a derivative-free two-stage
scheme (strong order 1.0 for scalar noise, Heun-consistent drift).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass
class NoiseStream:
    """Seeded Gaussian increments dW ~ N(0, dt).

    The same seed always reproduces the same increment sequence, and chunked
    draws concatenate to the monolithic stream.  Ensemble seeds are derived
    as (master seed, trajectory index) so members are order-independent.
    """

    seed: object
    dt: float
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        self._rng = np.random.default_rng(self.seed)

    @classmethod
    def for_trajectory(cls, master_seed: int, index: int, dt: float) -> "NoiseStream":
        return cls(seed=(int(master_seed), int(index)), dt=dt)

    def increments(self, n: int) -> np.ndarray:
        return self._rng.standard_normal(n) * np.sqrt(self.dt)


@dataclass
class SdeProblem:
    """dy = drift(y, t) dt + diffusion(y, t) dW on [t0, t0 + T].

    ``diffusion=None`` marks a deterministic problem.
    """

    drift: Callable[[np.ndarray, float], np.ndarray]
    diffusion: Callable[[np.ndarray, float], np.ndarray] | None
    y0: np.ndarray
    t_span: tuple[float, float]
    dt: float

    def __post_init__(self):
        t0, t1 = self.t_span
        if self.dt <= 0 or t1 - t0 < self.dt:
            raise ValueError("need dt > 0 and a span of at least one step")

    @property
    def n_steps(self) -> int:
        t0, t1 = self.t_span
        return int(round((t1 - t0) / self.dt))


def euler_maruyama_step(problem: SdeProblem, y: np.ndarray, t: float, dw: float) -> np.ndarray:
    """y + drift dt + diffusion dW, drift evaluated at the step midpoint."""
    dt = problem.dt
    out = y + dt * problem.drift(y, t + 0.5 * dt)
    if problem.diffusion is not None:
        out = out + dw * problem.diffusion(y, t)
    return out


def platen_step(problem: SdeProblem, y: np.ndarray, t: float, dw: float) -> np.ndarray:
    """Two-stage derivative-free scheme, strong order 1.0 for scalar noise.

    Uses the supporting value y + a dt + b sqrt(dt); the drift is averaged
    over the two stages (Heun), the diffusion difference supplies the
    Milstein correction without derivatives.  Identical to Euler-Maruyama
    for additive noise with drift-free dynamics.
    """
    dt = problem.dt
    sqdt = np.sqrt(dt)
    a1 = problem.drift(y, t)
    if problem.diffusion is None:
        y_sup = y + a1 * dt
        a2 = problem.drift(y_sup, t + dt)
        return y + 0.5 * dt * (a1 + a2)
    b1 = problem.diffusion(y, t)
    y_sup = y + a1 * dt + b1 * sqdt
    a2 = problem.drift(y_sup, t + dt)
    b2 = problem.diffusion(y_sup, t + dt)
    return y + 0.5 * dt * (a1 + a2) + b1 * dw + (b2 - b1) * (dw * dw - dt) / (2.0 * sqdt)


_STEPPERS = {"euler": euler_maruyama_step, "platen": platen_step}


@dataclass
class PathSummary:
    times: np.ndarray
    final_state: np.ndarray
    observations: dict
    diverged: bool
    diverged_time: float | None
    n_steps: int


def integrate(
    problem: SdeProblem,
    noise: NoiseStream | None = None,
    scheme: str = "platen",
    renormalize: bool = False,
    trace_fn: Callable[[np.ndarray], complex] | None = None,
    trace_norm_fn: Callable[[np.ndarray], float] | None = None,
    observers: dict[str, Callable[[np.ndarray, float], object]] | None = None,
    observe_stride: int = 1,
    renorm_tol: float = 1e-10,
    divergence_threshold: float = 100.0,
) -> PathSummary:
    """Step the problem across its span, recording observer values.

    After each step, if ``renormalize`` and |trace - 1| > ``renorm_tol``
    the whole state is rescaled by 1/trace (``trace_fn`` supplies the trace
    of the physical block).  A non-finite state, or ``trace_norm_fn``
    exceeding ``divergence_threshold``, terminates the path with the
    diverged flag set; the caller owns the discard policy.
    """
    try:
        stepper = _STEPPERS[scheme]
    except KeyError:
        raise ValueError(f"unknown scheme {scheme!r}") from None
    if problem.diffusion is not None and noise is None:
        raise ValueError("a stochastic problem needs a NoiseStream")

    y = np.array(problem.y0, dtype=complex)
    t0, _ = problem.t_span
    n = problem.n_steps
    dws = noise.increments(n) if noise is not None else np.zeros(n)
    observers = observers or {}
    records: dict[str, list] = {name: [] for name in observers}
    rec_times = []
    diverged = False
    diverged_time = None

    t = t0
    for k in range(n):
        y = stepper(problem, y, t, dws[k])
        t = t0 + (k + 1) * problem.dt
        if renormalize and trace_fn is not None:
            tr = trace_fn(y)
            if abs(tr - 1.0) > renorm_tol and tr != 0:
                y = y / tr
        if not np.all(np.isfinite(y)) or (
            trace_norm_fn is not None and trace_norm_fn(y) > divergence_threshold
        ):
            diverged = True
            diverged_time = t
            break
        if (k + 1) % observe_stride == 0:
            rec_times.append(t)
            for name, fn in observers.items():
                records[name].append(fn(y, t))

    return PathSummary(
        times=np.asarray(rec_times),
        final_state=y,
        observations={name: np.asarray(vals) for name, vals in records.items()},
        diverged=diverged,
        diverged_time=diverged_time,
        n_steps=n,
    )

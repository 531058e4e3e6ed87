import numpy as np
import pytest

from sheom.sde import (
    NoiseStream,
    SdeProblem,
    euler_maruyama_step,
    integrate,
    platen_step,
)


def test_noise_stream_reproducible_and_chunk_invariant():
    a = NoiseStream(seed=123, dt=0.01).increments(1000)
    b = NoiseStream(seed=123, dt=0.01).increments(1000)
    assert np.array_equal(a, b)
    s = NoiseStream(seed=123, dt=0.01)
    chunked = np.concatenate([s.increments(300), s.increments(700)])
    assert np.array_equal(a, chunked)
    c = NoiseStream(seed=124, dt=0.01).increments(1000)
    assert not np.array_equal(a, c)


def test_noise_stream_statistics():
    dt = 1e-3
    xs = NoiseStream(seed=7, dt=dt).increments(1_000_000)
    sigma = np.sqrt(dt)
    assert abs(xs.mean()) < 4.0 * sigma / np.sqrt(len(xs))
    assert abs(xs.var() - dt) < 0.01 * dt


def test_exponential_decay():
    prob = SdeProblem(
        drift=lambda y, t: -y, diffusion=None, y0=np.array([1.0 + 0j]),
        t_span=(0.0, 1.0), dt=0.01,
    )
    y = prob.y0
    t = 0.0
    for k in range(100):
        y = euler_maruyama_step(prob, y, t, 0.0)
        t += prob.dt
    assert abs(y[0] - np.exp(-1.0)) < 0.01 * np.exp(-1.0)


def test_platen_drift_is_heun():
    # zero noise: one step of the two-stage scheme == Heun == exp to O(dt^3)
    dt = 0.05
    prob = SdeProblem(
        drift=lambda y, t: -y, diffusion=None, y0=np.array([1.0 + 0j]),
        t_span=(0.0, 1.0), dt=dt,
    )
    y1 = platen_step(prob, prob.y0, 0.0, 0.0)[0]
    heun = 1.0 - dt + 0.5 * dt**2
    assert y1 == pytest.approx(heun, abs=1e-15)
    assert abs(y1 - np.exp(-dt)) < dt**3


def test_additive_noise_schemes_coincide():
    prob = SdeProblem(
        drift=lambda y, t: np.zeros_like(y),
        diffusion=lambda y, t: np.ones_like(y),
        y0=np.array([0.0 + 0j]),
        t_span=(0.0, 1.0),
        dt=0.01,
    )
    dws = NoiseStream(seed=5, dt=prob.dt).increments(100)
    ye = prob.y0
    yp = prob.y0
    t = 0.0
    for k in range(100):
        ye = euler_maruyama_step(prob, ye, t, dws[k])
        yp = platen_step(prob, yp, t, dws[k])
        t += prob.dt
    assert ye[0] == pytest.approx(yp[0], abs=1e-14)


def _geometric_strong_error(stepper, dts, n_paths, t_final=1.0, seed=99):
    """Strong error of dy = y dW against y0 exp(W - t/2), shared noise."""
    base_dt = dts[-1]
    n_fine = int(round(t_final / base_dt))
    errs = np.zeros(len(dts))
    for p in range(n_paths):
        fine = NoiseStream(seed=(seed, p), dt=base_dt).increments(n_fine)
        exact = np.exp(np.sum(fine) - 0.5 * t_final)
        for di, dt in enumerate(dts):
            ratio = int(round(dt / base_dt))
            dws = fine.reshape(-1, ratio).sum(axis=1)
            prob = SdeProblem(
                drift=lambda y, t: np.zeros_like(y),
                diffusion=lambda y, t: y,
                y0=np.array([1.0 + 0j]),
                t_span=(0.0, t_final),
                dt=dt,
            )
            y = prob.y0
            t = 0.0
            for k in range(len(dws)):
                y = stepper(prob, y, t, dws[k])
                t += dt
            errs[di] += abs(y[0] - exact)
    return errs / n_paths


def test_strong_orders_on_geometric_benchmark():
    dts = [1e-2, 5e-3, 2.5e-3, 1.25e-3]
    e_em = _geometric_strong_error(euler_maruyama_step, dts, 200)
    e_pl = _geometric_strong_error(platen_step, dts, 200)
    slope_em = np.polyfit(np.log(dts), np.log(e_em), 1)[0]
    slope_pl = np.polyfit(np.log(dts), np.log(e_pl), 1)[0]
    assert 0.4 <= slope_em <= 0.6
    assert 0.8 <= slope_pl <= 1.2
    assert np.all(e_pl < e_em)


def test_integrate_qubit_precession_closes():
    # dy = -i H y as a flattened 2x2 density matrix; full revolution
    omega = 2.0
    h = 0.5 * omega * np.array([[1.0, 0.0], [0.0, -1.0]], dtype=complex)

    def drift(y, t):
        rho = y.reshape(2, 2)
        return (-1j * (h @ rho - rho @ h)).reshape(-1)

    rho0 = 0.5 * np.array([[1.0, 1.0], [1.0, 1.0]], dtype=complex)
    t_final = 2.0 * np.pi / omega
    prob = SdeProblem(
        drift=drift, diffusion=None, y0=rho0.reshape(-1), t_span=(0.0, t_final), dt=t_final / 4000
    )
    out = integrate(prob, scheme="platen")
    assert not out.diverged
    assert np.max(np.abs(out.final_state - rho0.reshape(-1))) < 1e-5


def test_integrate_renormalize_postcondition():
    # drift that leaks trace; renormalization must clamp it at every step
    def drift(y, t):
        return 0.5 * y

    prob = SdeProblem(
        drift=drift, diffusion=None, y0=np.array([0.7, 0.0, 0.0, 0.3], dtype=complex),
        t_span=(0.0, 1.0), dt=1e-3,
    )
    traces = []
    out = integrate(
        prob,
        renormalize=True,
        trace_fn=lambda y: complex(y[0] + y[3]),
        observers={"tr": lambda y, t: abs(y[0] + y[3] - 1.0)},
    )
    assert not out.diverged
    assert np.max(out.observations["tr"]) <= 1e-9


def test_integrate_divergence_flag():
    prob = SdeProblem(
        drift=lambda y, t: 1e3 * y, diffusion=None, y0=np.array([1.0 + 0j]),
        t_span=(0.0, 1.0), dt=1e-2,
    )
    out = integrate(
        prob, trace_norm_fn=lambda y: float(abs(y[0])), divergence_threshold=100.0
    )
    assert out.diverged
    assert out.diverged_time is not None and out.diverged_time < 1.0


def test_integrate_requires_noise_for_stochastic():
    prob = SdeProblem(
        drift=lambda y, t: np.zeros_like(y),
        diffusion=lambda y, t: y,
        y0=np.array([1.0 + 0j]),
        t_span=(0.0, 1.0),
        dt=0.01,
    )
    with pytest.raises(ValueError):
        integrate(prob)
    with pytest.raises(ValueError):
        integrate(prob, noise=NoiseStream(seed=1, dt=0.01), scheme="rk97")


def test_problem_validation():
    with pytest.raises(ValueError):
        SdeProblem(drift=None, diffusion=None, y0=np.zeros(1), t_span=(0.0, 1.0), dt=0.0)
    with pytest.raises(ValueError):
        SdeProblem(drift=None, diffusion=None, y0=np.zeros(1), t_span=(0.0, 0.001), dt=0.01)

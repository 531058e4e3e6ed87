import numpy as np
import pytest

from sheom.algebra import SIGMA_MINUS, SIGMA_PLUS, SIGMA_X, SIGMA_Z, dag
from sheom.bath import BathSpec, matsubara_expansion
from sheom.dispersive import (
    bad_cavity_epsilon,
    build_X,
    build_frame,
    effective_observable,
    steady_alpha,
)
from sheom.errors import ResonanceError


def qubit_ops(omega, g):
    h = 0.5 * omega * SIGMA_Z
    mu = g * SIGMA_X
    return h, mu


def closed_form_X(omega, g, omega_c):
    # basis (e, g): sigma_- = |g><e|, sigma_+ = |e><g|
    a = g / (omega_c - omega)
    b = g / (omega_c + omega)
    return a * SIGMA_MINUS + b * SIGMA_PLUS


def closed_form_OS(omega, g, omega_c):
    return -2.0 * g**2 * omega / (omega_c**2 - omega**2) * SIGMA_Z


def test_build_X_zero_coupling():
    h, _ = qubit_ops(1.0, 0.1)
    assert np.allclose(build_X(h, np.zeros((2, 2)), 10.0), 0.0)


def test_build_X_qubit_closed_form():
    omega, g, omega_c = 1.0, 0.1, 10.0
    h, mu = qubit_ops(omega, g)
    assert np.allclose(build_X(h, mu, omega_c), closed_form_X(omega, g, omega_c), atol=1e-14)


def test_build_X_resonance_error():
    h, mu = qubit_ops(1.0, 0.1)
    with pytest.raises(ResonanceError):
        build_X(h, mu, 1.0)


def test_qubit_effective_observable_closed_form():
    omega, g, omega_c = 1.0, 0.1, 10.0
    h, mu = qubit_ops(omega, g)
    frame = build_frame(h, mu, [SIGMA_Z], omega_c, alpha_sq=0.0)
    assert np.max(np.abs(frame.O_S - closed_form_OS(omega, g, omega_c))) < 1e-10
    assert abs(np.trace(frame.O_S)) < 1e-12


def test_qubit_closed_form_randomized():
    rng = np.random.default_rng(11)
    for _ in range(10):
        omega = rng.uniform(0.5, 3.0)
        g = rng.uniform(0.01, 0.3)
        omega_c = rng.uniform(5.0, 30.0)
        h, mu = qubit_ops(omega, g)
        frame = build_frame(h, mu, [], omega_c, alpha_sq=0.0)
        assert np.max(np.abs(frame.O_S - closed_form_OS(omega, g, omega_c))) < 1e-10


def test_frame_trivial_coupling():
    h = 0.5 * SIGMA_Z
    s = SIGMA_Z
    frame = build_frame(h, np.zeros((2, 2)), [s], 10.0, alpha_sq=3.0)
    assert np.allclose(frame.S_tilde[0], s)
    assert np.allclose(frame.Q[0], 0.0)
    assert np.allclose(frame.Lambda, 0.0)
    assert np.allclose(frame.H_S_D, h)
    assert np.allclose(frame.F_tilde[0], s)


def test_frame_alpha_zero_gives_f_equal_s_tilde():
    h, mu = qubit_ops(1.0, 0.2)
    frame = build_frame(h, mu, [SIGMA_Z], 8.0, alpha_sq=0.0)
    assert np.allclose(frame.F_tilde[0], frame.S_tilde[0])


def test_frame_hermiticity():
    rng = np.random.default_rng(12)
    for _ in range(20):
        a = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
        h = a + dag(a)
        b = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
        mu = 0.05 * (b + dag(b))
        c = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
        s = c + dag(c)
        frame = build_frame(h, mu, [s], 50.0, alpha_sq=rng.uniform(0, 4))
        for op in (frame.O_S, frame.Lambda, frame.H_S_D, frame.S_tilde[0], frame.F_tilde[0]):
            assert np.max(np.abs(op - dag(op))) < 1e-12 * max(np.max(np.abs(op)), 1.0)


def test_frame_basis_covariance():
    rng = np.random.default_rng(13)
    h0, mu0 = qubit_ops(1.0, 0.1)
    s0 = SIGMA_Z
    ref = build_frame(h0, mu0, [s0], 10.0, alpha_sq=1.5)
    for _ in range(20):
        a = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
        q, _ = np.linalg.qr(a)
        rot = build_frame(
            q @ h0 @ dag(q), q @ mu0 @ dag(q), [q @ s0 @ dag(q)], 10.0, alpha_sq=1.5
        )
        for got, want in [
            (rot.X, q @ ref.X @ dag(q)),
            (rot.O_S, q @ ref.O_S @ dag(q)),
            (rot.Lambda, q @ ref.Lambda @ dag(q)),
            (rot.H_S_D, q @ ref.H_S_D @ dag(q)),
            (rot.S_tilde[0], q @ ref.S_tilde[0] @ dag(q)),
            (rot.Q[0], q @ ref.Q[0] @ dag(q)),
        ]:
            assert np.max(np.abs(got - want)) < 1e-10


def test_X_scales_linearly_with_coupling():
    h, mu = qubit_ops(1.0, 0.1)
    x1 = build_X(h, mu, 10.0)
    x3 = build_X(h, 3.0 * mu, 10.0)
    assert np.allclose(x3, 3.0 * x1)


def test_dispersive_ratio_warning():
    h, mu = qubit_ops(1.0, 0.5)
    with pytest.warns(UserWarning, match="dispersive ratio"):
        build_frame(h, mu, [], 2.0, alpha_sq=0.0)


def test_steady_alpha():
    assert steady_alpha(2.0, 0.0, 4.0) == pytest.approx(-0.5j)
    assert steady_alpha(0.0, 1.3, 4.0) == 0.0
    assert steady_alpha(4.0j, 0.0, 4.0) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        steady_alpha(1.0, 0.0, 0.0)


def test_effective_observable_population_quadrature():
    h, mu = qubit_ops(1.0, 0.1)
    frame = build_frame(h, mu, [], 10.0, alpha_sq=0.0)
    # Lambda != 0 in general; build a synthetic frame with Lambda = 0
    from dataclasses import replace

    frame0 = replace(frame, Lambda=np.zeros((2, 2), dtype=complex))
    alpha = 1.3  # real, arg 0
    obs = effective_observable(frame0, kappa=5.0, delta=0.0, phi=-np.pi / 2, alpha=alpha)
    assert np.allclose(obs, -frame0.O_S, atol=1e-12)

    obs_zero = effective_observable(frame0, kappa=5.0, delta=0.0, phi=0.0, alpha=alpha)
    assert np.allclose(obs_zero, 0.0, atol=1e-12)  # pure Lambda readout, Lambda = 0

    obs_half = effective_observable(frame0, kappa=5.0, delta=0.0, phi=-np.pi / 4, alpha=alpha)
    assert np.allclose(obs_half, np.sin(-np.pi / 4) * frame0.O_S, atol=1e-12)


def test_effective_observable_hermitian():
    h, mu = qubit_ops(1.0, 0.2)
    frame = build_frame(h, mu, [SIGMA_Z], 8.0, alpha_sq=2.0)
    obs = effective_observable(frame, kappa=3.0, delta=0.7, phi=0.3, alpha=1.0 + 0.5j)
    assert np.max(np.abs(obs - dag(obs))) < 1e-12


def test_bad_cavity_epsilon_decoupled():
    h = 0.5 * SIGMA_Z
    frame = build_frame(h, np.zeros((2, 2)), [SIGMA_Z], 10.0, alpha_sq=2.0)
    exp = matsubara_expansion(BathSpec(lam=0.1, gamma=1.0, beta=0.5, L=1))
    alpha = np.sqrt(2.0)
    out = bad_cavity_epsilon(frame, [exp], kappa=4.0, delta=0.5, alpha=alpha)
    # O_S = Q = 0 leaves only the detuning scale
    assert out["epsilon"] == pytest.approx(0.5 * (1 + 2.0) / 4.0)


def test_bad_cavity_epsilon_vanishes_with_large_kappa():
    h, mu = qubit_ops(1.0, 0.1)
    frame = build_frame(h, mu, [SIGMA_Z], 10.0, alpha_sq=1.0)
    exp = matsubara_expansion(BathSpec(lam=0.1, gamma=1.0, beta=0.5, L=1))
    e1 = bad_cavity_epsilon(frame, [exp], kappa=10.0, delta=0.0, alpha=1.0)["epsilon"]
    e2 = bad_cavity_epsilon(frame, [exp], kappa=1e6, delta=0.0, alpha=1.0)["epsilon"]
    assert e2 < 1e-4 * e1


def test_bad_cavity_validity_flag():
    h, mu = qubit_ops(1.0, 0.05)
    frame = build_frame(h, mu, [SIGMA_Z], 10.0, alpha_sq=1.0)
    exp = matsubara_expansion(BathSpec(lam=0.05, gamma=50.0, beta=0.05, L=0))
    out = bad_cavity_epsilon(frame, [exp], kappa=50.0, delta=0.0, alpha=1.0)
    assert out["valid"]
    assert out["epsilon"] <= 0.05
    assert out["ratio_trace_norm"] > 0

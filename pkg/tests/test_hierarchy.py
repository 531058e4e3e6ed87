import itertools
import math

import numpy as np
import pytest

from sheom import engine
from sheom.algebra import SIGMA_X, SIGMA_Z, dag
from sheom.bath import BathSpec, matsubara_expansion
from sheom.hierarchy import (
    HierarchyState,
    build_joint_operators,
    enumerate_indices,
    full_heom_diffusion,
    full_heom_drift,
    initial_state,
    partial_trace_cavity,
    partial_trace_system,
    shem_diffusion,
    shem_drift,
    truncation_report,
)
from sheom.measurement import MeasurementConfig
from sheom.spectroscopy import driven_qubit_model
from sheom.validation import bare_bath_model


def test_enumerate_small_spaces():
    sp = enumerate_indices(1, 2)
    assert [tuple(i) for i in sp.indices] == [(0,), (1,), (2,)]
    sp = enumerate_indices(2, 1)
    assert sp.count == 3
    assert {tuple(i) for i in sp.indices} == {(0, 0), (1, 0), (0, 1)}


def test_enumerate_count_matches_bruteforce():
    sp = enumerate_indices(3, 2)
    brute = [
        idx
        for idx in itertools.product(range(3), repeat=3)
        if sum(idx) <= 2
    ]
    assert sp.count == len(brute) == 10


def test_neighbor_tables_mutually_inverse():
    sp = enumerate_indices(3, 3)
    for i in range(sp.count):
        for s in range(3):
            j = sp.up[i, s]
            if j >= 0:
                assert sp.down[j, s] == i
            k = sp.down[i, s]
            if k >= 0:
                assert sp.up[k, s] == i
                assert sp.indices[i, s] == sp.indices[k, s] + 1


def test_enumerate_guards():
    with pytest.raises(ValueError):
        enumerate_indices(0, 1)
    with pytest.raises(ValueError):
        enumerate_indices(40, 12)  # count blows past the guard


def _random_hierarchy(model, rng, hermitian=True, unit_trace=False):
    state = initial_state(model.space, np.eye(model.frame.dim) / model.frame.dim)
    shape = state.ados.shape
    raw = rng.normal(size=shape) + 1j * rng.normal(size=shape)
    if hermitian:
        raw = 0.5 * (raw + np.conj(np.transpose(raw, (0, 2, 1))))
    state.ados = raw
    if unit_trace:
        state.ados[0] /= np.trace(state.ados[0])
    return state


def test_free_evolution_when_uncoupled():
    h = 0.5 * SIGMA_Z
    exp = matsubara_expansion(BathSpec(lam=1e-14, gamma=1.0, beta=1.0, L=1))
    model = bare_bath_model(h, np.zeros((2, 2)), exp, tier=2)
    rng = np.random.default_rng(0)
    state = _random_hierarchy(model, rng)
    out = shem_drift(state, model.frame, model.expansions, None, None, t=0.0)
    _, rates, _ = (lambda e: ((), np.concatenate([x.rates for x in e]), ()))(model.expansions)
    nus = state.space.indices @ rates
    for i in range(state.space.count):
        expected = -1j * (h @ state.ados[i] - state.ados[i] @ h) - nus[i] * state.ados[i]
        assert np.allclose(out.ados[i], expected, atol=1e-12)


def test_drift_trace_preservation():
    model = driven_qubit_model(lam=0.05, gamma=5.0, beta=0.05, tier=3)
    rng = np.random.default_rng(1)
    for _ in range(20):
        state = _random_hierarchy(model, rng)
        out = shem_drift(state, model.frame, model.expansions, model.meas, model.drive, 0.0)
        assert abs(np.trace(out.ados[0])) < 1e-12 * max(np.abs(state.ados).max(), 1.0)


def test_drift_hermiticity_preservation():
    model = driven_qubit_model(lam=0.3, gamma=5.0, beta=0.05, tier=3)
    rng = np.random.default_rng(2)
    for _ in range(20):
        state = _random_hierarchy(model, rng)
        out = shem_drift(state, model.frame, model.expansions, model.meas, model.drive, 0.0)
        for i in range(state.space.count):
            defect = np.max(np.abs(out.ados[i] - dag(out.ados[i])))
            assert defect < 1e-12 * max(np.abs(out.ados).max(), 1.0)


def test_diffusion_traceless_on_physical_block():
    model = driven_qubit_model(lam=0.05, gamma=5.0, beta=0.05, tier=2)
    rng = np.random.default_rng(3)
    for _ in range(20):
        state = _random_hierarchy(model, rng, unit_trace=True)
        out = shem_diffusion(state, model.frame, model.meas)
        assert abs(np.trace(out.ados[0])) < 1e-12 * max(np.abs(state.ados).max(), 1.0)


def test_diffusion_vanishes_without_efficiency():
    model = driven_qubit_model(lam=0.05, gamma=5.0, beta=0.05, tier=2, eta=0.0)
    state = initial_state(model.space, np.eye(2) / 2)
    out = shem_diffusion(state, model.frame, model.meas)
    assert np.allclose(out.ados, 0.0)


def test_diffusion_fixed_point_on_eigenprojector():
    # an O_S eigenprojector with Lambda = 0 is invariant under conditioning
    from dataclasses import replace

    model = driven_qubit_model(lam=0.05, gamma=5.0, beta=0.05, tier=2, relax_rate=0.0)
    frame = replace(model.frame, Lambda=np.zeros((2, 2), dtype=complex))
    state = initial_state(model.space, np.array([[1.0, 0.0], [0.0, 0.0]]))
    out = shem_diffusion(state, frame, model.meas)
    assert np.allclose(out.ados, 0.0, atol=1e-12)


def test_compiled_generator_matches_reference():
    model = driven_qubit_model(lam=0.2, gamma=10.0, beta=0.05, tier=3, matsubara_L=1)
    rng = np.random.default_rng(4)
    state = _random_hierarchy(model, rng, unit_trace=True)
    flat = state.ados.reshape(-1)
    gen = model.generator
    drift_ref = shem_drift(state, model.frame, model.expansions, model.meas, model.drive, 0.0)
    drift_fast = gen.drift_apply(flat, 0.0).reshape(state.ados.shape)
    assert np.max(np.abs(drift_ref.ados - drift_fast)) < 1e-11
    diff_ref = shem_diffusion(state, model.frame, model.meas)
    diff_fast = gen.diffusion_apply(flat).reshape(state.ados.shape)
    assert np.max(np.abs(diff_ref.ados - diff_fast)) < 1e-11


def test_compiled_generator_matches_reference_with_tone():
    from sheom.dispersive import DriveSpec

    model = driven_qubit_model(lam=0.1, gamma=10.0, beta=0.05, tier=2)
    model.drive = DriveSpec(E_p=model.meas.E_p, omega_p=0.0, system_tones=((0.4 + 0.2j, 1.7),))
    rng = np.random.default_rng(5)
    state = _random_hierarchy(model, rng, unit_trace=True)
    flat = state.ados.reshape(-1)
    gen = model.generator
    for t in (0.0, 0.37, 2.9):
        ref = shem_drift(state, model.frame, model.expansions, model.meas, model.drive, t)
        fast = gen.drift_apply(flat, t).reshape(state.ados.shape)
        assert np.max(np.abs(ref.ados - fast)) < 1e-11


def test_terminator_form_switch_factor_two():
    # for Hermitian F: -G [F,[F,.]] = 2 G D[F], so the dissipator-form drift
    # differs exactly by half the terminator contribution
    model_dc = driven_qubit_model(lam=0.2, gamma=5.0, beta=0.05, tier=2)
    model_d = driven_qubit_model(
        lam=0.2, gamma=5.0, beta=0.05, tier=2, terminator_form="dissipator"
    )
    rng = np.random.default_rng(6)
    state = _random_hierarchy(model_dc, rng, unit_trace=True)
    out_dc = shem_drift(
        state, model_dc.frame, model_dc.expansions, model_dc.meas, None, 0.0,
        terminator_form="double_commutator",
    )
    out_d = shem_drift(
        state, model_d.frame, model_d.expansions, model_d.meas, None, 0.0,
        terminator_form="dissipator",
    )
    gam = model_dc.expansions[0].terminator
    f = model_dc.frame.F_tilde[0]
    from sheom.algebra import dissipator

    half = np.array([gam * dissipator(f, state.ados[i]) for i in range(state.space.count)])
    assert np.allclose(out_dc.ados, out_d.ados + half, atol=1e-12)


# ---------------------------------------------------------------------------
# Joint-space validation engine.


def _joint_model(n_fock=6, displaced=False, relax_rate=0.05, chi=0.36):
    model = driven_qubit_model(
        lam=0.05, gamma=5.0, beta=0.05, tier=2, kappa=4.0, alpha_mag=1.0,
        relax_rate=relax_rate, chi=chi, matsubara_L=0,
    )
    joint = build_joint_operators(model.frame, model.meas, model.drive, n_fock, displaced=displaced)
    return model, joint


def test_joint_unitary_when_everything_off():
    model = driven_qubit_model(
        lam=1e-14, gamma=5.0, beta=0.05, tier=0, kappa=1e-9 + 1.0, alpha_mag=0.0,
        relax_rate=0.0, chi=0.36, eta=0.0, matsubara_L=0,
    )
    # kappa must stay positive; kill leakage by scaling the operators instead
    meas = MeasurementConfig(kappa=1e-12, eta=0.0, phi=0.0, E_p=0.0)
    joint = build_joint_operators(model.frame, meas, None, 4, displaced=False)
    space = enumerate_indices(1, 0)
    rho_s = np.array([[0.6, 0.2], [0.2, 0.4]], dtype=complex)
    vac = np.zeros((4, 4), dtype=complex)
    vac[0, 0] = 1.0
    state = initial_state(space, np.kron(rho_s, vac))
    out = full_heom_drift(state, joint, model.expansions, 0.0)
    expected = -1j * (joint.h_static @ state.ados[0] - state.ados[0] @ joint.h_static)
    assert np.max(np.abs(out.ados[0] - expected)) < 1e-9


def test_joint_vacuum_is_leak_fixed_point():
    model, joint = _joint_model(n_fock=5, displaced=False, relax_rate=0.0, chi=0.0)
    space = enumerate_indices(model.space.n_slots, 1)
    rho_s = np.eye(2, dtype=complex) / 2
    vac = np.zeros((5, 5), dtype=complex)
    vac[0, 0] = 1.0
    # switch off the cavity drive so vacuum is stationary for the cavity part
    meas = MeasurementConfig(kappa=model.meas.kappa, eta=1.0, phi=0.0, E_p=0.0)
    joint = build_joint_operators(model.frame, meas, None, 5, displaced=False)
    state = initial_state(space, np.kron(rho_s, vac))
    # couple nothing: lambda ~ 0 expansion
    exp0 = matsubara_expansion(BathSpec(lam=1e-14, gamma=5.0, beta=0.05, L=0))
    space = enumerate_indices(1, 1)
    state = initial_state(space, np.kron(rho_s, vac))
    out = full_heom_drift(state, joint, [exp0], 0.0)
    cav = partial_trace_system(out.ados[0], 2, 5)
    assert np.max(np.abs(cav)) < 1e-10


def test_joint_factorizes_when_system_decoupled():
    # mu = 0 analogue: no measurement coupling, no bath, cavity driven
    model = driven_qubit_model(
        lam=1e-14, gamma=5.0, beta=0.05, tier=1, kappa=4.0, alpha_mag=1.0,
        relax_rate=0.0, chi=0.0, matsubara_L=0,
    )
    joint = build_joint_operators(model.frame, model.meas, None, 6, displaced=False)
    space = enumerate_indices(1, 1)
    rho_s = np.array([[0.7, 0.1j], [-0.1j, 0.3]], dtype=complex)
    vac = np.zeros((6, 6), dtype=complex)
    vac[0, 0] = 1.0
    state = initial_state(space, np.kron(rho_s, vac))
    gen = engine.compile_joint_generator(space, joint, model.expansions)
    res = engine.propagate_deterministic(gen, engine.state_to_vec(state), 1e-3, 500)
    rho_joint = res.rho[-1]
    sys_red = partial_trace_cavity(rho_joint, 2, 6)
    cav_red = partial_trace_system(rho_joint, 2, 6)
    rebuilt = np.kron(sys_red, cav_red)
    assert np.max(np.abs(rebuilt - rho_joint)) < 1e-8


def test_joint_diffusion_trace_and_current():
    model, joint = _joint_model(n_fock=6, displaced=False)
    space = enumerate_indices(model.space.n_slots, 1)
    alpha = 0.8
    # coherent cavity state
    n = np.arange(6)
    amps = np.exp(-abs(alpha) ** 2 / 2) * alpha**n / np.sqrt(
        np.array([math.factorial(k) for k in n], dtype=float)
    )
    coh = np.outer(amps, amps.conj())
    rho_s = np.eye(2, dtype=complex) / 2
    state = initial_state(space, np.kron(rho_s, coh))
    out = full_heom_diffusion(state, joint)
    assert abs(np.trace(out.ados[0])) < 1e-10

    # current mean for a decoupled coherent state: 2 eta kappa 2 Re(alpha e^{-i phi})
    from dataclasses import replace

    frame0 = replace(
        model.frame,
        Lambda=np.zeros((2, 2), dtype=complex),
        X=np.zeros((2, 2), dtype=complex),
    )
    joint0 = build_joint_operators(frame0, model.meas, None, 6, displaced=False)
    gen = engine.compile_joint_generator(space, joint0, model.expansions)
    sig = gen.current_signal(engine.state_to_vec(state))
    kappa, eta, phi = model.meas.kappa, model.meas.eta, model.meas.phi
    expected = 2 * eta * kappa * 2 * np.real(alpha * np.exp(-1j * phi))
    assert sig == pytest.approx(expected, rel=1e-6)


def test_joint_vacuum_diffusion_vanishes():
    from dataclasses import replace

    model, _ = _joint_model()
    frame0 = replace(model.frame, Lambda=np.zeros((2, 2), dtype=complex))
    meas = MeasurementConfig(kappa=4.0, eta=1.0, phi=0.3, E_p=0.0)
    joint = build_joint_operators(frame0, meas, None, 5, displaced=False)
    space = enumerate_indices(model.space.n_slots, 1)
    vac = np.zeros((5, 5), dtype=complex)
    vac[0, 0] = 1.0
    state = initial_state(space, np.kron(np.eye(2) / 2, vac))
    out = full_heom_diffusion(state, joint)
    assert np.max(np.abs(out.ados)) < 1e-12


def test_compiled_joint_matches_reference():
    model, joint = _joint_model(n_fock=4, displaced=True)
    space = enumerate_indices(model.space.n_slots, 2)
    rng = np.random.default_rng(7)
    d = joint.dim
    raw = rng.normal(size=(space.count, d, d)) + 1j * rng.normal(size=(space.count, d, d))
    raw = 0.5 * (raw + np.conj(np.transpose(raw, (0, 2, 1))))
    raw[0] /= np.trace(raw[0])
    state = HierarchyState(space, raw, 0.0)
    flat = raw.reshape(-1)
    gen = engine.compile_joint_generator(space, joint, model.expansions)
    ref = full_heom_drift(state, joint, model.expansions, 0.0)
    fast = gen.drift_apply(flat, 0.0).reshape(raw.shape)
    assert np.max(np.abs(ref.ados - fast)) < 1e-9
    dref = full_heom_diffusion(state, joint)
    dfast = gen.diffusion_apply(flat).reshape(raw.shape)
    assert np.max(np.abs(dref.ados - dfast)) < 1e-9


def test_truncation_report():
    model = driven_qubit_model(lam=0.05, gamma=50.0, beta=0.05, tier=4, matsubara_L=0)
    rep = truncation_report(model.space, model.expansions, model.frame, model.meas, model.drive)
    assert rep.psi == pytest.approx(4 * 50.0)
    assert rep.omega_sc == pytest.approx(3.0, rel=0.2)
    assert rep.ratio == pytest.approx(rep.psi / rep.omega_sc)

    rep0 = truncation_report(
        enumerate_indices(1, 0), model.expansions, model.frame, model.meas, model.drive
    )
    assert rep0.psi == 0.0
    assert not rep0.adequate

    model8 = driven_qubit_model(lam=0.05, gamma=50.0, beta=0.05, tier=8, matsubara_L=0)
    rep8 = truncation_report(model8.space, model8.expansions, model8.frame, model8.meas, None)
    assert rep8.psi == pytest.approx(2 * rep.psi)

"""Dev scratch: core physics sanity checks (not part of the deliverable)."""
import numpy as np

from sheom.algebra import SIGMA_X, SIGMA_Z
from sheom.bath import BathSpec, matsubara_expansion
from sheom.validation import (
    bare_bath_model,
    dephasing_exponent,
    dephasing_exponent_quadrature,
    heom_dephasing_run,
    markov_limit_check,
)
from sheom.measurement import run_deterministic
from sheom.hierarchy import initial_state, shem_drift, shem_diffusion
from sheom import engine
from sheom.spectroscopy import driven_qubit_model

rng = np.random.default_rng(7)

print("== 1. closed form vs quadrature")
e = matsubara_expansion(BathSpec(lam=0.2, gamma=1.0, beta=1.0, L=6))
for t in (0.3, 1.7, 4.0):
    a = dephasing_exponent(e, t)
    b = dephasing_exponent_quadrature(e, t)
    print(f"  t={t}: closed={a:.10f} quad={b:.10f} diff={abs(a-b):.2e}")

print("== 2. compiled generator vs direct RHS (with measurement)")
model = driven_qubit_model(lam=0.05, gamma=50.0, beta=0.05, tier=3)
space = model.space
state = initial_state(space, 0.5 * np.eye(2))
state.ados = rng.normal(size=state.ados.shape) + 1j * rng.normal(size=state.ados.shape)
state.ados = 0.5 * (state.ados + np.conj(np.transpose(state.ados, (0, 2, 1))))  # hermitian
direct = shem_drift(state, model.frame, model.expansions, model.meas, model.drive, t=0.0)
gen = model.generator
flat = gen.drift_apply(state.ados.reshape(-1), 0.0).reshape(state.ados.shape)
print("  drift  max|direct-compiled| =", np.max(np.abs(direct.ados - flat)))
ddir = shem_diffusion(state, model.frame, model.meas)
dflat = gen.diffusion_apply(state.ados.reshape(-1)).reshape(state.ados.shape)
print("  diffus max|direct-compiled| =", np.max(np.abs(ddir.ados - dflat)))

print("== 3. trace/herm preservation of drift")
print("  Tr d sigma0 =", np.trace(direct.ados[0]))
print("  herm defect of drift:", max(np.max(np.abs(direct.ados[i] - direct.ados[i].conj().T)) for i in range(space.count)))
print("  Tr diffusion sigma0 =", np.trace(ddir.ados[0]))

print("== 4. pure dephasing HEOM vs exact (lam/g=0.2, beta*g=1)")
t, coh, exact, rec = heom_dephasing_run(0.2, 1.0)
rel = np.max(np.abs(coh - exact) / exact)
print(f"  max rel dev = {rel:.2e}")
t, coh, exact, rec = heom_dephasing_run(0.01, 0.25)
print(f"  (0.01, 0.25): max rel dev = {np.max(np.abs(coh - exact) / exact):.2e}")

print("== 5. phase convention: HEOM rho01 phase vs cumulant")
lam_g, beta_g, gamma = 0.2, 1.0, 1.0
e_full = matsubara_expansion(BathSpec(lam=lam_g * gamma, gamma=gamma, beta=beta_g / gamma, L=400))
model2 = bare_bath_model(np.zeros((2, 2)), SIGMA_Z, matsubara_expansion(BathSpec(0.2, 1.0, 1.0, L=6)), 10)
rec2 = run_deterministic(model2, 0.5 * (np.eye(2) + SIGMA_X), 0.05, 3.0, sample_stride=1)
heom_phase = np.angle(rec2.rho[:, 0, 1])
cum = dephasing_exponent(e_full, rec2.times)
print("  heom phase[-1] =", heom_phase[-1])
print("  -Im cumulant[-1] =", -np.imag(cum[-1]), " (+Im:", np.imag(cum[-1]), ")")

print("== 6. markov limit")
tt, xh, xl, dev = markov_limit_check()
print("  max|dev| =", dev)

import numpy as np
import pytest

from sheom.errors import AllDivergedError
from sheom.spectroscopy import (
    CHUNK_SIZE,
    EnsembleConfig,
    driven_qubit_model,
    ensemble_spectrum,
    peak_metrics,
    psd,
)


def test_psd_zero_signal():
    f, s = psd(np.zeros(256), dt=0.1)
    assert np.allclose(s, 0.0)
    assert f[0] == 0.0
    assert f[1] == pytest.approx(1.0 / (256 * 0.1))


def test_psd_on_grid_sine():
    n, dt, amp = 1024, 0.05, 2.3
    j0 = 37
    f0 = j0 / (n * dt)
    t = dt * np.arange(n)
    f, s = psd(amp * np.sin(2 * np.pi * f0 * t), dt=dt)
    # single interior bin at A^2 N dt / 2, verified against direct summation
    direct = np.abs(np.sum(amp * np.sin(2 * np.pi * f0 * t) * np.exp(-2j * np.pi * j0 * np.arange(n) / n))) ** 2
    assert s[j0] == pytest.approx(2.0 * dt / n * direct, rel=1e-12)
    assert s[j0] == pytest.approx(amp**2 * n * dt / 2.0, rel=1e-9)
    mask = np.ones(len(s), bool)
    mask[j0] = False
    assert np.max(s[mask]) < 1e-18 * s[j0]


def test_psd_white_noise_level():
    rng = np.random.default_rng(3)
    dt, sigma = 0.02, 1.7
    levels = []
    for _ in range(60):
        f, s = psd(rng.normal(0, sigma, size=512), dt=dt)
        levels.append(np.mean(s[1:-1]))
    assert np.mean(levels) == pytest.approx(2.0 * sigma**2 * dt, rel=0.05)


def test_psd_parseval():
    rng = np.random.default_rng(4)
    x = rng.normal(size=500)
    dt = 0.3
    f, s = psd(x, dt=dt, detrend=True)
    df = 1.0 / (len(x) * dt)
    variance = np.mean((x - x.mean()) ** 2)
    assert np.sum(s) * df == pytest.approx(variance, rel=1e-6)


def test_psd_hann_preserves_white_level():
    rng = np.random.default_rng(5)
    dt, sigma = 0.05, 1.0
    levels = []
    for _ in range(80):
        f, s = psd(rng.normal(0, sigma, size=512), dt=dt, window="hann")
        levels.append(np.mean(s[2:-2]))
    assert np.mean(levels) == pytest.approx(2.0 * sigma**2 * dt, rel=0.05)


def test_psd_input_validation():
    with pytest.raises(ValueError):
        psd(np.zeros(32), dt=0.1)
    with pytest.raises(ValueError):
        psd(np.zeros(128), dt=-1.0)
    with pytest.raises(ValueError):
        psd(np.zeros(128), dt=0.1, window="blackman")


def test_peak_metrics_delta_bin():
    freqs = np.linspace(0.0, 1.0, 101)
    s = np.full(101, 2.0)
    s[40] = 12.0
    m = peak_metrics(freqs, s)
    assert m.found
    assert m.f_peak == pytest.approx(freqs[40])
    assert m.fwhm == pytest.approx(freqs[1] - freqs[0])
    assert m.noise_floor == pytest.approx(2.0)


def test_peak_metrics_flat_spectrum():
    freqs = np.linspace(0.0, 1.0, 101)
    rng = np.random.default_rng(6)
    s = 5.0 + 1e-3 * rng.standard_normal(101)
    stderr = np.full(101, 0.5)
    m = peak_metrics(freqs, s, stderr)
    assert not m.found
    assert np.isnan(m.f_peak)


def test_peak_metrics_lorentzian_width():
    freqs = np.linspace(0.0, 2.0, 801)
    w = 0.07
    f0 = 0.9
    s = 1.0 + 10.0 / (1.0 + ((freqs - f0) / w) ** 2)
    m = peak_metrics(freqs, s)
    assert m.found
    assert m.f_peak == pytest.approx(f0, abs=freqs[1] - freqs[0])
    assert m.fwhm == pytest.approx(2.0 * w, rel=0.1)


def test_peak_metrics_dc_band_reporting():
    freqs = np.linspace(0.0, 1.0, 101)
    s = np.full(101, 1.0)
    s[1] = 50.0  # strong weight inside the DC exclusion band
    s[60] = 4.0
    m = peak_metrics(freqs, s, dc_exclusion_bins=3)
    assert m.global_max_in_dc_band
    assert m.f_peak == pytest.approx(freqs[60])


def _tiny_ensemble_cfg(**model_kw):
    model = driven_qubit_model(
        lam=model_kw.pop("lam", 1e-12),
        gamma=model_kw.pop("gamma", 10.0),
        beta=0.05,
        tier=model_kw.pop("tier", 0),
        matsubara_L=0,
        omega_rabi=model_kw.pop("omega_rabi", 0.0),
        relax_rate=model_kw.pop("relax_rate", 0.0),
        **model_kw,
    )
    return EnsembleConfig(
        model=model, rho0=0.5 * np.eye(2), dt=1e-3, t_final=2.0, record_stride=4
    )


def test_ensemble_decoupled_flat_at_shot_noise_level():
    cfg = _tiny_ensemble_cfg()
    spec = ensemble_spectrum(cfg, 64, master_seed=9, threads=1)
    eta, kappa = 1.0, 50.0
    level = np.mean(spec.psd_mean[1:-1])
    assert level == pytest.approx(4.0 * eta * kappa, rel=0.05)
    m = peak_metrics(spec.freqs, spec.psd_mean, spec.psd_stderr)
    assert not m.found
    assert spec.n_diverged == 0


def test_ensemble_single_trajectory_flags_stderr():
    cfg = _tiny_ensemble_cfg()
    spec = ensemble_spectrum(cfg, 1, master_seed=9, threads=1)
    assert np.all(np.isnan(spec.psd_stderr))
    assert spec.n_used == 1


def test_ensemble_matches_single_periodogram():
    cfg = _tiny_ensemble_cfg()
    spec = ensemble_spectrum(cfg, 1, master_seed=9, threads=1)
    from sheom import engine
    from sheom.hierarchy import initial_state
    from sheom.measurement import derive_seed

    y0 = engine.state_to_vec(initial_state(cfg.model.space, cfg.rho0))
    res = engine.propagate_stochastic_batch(
        cfg.model.generator, y0, cfg.dt, cfg.n_steps, seeds=[derive_seed(9, 0)],
        record_stride=cfg.record_stride,
    )
    f, s = psd(res.currents[0], cfg.sample_dt, detrend=cfg.detrend, window=cfg.window)
    assert np.array_equal(spec.psd_mean, s)


def test_ensemble_error_scales_with_sqrt_n():
    cfg = _tiny_ensemble_cfg()
    s_full = ensemble_spectrum(cfg, 128, master_seed=5, threads=1)
    s_half = ensemble_spectrum(cfg, 64, master_seed=5, threads=1)
    ratio = np.median(s_half.psd_stderr / s_full.psd_stderr)
    assert ratio == pytest.approx(np.sqrt(2.0), rel=0.2)


def test_ensemble_thread_count_invariance():
    cfg = _tiny_ensemble_cfg()
    n = CHUNK_SIZE + 40  # force multiple chunks
    one = ensemble_spectrum(cfg, n, master_seed=77, threads=1)
    two = ensemble_spectrum(cfg, n, master_seed=77, threads=2)
    assert np.array_equal(one.psd_mean, two.psd_mean)
    assert np.array_equal(one.psd_stderr, two.psd_stderr)
    assert np.array_equal(one.current_mean, two.current_mean)


def test_ensemble_all_diverged_raises():
    cfg = EnsembleConfig(
        model=driven_qubit_model(lam=20.0, gamma=5.0, beta=0.05, tier=1, matsubara_L=0),
        rho0=0.5 * np.eye(2),
        dt=0.1,
        t_final=100.0,
        record_stride=1,
    )
    with pytest.raises(AllDivergedError):
        ensemble_spectrum(cfg, 4, master_seed=3, threads=1)


def test_driven_qubit_model_consistency():
    model = driven_qubit_model(lam=0.05, gamma=50.0, beta=0.05)
    # alpha convention: |alpha| = sqrt(kappa), zero phase
    assert model.meas.alpha == pytest.approx(np.sqrt(50.0))
    # Purcell budget: kappa ||X||^2 = relax_rate
    x = model.frame.X
    assert 50.0 * np.max(np.abs(x)) ** 2 == pytest.approx(0.05)
    # conditioning back-action strength consistent with the measurement
    # dephasing it must balance at unit efficiency
    assert model.frame.O_S[0, 0].real == pytest.approx(0.36)

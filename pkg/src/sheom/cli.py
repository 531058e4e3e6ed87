"""Command-line front end.

Subcommands: ``dispersive | heom | trajectory | spectroscopy | validate``.
JSON configs in, CSV plus JSON sidecars out.  Exit codes: 0 success,
2 configuration error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bath import BathSpec
from .config import build_model, load_config, matrix_to_entries
from .dispersive import bad_cavity_epsilon
from .errors import AllDivergedError, ConfigError, SheomError
from .io import dump_json, write_csv, write_sidecar
from .measurement import run_deterministic, run_trajectory
from .spectroscopy import weak_spectroscopy_experiment
from .validation import run_oracle_suite

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4


def _fmt_matrix(name: str, op: np.ndarray) -> str:
    lines = [f"{name}:"]
    for row in np.asarray(op):
        lines.append(
            "  [" + ", ".join(f"{v.real:+.6g}{v.imag:+.6g}j" for v in row) + "]"
        )
    return "\n".join(lines)


def _out_paths(cfg: dict, override: str | None):
    out = cfg["output"]
    directory = Path(override) if override else Path(out["directory"])
    directory.mkdir(parents=True, exist_ok=True)
    return directory, out["prefix"]


def cmd_dispersive(args) -> int:
    cfg = load_config(args.config)
    model, _, _ = build_model(cfg)
    frame = model.frame
    print(f"dimension: {frame.dim}, environments: {frame.n_env}")
    print(_fmt_matrix("X", frame.X))
    print(_fmt_matrix("O_S", frame.O_S))
    print(_fmt_matrix("Lambda", frame.Lambda))
    print(_fmt_matrix("H_S^D", frame.H_S_D))
    for m in range(frame.n_env):
        print(_fmt_matrix(f"S~_{m}", frame.S_tilde[m]))
        print(_fmt_matrix(f"Q_{m}", frame.Q[m]))
    print(f"dispersive_ratio: {frame.dispersive_ratio:.6g}")
    if model.meas is not None:
        eps = bad_cavity_epsilon(
            frame, model.expansions, model.meas.kappa, model.meas.delta, model.meas.alpha
        )
        print(f"bad-cavity epsilon: {eps['epsilon']:.6g} (valid: {eps['valid']})")
        print(
            "kappa / (||O_S||_1 (1+|alpha|^2)): "
            f"{eps['ratio_trace_norm']:.6g} (trace norm), "
            f"{eps['ratio_spectral_norm']:.6g} (spectral norm)"
        )
    return EXIT_OK


def cmd_heom(args) -> int:
    cfg = load_config(args.config)
    if args.tier is not None:
        cfg["hierarchy"]["tier"] = args.tier
    model, rho0, observables = build_model(cfg)
    run = cfg["run"]
    rec = run_deterministic(
        model,
        rho0,
        dt=run["dt"],
        t_final=run["t_final"],
        observables=observables,
        sample_stride=run["decimation"],
    )
    directory, prefix = _out_paths(cfg, args.out)
    csv_path = directory / f"{prefix}_heom.csv"
    names = list(observables)
    write_csv(
        csv_path,
        ["t"] + [f"obs_{n}" for n in names] + ["trace"],
        [rec.times] + [rec.observables[n] for n in names] + [rec.trace],
    )
    write_sidecar(
        csv_path,
        cfg,
        master_seed=None,
        n_diverged=0,
        extra={
            "convergence": {
                "psi": rec.truncation.psi,
                "omega_sc": rec.truncation.omega_sc,
                "ratio": rec.truncation.ratio,
                "adequate": rec.truncation.adequate,
                "tier": model.tier,
                "n_expansion_terms": int(sum(e.n_terms for e in model.expansions)),
            },
            "trace_dev_max": rec.trace_dev_max,
            "herm_defect_max": rec.herm_defect_max,
        },
    )
    print(f"wrote {csv_path}")
    return EXIT_OK


def cmd_trajectory(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["run"]["seed"] = args.seed
    if args.tier is not None:
        cfg["hierarchy"]["tier"] = args.tier
    model, rho0, observables = build_model(cfg)
    if model.meas is None:
        raise ConfigError("config field cavity: trajectory runs need a cavity block")
    run = cfg["run"]
    rec = run_trajectory(
        model,
        rho0,
        dt=run["dt"],
        t_final=run["t_final"],
        seed=(run["seed"], 0),
        observables=observables,
        record_stride=run["decimation"],
        scheme=run["scheme"],
        renormalize=run["renormalize"],
    )
    directory, prefix = _out_paths(cfg, args.out)
    csv_path = directory / f"{prefix}_trajectory.csv"
    names = list(observables)
    keep = ~np.isnan(rec.current) if rec.diverged else slice(None)
    write_csv(
        csv_path,
        ["t", "I"] + [f"obs_{n}" for n in names] + ["trace"],
        [rec.times[keep], rec.current[keep]]
        + [rec.observables[n][keep] for n in names]
        + [rec.trace[keep]],
    )
    write_sidecar(
        csv_path,
        cfg,
        master_seed=run["seed"],
        n_diverged=int(rec.diverged),
        extra={
            "diverged": rec.diverged,
            "diverged_time": rec.diverged_time,
            "trace_dev_max": rec.trace_dev_max,
            "herm_defect_max": rec.herm_defect_max,
            "purity_max": rec.purity_max,
        },
    )
    print(f"wrote {csv_path}" + (" (diverged)" if rec.diverged else ""))
    return EXIT_OK


def cmd_spectroscopy(args) -> int:
    cfg = load_config(args.config)
    run = cfg["run"]
    spect = cfg["spectroscopy"]
    if args.seed is not None:
        run["seed"] = args.seed
    if args.trajectories is not None:
        run["trajectories"] = args.trajectories
    if args.tier is not None:
        spect["tier"] = args.tier
    threads = args.threads or os.cpu_count() or 1

    result = weak_spectroscopy_experiment(
        gammas=spect["gamma_values"],
        lam=spect["lam"],
        beta=cfg["bath"]["beta"],
        n_traj=run["trajectories"],
        master_seed=run["seed"],
        omega_rabi=spect["omega_rabi"],
        chi=spect["chi"],
        relax_rate=spect["relax_rate"],
        kappa=spect["kappa"],
        eta=spect["eta"],
        t_final=run["t_final"],
        dt=run["dt"],
        record_stride=run["decimation"],
        tier=spect["tier"],
        threads=threads,
        window=spect["window"],
        dc_exclusion_bins=spect["dc_exclusion_bins"],
        matsubara_L=spect["matsubara_L"],
    )

    directory, prefix = _out_paths(cfg, args.out)
    for gamma in result.gammas:
        spec = result.spectra[gamma]
        path = directory / f"{prefix}_spectrum_gamma{gamma:g}.csv"
        write_csv(
            path,
            ["freq", "psd_mean", "psd_stderr"],
            [spec.freqs, spec.psd_mean, spec.psd_stderr],
        )
        write_sidecar(
            path, cfg, master_seed=run["seed"], n_diverged=spec.n_diverged,
            extra={"gamma": gamma, "n_used": spec.n_used, "threads_used": threads},
        )
        print(f"wrote {path} (diverged {spec.n_diverged}/{spec.n_requested})")
    table_path = directory / f"{prefix}_comparison.csv"
    cols = ["gamma", "lambda", "beta", "f_peak", "fwhm", "noise_floor", "n_used", "n_diverged"]
    write_csv(
        table_path,
        cols,
        [np.asarray([row[c] for row in result.table], dtype=float) for c in cols],
    )
    write_sidecar(table_path, cfg, master_seed=run["seed"])
    verdict_path = directory / f"{prefix}_verdicts.json"
    dump_json(
        verdict_path,
        {
            "verdicts": result.verdicts,
            "config": cfg,
            "master_seed": run["seed"],
            "version": __version__,
        },
    )
    print(f"wrote {table_path}\nwrote {verdict_path}")
    print(
        "peak shift monotone: %s, broadening monotone: %s"
        % (result.verdicts["peak_shift_monotone"], result.verdicts["fwhm_monotone"])
    )
    return EXIT_OK


def cmd_validate(args) -> int:
    sign = -1.0 if args.debug_negate_terminator else 1.0
    report = run_oracle_suite(quick=args.quick, terminator_sign=sign)
    text = json.dumps(report, indent=1, default=float)
    if args.json:
        Path(args.json).write_text(text + "\n")
        print(f"wrote {args.json}")
    for check in report["checks"]:
        print(f"[{'PASS' if check['passed'] else 'FAIL'}] {check['name']}")
    print(f"overall: {'PASS' if report['passed'] else 'FAIL'} "
          f"({report['n_checks']} checks, {report['elapsed_seconds']:.1f}s)")
    return EXIT_OK if report["passed"] else EXIT_NUMERICAL


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="sheom",
        description="Continuous-measurement simulator for open quantum systems "
        "with non-Markovian environments",
    )
    ap.add_argument("--version", action="version", version=f"sheom {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dispersive", help="print the dispersive-frame report")
    p.add_argument("-c", "--config", required=True)
    p.set_defaults(func=cmd_dispersive)

    p = sub.add_parser("heom", help="deterministic hierarchy propagation")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--tier", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_heom)

    p = sub.add_parser("trajectory", help="single conditioned trajectory")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--tier", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_trajectory)

    p = sub.add_parser("spectroscopy", help="ensemble detector spectra vs bandwidth")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--trajectories", type=int, default=None)
    p.add_argument("--tier", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_spectroscopy)

    p = sub.add_parser("validate", help="run the oracle suite")
    p.add_argument("--quick", action="store_true", help="subset finishing in under a minute")
    p.add_argument("--json", default=None, help="write the full report here")
    p.add_argument(
        "--debug-negate-terminator",
        action="store_true",
        help="negative control: flip the terminator sign; the Markov check must fail",
    )
    p.set_defaults(func=cmd_validate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AllDivergedError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except RuntimeError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SheomError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

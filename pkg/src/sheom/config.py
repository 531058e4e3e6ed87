"""JSON run configurations: schema validation and model assembly.

One JSON document describes a run; matrices are row-major nested arrays of
[re, im] pairs.  Defaults are resolved here so that sidecars always echo a
complete configuration.  Field errors name the offending path
(e.g. ``cavity.kappa``).
"""

from __future__ import annotations

import json
from pathlib import Path

import jsonschema
import numpy as np

from .algebra import as_operator
from .bath import BathSpec, choose_L, matsubara_expansion
from .dispersive import DriveSpec, build_frame
from .errors import ConfigError
from .measurement import MeasurementConfig, SimulationModel
from .validation import bare_bath_model

_COMPLEX_ENTRY = {
    "type": "array",
    "items": {"type": "number"},
    "minItems": 2,
    "maxItems": 2,
}

_MATRIX = {"type": "array", "items": {"type": "array", "items": _COMPLEX_ENTRY}}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["system", "bath"],
    "properties": {
        "system": {
            "type": "object",
            "additionalProperties": False,
            "required": ["dimension", "hamiltonian"],
            "properties": {
                "dimension": {"type": "integer", "minimum": 2},
                "hamiltonian": _MATRIX,
                "coupling_mu": {"anyOf": [_MATRIX, {"type": "null"}]},
                "bath_couplings": {"type": "array", "items": _MATRIX, "minItems": 1},
                "initial_state": {"anyOf": [_MATRIX, {"type": "null"}]},
            },
        },
        "bath": {
            "type": "object",
            "additionalProperties": False,
            "required": ["environments", "beta"],
            "properties": {
                "environments": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["lam", "gamma"],
                        "properties": {
                            "lam": {"type": "number", "exclusiveMinimum": 0},
                            "gamma": {"type": "number", "exclusiveMinimum": 0},
                        },
                    },
                },
                "beta": {"type": "number", "exclusiveMinimum": 0},
                "matsubara_L": {"anyOf": [{"type": "integer", "minimum": 0}, {"type": "null"}]},
            },
        },
        "cavity": {
            "anyOf": [
                {"type": "null"},
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["omega_c", "kappa", "eta", "phi", "E_p", "omega_p"],
                    "properties": {
                        "omega_c": {"type": "number"},
                        "kappa": {"type": "number", "exclusiveMinimum": 0},
                        "eta": {"type": "number", "minimum": 0, "maximum": 1},
                        "phi": {"type": "number"},
                        "E_p": _COMPLEX_ENTRY,
                        "omega_p": {"type": "number"},
                    },
                },
            ]
        },
        "drive": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "system_tones": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["amplitude", "omega"],
                        "properties": {
                            "amplitude": _COMPLEX_ENTRY,
                            "omega": {"type": "number"},
                        },
                    },
                }
            },
        },
        "hierarchy": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tier": {"type": "integer", "minimum": 0},
                "terminator": {"type": "boolean"},
                "terminator_form": {"enum": ["double_commutator", "dissipator"]},
            },
        },
        "run": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dt": {"type": "number", "exclusiveMinimum": 0},
                "t_final": {"type": "number", "exclusiveMinimum": 0},
                "decimation": {"type": "integer", "minimum": 1},
                "trajectories": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer"},
                "renormalize": {"type": "boolean"},
                "scheme": {"enum": ["platen", "euler"]},
            },
        },
        "observables": {"type": "object", "additionalProperties": _MATRIX},
        "spectroscopy": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "gamma_values": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
                "lam": {"type": "number", "exclusiveMinimum": 0},
                "omega_rabi": {"type": "number"},
                "chi": {"type": "number"},
                "relax_rate": {"type": "number", "minimum": 0},
                "kappa": {"type": "number", "exclusiveMinimum": 0},
                "eta": {"type": "number", "minimum": 0, "maximum": 1},
                "window": {"enum": ["none", "hann"]},
                "dc_exclusion_bins": {"type": "integer", "minimum": 1},
                "tier": {"anyOf": [{"type": "integer", "minimum": 0}, {"type": "null"}]},
                "matsubara_L": {"type": "integer", "minimum": 0},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "directory": {"type": "string"},
                "prefix": {"type": "string"},
            },
        },
    },
}

DEFAULTS = {
    "system": {"coupling_mu": None, "bath_couplings": None, "initial_state": None},
    "bath": {"matsubara_L": None},
    "cavity": None,
    "drive": {"system_tones": []},
    "hierarchy": {"tier": 3, "terminator": True, "terminator_form": "double_commutator"},
    "run": {
        "dt": 2e-3,
        "t_final": 200.0,
        "decimation": 4,
        "trajectories": 1,
        "seed": 0,
        "renormalize": True,
        "scheme": "platen",
    },
    "observables": {},
    "spectroscopy": {
        "gamma_values": [50.0, 10.0, 5.0],
        "lam": 0.05,
        "omega_rabi": 3.0,
        "chi": 0.36,
        "relax_rate": 0.05,
        "kappa": 50.0,
        "eta": 1.0,
        "window": "none",
        "dc_exclusion_bins": 3,
        "tier": None,
        "matsubara_L": 0,
    },
    "output": {"directory": ".", "prefix": "sheom"},
}


def _merge_defaults(cfg: dict) -> dict:
    out = {}
    for key, default in DEFAULTS.items():
        val = cfg.get(key, None)
        if isinstance(default, dict):
            val = dict(val or {})
            for k, dv in default.items():
                val.setdefault(k, dv)
            out[key] = val
        else:
            out[key] = cfg.get(key, default)
    for key in cfg:
        if key not in out:
            out[key] = cfg[key]
    return out


def _field_path(error: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in error.absolute_path]
    if error.validator == "required":
        missing = error.message.split("'")[1]
        parts.append(missing)
    return ".".join(parts) if parts else "<root>"


def validate_config(cfg: dict) -> dict:
    """Validate against the schema, resolve defaults, check finiteness."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(f"config field {_field_path(e)}: {e.message}")
    resolved = _merge_defaults(cfg)

    def check_finite(obj, path):
        if isinstance(obj, dict):
            for k, v in obj.items():
                check_finite(v, f"{path}.{k}" if path else k)
        elif isinstance(obj, list):
            for i, v in enumerate(obj):
                check_finite(v, f"{path}[{i}]")
        elif isinstance(obj, float) and not np.isfinite(obj):
            raise ConfigError(f"config field {path}: non-finite value")

    check_finite(resolved, "")
    return resolved


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return validate_config(cfg)


def parse_matrix(entries, dim: int, path: str) -> np.ndarray:
    arr = np.asarray(entries, dtype=float)
    if arr.shape != (dim, dim, 2):
        raise ConfigError(
            f"config field {path}: expected a {dim}x{dim} matrix of [re, im] pairs"
        )
    return as_operator(arr[..., 0] + 1j * arr[..., 1])


def parse_complex(pair) -> complex:
    return complex(pair[0], pair[1])


def matrix_to_entries(op: np.ndarray) -> list:
    op = np.asarray(op, dtype=complex)
    return [[[float(v.real), float(v.imag)] for v in row] for row in op]


def build_model(cfg: dict) -> tuple[SimulationModel, np.ndarray, dict]:
    """Assemble the simulation model, initial state and observables."""
    sys_cfg = cfg["system"]
    dim = sys_cfg["dimension"]
    h_s = parse_matrix(sys_cfg["hamiltonian"], dim, "system.hamiltonian")
    couplings = [
        parse_matrix(m, dim, f"system.bath_couplings[{i}]")
        for i, m in enumerate(sys_cfg["bath_couplings"] or [])
    ]
    envs = cfg["bath"]["environments"]
    if couplings and len(couplings) != len(envs):
        raise ConfigError(
            "config field system.bath_couplings: need one coupling operator per "
            "bath environment"
        )

    meas = None
    alpha_sq = 0.0
    if cfg["cavity"] is not None:
        cav = cfg["cavity"]
        meas = MeasurementConfig(
            kappa=cav["kappa"],
            eta=cav["eta"],
            phi=cav["phi"],
            E_p=parse_complex(cav["E_p"]),
            omega_p=cav["omega_p"],
            omega_c=cav["omega_c"],
        )
        alpha_sq = abs(meas.alpha) ** 2

    tones = tuple(
        (parse_complex(t["amplitude"]), float(t["omega"]))
        for t in cfg["drive"]["system_tones"]
    )
    drive = DriveSpec(
        E_p=meas.E_p if meas else 0.0,
        omega_p=meas.omega_p if meas else 0.0,
        system_tones=tones,
    )

    beta = cfg["bath"]["beta"]
    L = cfg["bath"]["matsubara_L"]
    if L is None:
        evals = np.linalg.eigvalsh(h_s)
        omega_max = max(
            float(evals[-1] - evals[0]),
            max((abs(w) for _, w in tones), default=0.0),
            1e-6,
        )
        L = max(
            choose_L(BathSpec(e["lam"], e["gamma"], beta, 0), omega_max) for e in envs
        )
    expansions = [
        matsubara_expansion(BathSpec(lam=e["lam"], gamma=e["gamma"], beta=beta, L=L))
        for e in envs
    ]
    if not cfg["hierarchy"]["terminator"]:
        from dataclasses import replace

        expansions = [replace(e, terminator=0.0j) for e in expansions]

    mu_entries = sys_cfg["coupling_mu"]
    if mu_entries is not None:
        if meas is None:
            raise ConfigError(
                "config field cavity: a coupling_mu operator needs cavity parameters"
            )
        mu = parse_matrix(mu_entries, dim, "system.coupling_mu")
        frame = build_frame(h_s, mu, couplings, cav["omega_c"], alpha_sq)
        model = SimulationModel(
            frame=frame,
            expansions=expansions,
            meas=meas,
            drive=drive,
            tier=cfg["hierarchy"]["tier"],
            terminator_form=cfg["hierarchy"]["terminator_form"],
        )
    else:
        if not couplings:
            raise ConfigError("config field system: need coupling_mu or bath_couplings")
        model = bare_bath_model(
            h_s,
            couplings,
            expansions,
            cfg["hierarchy"]["tier"],
            terminator_form=cfg["hierarchy"]["terminator_form"],
        )
        model.meas = meas
        model.drive = drive

    if sys_cfg["initial_state"] is not None:
        rho0 = parse_matrix(sys_cfg["initial_state"], dim, "system.initial_state")
    else:
        rho0 = np.eye(dim, dtype=complex) / dim
    observables = {
        name: parse_matrix(m, dim, f"observables.{name}")
        for name, m in cfg["observables"].items()
    }
    return model, rho0, observables

"""Output formats: round-trip CSV plus JSON sidecars.

Every produced file gets a sidecar carrying the fully resolved
configuration, the master seed, the tool version and the divergence count,
so a run is re-executable from its sidecar alone.  Numbers are written
with 17 significant digits (exact float round trip), '.' decimal and LF
line endings.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from . import __version__

FLOAT_FMT = "%.17g"


def write_csv(path, header: list[str], columns: list[np.ndarray]) -> None:
    """Column-oriented CSV with full-precision floats and LF endings."""
    cols = [np.asarray(c) for c in columns]
    n = len(cols[0])
    if any(len(c) != n for c in cols):
        raise ValueError("CSV columns must have equal length")
    path = Path(path)
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for k in range(n):
            fh.write(",".join(FLOAT_FMT % c[k] for c in cols) + "\n")


def write_sidecar(
    data_path,
    config: dict,
    master_seed=None,
    n_diverged: int | None = None,
    extra: dict | None = None,
) -> Path:
    """JSON sidecar next to ``data_path`` (same name + '.meta.json')."""
    payload = {
        "tool": "sheom",
        "version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "config": config,
        "master_seed": master_seed,
        "n_diverged": n_diverged,
    }
    if extra:
        payload.update(extra)
    side = Path(str(data_path) + ".meta.json")
    with open(side, "w", newline="\n") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True, default=_jsonable)
        fh.write("\n")
    return side


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    raise TypeError(f"not JSON-serializable: {type(obj)}")


def dump_json(path, payload: dict) -> None:
    with open(path, "w", newline="\n") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True, default=_jsonable)
        fh.write("\n")

"""Deterministic file writers for experiment outputs.

Numeric files (CSV and report JSON) are byte-identical across reruns of the
same seeded computation; anything time-dependent is quarantined in the
meta.json written next to them.
"""

from __future__ import annotations

import csv
import datetime
import json
from pathlib import Path

import numpy as np


def fmt(value) -> str:
    return f"{float(value):.12g}"


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def write_matrix_csv(path, matrix) -> Path:
    m = np.asarray(matrix, dtype=float)
    rows = [[fmt(v) for v in row] for row in m]
    header = [f"c{j}" for j in range(m.shape[1])]
    return write_csv(path, header, rows)


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=list) + "\n")
    return path


def write_meta(path, command: str, seed: int, resolved_config_json: str) -> Path:
    """The one output file that carries a timestamp."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "command": command,
        "seed": seed,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "resolved_config": json.loads(resolved_config_json),
    }
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path

"""Roadmap-structured JSON report and the CSV files written beside it.

The report is a pure function of configuration, data and seed: no timestamps,
absolute paths or host details. Those go to ``metadata.json`` instead, so two
runs with the same inputs produce byte-identical ``report.json`` files.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import platform
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

SCHEMA_VERSION = "1.0"
REPORT_NAME = "report.json"
METADATA_NAME = "metadata.json"

# Report sections follow the six roadmap steps, numbered 0 to 5.
STEPS = (
    ("0_question", "well-defined scientific question"),
    ("1_statistical_model", "observed data and statistical model"),
    ("2_causal_estimand", "causal model and target parameter"),
    ("3_identification", "identification: timing, positivity and outcome-blind checks"),
    ("4_estimation", "estimation and inference"),
    ("5_interpretation", "interpretation and sensitivity analysis"),
)
STEP_KEYS = tuple(k for k, _ in STEPS)
STEP_NOTE = "steps are numbered 0-5; step k here corresponds to roadmap stage k+1 when stages are counted from 1"

NOT_RUN = "not run"


def _clean(obj):
    """Convert numpy scalars/arrays and non-finite floats into JSON-safe values."""
    if isinstance(obj, Mapping):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_text_atomic(path: str | Path, text: str) -> Path:
    """Write ``text`` to a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_json(path: str | Path, obj) -> Path:
    return write_text_atomic(path, dumps(obj))


def write_csv(path: str | Path, rows: Iterable[Mapping], fieldnames: list[str] | None = None) -> Path:
    rows = [_clean(dict(r)) for r in rows]
    if fieldnames is None:
        fieldnames = list(rows[0]) if rows else []
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: ("" if r.get(k) is None else repr(r[k]) if isinstance(r[k], float) else r[k]) for k in fieldnames})
    return write_text_atomic(path, buf.getvalue())


def read_report(path: str | Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def new_report(command: str, seed: int | None, config_echo: dict, package_version: str) -> dict:
    report = {
        "schema_version": SCHEMA_VERSION,
        "package_version": package_version,
        "command": command,
        "seed": seed,
        "config": config_echo,
        "step_numbering": STEP_NOTE,
        "steps": {},
    }
    for key, title in STEPS:
        report["steps"][key] = {"title": title, "status": NOT_RUN}
    return report


def set_step(report: dict, key: str, status: str = "ok", **content) -> dict:
    if key not in STEP_KEYS:
        raise KeyError(f"unknown roadmap step {key!r}")
    section = {"title": dict(STEPS)[key], "status": status}
    section.update(content)
    report["steps"][key] = section
    return section


def mark_downstream(report: dict, after: str, reason: str) -> None:
    """Mark every step after ``after`` as not run, recording why."""
    start = STEP_KEYS.index(after) + 1
    for key in STEP_KEYS[start:]:
        report["steps"][key] = {"title": dict(STEPS)[key], "status": NOT_RUN, "reason": reason}


def estimation_result(report: dict) -> dict:
    """The estimation block of a prior report, or ``KeyError`` when absent."""
    section = report.get("steps", {}).get("4_estimation", {})
    if section.get("status") != "ok" or "tmle" not in section:
        raise KeyError("estimation section missing")
    return section["tmle"]


def metadata(command: str, argv: list[str]) -> dict:
    import scipy
    import pandas

    return {
        "created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "command": command,
        "argv": argv,
        "python": platform.python_version(),
        "platform": platform.platform(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pandas.__version__,
    }

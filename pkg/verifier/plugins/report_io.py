import json
import logging
import os
import sys
from typing import Dict, Iterable, List, Optional

import numpy as np
import pandas as pd

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '../../simulation_integration')))

from errors import ConfigError
from sde_engine import Path
from experiments import SuiteReport
from run_config import SCHEMA_VERSION

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["check_id", "suite", "claim", "estimate", "threshold", "margin", "ci_lo", "ci_hi",
                  "verdict", "config_hash", "seed", "note"]
DRIFT_COLUMNS = ["y_radius", "m", "estimate", "se", "ci_lo", "ci_hi", "n", "verdict"]
OUTPUT_FORMATS = ("csv", "json", "both")


def reports_frame(reports: Iterable[SuiteReport]) -> pd.DataFrame:
    return pd.DataFrame([r.to_dict() for r in reports], columns=REPORT_COLUMNS)


def drift_frame(rows: List[dict]) -> pd.DataFrame:
    return pd.DataFrame(rows, columns=DRIFT_COLUMNS)


def run_id(config_hash: str, seed: int) -> str:
    return f"{config_hash}-s{seed}"


def build_bundle(reports: List[SuiteReport], config_hash: str, seed: int,
                 m1: Optional[float] = None) -> Dict[str, object]:
    return {
        "schema_version": SCHEMA_VERSION,
        "run_id": run_id(config_hash, seed),
        "config_hash": config_hash,
        "seed": seed,
        "m1": m1,
        "reports": [r.to_dict() for r in reports],
    }


def read_bundle(path: str) -> List[SuiteReport]:
    with open(path, "r") as f:
        bundle = json.load(f)
    version = bundle.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"report bundle schema {version!r} is not {SCHEMA_VERSION}", "schema_version")
    return [SuiteReport(**row) for row in bundle["reports"]]


def write_reports(reports: List[SuiteReport], output_dir: str, config_hash: str, seed: int,
                  fmt: str = "both", m1: Optional[float] = None,
                  tables: Optional[Dict[str, List[dict]]] = None) -> List[str]:
    """Writes reports.csv / reports.json (and one CSV per drift table) under output_dir/run_id.
    Returns the written paths."""
    if fmt not in OUTPUT_FORMATS:
        raise ConfigError(f"output format must be one of {OUTPUT_FORMATS}, got {fmt!r}", "format")
    target = os.path.join(output_dir, run_id(config_hash, seed))
    os.makedirs(target, exist_ok=True)
    written = []
    if fmt in ("csv", "both"):
        path = os.path.join(target, "reports.csv")
        reports_frame(reports).to_csv(path, index=False)
        written.append(path)
    if fmt in ("json", "both"):
        path = os.path.join(target, "reports.json")
        with open(path, "w") as f:
            json.dump(build_bundle(reports, config_hash, seed, m1), f, indent=2, sort_keys=True)
        written.append(path)
    for name, rows in sorted((tables or {}).items()):
        path = os.path.join(target, f"{name}.csv")
        drift_frame(rows).to_csv(path, index=False)
        written.append(path)
    for path in written:
        logger.info(f"Wrote {path}")
    return written


def path_frame(path: Path) -> pd.DataFrame:
    states = np.asarray(path.states, dtype=float)
    columns = {"time": path.times}
    for k in range(states.shape[1]):
        columns[f"x{k + 1}"] = states[:, k]
    columns["regime"] = np.asarray(path.regimes, dtype=int)
    return pd.DataFrame(columns)


def write_path_csv(path: Path, filename: str) -> str:
    """Columnar dump of one path: time, x1..xd, regime; one row per sample time."""
    parent = os.path.dirname(filename)
    if parent:
        os.makedirs(parent, exist_ok=True)
    path_frame(path).to_csv(filename, index=False)
    logger.info(f"Wrote path with {len(path.times)} samples to {filename}")
    return filename

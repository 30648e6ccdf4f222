import logging
import os
import sys
from dataclasses import dataclass
from typing import Dict

import pandas as pd

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '../../simulation_integration')))

from errors import ConfigError
from model_core import DriftSpec, ModelParams, canonical_model, check_conditions

logger = logging.getLogger(__name__)

# Placeholder recurrence radius, in units of M, used until the M1 search has run.
PLACEHOLDER_M1_FACTOR = 4.0


@dataclass(frozen=True)
class Preset:
    name: str
    params: ModelParams
    kappa_minus: float
    kappa_plus: float
    search_m1: bool
    description: str

    def spec(self) -> DriftSpec:
        return canonical_model(self.params, self.kappa_minus, self.kappa_plus)


def canonical_params(d: int, kappa_minus: float, kappa_plus: float, lambda_minus: float,
                     lambda_plus: float, M: float = 1.0, M1: float = None) -> ModelParams:
    """Parameters matching the radial family exactly: r = R = kappa in each regime."""
    return ModelParams(
        d=d, lambda_minus=lambda_minus, lambda_plus=lambda_plus,
        r_minus=kappa_minus, r_plus=kappa_plus, R_minus=kappa_minus, R_plus=kappa_plus,
        M=M, M1=M1 if M1 is not None else PLACEHOLDER_M1_FACTOR * M,
    )


def _canonical(name: str, d: int, kappa_minus: float, kappa_plus: float, lambda_minus: float,
               lambda_plus: float, description: str) -> Preset:
    return Preset(
        name=name,
        params=canonical_params(d, kappa_minus, kappa_plus, lambda_minus, lambda_plus),
        kappa_minus=kappa_minus,
        kappa_plus=kappa_plus,
        search_m1=True,
        description=description,
    )


def preset_catalogue() -> Dict[str, Preset]:
    return {
        "canonical-1d": _canonical("canonical-1d", 1, 4.0, 0.1, 1.0, 10.0,
                                   "one-dimensional radial model with every condition tier satisfied"),
        "canonical-3d": _canonical("canonical-3d", 3, 6.0, 0.1, 1.0, 10.0,
                                   "three-dimensional analogue of canonical-1d"),
        "boundary-c1": _canonical("boundary-c1", 1, 1.4, 0.1, 1.0, 10.0,
                                  "negative control: satisfies c1, fails c2 and c2a"),
    }


def get_preset(name: str) -> Preset:
    catalogue = preset_catalogue()
    if name not in catalogue:
        raise ConfigError(f"unknown preset '{name}', expected one of {sorted(catalogue)}", "model.preset")
    return catalogue[name]


def catalogue_frame() -> pd.DataFrame:
    rows = []
    for preset in preset_catalogue().values():
        report = check_conditions(preset.params)
        p = preset.params
        rows.append({
            "preset": preset.name,
            "d": p.d,
            "kappa_minus": preset.kappa_minus,
            "kappa_plus": preset.kappa_plus,
            "lambda_minus": p.lambda_minus,
            "lambda_plus": p.lambda_plus,
            "c1": report.holds_c1,
            "c2": report.holds_c2,
            "c2a": report.holds_c2a,
            "c2a_margin": report.margins["c2a"],
        })
    return pd.DataFrame(rows)

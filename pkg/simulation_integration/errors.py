from typing import Dict, Optional


class ToolkitError(Exception):
    """Base class for every error the toolkit raises on purpose."""
    exit_code = 1


class ConfigError(ToolkitError):
    """Invalid run configuration or model parameters."""
    exit_code = 2

    def __init__(self, message: str, key_path: Optional[str] = None):
        self.key_path = key_path
        if key_path:
            message = f"{key_path}: {message}"
        super().__init__(message)


class ConditionGateError(ConfigError):
    """A suite was asked to run on parameters that fail its condition tier."""

    def __init__(self, suite_id: str, tier: str, margins: Dict[str, float]):
        self.suite_id = suite_id
        self.tier = tier
        self.margins = dict(margins)
        rendered = ", ".join(f"{k}={v:+.6g}" for k, v in sorted(margins.items()))
        super().__init__(f"suite '{suite_id}' requires condition ({tier}) which does not hold [{rendered}]")


class SimulationError(ToolkitError):
    exit_code = 3


class PathAbortedError(SimulationError):
    """Raised when a single recorded path leaves the finite state range."""

    def __init__(self, time: float, state, reason: str):
        self.time = time
        self.state = state
        super().__init__(f"path aborted at t={time:.6g}: {reason} (state={state})")


class EstimationError(ToolkitError):
    exit_code = 4

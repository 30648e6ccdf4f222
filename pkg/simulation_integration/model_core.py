import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from errors import ConditionGateError, ConfigError

logger = logging.getLogger(__name__)

# (n, d) positions -> (n, d) drift vectors
DriftFn = Callable[[np.ndarray], np.ndarray]

# Relative slack used when auditing drifts that meet (b)/(b2) with equality.
AUDIT_RTOL = 1e-12


@dataclass(frozen=True)
class ModelParams:
    """All scalar constants of the switching model."""
    d: int
    lambda_minus: float
    lambda_plus: float
    r_minus: float
    r_plus: float
    R_minus: float
    R_plus: float
    M: float
    M1: float

    def __post_init__(self):
        if not isinstance(self.d, (int, np.integer)) or isinstance(self.d, bool) or self.d < 1:
            raise ConfigError(f"dimension must be a positive integer, got {self.d!r}", "model.d")
        for name in ("lambda_minus", "lambda_plus"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ConfigError(f"condition (al) requires 0 < lambda_- and 0 < lambda_+, got {value!r}", f"model.{name}")
        for name in ("r_minus", "r_plus", "R_minus", "R_plus", "M", "M1"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ConfigError(f"must be positive and finite, got {value!r}", f"model.{name}")
        if self.R_plus > self.r_plus:
            raise ConfigError(f"R_+ <= r_+ is required, got R_+={self.R_plus} > r_+={self.r_plus}", "model.R_plus")
        if self.R_minus < self.r_minus:
            raise ConfigError(f"R_- >= r_- is required, got R_-={self.R_minus} < r_-={self.r_minus}", "model.R_minus")
        if self.M1 <= self.M:
            raise ConfigError(f"M1 must exceed M, got M1={self.M1} <= M={self.M}", "model.M1")

    def with_m1(self, m1: float) -> "ModelParams":
        return dataclasses.replace(self, M1=float(m1))

    def rate(self, regime: int) -> float:
        return self.lambda_minus if regime == 0 else self.lambda_plus

    def to_dict(self) -> Dict[str, float]:
        return dataclasses.asdict(self)


class RadialDrift:
    """sign * kappa * x / max(|x|^2, M^2); picklable so ensembles can cross process boundaries."""

    def __init__(self, kappa: float, sign: float, M: float):
        self.kappa = float(kappa)
        self.sign = float(sign)
        self.M = float(M)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        r2 = np.einsum("ij,ij->i", x, x)
        denom = np.maximum(r2, self.M * self.M)
        return (self.sign * self.kappa) * x / denom[:, None]

    def __repr__(self):
        return f"RadialDrift(kappa={self.kappa}, sign={self.sign:+.0f}, M={self.M})"


class ZeroDrift:
    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.zeros_like(x)

    def __repr__(self):
        return "ZeroDrift()"


@dataclass(frozen=True)
class DriftSpec:
    """The pair (b_-, b_+) together with the declared bound ||b||."""
    b_minus: DriftFn
    b_plus: DriftFn
    norm_bound: float
    name: str = "custom"

    def evaluate(self, x: np.ndarray, regime: int) -> np.ndarray:
        fn = self.b_minus if regime == 0 else self.b_plus
        return fn(x)

    def evaluate_mixed(self, x: np.ndarray, regimes: np.ndarray) -> np.ndarray:
        """Row-wise drift where each row carries its own regime label."""
        out = np.empty_like(x)
        minus = regimes == 0
        if minus.all():
            return self.b_minus(x)
        if not minus.any():
            return self.b_plus(x)
        out[minus] = self.b_minus(x[minus])
        out[~minus] = self.b_plus(x[~minus])
        return out


@dataclass
class DriftAudit:
    n_samples: int
    violations_b: int
    violations_b2: int
    violations_norm: int
    worst_b: float
    worst_b2: float
    worst_norm: float
    sup_abs_inner: float

    @property
    def holds_b(self) -> bool:
        return self.violations_b == 0

    @property
    def holds_b2(self) -> bool:
        return self.violations_b2 == 0

    @property
    def holds_norm(self) -> bool:
        return self.violations_norm == 0

    @property
    def passed(self) -> bool:
        return self.holds_b and self.holds_b2 and self.holds_norm

    def second_moment_rate(self, d: int) -> float:
        """C_fit = 2 sup|x.b| + d, the bound on |d/dt E|X_t|^2|."""
        return 2.0 * self.sup_abs_inner + d

    def fourth_moment_rate(self, d: int) -> float:
        """4 sup|x.b| + 2d + 4, the bound on |d/dt E|X_t|^4| / E|X_t|^2."""
        return 4.0 * self.sup_abs_inner + 2.0 * d + 4.0


@dataclass
class ConditionReport:
    holds_c1: bool
    holds_c2: bool
    holds_c2a: bool
    holds_b_audit: Optional[bool] = None
    holds_b2_audit: Optional[bool] = None
    margins: Dict[str, float] = field(default_factory=dict)
    epsilon: Optional[float] = None
    q: Optional[float] = None

    def holds(self, tier: Optional[str]) -> bool:
        if tier is None:
            return True
        return {"c1": self.holds_c1, "c2": self.holds_c2, "c2a": self.holds_c2a}[tier]


def condition_margins(params: ModelParams) -> Dict[str, float]:
    """Signed slack (left minus right) of every inequality in the condition tiers."""
    d = params.d
    lm, lp = params.lambda_minus, params.lambda_plus
    rm, rp = params.r_minus, params.r_plus
    return {
        "c1.dimension": 2.0 * rm - d,
        "c1": (2.0 * rm - d) / lm - (2.0 * rp + d) / lp,
        "c2": (4.0 * rm - (2.0 * d + 4.0)) / lm - (4.0 * rp + (2.0 * d + 4.0)) / lp,
        "c2a": (6.0 * rm - (3.0 * d + 12.0)) / lm - (6.0 * rp + (3.0 * d + 12.0)) / lp,
    }


def check_conditions(params: ModelParams, audit: Optional[DriftAudit] = None,
                     epsilon_fraction: float = 0.5) -> ConditionReport:
    margins = condition_margins(params)
    holds_c1 = margins["c1.dimension"] > 0 and margins["c1"] > 0
    report = ConditionReport(
        holds_c1=holds_c1,
        holds_c2=margins["c2"] > 0,
        holds_c2a=margins["c2a"] > 0,
        margins=margins,
    )
    if audit is not None:
        report.holds_b_audit = audit.holds_b
        report.holds_b2_audit = audit.holds_b2
    if holds_c1:
        report.epsilon, report.q = solve_epsilon_q(params, epsilon_fraction)
    return report


def max_epsilon(params: ModelParams) -> float:
    """Largest epsilon for which the (lle) equation still has a solution q < 1."""
    d = params.d
    lm, lp = params.lambda_minus, params.lambda_plus
    return (lp * (2.0 * params.r_minus - d) - lm * (2.0 * params.r_plus + d)) / (lm + lp)


def q_for_epsilon(params: ModelParams, epsilon: float) -> float:
    d = params.d
    eps_max = max_epsilon(params)
    if not 0.0 < epsilon < eps_max:
        raise ValueError(f"epsilon must lie in (0, {eps_max:.6g}), got {epsilon}")
    return params.lambda_minus * (2.0 * params.r_plus + d + epsilon) / (
        params.lambda_plus * (2.0 * params.r_minus - d - epsilon))


def solve_epsilon_q(params: ModelParams, epsilon_fraction: float = 0.5) -> Tuple[float, float]:
    if not 0.0 < epsilon_fraction < 1.0:
        raise ValueError(f"epsilon_fraction must lie in (0, 1), got {epsilon_fraction}")
    margins = condition_margins(params)
    if not (margins["c1.dimension"] > 0 and margins["c1"] > 0):
        raise ConditionGateError("solve_epsilon_q", "c1", margins)
    epsilon = epsilon_fraction * max_epsilon(params)
    return epsilon, q_for_epsilon(params, epsilon)


def lle_residual(params: ModelParams, epsilon: float, q: float) -> float:
    """Relative residual of lambda_-(2r_+ + d + eps) = q lambda_+(2r_- - d - eps)."""
    d = params.d
    lhs = params.lambda_minus * (2.0 * params.r_plus + d + epsilon)
    rhs = q * params.lambda_plus * (2.0 * params.r_minus - d - epsilon)
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs))


def cycle_drift_constant(params: ModelParams, epsilon: float) -> float:
    """c = lambda_-^{-1}((2r_- - d) - eps) - lambda_+^{-1}((2r_+ + d) + eps), positive under (c1)."""
    d = params.d
    return ((2.0 * params.r_minus - d) - epsilon) / params.lambda_minus - (
        (2.0 * params.r_plus + d) + epsilon) / params.lambda_plus


def occupation_threshold(params: ModelParams, spec: DriftSpec, epsilon: float) -> float:
    """delta = lambda_-^{-1} eps / (2 M ||b|| + 2 r_-), the occupation budget behind the interval bounds."""
    return epsilon / params.lambda_minus / (2.0 * params.M * spec.norm_bound + 2.0 * params.r_minus)


def canonical_model(params: ModelParams, kappa_minus: float, kappa_plus: float) -> DriftSpec:
    """Radial reference family meeting (b) and (b2) with equality outside the ball of radius M."""
    if not kappa_minus > 0:
        raise ConfigError(f"kappa must be positive, got {kappa_minus!r}", "model.kappa_minus")
    if not kappa_plus > 0:
        raise ConfigError(f"kappa must be positive, got {kappa_plus!r}", "model.kappa_plus")
    return DriftSpec(
        b_minus=RadialDrift(kappa_minus, -1.0, params.M),
        b_plus=RadialDrift(kappa_plus, +1.0, params.M),
        norm_bound=max(kappa_minus, kappa_plus) / params.M,
        name="canonical",
    )


def zero_model() -> DriftSpec:
    return DriftSpec(b_minus=ZeroDrift(), b_plus=ZeroDrift(), norm_bound=0.0, name="zero")


def drift_bounds_audit(spec: DriftSpec, params: ModelParams, n_samples: int,
                       seed: int = 0, max_radius_factor: float = 1e3) -> DriftAudit:
    """Checks (b), (b2) and the norm bound on log-uniform radii in [M, max_radius_factor*M]."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    rng = np.random.default_rng(seed)
    d = params.d
    directions = rng.standard_normal((n_samples, d))
    directions /= np.linalg.norm(directions, axis=1)[:, None]
    radii = params.M * 10.0 ** rng.uniform(0.0, math.log10(max_radius_factor), n_samples)
    x = directions * radii[:, None]

    ip_minus = np.einsum("ij,ij->i", x, spec.b_minus(x))
    ip_plus = np.einsum("ij,ij->i", x, spec.b_plus(x))

    def _tol(bound: float) -> float:
        return AUDIT_RTOL * max(1.0, abs(bound))

    # (b): x.b_- <= -r_-, x.b_+ <= r_+
    excess_b = np.maximum(ip_minus + params.r_minus, ip_plus - params.r_plus)
    bad_b = (ip_minus + params.r_minus > _tol(params.r_minus)) | (ip_plus - params.r_plus > _tol(params.r_plus))
    # (b2): x.b_- >= -R_-, x.b_+ >= R_+
    excess_b2 = np.maximum(-params.R_minus - ip_minus, params.R_plus - ip_plus)
    bad_b2 = (-params.R_minus - ip_minus > _tol(params.R_minus)) | (params.R_plus - ip_plus > _tol(params.R_plus))

    norms = np.maximum(np.linalg.norm(spec.b_minus(x), axis=1), np.linalg.norm(spec.b_plus(x), axis=1))
    excess_norm = norms - spec.norm_bound
    bad_norm = excess_norm > _tol(spec.norm_bound)

    sup_abs = float(max(np.max(np.abs(ip_minus)), np.max(np.abs(ip_plus)), params.M * spec.norm_bound))
    audit = DriftAudit(
        n_samples=n_samples,
        violations_b=int(bad_b.sum()),
        violations_b2=int(bad_b2.sum()),
        violations_norm=int(bad_norm.sum()),
        worst_b=float(excess_b.max()),
        worst_b2=float(excess_b2.max()),
        worst_norm=float(excess_norm.max()),
        sup_abs_inner=sup_abs,
    )
    if not audit.passed:
        logger.warning(f"Drift audit of '{spec.name}' found violations: b={audit.violations_b}, "
                       f"b2={audit.violations_b2}, norm={audit.violations_norm}")
    return audit


def sweep_condition_implications(n_tuples: int, seed: int = 0) -> Dict[str, int]:
    """Random positive parameter tuples; counts breaks of c2a => c2 => c1."""
    rng = np.random.default_rng(seed)
    counts = {"tuples": n_tuples, "c2a_without_c2": 0, "c2_without_c1": 0,
              "c1": 0, "c2": 0, "c2a": 0}
    for _ in range(n_tuples):
        r_minus = float(rng.uniform(0.05, 20.0))
        r_plus = float(rng.uniform(0.01, 5.0))
        params = ModelParams(
            d=int(rng.integers(1, 6)),
            lambda_minus=float(10.0 ** rng.uniform(-1.0, 1.0)),
            lambda_plus=float(10.0 ** rng.uniform(-1.0, 1.0)),
            r_minus=r_minus, r_plus=r_plus, R_minus=r_minus, R_plus=r_plus,
            M=1.0, M1=2.0,
        )
        margins = condition_margins(params)
        c1 = margins["c1.dimension"] > 0 and margins["c1"] > 0
        c2 = margins["c2"] > 0
        c2a = margins["c2a"] > 0
        counts["c1"] += int(c1)
        counts["c2"] += int(c2)
        counts["c2a"] += int(c2a)
        counts["c2a_without_c2"] += int(c2a and not c2)
        counts["c2_without_c1"] += int(c2 and not c1)
    return counts

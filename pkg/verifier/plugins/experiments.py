import dataclasses
import logging
import math
import os
import sys
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import stats

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '../../simulation_integration')))

from errors import ConditionGateError, ConfigError
from model_core import (ConditionReport, DriftAudit, check_conditions, cycle_drift_constant,
                        drift_bounds_audit, lle_residual, occupation_threshold,
                        sweep_condition_implications, zero_model)
from rng_streams import derived_seed
from base_plugin import SuitePlugin
from embedded_chain import EmbeddedChainSampler, EmbeddedHitting, M1Search, search_m1
from estimators import (GrowthFit, HalvingResult, MomentEstimate, SwitchingEstimator, fit_leading_coefficient,
                        growth_exponent, normal_quantile, radial_point)
from run_config import RunConfig, tau_horizon

logger = logging.getLogger(__name__)

PASS, FAIL, DIAGNOSTIC, INCONCLUSIVE = "pass", "fail", "diagnostic", "inconclusive"
CENSOR_TARGET = 1e-3
# One-sided power at which a sized check resolves its threshold.
TARGET_POWER = 0.99
# A leading-coefficient interval wider than this fraction of |target| settles nothing.
COEFFICIENT_CI_FRACTION = 0.5
HORIZON_RAISE_FACTOR = 4.0
MAX_HORIZON_RAISES = 3
# The dt-halving hitting check runs at most this many mean cycle durations.
HALVING_HITTING_CYCLES = 100.0


@dataclass
class SuiteReport:
    check_id: str
    suite: str
    claim: str
    estimate: Optional[float]
    threshold: Optional[float]
    margin: Optional[float]
    ci_lo: Optional[float]
    ci_hi: Optional[float]
    verdict: str
    config_hash: str
    seed: int
    note: str = ""

    @property
    def gating(self) -> bool:
        return self.verdict not in (DIAGNOSTIC, INCONCLUSIVE)

    def to_dict(self) -> Dict[str, object]:
        return dataclasses.asdict(self)


@dataclass
class ReplicaBudget:
    n: int
    needed: float
    powered: bool

    @property
    def note(self) -> str:
        return "" if self.powered else f"underpowered: ~{self.needed:.3g} replicas needed"


def interval_coefficient(params, regime: int, power: int) -> float:
    """Leading |x|^(p-2) coefficient of E|X_T1|^p - |x|^p over one holding interval."""
    d = params.d
    if regime == 0:
        r, lam, sign = params.r_minus, params.lambda_minus, -1.0
    else:
        r, lam, sign = params.r_plus, params.lambda_plus, 1.0
    if power == 2:
        return (2.0 * sign * r + d) / lam
    if power == 4:
        return (4.0 * sign * r + 2.0 * d + 4.0) / lam
    if power == 6:
        return (6.0 * sign * r + 3.0 * d + 12.0) / lam
    raise ValueError(f"power must be 2, 4 or 6, got {power!r}")


def cycle_coefficient(params, epsilon: float, m: int) -> float:
    """Leading |y|^(2m-2) coefficient of the one-cycle drift of |Y|^2m."""
    if m == 1:
        return -cycle_drift_constant(params, epsilon)
    return interval_coefficient(params, 0, 2 * m) + interval_coefficient(params, 1, 2 * m)


def magnitude_growth(values: List[MomentEstimate]) -> float:
    """Smallest ratio |mean_(k+1)| / |mean_k| along a radius grid; above 1 means strictly growing."""
    magnitudes = [abs(v.mean) for v in values]
    ratios = [b / a if a > 0 else float("inf") for a, b in zip(magnitudes, magnitudes[1:])]
    return min(ratios) if ratios else float("nan")


def _num(value) -> Optional[float]:
    if value is None:
        return None
    value = float(value)
    return value if math.isfinite(value) else None


def _tag(mult: float) -> str:
    return f"[r={mult:g}M1]"


class SuiteContext:
    """Shared state for one invocation: resolved model, cached M1 search, audits and ensembles."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.est = config.estimation
        self.config_hash = config.config_hash()
        self.seed = config.seed
        self._base_params = config.build_params()
        self.spec = config.build_spec(self._base_params)
        self.conditions: ConditionReport = check_conditions(self._base_params,
                                                            epsilon_fraction=self.est.epsilon_fraction)
        self._audit: Optional[DriftAudit] = None
        self._m1_search: Optional[M1Search] = None
        self._m1: Optional[float] = None
        self._hitting: Dict[Tuple[float, int], EmbeddedHitting] = {}
        self._tau_cfg = None
        self.tables: Dict[str, List[dict]] = {}
        self.z = normal_quantile(self.est.confidence)
        self.z_power = float(stats.norm.ppf(TARGET_POWER))

    # model resolution

    @property
    def audit(self) -> DriftAudit:
        if self._audit is None:
            self._audit = drift_bounds_audit(self.spec, self._base_params, self.est.audit_samples,
                                             seed=derived_seed(self.seed, "drift-audit"))
            self.conditions.holds_b_audit = self._audit.holds_b
            self.conditions.holds_b2_audit = self._audit.holds_b2
        return self._audit

    @property
    def epsilon(self) -> Optional[float]:
        return self.conditions.epsilon

    @property
    def m1(self) -> float:
        if self._m1 is None:
            if not self.config.search_m1:
                self._m1 = self._base_params.M1
            elif not self.conditions.holds_c1:
                logger.warning(f"c1 fails; keeping M1={self._base_params.M1:g} instead of searching")
                self._m1 = self._base_params.M1
            else:
                self._m1_search = self.run_m1_search()
                self._m1 = self._m1_search.m1
                logger.info(f"M1 search selected M1={self._m1:g}")
        return self._m1

    def run_m1_search(self) -> M1Search:
        base = SwitchingEstimator(self._base_params, self.spec, self.config.engine_config(self._base_params),
                                  self.est.confidence, self.est.block_size)
        return search_m1(base, self.epsilon, self.est.replicas)

    @property
    def resolved_m1(self) -> Optional[float]:
        """M1 if a suite has needed it so far, otherwise None."""
        return self._m1

    @property
    def m1_search(self) -> Optional[M1Search]:
        _ = self.m1
        return self._m1_search

    @property
    def params(self):
        return self._base_params.with_m1(self.m1)

    @property
    def engine_cfg(self):
        return self.config.engine_config(self.params)

    @property
    def tau_cfg(self):
        """Engine settings for return-time ensembles.

        Unless the config pins engine.horizon, the horizon starts from tau_horizon at the farthest
        tau radius and is raised while that radius censors CENSOR_TARGET or more of its paths."""
        if self._tau_cfg is None:
            cfg = self.engine_cfg
            if self.est.tau_dt:
                cfg = cfg.with_dt(self.est.tau_dt)
            if self.config.horizon_pinned or self.epsilon is None:
                self._tau_cfg = cfg
            else:
                far = self.est.tau_radius_multipliers[-1]
                horizon = tau_horizon(self.params, self.epsilon, far * self.m1)
                self._tau_cfg = self._calibrate_horizon(dataclasses.replace(cfg, horizon=max(cfg.horizon, horizon)), far)
        return self._tau_cfg

    def _calibrate_horizon(self, cfg, far: float):
        for raises in range(MAX_HORIZON_RAISES + 1):
            hits = {z: self._embedded_hitting(far, z, cfg) for z in (0, 1)}
            worst = max(h.censored_fraction for h in hits.values())
            if worst < CENSOR_TARGET or raises == MAX_HORIZON_RAISES:
                break
            raised = cfg.horizon * HORIZON_RAISE_FACTOR
            logger.warning(f"{100 * worst:.2f}% of return-time paths from {far:g}*M1 censored at horizon "
                           f"{cfg.horizon:g}; raising it to {raised:g}")
            cfg = dataclasses.replace(cfg, horizon=raised)
        if worst >= CENSOR_TARGET:
            logger.warning(f"censored fraction {100 * worst:.2f}% still above {100 * CENSOR_TARGET:g}% "
                           f"at horizon {cfg.horizon:g}")
        for z, hit in hits.items():
            self._hitting[(far, z)] = hit
        return cfg

    def estimator(self, spec=None, cfg=None) -> SwitchingEstimator:
        return SwitchingEstimator(self.params, spec or self.spec, cfg or self.engine_cfg,
                                  self.est.confidence, self.est.block_size)

    def sampler(self) -> EmbeddedChainSampler:
        return EmbeddedChainSampler(self.estimator())

    def point(self, mult: float) -> np.ndarray:
        return radial_point(self.params, mult * self.m1)

    def _embedded_hitting(self, mult: float, z: int, cfg) -> EmbeddedHitting:
        sampler = EmbeddedChainSampler(self.estimator(cfg=cfg))
        return sampler.embedded_hitting(self.point(mult), z, self.est.hitting_replicas,
                                        label=f"hitting{_tag(mult)}|z={z}", cfg=cfg)

    def hitting(self, mult: float, z: int) -> EmbeddedHitting:
        cfg = self.tau_cfg
        key = (mult, z)
        if key not in self._hitting:
            self._hitting[key] = self._embedded_hitting(mult, z, cfg)
        return self._hitting[key]

    def scaled_replicas(self, mult: float) -> int:
        """Base replicas times (mult / smallest multiplier)^2, capped by max_replica_scale."""
        factor = (mult / self.est.radius_multipliers[0]) ** 2
        return int(self.est.replicas * min(self.est.max_replica_scale, max(1.0, factor)))

    def sized_replicas(self, mult: float, power: int, coefficient: float, duration: float,
                       label: str = "") -> ReplicaBudget:
        """Replicas for a sign check on a moment change of mean coefficient*|x|^(p-2).

        The change has noise of order p|x|^(p-1)sqrt(duration), so the count that keeps the mean
        (z + z_power) standard errors from zero grows like |x|^2. It never drops below
        scaled_replicas and is capped at max_replica_scale times the base count; a capped
        budget is logged and flagged as underpowered."""
        radius = mult * self.m1
        gap = abs(coefficient)
        noise = power * radius * math.sqrt(duration)
        needed = ((self.z + self.z_power) * noise / gap) ** 2 if gap > 0 else float("inf")
        cap = self.est.replicas * self.est.max_replica_scale
        n = int(math.ceil(min(cap, max(self.scaled_replicas(mult), needed))))
        powered = needed <= cap
        if not powered:
            logger.warning(f"{label or 'check'} at |x|={radius:g}: about {needed:.3g} replicas are needed to "
                           f"resolve the sign, capped at {cap}")
        return ReplicaBudget(n=n, needed=needed, powered=powered)

    # report builders

    def report(self, check_id: str, suite: str, claim: str, verdict: str, estimate=None, threshold=None,
               margin=None, ci_lo=None, ci_hi=None, note: str = "") -> SuiteReport:
        return SuiteReport(check_id=check_id, suite=suite, claim=claim, estimate=_num(estimate),
                           threshold=_num(threshold), margin=_num(margin), ci_lo=_num(ci_lo),
                           ci_hi=_num(ci_hi), verdict=verdict, config_hash=self.config_hash,
                           seed=self.seed, note=note)

    def not_above(self, check_id, suite, claim, est: MomentEstimate, threshold: float, note="") -> SuiteReport:
        """Upper-bound claim: passes unless the whole interval lies above the threshold."""
        margin = threshold - est.ci_lo
        return self.report(check_id, suite, claim, PASS if margin >= 0 else FAIL, est.mean, threshold,
                           margin, est.ci_lo, est.ci_hi, note or _censor_note(est))

    def below(self, check_id, suite, claim, est: MomentEstimate, threshold: float, note="",
              budget: Optional[ReplicaBudget] = None) -> SuiteReport:
        """Strict claim: the whole interval must lie below the threshold."""
        margin = threshold - est.ci_hi
        verdict = _settle(margin > 0, est.ci_lo < threshold, budget)
        return self.report(check_id, suite, claim, verdict, est.mean, threshold,
                           margin, est.ci_lo, est.ci_hi, _join(note or _censor_note(est), budget))

    def above(self, check_id, suite, claim, est: MomentEstimate, threshold: float, note="",
              budget: Optional[ReplicaBudget] = None) -> SuiteReport:
        margin = est.ci_lo - threshold
        verdict = _settle(margin > 0, est.ci_hi > threshold, budget)
        return self.report(check_id, suite, claim, verdict, est.mean, threshold,
                           margin, est.ci_lo, est.ci_hi, _join(note or _censor_note(est), budget))

    def within(self, check_id, suite, claim, est: MomentEstimate, target: float, n_se: float = 3.0,
               note="") -> SuiteReport:
        allowed = max(n_se * est.se, 1e-12 * max(1.0, abs(target)))
        margin = allowed - abs(est.mean - target)
        return self.report(check_id, suite, claim, PASS if margin >= 0 else FAIL, est.mean, target,
                           margin, est.mean - n_se * est.se, est.mean + n_se * est.se, note)

    def coefficient_match(self, check_id, suite, claim, coefficient: float, se: float, target: float,
                          tolerance: float) -> SuiteReport:
        """Fitted coefficient against an explicit target.

        Fails when the interval misses the band target +- tolerance*|target|. Passes only when
        the estimate also has the target's sign and the interval half-width is at most
        COEFFICIENT_CI_FRACTION*|target|; a wider or wrong-signed interval is inconclusive."""
        half = self.z * se if math.isfinite(se) else float("inf")
        allowed = tolerance * abs(target) + half
        margin = allowed - abs(coefficient - target)
        if margin < 0:
            verdict, note = FAIL, ""
        elif coefficient * target <= 0 or half > COEFFICIENT_CI_FRACTION * abs(target):
            verdict = INCONCLUSIVE
            note = f"half-width {half:.3g} or sign does not settle target {target:.6g}"
        else:
            verdict, note = PASS, ""
        return self.report(check_id, suite, claim, verdict, coefficient, target, margin,
                           coefficient - half, coefficient + half, note)

    def exponent_at_most(self, check_id, suite, claim, fit: GrowthFit, threshold: float,
                         diagnostic: bool = False, note="") -> SuiteReport:
        """One-sided exponent check on the upper end of the interval."""
        half = self.z * fit.exponent_se if math.isfinite(fit.exponent_se) else 0.0
        margin = threshold - (fit.exponent + half)
        verdict = DIAGNOSTIC if diagnostic else (PASS if margin >= 0 else FAIL)
        return self.report(check_id, suite, claim, verdict, fit.exponent, threshold, margin,
                           fit.exponent - half, fit.exponent + half,
                           note or f"r2={fit.r2:.4f}")

    def halving_check(self, check_id, suite, quantity: str, result: HalvingResult, dt: float) -> SuiteReport:
        gap = abs(result.difference.mean)
        return self.report(check_id, suite, f"|E_dt/2 - E_dt| of {quantity} < 1 SE",
                           PASS if result.within_one_se else FAIL, gap, result.fine.se, result.fine.se - gap,
                           result.difference.ci_lo, result.difference.ci_hi,
                           note=f"dt={dt:g} fine={result.fine.mean:.6g}")

    def drift_row(self, table: str, radius: float, m: int, est: MomentEstimate, verdict: str):
        self.tables.setdefault(table, []).append({
            "y_radius": radius, "m": m, "estimate": est.mean, "se": est.se,
            "ci_lo": est.ci_lo, "ci_hi": est.ci_hi, "n": est.n, "verdict": verdict,
        })


def _settle(holds: bool, straddles: bool, budget: Optional[ReplicaBudget]) -> str:
    """An underpowered check whose interval still reaches the threshold is inconclusive, not failed."""
    if holds:
        return PASS
    if straddles and budget is not None and not budget.powered:
        return INCONCLUSIVE
    return FAIL


def _join(note: str, budget: Optional[ReplicaBudget]) -> str:
    extra = budget.note if budget is not None else ""
    return ", ".join(part for part in (note, extra) if part)


def _censor_note(est: MomentEstimate) -> str:
    parts = []
    if est.censored_fraction > 0:
        parts.append(f"censored={est.censored_fraction:.2e}")
    if est.aborted_fraction > 0:
        parts.append(f"aborted={est.aborted_fraction:.2e}")
    if est.lower_bound:
        parts.append("lower bound")
    if not est.reliable:
        parts.append("unreliable")
    return ", ".join(parts)


def condition_frame(context: SuiteContext) -> pd.DataFrame:
    report = context.conditions
    rows = []
    for key, margin in report.margins.items():
        tier = key.split(".")[0]
        rows.append({"condition": key, "margin": margin, "holds": margin > 0, "tier holds": report.holds(tier)})
    if report.epsilon is not None:
        rows.append({"condition": "epsilon", "margin": report.epsilon, "holds": report.epsilon > 0, "tier holds": True})
        rows.append({"condition": "q", "margin": report.q, "holds": 0 < report.q < 1, "tier holds": True})
    return pd.DataFrame(rows)


class ConditionsSuite(SuitePlugin):
    def __init__(self):
        super().__init__(name="conditions", requires=None, description="parameter condition algebra and drift audit")

    def run(self, ctx: SuiteContext) -> List[SuiteReport]:
        report = ctx.conditions
        m = report.margins
        out = [ctx.report("conditions.c1", self.name, "2r_- > d and (2r_- - d)/l- > (2r_+ + d)/l+",
                          PASS if report.holds_c1 else FAIL, min(m["c1"], m["c1.dimension"]), 0.0,
                          min(m["c1"], m["c1.dimension"]))]
        for tier, claim in (("c2", "(4r_- - (2d+4))/l- > (4r_+ + 2d + 4)/l+"),
                            ("c2a", "(6r_- - (3d+12))/l- > (6r_+ + 3d + 12)/l+")):
            holds = report.holds(tier)
            out.append(ctx.report(f"conditions.{tier}", self.name, claim, PASS if holds else DIAGNOSTIC,
                                  m[tier], 0.0, m[tier], note="" if holds else f"tier {tier} not met"))

        sweep = sweep_condition_implications(ctx.est.sweep_tuples, seed=derived_seed(ctx.seed, "condition-sweep"))
        breaks = sweep["c2a_without_c2"] + sweep["c2_without_c1"]
        out.append(ctx.report("conditions.implication-chain", self.name, "c2a => c2 => c1 on random tuples",
                              PASS if breaks == 0 else FAIL, breaks, 0, -breaks,
                              note=f"tuples={sweep['tuples']} c1={sweep['c1']} c2={sweep['c2']} c2a={sweep['c2a']}"))
        if report.holds_c1:
            residual = lle_residual(ctx._base_params, report.epsilon, report.q)
            out.append(ctx.report("conditions.lle-residual", self.name,
                                  "l-(2r_+ + d + eps) = q l+(2r_- - d - eps)",
                                  PASS if residual <= 1e-12 else FAIL, residual, 1e-12, 1e-12 - residual))
            ok = report.epsilon > 0 and 0 < report.q < 1
            out.append(ctx.report("conditions.epsilon-q", self.name, "eps > 0 and 0 < q < 1",
                                  PASS if ok else FAIL, report.q, 1.0, 1.0 - report.q,
                                  note=f"eps={report.epsilon:.6g}"))

        audit = ctx.audit
        for key, count, worst in (("b", audit.violations_b, audit.worst_b),
                                  ("b2", audit.violations_b2, audit.worst_b2),
                                  ("norm", audit.violations_norm, audit.worst_norm)):
            out.append(ctx.report(f"conditions.drift-audit.{key}", self.name,
                                  f"drift bound ({key}) on {audit.n_samples} sampled points",
                                  PASS if count == 0 else FAIL, count, 0, -count,
                                  note=f"worst excess={worst:.3g}"))
        return out


class EngineSuite(SuitePlugin):
    def __init__(self):
        super().__init__(name="engine", requires=None, description="integrator and clock correctness oracles")

    def run(self, ctx: SuiteContext) -> List[SuiteReport]:
        n = ctx.est.replicas
        params = ctx.params
        est = ctx.estimator()
        out = []
        far = ctx.point(ctx.est.radius_multipliers[0])
        for regime, rate in ((0, params.lambda_minus), (1, params.lambda_plus)):
            mean = est.holding_time_mean(far, regime, n, label=f"engine.holding|z={regime}")
            out.append(ctx.within(f"engine.holding-mean.regime{regime}", self.name,
                                  f"E holding time = 1/lambda = {1.0 / rate:.6g}", mean, 1.0 / rate))

        t = min(1.0, ctx.engine_cfg.horizon)
        brownian = ctx.estimator(spec=zero_model())
        outcome = brownian.simulate(far, 0, n, "engine.brownian", stop="time", record_times=[t])
        disp = outcome.x_end[outcome.completed, 0] - far[0]
        out.append(ctx.within("engine.brownian.mean", self.name, "b = 0: E X_t = x",
                              MomentEstimate.from_samples(disp, ctx.est.confidence), 0.0))
        out.append(ctx.within("engine.brownian.variance", self.name, f"b = 0: Var X_t = t = {t:g}",
                              MomentEstimate.from_samples(disp ** 2, ctx.est.confidence), t))

        # Far outside the ball x.b(x) is constant along the path, so the identity is exact.
        x_big = radial_point(params, 10.0 * params.M1)
        short = 0.1 / params.lambda_minus
        frozen = est.frozen_regime_moment(x_big, 0, short, 2, n, label="engine.ito")
        inner = float(x_big @ ctx.spec.evaluate(x_big[None, :], 0)[0])
        target = float(x_big @ x_big) + (params.d + 2.0 * inner) * short
        out.append(ctx.within("engine.ito-second-moment", self.name,
                              "E|X_t|^2 = |x|^2 + (d + 2 x.b) t in regime 0", frozen, target))

        # Every expectation family the suites report, re-estimated on a halved step.
        start = ctx.point(ctx.est.radius_multipliers[0])
        t_end = min(ctx.est.t_grid[-1], ctx.engine_cfg.horizon)
        long_run = ctx.engine_cfg.horizon
        cases = [
            ("moment", "E|X_t|^2", est, dict(t_end=t_end, power=2)),
            ("interval", "E_x,0 |X_T1|^2 - |x|^2", est, dict(t_end=long_run, power=2, max_jumps=1)),
            ("interval-p4", "E_x,0 |X_T1|^4 - |x|^4", est, dict(t_end=long_run, power=4, max_jumps=1)),
            ("cycle-drift", "E[|Y_1|^2 | Y_0 = y] - |y|^2", est, dict(t_end=long_run, power=2, max_jumps=2)),
        ]
        tau_est = ctx.estimator(cfg=ctx.tau_cfg)
        horizon = min(ctx.tau_cfg.horizon, HALVING_HITTING_CYCLES * (1.0 / params.lambda_minus + 1.0 / params.lambda_plus))
        cases += [
            ("hitting", "E tau_M1", tau_est, dict(t_end=horizon, power=1, radius=params.M1)),
            ("hitting-sq", "E tau_M1^2", tau_est, dict(t_end=horizon, power=2, radius=params.M1)),
        ]
        for key, quantity, estimator, options in cases:
            result = estimator.halving_difference(start, 0, n, label=f"engine.halving.{key}", **options)
            out.append(ctx.halving_check(f"engine.halving.{key}", self.name, quantity, result,
                                         dt=estimator.cfg.dt))

        hitting = ctx.hitting(ctx.est.tau_radius_multipliers[0], 0)
        out.append(ctx.report("engine.dominance", self.name, "tau_M1 <= tau on every sample",
                              PASS if hitting.dominance_violations == 0 else FAIL,
                              hitting.dominance_violations, 0, -hitting.dominance_violations))
        out.append(ctx.report("engine.decomposition", self.name, "tau = T0 + c1 N + S_N on every sample",
                              PASS if hitting.max_residual <= 1e-9 else FAIL, hitting.max_residual, 1e-9,
                              1e-9 - hitting.max_residual))

        first = est.simulate(start, 0, 128, "engine.determinism", stop="jumps", max_jumps=2)
        second = est.simulate(start, 0, 128, "engine.determinism", stop="jumps", max_jumps=2)
        same = np.array_equal(first.x_end, second.x_end) and np.array_equal(first.stop_time, second.stop_time)
        out.append(ctx.report("engine.determinism", self.name, "identical seed and label replay bit-for-bit",
                              PASS if same else FAIL, 0 if same else 1, 0, 0 if same else -1))
        return out


class OccupationSuite(SuitePlugin):
    def __init__(self):
        super().__init__(name="lemma1", requires="c1", description="occupation time near the inner ball")

    def run(self, ctx: SuiteContext) -> List[SuiteReport]:
        params = ctx.params
        est = ctx.estimator()
        n = ctx.est.replicas
        delta = occupation_threshold(params, ctx.spec, ctx.epsilon)
        out = []
        search = ctx.m1_search
        if search is not None:
            repeat = ctx.run_m1_search()
            same = repeat.m1 == search.m1 and repeat.steps == search.steps
            out.append(ctx.report("lemma1.m1-search.reproducible", self.name, "M1 search repeats exactly",
                                  PASS if same else FAIL, search.m1, repeat.m1, 0.0 if same else -1.0,
                                  note=f"doublings={len(search.steps) - 1}"))
            last = search.steps[-1]
            occ = max(last[1], last[2])
            out.append(ctx.report("lemma1.occupation.at-m1", self.name, "occupation near ball < delta at |x| = M1",
                                  PASS if occ < delta else FAIL, occ, delta, delta - occ))

        far = radial_point(params, 50.0 * params.M)
        for z, upto in ((0, "T1"), (0, "T2"), (1, "T0"), (1, "T1")):
            value = est.occupation_near_ball(far, z, upto, n, label=f"lemma1.far|z={z}|{upto}")
            out.append(ctx.below(f"lemma1.occupation.far.z{z}.{upto}", self.name,
                                 f"E int_0^{upto} 1(inf|X| <= M) dt < delta from |x| = 50M", value, delta))

        near = radial_point(params, 1.1 * params.M)
        value = est.occupation_near_ball(near, 0, "T1", n, label="lemma1.near")
        out.append(ctx.above("lemma1.occupation.near-positive", self.name,
                             "occupation is positive just outside the ball", value, 0.0))

        grid = [1.1 * params.M] + [mult * params.M1 for mult in ctx.est.radius_multipliers]
        means = [est.occupation_near_ball(radial_point(params, r), 0, "T2", n, label=f"lemma1.trend|r={r:.12g}").mean
                 for r in grid]
        slope = stats.linregress(grid, means).slope
        out.append(ctx.report("lemma1.occupation.monotone", self.name, "occupation does not increase with |x|",
                              PASS if slope <= 0 else FAIL, slope, 0.0, -slope,
                              note="means=" + ",".join(f"{v:.4g}" for v in means)))
        return out


class SecondMomentIntervalSuite(SuitePlugin):
    def __init__(self):
        super().__init__(name="lemma2", requires="c1",
                         description="second-moment change over single holding intervals and holding means")

    def run(self, ctx: SuiteContext) -> List[SuiteReport]:
        params = ctx.params
        est = ctx.estimator()
        eps = ctx.epsilon
        d = params.d
        down = -((2.0 * params.r_minus - d) - eps) / params.lambda_minus
        up = ((2.0 * params.r_plus + d) + eps) / params.lambda_plus
        out = []
        for mult in ctx.est.radius_multipliers:
            x = ctx.point(mult)
            change = est.interval_moment_change(x, 0, 2, ctx.scaled_replicas(mult), label=f"lemma2{_tag(mult)}")
            out.append(ctx.not_above(f"lemma2.neg-interval.p2{_tag(mult)}", self.name,
                                     "E_x,0 |X_T1|^2 - |x|^2 <= -((2r_- - d) - eps)/l-", change, down))
            budget = ctx.sized_replicas(mult, 2, interval_coefficient(params, 1, 2), 1.0 / params.lambda_plus,
                                        label=f"lemma3.sign.p2{_tag(mult)}")
            change = est.interval_moment_change(x, 1, 2, budget.n, label=f"lemma3{_tag(mult)}")
            out.append(ctx.not_above(f"lemma3.pos-interval.p2{_tag(mult)}", self.name,
                                     "E_x,1 |X_T1|^2 - |x|^2 <= ((2r_+ + d) + eps)/l+", change, up))
            out.append(ctx.above(f"lemma3.sign.p2{_tag(mult)}", self.name,
                                 "second moment grows over a transient interval", change, 0.0, budget=budget))

        far = ctx.point(ctx.est.radius_multipliers[0])
        for regime, rate in ((0, params.lambda_minus), (1, params.lambda_plus)):
            mean = est.holding_time_mean(far, regime, ctx.est.replicas, label=f"lemma4|z={regime}")
            out.append(ctx.within(f"lemma4.holding-mean.regime{regime}", self.name,
                                  f"E holding time = 1/lambda = {1.0 / rate:.6g}", mean, 1.0 / rate,
                                  note="holds with equality for constant intensities"))
        return out


class MomentGrowthSuite(SuitePlugin):
    def __init__(self):
        super().__init__(name="lemma50", requires="c1", description="a priori growth of E|X_t|^2 and E|X_t|^4")

    def run(self, ctx: SuiteContext) -> List[SuiteReport]:
        params = ctx.params
        est = ctx.estimator()
        n = ctx.est.replicas
        x = ctx.point(ctx.est.radius_multipliers[0])
        x2 = float(x @ x)
        grid = ctx.est.t_grid
        audit = ctx.audit
        c2_rate = audit.second_moment_rate(params.d)
        c4 = audit.fourth_moment_rate(params.d) * max(1.0, 0.5 * c2_rate)
        out = [ctx.within("lemma50.t0-exact", self.name, "E|X_0|^2 = |x|^2",
                          est.moment_at_time(x, 0, 0.0, 2, n), x2)]
        for z in (0, 1):
            second = est.moment_profile(x, z, grid, 2, n, label=f"lemma50.profile|z={z}")
            fourth = est.moment_profile(x, z, grid, 4, n, label=f"lemma50.profile|z={z}")
            for t, m2, m4 in zip(grid, second, fourth):
                gap = abs(m2.mean - x2) - ctx.z * m2.se
                out.append(ctx.report(f"lemma50.p2.z{z}[t={t:g}]", self.name,
                                      "|E|X_t|^2 - |x|^2| <= C_fit t, C_fit = 2 sup|x.b| + d",
                                      PASS if gap <= c2_rate * t else FAIL, (m2.mean - x2) / t, c2_rate,
                                      c2_rate - gap / t, (m2.ci_lo - x2) / t, (m2.ci_hi - x2) / t))
                envelope = c4 * (x2 * t + t * t + t)
                gap4 = abs(m4.mean - x2 * x2) - ctx.z * m4.se
                out.append(ctx.report(f"lemma50.p4-envelope.z{z}[t={t:g}]", self.name,
                                      "|E|X_t|^4 - |x|^4| <= C(|x|^2 t + t^2 + t)",
                                      PASS if gap4 <= envelope else FAIL, m4.mean - x2 * x2, envelope,
                                      envelope - gap4, m4.ci_lo - x2 * x2, m4.ci_hi - x2 * x2))

        brownian = ctx.estimator(spec=zero_model())
        for t, m2 in zip(grid, brownian.moment_profile(x, 0, grid, 2, n, label="lemma50.zero-drift")):
            out.append(ctx.within(f"lemma50.zero-drift[t={t:g}]", self.name, "b = 0: E|X_t|^2 = |x|^2 + d t",
                                  m2, x2 + params.d * t))
        return out


class _IntervalCoefficientSuite(SuitePlugin):
    power = 4
    lemma_ids: Dict[int, str] = {}

    def run(self, ctx: SuiteContext) -> List[SuiteReport]:
        params = ctx.params
        est = ctx.estimator()
        p = self.power
        mults = ctx.est.radius_multipliers
        tol = ctx.est.coefficient_tolerance
        out = []
        for regime in (1, 0):
            lemma = self.lemma_ids[regime]
            target = interval_coefficient(params, regime, p)
            duration = 1.0 / (params.lambda_minus if regime == 0 else params.lambda_plus)
            values = []
            for mult in mults:
                budget = ctx.sized_replicas(mult, p, target, duration, label=f"{lemma}{_tag(mult)}")
                change = est.interval_moment_change(ctx.point(mult), regime, p, budget.n, label=f"{lemma}{_tag(mult)}")
                values.append(change)
                if regime == 0:
                    out.append(ctx.below(f"{lemma}.neg-interval.p{p}{_tag(mult)}", self.name,
                                         f"E_x,0 |X_T1|^{p} - |x|^{p} < 0", change, 0.0, budget=budget))
                else:
                    out.append(ctx.above(f"{lemma}.pos-interval.p{p}{_tag(mult)}", self.name,
                                         f"E_x,1 |X_T1|^{p} - |x|^{p} > 0", change, 0.0, budget=budget))
            fit = fit_leading_coefficient([m * params.M1 for m in mults], values, p)
            out.append(ctx.coefficient_match(f"{lemma}.coefficient", self.name,
                                             f"leading |x|^{p - 2} coefficient = {target:.6g} within {tol:.0%} + CI",
                                             fit.coefficient, fit.se, target, tol))
        return out


class FourthMomentIntervalSuite(_IntervalCoefficientSuite):
    power = 4
    lemma_ids = {1: "lemma5", 0: "lemma8"}

    def __init__(self):
        super().__init__(name="lemma5-8", requires="c2", description="fourth-moment change over holding intervals")


class SixthMomentIntervalSuite(_IntervalCoefficientSuite):
    power = 6
    lemma_ids = {1: "lemma5a", 0: "lemma8fr"}

    def __init__(self):
        super().__init__(name="lemma5a-8fr", requires="c2a", description="sixth-moment change over holding intervals")


class _CycleDriftSuite(SuitePlugin):
    m = 2

    def run(self, ctx: SuiteContext) -> List[SuiteReport]:
        params = ctx.params
        sampler = ctx.sampler()
        m = self.m
        mults = ctx.est.radius_multipliers
        cycle = sampler.constants.c1
        out = []
        if m == 2:
            first = interval_coefficient(params, 0, 4)
            for mult in mults:
                budget = ctx.sized_replicas(mult, 4, first, 1.0 / params.lambda_minus, label=f"lemma8{_tag(mult)}")
                change = sampler.estimator.interval_moment_change(ctx.point(mult), 0, 4, budget.n,
                                                                   label=f"lemma8{_tag(mult)}")
                out.append(ctx.below(f"lemma9.first-interval{_tag(mult)}", self.name,
                                     "E_x,0 |X_T1|^4 < |x|^4", change, 0.0, budget=budget))
        coefficient = cycle_coefficient(params, ctx.epsilon, m)
        drifts = []
        for mult in mults:
            label = f"{self.name}.cycle{_tag(mult)}"
            budget = ctx.sized_replicas(mult, 2 * m, coefficient, cycle, label=label)
            drift = sampler.conditional_moment_drift(ctx.point(mult), m, budget.n, label=label)
            drifts.append(drift)
            check = ctx.below(f"{self.name}.cycle-drift{_tag(mult)}", self.name,
                              f"E[|Y_1|^{2 * m} | Y_0 = y] - |y|^{2 * m} < 0", drift, 0.0, budget=budget)
            out.append(check)
            ctx.drift_row(f"drift-m{m}", mult * params.M1, m, drift, check.verdict)

        scale = [(mult * params.M1) ** (2 * m - 2) for mult in mults]
        slopes = [-d.mean / s for d, s in zip(drifts, scale)]
        fitted = float(np.median(slopes))
        worst = min(s - 0.5 * fitted for s in slopes)
        ok = fitted > 0 and worst >= 0
        out.append(ctx.report(f"{self.name}.fitted-c", self.name,
                              f"drift <= -(c/2)|y|^{2 * m - 2} with fitted c > 0", PASS if ok else FAIL,
                              fitted, 0.0, worst if fitted > 0 else fitted,
                              note="per-radius c=" + ",".join(f"{s:.4g}" for s in slopes)))
        growth = magnitude_growth(drifts)
        negative = all(d.mean < 0 for d in drifts)
        out.append(ctx.report(f"{self.name}.monotone", self.name,
                              f"|drift of |Y|^{2 * m}| grows strictly across the radius grid",
                              PASS if negative and growth > 1.0 else FAIL, growth, 1.0, growth - 1.0,
                              note="magnitudes=" + ",".join(f"{abs(d.mean):.4g}" for d in drifts)))
        return out


class FourthMomentCycleSuite(_CycleDriftSuite):
    m = 2

    def __init__(self):
        super().__init__(name="lemma9", requires="c2", description="per-cycle decrease of the fourth moment")


class SixthMomentCycleSuite(_CycleDriftSuite):
    m = 3

    def __init__(self):
        super().__init__(name="lemma9a", requires="c2a", description="per-cycle decrease of the sixth moment")


class MultiCycleSuite(SuitePlugin):
    def __init__(self):
        super().__init__(name="corollary4", requires="c2a", description="stopped moments over several cycles")

    def run(self, ctx: SuiteContext) -> List[SuiteReport]:
        sampler = ctx.sampler()
        mult = ctx.est.radius_multipliers[0]
        y = ctx.point(mult)
        r = float(np.linalg.norm(y))
        out = []
        for m in (1, 2, 3):
            moments = sampler.multi_cycle_moments(y, m, 4, ctx.est.replicas, label=f"corollary4|m={m}")
            for k, est in enumerate(moments):
                out.append(ctx.below(f"corollary4.m{m}.n{k}{_tag(mult)}", self.name,
                                     f"E 1(T_2n < tau) |X_(T_2n+2 ^ tau)|^{2 * m} <= |x|^{2 * m}",
                                     est, r ** (2 * m)))
        return out


class EmbeddedSecondMomentSuite(SuitePlugin):
    def __init__(self):
        super().__init__(name="lemma11", requires="c1",
                         description="per-cycle second-moment drift and the growth of E N")

    def run(self, ctx: SuiteContext) -> List[SuiteReport]:
        params = ctx.params
        sampler = ctx.sampler()
        c = cycle_drift_constant(params, ctx.epsilon)
        entry_bound = ctx.audit.second_moment_rate(params.d) / params.lambda_plus
        out = []
        for mult in ctx.est.radius_multipliers:
            y = ctx.point(mult)
            label = f"lemma11.cycle{_tag(mult)}"
            budget = ctx.sized_replicas(mult, 2, cycle_coefficient(params, ctx.epsilon, 1), sampler.constants.c1,
                                        label=label)
            drift = sampler.conditional_moment_drift(y, 1, budget.n, label=label)
            ok = drift.ci_hi < 0 and drift.mean <= -0.5 * c
            verdict = _settle(ok, drift.ci_lo < 0, budget)
            out.append(ctx.report(f"lemma11.cycle-drift.p2{_tag(mult)}", self.name,
                                  "E[|Y_1|^2 | Y_0 = y] - |y|^2 <= -c/2 with CI excluding 0", verdict,
                                  drift.mean, -0.5 * c, -0.5 * c - drift.mean, drift.ci_lo, drift.ci_hi,
                                  note=_join(f"c={c:.6g}", budget)))
            ctx.drift_row("drift-m1", mult * params.M1, 1, drift, verdict)
            entry = sampler.estimator.interval_moment_change(y, 1, 2, ctx.scaled_replicas(mult),
                                                             label=f"lemma3{_tag(mult)}")
            out.append(ctx.not_above(f"lemma11.entry-z1{_tag(mult)}", self.name,
                                     "E_x,1 |Y_0|^2 - |x|^2 <= C/l+, C = 2 sup|x.b| + d", entry, entry_bound))

        inside = sampler.estimate_EN(radial_point(params, 0.5 * params.M1), 0, ctx.est.replicas)[0]
        out.append(ctx.report("lemma11.EN-zero-inside", self.name, "|x| <= M1, z = 0: E N = 0",
                              PASS if inside.mean == 0 else FAIL, inside.mean, 0.0, -abs(inside.mean)))
        tau_mults = ctx.est.tau_radius_multipliers
        radii = [m * params.M1 for m in tau_mults]
        for z in (0, 1):
            values = [ctx.hitting(m, z).EN for m in tau_mults]
            fit = growth_exponent(values, radii)
            out.append(ctx.exponent_at_most(f"lemma11.EN-growth.z{z}", self.name,
                                            "E_x,z N <= C(|x|^2 + 1): log-log exponent",
                                            fit, 2.0 + ctx.est.fit_tolerance_quadratic))
        return out


class MartingaleSuite(SuitePlugin):
    def __init__(self):
        super().__init__(name="martingale", requires="c1",
                         description="cycle-duration constants and the hitting-time decomposition")

    def run(self, ctx: SuiteContext) -> List[SuiteReport]:
        sampler = ctx.sampler()
        const = sampler.constants
        per_path = 250
        durations = sampler.cycle_duration_stats(ctx.est.replicas, per_path, label="martingale.durations")
        out = [
            ctx.within("martingale.eta-mean", self.name, f"E eta = c1 = {const.c1:.6g}", durations.mean, const.c1),
            ctx.within("martingale.eta-variance", self.name, f"Var eta = 1/l-^2 + 1/l+^2 = {const.var_eta:.6g}",
                       durations.variance, const.var_eta),
            ctx.within("martingale.eta-second-moment", self.name, f"E eta^2 = c2 = {const.c2:.6g}",
                       durations.second_moment, const.c2),
            ctx.report("martingale.variance-ratio", self.name, "Var(S_n)/(c2 n)", DIAGNOSTIC,
                       durations.sum_variance_ratio, const.var_eta / const.c2,
                       note="Var(S_n) = n Var eta, so the ratio is Var eta / E eta^2"),
        ]
        mult = ctx.est.tau_radius_multipliers[0]
        for z in (0, 1):
            hitting = ctx.hitting(mult, z)
            out.append(ctx.report(f"martingale.decomposition.z{z}{_tag(mult)}", self.name,
                                  "tau = T0 + c1 N + S_N per sample",
                                  PASS if hitting.max_residual <= 1e-9 else FAIL, hitting.max_residual, 1e-9,
                                  1e-9 - hitting.max_residual))
            s_n = hitting.S_N
            out.append(ctx.report(f"martingale.S_N-mean.z{z}{_tag(mult)}", self.name, "E S_N (optional stopping)",
                                  DIAGNOSTIC, s_n.mean, 0.0, None, s_n.ci_lo, s_n.ci_hi))
            rhs = 3.0 * hitting.ET0_sq.mean + 3.0 * (const.c1 ** 2 * hitting.EN2.mean + const.c2 * hitting.EN.mean)
            out.append(ctx.not_above(f"martingale.etau2.z{z}{_tag(mult)}", self.name,
                                     "E tau^2 <= 3 E T0^2 + 3(c1^2 E N^2 + c2 E N)", hitting.Etau_sq, rhs))
        return out


class ReturnTimeSuite(SuitePlugin):
    def __init__(self):
        super().__init__(name="proposition1", requires="c1", description="E tau_M1 <= C(|x|^2 + 1)")

    def run(self, ctx: SuiteContext) -> List[SuiteReport]:
        params = ctx.params
        mults = ctx.est.tau_radius_multipliers
        radii = [m * params.M1 for m in mults]
        limit = 2.0 + ctx.est.fit_tolerance_quadratic
        out = []
        by_z = {}
        for z in (0, 1):
            hits = [ctx.hitting(m, z) for m in mults]
            by_z[z] = hits
            out.append(ctx.exponent_at_most(f"proposition1.tau-m1-growth.z{z}", self.name,
                                            "E tau_M1 <= C(|x|^2 + 1): log-log exponent",
                                            growth_exponent([h.Etau_m1 for h in hits], radii), limit))
            out.append(ctx.exponent_at_most(f"proposition1.tau-growth.z{z}", self.name,
                                            "E tau <= C(|x|^2 + 1): log-log exponent",
                                            growth_exponent([h.Etau for h in hits], radii), limit))
            worst = max(h.censored_fraction for h in hits)
            out.append(ctx.report(f"proposition1.censoring.z{z}", self.name, "censored fraction < 0.1%",
                                  PASS if worst < CENSOR_TARGET else FAIL, worst, CENSOR_TARGET, CENSOR_TARGET - worst))
            for mult, h in zip(mults, hits):
                ok = h.Etau_m1.mean <= h.Etau.mean
                out.append(ctx.report(f"proposition1.dominance.z{z}{_tag(mult)}", self.name, "E tau_M1 <= E tau",
                                      PASS if ok else FAIL, h.Etau_m1.mean, h.Etau.mean, h.Etau.mean - h.Etau_m1.mean))
        for mult, h0, h1 in zip(mults, by_z[0], by_z[1]):
            out.append(ctx.report(f"proposition1.transient-start{_tag(mult)}", self.name,
                                  "E tau(z=1) vs E tau(z=0)", DIAGNOSTIC, h1.Etau.mean - h0.Etau.mean, 0.0,
                                  None, note="starting in the transient regime delays the return"))
        return out


class SecondReturnMomentSuite(SuitePlugin):
    def __init__(self, name: str = "theorem2", diagnostic: bool = False):
        super().__init__(name=name, requires="c2a", description="E tau_M1^2 <= C(|x|^6 + 1)")
        self.diagnostic = diagnostic

    def run(self, ctx: SuiteContext) -> List[SuiteReport]:
        params = ctx.params
        mults = ctx.est.tau_radius_multipliers
        radii = [m * params.M1 for m in mults]
        limit = 6.0 + ctx.est.fit_tolerance_sixth
        out = []
        for z in (0, 1):
            hits = [ctx.hitting(m, z) for m in mults]
            reliable = all(h.Etau_m1_sq.reliable for h in hits)
            note = "" if reliable else "censoring above 0.1%: second moments are lower bounds"
            fit = growth_exponent([h.Etau_m1_sq for h in hits], radii)
            if self.diagnostic:
                out.append(ctx.exponent_at_most(f"remark1.tau-m1-sq-exponent.z{z}", self.name,
                                                "E tau_M1^2 <= C(|x|^(4+delta) + 1): fitted exponent vs 4",
                                                fit, 4.0, diagnostic=True, note=note))
                continue
            out.append(ctx.exponent_at_most(f"theorem2.tau-m1-sq-growth.z{z}", self.name,
                                            "E tau_M1^2 <= C(|x|^6 + 1): log-log exponent", fit, limit, note=note))
            out.append(ctx.exponent_at_most(f"theorem2.tau-sq-growth.z{z}", self.name,
                                            "E tau^2 <= C(|x|^6 + 1): log-log exponent",
                                            growth_exponent([h.Etau_sq for h in hits], radii), limit, note=note))
            out.append(ctx.exponent_at_most(f"theorem2.EN2-growth.z{z}", self.name,
                                            "E N^2 <= C(|x|^6 + 1): log-log exponent",
                                            growth_exponent([h.EN2 for h in hits], radii), limit))
            out.append(ctx.report(f"theorem2.remark1-exponent.z{z}", self.name,
                                  "fitted E tau_M1^2 exponent against 4 + delta", DIAGNOSTIC, fit.exponent, 4.0,
                                  4.0 - fit.exponent))
        return out


class ConvergenceSuite(SuitePlugin):
    def __init__(self):
        super().__init__(name="remark2", requires="c1", description="qualitative total-variation decay")

    def run(self, ctx: SuiteContext) -> List[SuiteReport]:
        est = ctx.estimator()
        x = ctx.point(ctx.est.radius_multipliers[0])
        decay = est.tv_decay(x, 0, ctx.est.t_grid, ctx.est.reference_time, ctx.est.replicas,
                             bins=ctx.est.bins, label="remark2.tv")
        profile = ",".join(f"{t:g}:{v:.4f}" for t, v in zip(decay.times, decay.tv))
        return [
            ctx.report("remark2.tv-monotone", self.name, "TV(t) non-increasing within noise", DIAGNOSTIC,
                       1.0 if decay.non_increasing else 0.0, 1.0, None, note=profile),
            ctx.report("remark2.tv-slope", self.name, "slope of log TV vs log(1+t) against -2", DIAGNOSTIC,
                       decay.slope, -2.0, None),
            ctx.report("remark2.tv-noise-floor", self.name, "TV at the reference time (same law)", DIAGNOSTIC,
                       decay.noise_floor, 0.0, None,
                       note="bins undercover the support" if decay.undercovered else ""),
        ]


SUITES: Dict[str, SuitePlugin] = {plugin.name: plugin for plugin in (
    ConditionsSuite(), EngineSuite(), OccupationSuite(), SecondMomentIntervalSuite(), MomentGrowthSuite(),
    FourthMomentIntervalSuite(), FourthMomentCycleSuite(), SixthMomentIntervalSuite(), SixthMomentCycleSuite(),
    MultiCycleSuite(), EmbeddedSecondMomentSuite(), MartingaleSuite(), ReturnTimeSuite(),
    SecondReturnMomentSuite(), SecondReturnMomentSuite(name="remark1", diagnostic=True), ConvergenceSuite(),
)}


def run_suite(suite_id: str, config: RunConfig, context: Optional[SuiteContext] = None) -> List[SuiteReport]:
    if suite_id not in SUITES:
        raise ConfigError(f"unknown suite '{suite_id}'", "suites")
    plugin = SUITES[suite_id]
    context = context or SuiteContext(config)
    if not context.conditions.holds(plugin.requires):
        raise ConditionGateError(suite_id, plugin.requires, context.conditions.margins)
    logger.info(f"Running suite '{suite_id}' ({plugin.description})")
    reports = plugin.run(context)
    return sorted(reports, key=lambda r: r.check_id)

import dataclasses
import functools
import logging
import math
import os
import sys
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import stats

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '../../simulation_integration')))

from errors import EstimationError
from model_core import DriftSpec, ModelParams
from sde_engine import EngineConfig, EnsembleOutcome, coupled_halving, integrate_ensemble, simulate_switching
from rng_streams import derived_seed
from ensemble import run_blocks

logger = logging.getLogger(__name__)

MIN_REPLICAS = 100
DEFAULT_CONFIDENCE = 0.99
BOOTSTRAP_RESAMPLES = 2000
# Second moments of hitting times are not trusted above this censored fraction.
SECOND_MOMENT_CENSOR_LIMIT = 1e-3
UNDERCOVERAGE_LIMIT = 0.01


def require_replicas(n_replicas: int):
    if n_replicas < MIN_REPLICAS:
        raise EstimationError(f"at least {MIN_REPLICAS} replicas are needed for a meaningful interval, got {n_replicas}")


def normal_quantile(confidence: float) -> float:
    if not 0.0 < confidence < 1.0:
        raise ValueError(f"confidence must lie in (0, 1), got {confidence}")
    return float(stats.norm.ppf(0.5 + 0.5 * confidence))


@dataclass
class MomentEstimate:
    mean: float
    se: float
    ci_lo: float
    ci_hi: float
    n: int
    censored_fraction: float = 0.0
    aborted_fraction: float = 0.0
    method: str = "normal"
    lower_bound: bool = False
    reliable: bool = True

    @classmethod
    def exact(cls, value: float, n: int = 1) -> "MomentEstimate":
        value = float(value)
        return cls(mean=value, se=0.0, ci_lo=value, ci_hi=value, n=max(int(n), 1), method="exact")

    @classmethod
    def from_samples(cls, samples: np.ndarray, confidence: float = DEFAULT_CONFIDENCE,
                     censored_fraction: float = 0.0, aborted_fraction: float = 0.0,
                     method: str = "normal", lower_bound: bool = False, seed: int = 0) -> "MomentEstimate":
        samples = np.asarray(samples, dtype=float)
        samples = samples[np.isfinite(samples)]
        n = samples.size
        if n == 0:
            raise EstimationError("no usable samples (every replica censored or aborted)")
        mean = float(samples.mean())
        se = float(samples.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        if method == "normal":
            half = normal_quantile(confidence) * se
            lo, hi = mean - half, mean + half
        elif method == "bootstrap":
            lo, hi = bootstrap_interval(samples, confidence, seed=seed)
        else:
            raise ValueError(f"unknown interval method {method!r}")
        return cls(mean=mean, se=se, ci_lo=min(lo, mean), ci_hi=max(hi, mean), n=n,
                   censored_fraction=float(censored_fraction), aborted_fraction=float(aborted_fraction),
                   method=method, lower_bound=lower_bound)

    def to_dict(self) -> Dict[str, object]:
        return dataclasses.asdict(self)


def bootstrap_interval(samples: np.ndarray, confidence: float, resamples: int = BOOTSTRAP_RESAMPLES,
                       seed: int = 0, chunk: int = 100):
    """Percentile bootstrap interval of the mean."""
    rng = np.random.default_rng(seed)
    n = samples.size
    means = np.empty(resamples)
    for start in range(0, resamples, chunk):
        stop = min(start + chunk, resamples)
        idx = rng.integers(0, n, size=(stop - start, n))
        means[start:stop] = samples[idx].mean(axis=1)
    alpha = 0.5 * (1.0 - confidence)
    lo, hi = np.percentile(means, [100.0 * alpha, 100.0 * (1.0 - alpha)])
    return float(lo), float(hi)


@dataclass
class GrowthFit:
    exponent: float
    intercept: float
    r2: float
    radii: List[float]
    exponent_se: float = float("nan")


def growth_exponent(values: Sequence[MomentEstimate], radii: Sequence[float]) -> GrowthFit:
    """Weighted least squares of log(mean) on log(radius); weights (mean/se)^2 from the delta method."""
    radii = np.asarray(radii, dtype=float)
    if radii.size < 3 or len(values) != radii.size:
        raise EstimationError(f"growth fit needs at least 3 radii with one estimate each, got {radii.size}")
    if np.any(np.diff(radii) <= 0) or radii[0] <= 0:
        raise EstimationError("growth fit radii must be positive and strictly increasing")
    means = np.array([v.mean for v in values])
    if np.any(~(means > 0)):
        raise EstimationError(f"growth fit needs positive means, got {means.tolist()}")
    ses = np.array([v.se for v in values])
    if np.all(ses > 0):
        weights = (means / ses) ** 2
    else:
        weights = np.ones_like(means)
    X = np.column_stack([np.ones_like(radii), np.log(radii)])
    y = np.log(means)
    sw = np.sqrt(weights)
    coef, *_ = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)
    fitted = X @ coef
    ybar = np.average(y, weights=weights)
    ss_tot = float(np.sum(weights * (y - ybar) ** 2))
    ss_res = float(np.sum(weights * (y - fitted) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    exponent_se = float("nan")
    if np.all(ses > 0):
        cov = np.linalg.inv(X.T @ (X * weights[:, None]))
        exponent_se = float(math.sqrt(cov[1, 1]))
    return GrowthFit(exponent=float(coef[1]), intercept=float(coef[0]), r2=r2,
                     radii=radii.tolist(), exponent_se=exponent_se)


@dataclass
class CoefficientFit:
    """Leading coefficient of |x|^(p-2) in a polynomial fit of a moment change in |x|^2."""
    coefficient: float
    se: float
    terms: List[float]


def fit_leading_coefficient(radii: Sequence[float], values: Sequence[MomentEstimate], power: int) -> CoefficientFit:
    """Fits change(|x|) = a_0 |x|^(p-2) + a_1 |x|^(p-4) + ... + const by weighted least squares."""
    radii = np.asarray(radii, dtype=float)
    exponents = list(range(power - 2, -1, -2))
    if radii.size < max(len(exponents), 2):
        raise EstimationError(f"coefficient fit for power {power} needs at least {max(len(exponents), 2)} radii")
    means = np.array([v.mean for v in values])
    ses = np.array([v.se for v in values])
    weights = 1.0 / ses ** 2 if np.all(ses > 0) else np.ones_like(means)
    X = np.column_stack([radii ** k for k in exponents])
    scale = np.abs(X).max(axis=0)
    Xs = X / scale
    XtW = Xs.T * weights
    cov_s = np.linalg.pinv(XtW @ Xs)
    coef_s = cov_s @ (XtW @ means)
    coef = coef_s / scale
    se = math.sqrt(max(cov_s[0, 0], 0.0)) / scale[0] if np.all(ses > 0) else float("nan")
    return CoefficientFit(coefficient=float(coef[0]), se=float(se), terms=[float(c) for c in coef])


@dataclass
class HittingMoments:
    tau: MomentEstimate
    tau_sq: MomentEstimate
    tau_m1: MomentEstimate
    tau_m1_sq: MomentEstimate
    censored_fraction: float
    dominance_violations: int
    outcome: Optional[EnsembleOutcome] = None

    @property
    def second_moments_reliable(self) -> bool:
        return self.tau_sq.reliable and self.tau_m1_sq.reliable


@dataclass
class HalvingResult:
    difference: MomentEstimate
    fine: MomentEstimate

    @property
    def within_one_se(self) -> bool:
        return abs(self.difference.mean) < self.fine.se


@dataclass
class TVDecay:
    times: List[float]
    tv: List[float]
    noise_floor: float
    reference_time: float
    overflow_fraction: float
    non_increasing: bool
    slope: float

    @property
    def undercovered(self) -> bool:
        return self.overflow_fraction > UNDERCOVERAGE_LIMIT


def _switching_task(x0, z0, params, spec, cfg, options, n, streams):
    return simulate_switching(x0, z0, n, params, spec, cfg, streams, **options)


def _coupled_task(x0, z0, t_end, params, spec, cfg, radius, max_jumps, n, streams):
    return coupled_halving(x0, z0, n, t_end, params, spec, cfg, streams, radius=radius, max_jumps=max_jumps)


def _frozen_task(x0, regime, duration, spec, cfg, n, streams):
    return integrate_ensemble(np.tile(x0, (n, 1)), regime, duration, cfg, spec, streams.noise)


def ensemble_label(op: str, x, z, *extra) -> str:
    coords = ",".join(f"{v:.12g}" for v in np.atleast_1d(np.asarray(x, dtype=float)))
    tail = "|".join(str(e) for e in extra)
    return f"{op}|x=({coords})|z={z}" + (f"|{tail}" if tail else "")


def radial_point(params: ModelParams, radius: float) -> np.ndarray:
    """Point at the given distance along the first coordinate axis."""
    x = np.zeros(params.d)
    x[0] = radius
    return x


class SwitchingEstimator:
    """Monte Carlo estimators over replica ensembles of one switching model."""

    def __init__(self, params: ModelParams, spec: DriftSpec, cfg: EngineConfig,
                 confidence: float = DEFAULT_CONFIDENCE, block_size: Optional[int] = None,
                 workers: Optional[int] = None):
        normal_quantile(confidence)
        self.params = params
        self.spec = spec
        self.cfg = cfg
        self.confidence = confidence
        self.block_size = block_size
        self.workers = workers

    def with_params(self, params: ModelParams) -> "SwitchingEstimator":
        return SwitchingEstimator(params, self.spec, self.cfg, self.confidence, self.block_size, self.workers)

    def with_config(self, cfg: EngineConfig) -> "SwitchingEstimator":
        return SwitchingEstimator(self.params, self.spec, cfg, self.confidence, self.block_size, self.workers)

    def simulate(self, x, z: int, n_replicas: int, label: str, cfg: Optional[EngineConfig] = None,
                 **options) -> EnsembleOutcome:
        cfg = cfg or self.cfg
        task = functools.partial(_switching_task, np.asarray(x, dtype=float), z, self.params, self.spec, cfg, options)
        return run_blocks(task, label, n_replicas, cfg.rng_seed, self.block_size, self.workers)

    def simulate_coupled(self, x, z: int, n_replicas: int, t_end: float, label: str,
                         radius: Optional[float] = None, max_jumps: Optional[int] = None,
                         cfg: Optional[EngineConfig] = None):
        cfg = cfg or self.cfg
        task = functools.partial(_coupled_task, np.asarray(x, dtype=float), z, t_end, self.params, self.spec, cfg,
                                 radius, max_jumps)
        return run_blocks(task, label, n_replicas, cfg.rng_seed, self.block_size, self.workers)

    def _estimate(self, samples: np.ndarray, outcome: EnsembleOutcome, usable: np.ndarray,
                  **kwargs) -> MomentEstimate:
        n = outcome.n
        return MomentEstimate.from_samples(
            samples[usable], self.confidence,
            censored_fraction=float(outcome.censored.sum()) / n,
            aborted_fraction=float(outcome.aborted.sum()) / n,
            **kwargs,
        )

    def _check_power(self, power: int):
        if power not in (2, 4, 6):
            raise ValueError(f"power must be 2, 4 or 6, got {power!r}")

    def moment_profile(self, x, z: int, t_grid: Sequence[float], power: int, n_replicas: int,
                       label: Optional[str] = None) -> List[MomentEstimate]:
        """E|X_t|^power for every t of the grid, from one ensemble observed at all grid times."""
        self._check_power(power)
        times = np.asarray(t_grid, dtype=float)
        if np.any(times < 0) or np.any(times > self.cfg.horizon):
            raise ValueError(f"times must lie in [0, horizon={self.cfg.horizon}]")
        x = np.asarray(x, dtype=float)
        r0 = float(np.linalg.norm(x))
        if np.all(times == 0):
            return [MomentEstimate.exact(r0 ** power, n_replicas) for _ in times]
        require_replicas(n_replicas)
        label = label or ensemble_label("moment", x, z, power)
        outcome = self.simulate(x, z, n_replicas, label, stop="time", record_times=times.tolist())
        grid = np.unique(times)
        results = []
        for t in times:
            if t == 0:
                results.append(MomentEstimate.exact(r0 ** power, n_replicas))
                continue
            row = int(np.searchsorted(grid, t))
            radii = outcome.snapshot_radius[row]
            usable = ~outcome.aborted & np.isfinite(radii)
            results.append(self._estimate(radii ** power, outcome, usable))
        return results

    def moment_at_time(self, x, z: int, t: float, power: int, n_replicas: int,
                       label: Optional[str] = None) -> MomentEstimate:
        return self.moment_profile(x, z, [t], power, n_replicas, label)[0]

    def interval_moment_change(self, x, regime: int, power: int, n_replicas: int,
                               label: Optional[str] = None) -> MomentEstimate:
        """E[|X_T|^p - |x|^p] over the first holding interval T started in the given regime."""
        self._check_power(power)
        x = np.asarray(x, dtype=float)
        r0 = float(np.linalg.norm(x))
        if r0 <= self.params.M1:
            raise ValueError(f"|x|={r0:g} must exceed M1={self.params.M1:g}")
        require_replicas(n_replicas)
        label = label or ensemble_label("interval", x, regime, power)
        outcome = self.simulate(x, regime, n_replicas, label, stop="jumps", max_jumps=1)
        radii = np.linalg.norm(outcome.x_end, axis=1)
        samples = radii ** power - r0 ** power
        return self._estimate(samples, outcome, outcome.completed)

    def holding_time_mean(self, x, regime: int, n_replicas: int, label: Optional[str] = None) -> MomentEstimate:
        """Mean of the first holding time started in the given regime."""
        require_replicas(n_replicas)
        x = np.asarray(x, dtype=float)
        label = label or ensemble_label("holding", x, regime)
        outcome = self.simulate(x, regime, n_replicas, label, stop="jumps", max_jumps=1)
        return self._estimate(outcome.stop_time, outcome, outcome.completed)

    def occupation_near_ball(self, x, z: int, upto: str, n_replicas: int,
                             label: Optional[str] = None) -> MomentEstimate:
        """E int_0^T 1(inf_{s<=t}|X_s| <= M) dt with T one of T0, T1, T2."""
        jumps_for = {(0, "T1"): 1, (0, "T2"): 2, (1, "T0"): 1, (1, "T1"): 2, (1, "T2"): 3}
        if (z, upto) == (0, "T0"):
            return MomentEstimate.exact(0.0, n_replicas)
        if (z, upto) not in jumps_for:
            raise ValueError(f"unsupported stopping label {upto!r} for z={z}")
        require_replicas(n_replicas)
        x = np.asarray(x, dtype=float)
        label = label or ensemble_label("occupation", x, z, upto)
        outcome = self.simulate(x, z, n_replicas, label, stop="jumps", max_jumps=jumps_for[(z, upto)])
        end = np.where(outcome.censored, outcome.t_end, outcome.stop_time)
        hit = outcome.hit_ball
        samples = np.where(np.isnan(hit), 0.0, np.maximum(end - np.nan_to_num(hit), 0.0))
        usable = ~outcome.aborted
        return self._estimate(samples, outcome, usable, lower_bound=bool(outcome.censored.any()))

    def hitting_moments(self, x, z: int, n_replicas: int, label: Optional[str] = None,
                        cfg: Optional[EngineConfig] = None, keep_outcome: bool = False) -> HittingMoments:
        """First and second moments of tau (embedded) and tau_M1 (continuous) from one ensemble."""
        x = np.asarray(x, dtype=float)
        if z == 0 and float(np.linalg.norm(x)) <= self.params.M1:
            zero = MomentEstimate.exact(0.0, n_replicas)
            return HittingMoments(zero, zero, zero, zero, 0.0, 0)
        require_replicas(n_replicas)
        label = label or ensemble_label("hitting", x, z)
        outcome = self.simulate(x, z, n_replicas, label, cfg=cfg, stop="embedded")
        usable = ~outcome.aborted
        n = outcome.n
        censored_fraction = float(outcome.censored.sum()) / n
        tau = np.where(outcome.censored, outcome.t_end, outcome.stop_time)
        tau_m1 = np.where(np.isnan(outcome.hit_radius), outcome.t_end, outcome.hit_radius)
        m1_censored = np.isnan(outcome.hit_radius) & usable
        lower = bool(outcome.censored.any())
        violations = int(np.sum(usable & ~outcome.censored & (outcome.hit_radius > outcome.stop_time)))
        seed = derived_seed((cfg or self.cfg).rng_seed, label)

        tau_est = self._estimate(tau, outcome, usable, lower_bound=lower)
        tau_sq_est = self._estimate(tau ** 2, outcome, usable, lower_bound=lower, method="bootstrap", seed=seed)
        tau_m1_est = self._estimate(tau_m1, outcome, usable, lower_bound=bool(m1_censored.any()))
        tau_m1_est.censored_fraction = float(m1_censored.sum()) / n
        tau_m1_sq_est = self._estimate(tau_m1 ** 2, outcome, usable, lower_bound=bool(m1_censored.any()),
                                       method="bootstrap", seed=seed + 1)
        tau_m1_sq_est.censored_fraction = tau_m1_est.censored_fraction
        if censored_fraction > SECOND_MOMENT_CENSOR_LIMIT:
            tau_sq_est.reliable = False
            tau_m1_sq_est.reliable = False
            logger.warning(f"{label}: {100 * censored_fraction:.2f}% of paths censored at horizon "
                           f"{(cfg or self.cfg).horizon:g}; second moments are lower bounds only")
        if violations:
            logger.error(f"{label}: tau_M1 > tau on {violations} sample(s)")
        return HittingMoments(tau=tau_est, tau_sq=tau_sq_est, tau_m1=tau_m1_est, tau_m1_sq=tau_m1_sq_est,
                              censored_fraction=censored_fraction, dominance_violations=violations,
                              outcome=outcome if keep_outcome else None)

    def halving_difference(self, x, z: int, n_replicas: int, t_end: float, power: int = 2,
                           radius: Optional[float] = None, max_jumps: Optional[int] = None,
                           label: Optional[str] = None, cfg: Optional[EngineConfig] = None) -> HalvingResult:
        """Paired difference between the dt/2 and dt estimates of one expectation. The noise is
        shared, so the interval measures discretisation.

        Without radius the statistic is |X|^p at t_end, or at the max_jumps-th switch when that is
        set (the interval change and the one-cycle drift then follow by subtracting |x|^p). With
        radius it is tau^p for the first grid time inside the ball, censored at t_end."""
        require_replicas(n_replicas)
        cfg = cfg or self.cfg
        x = np.asarray(x, dtype=float)
        label = label or ensemble_label("halving", x, z, power, radius, max_jumps, t_end)
        coupled = self.simulate_coupled(x, z, n_replicas, t_end, label, radius=radius, max_jumps=max_jumps, cfg=cfg)
        usable = ~coupled.aborted
        if max_jumps is not None:
            usable &= coupled.jumps >= max_jumps
        if radius is None:
            fine = np.linalg.norm(coupled.fine_end, axis=1) ** power
            coarse = np.linalg.norm(coupled.coarse_end, axis=1) ** power
        else:
            fine = np.where(np.isnan(coupled.fine_hit), t_end, coupled.fine_hit) ** power
            coarse = np.where(np.isnan(coupled.coarse_hit), t_end, coupled.coarse_hit) ** power
        aborted_fraction = float(coupled.aborted.sum()) / n_replicas
        return HalvingResult(
            difference=MomentEstimate.from_samples((fine - coarse)[usable], self.confidence,
                                                   aborted_fraction=aborted_fraction),
            fine=MomentEstimate.from_samples(fine[usable], self.confidence, aborted_fraction=aborted_fraction),
        )

    def frozen_regime_moment(self, x, regime: int, duration: float, power: int, n_replicas: int,
                             label: Optional[str] = None) -> MomentEstimate:
        """E|X_t|^power with switching switched off: the regime stays fixed for the whole duration."""
        self._check_power(power)
        require_replicas(n_replicas)
        label = label or ensemble_label("frozen", x, regime, power, duration)
        task = functools.partial(_frozen_task, np.asarray(x, dtype=float), regime, duration, self.spec, self.cfg)
        x_end, aborted = run_blocks(task, label, n_replicas, self.cfg.rng_seed, self.block_size, self.workers)
        samples = np.linalg.norm(x_end, axis=1) ** power
        return MomentEstimate.from_samples(samples[~aborted], self.confidence,
                                           aborted_fraction=float(aborted.mean()))

    def tv_decay(self, x, z: int, t_grid: Sequence[float], reference_time: float, n_replicas: int,
                 bins: int = 64, label: Optional[str] = None) -> TVDecay:
        """Empirical TV distance between the binned law of (|X_t|, Z_t) and that at reference_time."""
        times = np.unique(np.asarray(t_grid, dtype=float))
        if times.size == 0 or times[-1] >= reference_time:
            raise ValueError("reference_time must exceed every time in the grid")
        if reference_time > self.cfg.horizon:
            raise ValueError(f"reference_time={reference_time} exceeds horizon={self.cfg.horizon}")
        if bins < 2:
            raise ValueError("at least two bins are needed")
        require_replicas(n_replicas)
        x = np.asarray(x, dtype=float)
        label = label or ensemble_label("tv", x, z)
        record = times.tolist() + [float(reference_time)]
        main = self.simulate(x, z, n_replicas, label, stop="time", record_times=record)
        reference = self.simulate(x, z, n_replicas, label + "|reference", stop="time", record_times=[reference_time])

        ref_r = reference.snapshot_radius[0]
        ref_z = reference.snapshot_regime[0]
        ref_ok = np.isfinite(ref_r)
        r_cap = max(float(np.max(ref_r[ref_ok])), float(np.linalg.norm(x))) * (1.0 + 1e-9)
        edges = np.linspace(0.0, r_cap, bins + 1)

        def _histogram(radii, regimes):
            ok = np.isfinite(radii)
            radii, regimes = radii[ok], regimes[ok]
            cells = []
            for regime in (0, 1):
                sel = radii[regimes == regime]
                counts, _ = np.histogram(sel[sel <= r_cap], bins=edges)
                cells.append(counts)
                cells.append([np.sum(sel > r_cap)])
            counts = np.concatenate(cells).astype(float)
            overflow = (counts[bins] + counts[-1]) / max(radii.size, 1)
            return counts / max(radii.size, 1), overflow

        p_ref, _ = _histogram(ref_r, ref_z)
        tv = []
        overflow = 0.0
        for row in range(times.size):
            p_t, over = _histogram(main.snapshot_radius[row], main.snapshot_regime[row])
            overflow = max(overflow, over)
            tv.append(0.5 * float(np.abs(p_t - p_ref).sum()))
        p_same, _ = _histogram(main.snapshot_radius[-1], main.snapshot_regime[-1])
        noise = 0.5 * float(np.abs(p_same - p_ref).sum())
        if overflow > UNDERCOVERAGE_LIMIT:
            logger.warning(f"{label}: {100 * overflow:.1f}% of mass lies beyond the reference bin range")

        tv_arr = np.asarray(tv)
        non_increasing = bool(np.all(np.diff(tv_arr) <= 2.0 * noise))
        significant = tv_arr > 2.0 * noise
        slope = float("nan")
        if significant.sum() >= 2:
            slope = float(np.polyfit(np.log1p(times[significant]), np.log(tv_arr[significant]), 1)[0])
        return TVDecay(times=times.tolist(), tv=tv, noise_floor=noise, reference_time=float(reference_time),
                       overflow_fraction=overflow, non_increasing=non_increasing, slope=slope)

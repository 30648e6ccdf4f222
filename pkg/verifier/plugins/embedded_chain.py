import functools
import logging
import os
import sys
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), '../../simulation_integration')))

from errors import EstimationError, SimulationError
from model_core import ModelParams, occupation_threshold
from sde_engine import CycleTrace, TauRun, sample_holding_time, simulate_cycles
from ensemble import run_blocks
from estimators import (MomentEstimate, SwitchingEstimator, ensemble_label, radial_point,
                        require_replicas)

logger = logging.getLogger(__name__)

DECOMPOSITION_RTOL = 1e-9
M1_SEARCH_MAX_DOUBLINGS = 10


@dataclass
class EmbeddedSample:
    y: np.ndarray
    n: int
    stopped: bool


@dataclass(frozen=True)
class MartingaleConstants:
    c1: float
    c2: float
    var_eta: float

    def __post_init__(self):
        if not (self.c1 > 0 and self.c2 > 0):
            raise ValueError(f"martingale constants must be positive, got c1={self.c1}, c2={self.c2}")
        if self.c2 < 0.5 * self.c1 ** 2:
            raise ValueError(f"c2={self.c2} < c1^2/2={0.5 * self.c1 ** 2}")


def martingale_constants(params: ModelParams) -> MartingaleConstants:
    """c1 = E eta, c2 = 2(1/l-^2 + 1/(l- l+) + 1/l+^2) = E eta^2, and Var eta = 1/l-^2 + 1/l+^2."""
    a = 1.0 / params.lambda_minus
    b = 1.0 / params.lambda_plus
    return MartingaleConstants(c1=a + b, c2=2.0 * (a * a + a * b + b * b), var_eta=a * a + b * b)


@dataclass
class TauDecomposition:
    tau: float
    T0: float
    N: int
    S_N: float
    residual: float


def decompose_tau(run: TauRun, constants: MartingaleConstants) -> TauDecomposition:
    """Splits tau into T0 + c1 N + S_N, S_N being the sum of centred cycle durations."""
    if run.censored:
        raise EstimationError("cannot decompose a censored run: tau was not reached within the horizon")
    residual = abs(run.tau - (run.T0 + constants.c1 * run.n_cycles + run.s_sum))
    if residual > DECOMPOSITION_RTOL * max(run.tau, 1.0):
        raise SimulationError(f"tau decomposition off by {residual:.3g} (tau={run.tau:.6g})")
    return TauDecomposition(tau=run.tau, T0=run.T0, N=run.n_cycles, S_N=run.s_sum, residual=residual)


@dataclass
class EmbeddedHitting:
    """Moments of the embedded stopping count N and of tau, from one ensemble."""
    EN: MomentEstimate
    EN2: MomentEstimate
    ET0_sq: MomentEstimate
    Etau: MomentEstimate
    Etau_sq: MomentEstimate
    Etau_m1: MomentEstimate
    Etau_m1_sq: MomentEstimate
    S_N: MomentEstimate
    max_residual: float
    dominance_violations: int
    censored_fraction: float


@dataclass
class DurationStats:
    mean: MomentEstimate
    variance: MomentEstimate
    second_moment: MomentEstimate
    sum_variance_ratio: float


@dataclass
class M1Search:
    m1: float
    delta: float
    steps: List[Tuple[float, float, float]] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.steps, columns=["m1_candidate", "occupation_z0_T2", "occupation_z1_T1"])


def _cycle_task(y, params, spec, cfg, n_cycles, n, streams):
    return simulate_cycles(np.tile(y, (n, 1)), params, spec, cfg, streams, n_cycles=n_cycles)


def _duration_task(params, per_path, n, streams):
    minus = sample_holding_time(0, params, streams.clock, size=(n, per_path))
    plus = sample_holding_time(1, params, streams.clock, size=(n, per_path))
    return minus + plus


class EmbeddedChainSampler:
    """Estimators over the skeleton Y_n = X_{T_2n} of one switching model."""

    def __init__(self, estimator: SwitchingEstimator):
        self.estimator = estimator
        self.params = estimator.params
        self.constants = martingale_constants(estimator.params)

    def _cycles(self, y: np.ndarray, n_cycles: int, n_replicas: int, label: str) -> CycleTrace:
        est = self.estimator
        task = functools.partial(_cycle_task, y, est.params, est.spec, est.cfg, n_cycles)
        return run_blocks(task, label, n_replicas, est.cfg.rng_seed, est.block_size, est.workers)

    def conditional_moment_drift(self, y, m: int, n_replicas: int, label: Optional[str] = None) -> MomentEstimate:
        """E[|Y_1|^2m | Y_0 = y] - |y|^2m over one embedded cycle."""
        if m not in (1, 2, 3):
            raise ValueError(f"m must be 1, 2 or 3, got {m!r}")
        y = np.asarray(y, dtype=float)
        if float(y @ y) <= self.params.M1 ** 2:
            return MomentEstimate.exact(0.0, n_replicas)
        require_replicas(n_replicas)
        label = label or ensemble_label("cycle-drift", y, 0, m)
        trace = self._cycles(y, 1, n_replicas, label)
        r2 = np.einsum("ij,ij->i", trace.positions[1], trace.positions[1])
        samples = r2 ** m - float(y @ y) ** m
        usable = ~trace.aborted
        return MomentEstimate.from_samples(samples[usable], self.estimator.confidence,
                                           aborted_fraction=float(trace.aborted.mean()))

    def multi_cycle_moments(self, y, m: int, n_cycles: int, n_replicas: int,
                            label: Optional[str] = None) -> List[MomentEstimate]:
        """E 1(T_2k < tau) |Y_{(k+1) ^ N}|^2m for k = 0..n_cycles-1."""
        require_replicas(n_replicas)
        y = np.asarray(y, dtype=float)
        label = label or ensemble_label("multi-cycle", y, 0, m, n_cycles)
        trace = self._cycles(y, n_cycles, n_replicas, label)
        usable = ~trace.aborted
        results = []
        for k in range(n_cycles):
            r2 = np.einsum("ij,ij->i", trace.positions[k + 1], trace.positions[k + 1])
            samples = np.where(trace.alive[k], r2 ** m, 0.0)
            results.append(MomentEstimate.from_samples(samples[usable], self.estimator.confidence,
                                                       aborted_fraction=float(trace.aborted.mean())))
        return results

    def trace_embedded_chain(self, y, n_cycles: int, label: Optional[str] = None) -> List[EmbeddedSample]:
        """One realisation of Y_0, Y_1, ... up to N or n_cycles, whichever comes first."""
        y = np.asarray(y, dtype=float)
        label = label or ensemble_label("trace", y, 0, n_cycles)
        trace = self._cycles(y, n_cycles, 1, label)
        samples = []
        for k in range(n_cycles + 1):
            stopped = not trace.alive[k, 0]
            samples.append(EmbeddedSample(y=trace.positions[k, 0].copy(), n=k, stopped=stopped))
            if stopped:
                break
        return samples

    def cycle_duration_stats(self, n_paths: int, cycles_per_path: int,
                             label: str = "cycle-durations") -> DurationStats:
        """Moments of eta = one regime-0 plus one regime-1 holding, and Var(S_n)/(c2 n)."""
        require_replicas(n_paths)
        est = self.estimator
        task = functools.partial(_duration_task, self.params, cycles_per_path)
        eta = run_blocks(task, label, n_paths, est.cfg.rng_seed, est.block_size, est.workers)
        flat = eta.ravel()
        n = flat.size
        centred_sq = (flat - flat.mean()) ** 2 * n / (n - 1)
        s_n = (eta - self.constants.c1).sum(axis=1)
        ratio = float(np.var(s_n, ddof=1) / (self.constants.c2 * cycles_per_path))
        conf = est.confidence
        return DurationStats(
            mean=MomentEstimate.from_samples(flat, conf),
            variance=MomentEstimate.from_samples(centred_sq, conf),
            second_moment=MomentEstimate.from_samples(flat ** 2, conf),
            sum_variance_ratio=ratio,
        )

    def embedded_hitting(self, x, z: int, n_replicas: int, label: Optional[str] = None,
                         cfg=None) -> EmbeddedHitting:
        x = np.asarray(x, dtype=float)
        conf = self.estimator.confidence
        if z == 0 and float(x @ x) <= self.params.M1 ** 2:
            zero = MomentEstimate.exact(0.0, n_replicas)
            return EmbeddedHitting(zero, zero, zero, zero, zero, zero, zero, zero, 0.0, 0, 0.0)
        label = label or ensemble_label("hitting", x, z)
        moments = self.estimator.hitting_moments(x, z, n_replicas, label=label, cfg=cfg, keep_outcome=True)
        out = moments.outcome
        done = out.completed
        if not done.any():
            raise EstimationError(f"{label}: every replica was censored or aborted")
        c1 = self.constants.c1
        tau = out.stop_time[done]
        residual = np.abs(tau - (np.nan_to_num(out.T0[done]) + c1 * out.n_cycles[done] + out.s_sum[done]))
        max_rel = float(np.max(residual / np.maximum(tau, 1.0)))
        if max_rel > DECOMPOSITION_RTOL:
            logger.error(f"{label}: tau decomposition residual {max_rel:.3g} exceeds {DECOMPOSITION_RTOL:g}")
        n_all = out.n_cycles.astype(float)
        usable = ~out.aborted
        lower = bool(out.censored.any())
        frac = dict(censored_fraction=float(out.censored.mean()), aborted_fraction=float(out.aborted.mean()))
        t0 = np.where(np.isnan(out.T0), out.t_end, out.T0)
        return EmbeddedHitting(
            EN=MomentEstimate.from_samples(n_all[usable], conf, lower_bound=lower, **frac),
            EN2=MomentEstimate.from_samples(n_all[usable] ** 2, conf, lower_bound=lower, **frac),
            ET0_sq=MomentEstimate.from_samples(t0[usable] ** 2, conf, **frac),
            Etau=moments.tau,
            Etau_sq=moments.tau_sq,
            Etau_m1=moments.tau_m1,
            Etau_m1_sq=moments.tau_m1_sq,
            S_N=MomentEstimate.from_samples(out.s_sum[done], conf, **frac),
            max_residual=max_rel,
            dominance_violations=moments.dominance_violations,
            censored_fraction=moments.censored_fraction,
        )

    def estimate_EN(self, x, z: int, n_replicas: int, label: Optional[str] = None,
                    cfg=None) -> Tuple[MomentEstimate, MomentEstimate]:
        hitting = self.embedded_hitting(x, z, n_replicas, label=label, cfg=cfg)
        return hitting.EN, hitting.EN2


def search_m1(estimator: SwitchingEstimator, epsilon: float, n_replicas: int,
              start_factor: float = 2.0, factor: float = 2.0,
              max_doublings: int = M1_SEARCH_MAX_DOUBLINGS) -> M1Search:
    """Smallest radius on the grid start_factor*M*factor^k at which the occupation time near the
    ball, up to T2 from regime 0 and up to T1 from regime 1, drops below delta."""
    params = estimator.params
    delta = occupation_threshold(params, estimator.spec, epsilon)
    result = M1Search(m1=float("nan"), delta=delta)
    candidate = start_factor * params.M
    for step in range(max_doublings + 1):
        trial = estimator.with_params(params.with_m1(candidate))
        x = radial_point(params, candidate)
        occ0 = trial.occupation_near_ball(x, 0, "T2", n_replicas, label=f"m1-search|r={candidate:.12g}|z=0")
        occ1 = trial.occupation_near_ball(x, 1, "T1", n_replicas, label=f"m1-search|r={candidate:.12g}|z=1")
        result.steps.append((candidate, occ0.mean, occ1.mean))
        logger.info(f"M1 search: r={candidate:g} occupation z=0:{occ0.mean:.4g} z=1:{occ1.mean:.4g} (delta={delta:.4g})")
        if occ0.mean < delta and occ1.mean < delta:
            result.m1 = candidate
            return result
        candidate *= factor
    raise EstimationError(f"M1 search did not reach occupation < delta={delta:.4g} within {max_doublings} doublings")

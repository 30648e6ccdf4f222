import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import ClassVar, Dict, List, Optional, Sequence, Union

import numpy as np

from errors import ConfigError, PathAbortedError, SimulationError
from model_core import DriftSpec, ModelParams
from rng_streams import EngineStreams, block_streams

logger = logging.getLogger(__name__)

DEFAULT_MAX_ABS_STATE = 1e9
STOP_RULES = ("embedded", "continuous", "jumps", "time")


@dataclass(frozen=True)
class EngineConfig:
    dt: float
    horizon: float
    rng_seed: int = 0
    stream_id: int = 0
    max_abs_state: float = DEFAULT_MAX_ABS_STATE

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ConfigError(f"dt must be positive, got {self.dt!r}", "engine.dt")
        if not self.horizon > 0:
            raise ConfigError(f"horizon must be positive, got {self.horizon!r}", "engine.horizon")
        if self.dt > self.horizon:
            raise ConfigError(f"dt={self.dt} exceeds horizon={self.horizon}", "engine.dt")
        if not self.max_abs_state > 0:
            raise ConfigError(f"max_abs_state must be positive, got {self.max_abs_state!r}", "engine.max_abs_state")

    @staticmethod
    def default_dt(params: ModelParams) -> float:
        return 1e-3 * min(1.0 / params.lambda_minus, 1.0 / params.lambda_plus)

    def with_dt(self, dt: float) -> "EngineConfig":
        return dataclasses.replace(self, dt=float(dt))

    def streams(self, label: str) -> EngineStreams:
        return block_streams(self.rng_seed, label, self.stream_id)


@dataclass
class Path:
    times: np.ndarray
    states: np.ndarray
    regimes: np.ndarray
    jump_times: List[float]
    censored: bool


@dataclass
class CycleRecord:
    y_start: np.ndarray
    y_mid: Optional[np.ndarray]
    y_end: Optional[np.ndarray]
    dur_minus: Optional[float]
    dur_plus: Optional[float]
    stopped: bool


@dataclass
class CycleTrace:
    """Positions X_{T_2k ^ tau} for k = 0..n_cycles over an ensemble of starting points."""
    positions: np.ndarray        # (n_cycles + 1, n, d)
    alive: np.ndarray            # (n_cycles + 1, n): 1(T_2k < tau)
    mid: np.ndarray              # (n_cycles, n, d): X_{T_2k+1}, nan where not simulated
    dur_minus: np.ndarray        # (n_cycles, n)
    dur_plus: np.ndarray         # (n_cycles, n)
    aborted: np.ndarray          # (n,)

    replica_axes: ClassVar[Dict[str, int]] = {"positions": 1, "alive": 1, "mid": 1, "dur_minus": 1, "dur_plus": 1}


@dataclass
class EnsembleOutcome:
    stop_time: np.ndarray
    t_end: np.ndarray
    censored: np.ndarray
    aborted: np.ndarray
    T0: np.ndarray
    n_cycles: np.ndarray
    s_sum: np.ndarray
    eta_sq_sum: np.ndarray
    jumps: np.ndarray
    hit_radius: np.ndarray
    hit_ball: np.ndarray
    y0_sq: np.ndarray
    x_end: np.ndarray
    regime_end: np.ndarray
    c1: float
    snapshot_radius: Optional[np.ndarray] = None
    snapshot_regime: Optional[np.ndarray] = None

    replica_axes: ClassVar[Dict[str, int]] = {"snapshot_radius": 1, "snapshot_regime": 1}

    @property
    def n(self) -> int:
        return int(self.stop_time.shape[0])

    @property
    def completed(self) -> np.ndarray:
        return ~self.censored & ~self.aborted


@dataclass
class TauRun:
    tau: float
    n_cycles: int
    T0: float
    s_sum: float
    tau_m1: float
    y0_sq: float
    censored: bool
    aborted: bool
    path: Optional[Path] = None


@dataclass
class CoupledOutcome:
    """Same Brownian path and regime clock integrated with dt (coarse) and dt/2 (fine)."""
    coarse_end: np.ndarray
    fine_end: np.ndarray
    coarse_hit: np.ndarray
    fine_hit: np.ndarray
    aborted: np.ndarray
    jumps: Optional[np.ndarray] = None
    t_end: Optional[np.ndarray] = None


class PathRecorder:
    def __init__(self):
        self.times: List[float] = []
        self.states: List[np.ndarray] = []
        self.regimes: List[int] = []
        self.jump_times: List[float] = []

    def record(self, t: float, x: np.ndarray, regime: int):
        self.times.append(float(t))
        self.states.append(np.array(x, dtype=float))
        self.regimes.append(int(regime))

    def jump(self, t: float):
        self.jump_times.append(float(t))

    def build(self, censored: bool) -> Path:
        return Path(
            times=np.asarray(self.times),
            states=np.vstack(self.states) if self.states else np.empty((0, 0)),
            regimes=np.asarray(self.regimes, dtype=np.int8),
            jump_times=list(self.jump_times),
            censored=censored,
        )


def sample_holding_time(regime: int, params: ModelParams, rng: np.random.Generator,
                        size: Optional[int] = None) -> Union[float, np.ndarray]:
    """Exponential holding time: rate lambda_- in regime 0, lambda_+ in regime 1."""
    if regime not in (0, 1):
        raise ValueError(f"regime must be 0 or 1, got {regime!r}")
    return rng.exponential(1.0 / params.rate(regime), size=size)


def _position_block(x0, n: int, d: int) -> np.ndarray:
    x = np.asarray(x0, dtype=float)
    if x.ndim == 1:
        if x.shape[0] != d:
            raise ValueError(f"position has dimension {x.shape[0]}, model has d={d}")
        return np.tile(x, (n, 1))
    if x.shape != (n, d):
        raise ValueError(f"positions must have shape {(n, d)}, got {x.shape}")
    return np.array(x, copy=True)


def _sq_norms(x: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", x, x)


def integrate_ensemble(x0: np.ndarray, regime, durations, cfg: EngineConfig, spec: DriftSpec,
                       rng: np.random.Generator, on_step=None):
    """Euler-Maruyama over per-replica durations; the last step of each replica is shortened
    so it lands exactly on its own duration. Returns (end states, aborted mask)."""
    x = np.array(x0, dtype=float, copy=True)
    n, d = x.shape
    remaining = np.array(np.broadcast_to(np.asarray(durations, dtype=float), (n,)), copy=True)
    if np.any(remaining < 0):
        raise ValueError("durations must be non-negative")
    regimes = None if np.ndim(regime) == 0 else np.asarray(regime)
    bound2 = cfg.max_abs_state ** 2
    aborted = np.zeros(n, dtype=bool)
    active = remaining > 0
    elapsed = np.zeros(n)

    while True:
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        rem = remaining[idx]
        h = np.minimum(cfg.dt, rem)
        xi = x[idx]
        drift = spec.evaluate(xi, int(regime)) if regimes is None else spec.evaluate_mixed(xi, regimes[idx])
        xi = xi + drift * h[:, None] + np.sqrt(h)[:, None] * rng.standard_normal(xi.shape)
        rem = rem - h
        x[idx] = xi
        remaining[idx] = rem
        elapsed[idx] += h
        r2 = _sq_norms(xi)
        bad = ~(r2 <= bound2)
        if bad.any():
            aborted[idx[bad]] = True
            active[idx[bad]] = False
            logger.error(f"{int(bad.sum())} path(s) aborted: non-finite state or |X| > {cfg.max_abs_state:g}")
        if on_step is not None:
            on_step(idx, xi, r2, elapsed[idx])
        active[idx[rem <= 0]] = False
    return x, aborted


def integrate_between_jumps(x0, regime: int, duration: float, cfg: EngineConfig, spec: DriftSpec,
                            rng: np.random.Generator) -> Path:
    """One recorded path segment with the regime frozen for the whole duration."""
    if not duration > 0:
        raise ValueError(f"duration must be positive, got {duration!r}")
    x = np.atleast_2d(np.asarray(x0, dtype=float))
    recorder = PathRecorder()
    recorder.record(0.0, x[0], regime)

    def _record(idx, xi, r2, elapsed):
        recorder.record(elapsed[0], xi[0], regime)

    _, aborted = integrate_ensemble(x, regime, duration, cfg, spec, rng, on_step=_record)
    if aborted[0]:
        raise PathAbortedError(recorder.times[-1], recorder.states[-1], "non-finite or overflowing state")
    return recorder.build(censored=False)


def simulate_cycles(y, params: ModelParams, spec: DriftSpec, cfg: EngineConfig, streams: EngineStreams,
                    n_cycles: int = 1) -> CycleTrace:
    """Runs up to n_cycles embedded cycles (regime 0 holding, then regime 1 holding) from each
    starting point; a replica stops for good at the first even time with |X| <= M1."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    n, d = y.shape
    m1_sq = params.M1 ** 2
    positions = np.empty((n_cycles + 1, n, d))
    positions[0] = y
    alive = np.zeros((n_cycles + 1, n), dtype=bool)
    mid = np.full((n_cycles, n, d), np.nan)
    dur_minus = np.full((n_cycles, n), np.nan)
    dur_plus = np.full((n_cycles, n), np.nan)
    aborted = np.zeros(n, dtype=bool)

    current = y.copy()
    running = _sq_norms(current) > m1_sq
    alive[0] = running
    for k in range(n_cycles):
        idx = np.flatnonzero(running)
        if idx.size:
            dm = sample_holding_time(0, params, streams.clock, size=idx.size)
            xm, ab_minus = integrate_ensemble(current[idx], 0, dm, cfg, spec, streams.noise)
            dp = sample_holding_time(1, params, streams.clock, size=idx.size)
            dp_run = np.where(ab_minus, 0.0, dp)
            xp, ab_plus = integrate_ensemble(xm, 1, dp_run, cfg, spec, streams.noise)
            ab = ab_minus | ab_plus
            xp[ab] = np.nan
            current[idx] = xp
            mid[k, idx] = xm
            dur_minus[k, idx] = dm
            dur_plus[k, idx] = dp
            aborted[idx] |= ab
        positions[k + 1] = current
        running = running & ~aborted & (_sq_norms(current) > m1_sq)
        alive[k + 1] = running
    return CycleTrace(positions=positions, alive=alive, mid=mid, dur_minus=dur_minus,
                      dur_plus=dur_plus, aborted=aborted)


def simulate_cycle(y, params: ModelParams, spec: DriftSpec, cfg: EngineConfig,
                   streams: EngineStreams) -> CycleRecord:
    y = np.asarray(y, dtype=float)
    if float(y @ y) <= params.M1 ** 2:
        return CycleRecord(y_start=y, y_mid=None, y_end=None, dur_minus=None, dur_plus=None, stopped=True)
    trace = simulate_cycles(y[None, :], params, spec, cfg, streams, n_cycles=1)
    if trace.aborted[0]:
        raise PathAbortedError(float(trace.dur_minus[0, 0] + trace.dur_plus[0, 0]), trace.mid[0, 0],
                               "non-finite or overflowing state inside a cycle")
    return CycleRecord(
        y_start=y,
        y_mid=trace.mid[0, 0].copy(),
        y_end=trace.positions[1, 0].copy(),
        dur_minus=float(trace.dur_minus[0, 0]),
        dur_plus=float(trace.dur_plus[0, 0]),
        stopped=False,
    )


def simulate_switching(x0, z0, n: int, params: ModelParams, spec: DriftSpec, cfg: EngineConfig,
                       streams: EngineStreams, stop: str = "embedded", radius: Optional[float] = None,
                       max_jumps: Optional[int] = None, record_times: Optional[Sequence[float]] = None,
                       recorder: Optional[PathRecorder] = None) -> EnsembleOutcome:
    """Vectorised (X, Z) simulator.

    stop rules:
      embedded   -- stop at the first even jump time with |X| <= radius (tau)
      continuous -- stop at the first grid time with |X| <= radius (tau_M1)
      jumps      -- stop at the max_jumps-th jump of Z
      time       -- stop at the last of record_times
    Regime switching is drawn from exact exponential clocks; Euler steps are shortened to land
    on every jump time and on every record time.
    """
    if stop not in STOP_RULES:
        raise ValueError(f"unknown stop rule {stop!r}")
    if stop == "jumps" and not (max_jumps and max_jumps >= 1):
        raise ValueError("stop='jumps' needs max_jumps >= 1")
    if stop == "time" and not record_times:
        raise ValueError("stop='time' needs record_times")
    if recorder is not None and n != 1:
        raise ValueError("path recording is only supported for a single replica")

    d = params.d
    radius = params.M1 if radius is None else float(radius)
    rad2 = radius * radius
    ball2 = params.M ** 2
    bound2 = cfg.max_abs_state ** 2
    c1 = 1.0 / params.lambda_minus + 1.0 / params.lambda_plus
    rates = np.array([params.lambda_minus, params.lambda_plus])

    x = _position_block(x0, n, d)
    regime = np.array(np.broadcast_to(np.asarray(z0, dtype=np.int64), (n,)), copy=True)
    if np.any((regime != 0) & (regime != 1)):
        raise ValueError("regime labels must be 0 or 1")

    t = np.zeros(n)
    jumps = np.zeros(n, dtype=np.int64)
    n_cycles = np.zeros(n, dtype=np.int64)
    s_sum = np.zeros(n)
    eta_sq_sum = np.zeros(n)
    T0 = np.where(regime == 0, 0.0, np.nan)
    cycle_start = np.zeros(n)
    stop_time = np.full(n, np.nan)
    censored = np.zeros(n, dtype=bool)
    aborted = np.zeros(n, dtype=bool)
    hit_radius = np.full(n, np.nan)
    hit_ball = np.full(n, np.nan)
    y0_sq = np.full(n, np.nan)
    active = np.ones(n, dtype=bool)

    rec = None
    snap_r = snap_z = None
    ptr = None
    if record_times is not None:
        rec = np.unique(np.asarray(record_times, dtype=float))
        if rec[0] < 0:
            raise ValueError("record times must be non-negative")
        snap_r = np.full((rec.size, n), np.nan)
        snap_z = np.full((rec.size, n), -1, dtype=np.int8)
        ptr = np.zeros(n, dtype=np.int64)

    def _snapshot(rows: np.ndarray, times: np.ndarray, r2_rows: np.ndarray):
        p = ptr[rows]
        pending = p < rec.size
        due = pending & (times >= rec[np.minimum(p, rec.size - 1)])
        if due.any():
            rows_due = rows[due]
            snap_r[p[due], rows_due] = np.sqrt(r2_rows[due])
            snap_z[p[due], rows_due] = regime[rows_due]
            ptr[rows_due] += 1

    r2 = _sq_norms(x)
    hit_radius[r2 <= rad2] = 0.0
    hit_ball[r2 <= ball2] = 0.0
    start0 = regime == 0
    y0_sq[start0] = r2[start0]
    if stop == "embedded":
        done = start0 & (r2 <= rad2)
    elif stop == "continuous":
        done = r2 <= rad2
    else:
        done = np.zeros(n, dtype=bool)
    if rec is not None:
        _snapshot(np.arange(n), t, r2)
        if stop == "time":
            done |= ptr >= rec.size
    stop_time[done] = 0.0
    active[done] = False
    if recorder is not None:
        recorder.record(0.0, x[0], regime[0])
        if regime[0] == 0:
            recorder.jump(0.0)

    next_jump = streams.clock.exponential(size=n) / rates[regime]
    aborted_total = 0

    while True:
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        ti = t[idx]
        target = next_jump[idx]
        if rec is not None:
            p = ptr[idx]
            next_rec = np.where(p < rec.size, rec[np.minimum(p, rec.size - 1)], np.inf)
            target = np.minimum(target, next_rec)
        gap = target - ti
        h = np.minimum(cfg.dt, gap)
        xi = x[idx]
        zi = regime[idx]
        xi = xi + spec.evaluate_mixed(xi, zi) * h[:, None] + np.sqrt(h)[:, None] * streams.noise.standard_normal(xi.shape)
        t_new = np.where(gap <= cfg.dt, target, ti + h)
        x[idx] = xi
        t[idx] = t_new
        r2 = _sq_norms(xi)

        bad = ~(r2 <= bound2)
        if bad.any():
            rows = idx[bad]
            aborted[rows] = True
            active[rows] = False
            aborted_total += rows.size
        ok = ~bad

        inside = ok & (r2 <= rad2)
        first = inside & np.isnan(hit_radius[idx])
        hit_radius[idx[first]] = t_new[first]
        in_ball = ok & (r2 <= ball2)
        first_ball = in_ball & np.isnan(hit_ball[idx])
        hit_ball[idx[first_ball]] = t_new[first_ball]
        if stop == "continuous" and inside.any():
            stop_time[idx[inside]] = t_new[inside]
            active[idx[inside]] = False

        if rec is not None:
            live = ok & active[idx]
            _snapshot(idx[live], t_new[live], r2[live])
            if stop == "time":
                finished = live & (ptr[idx] >= rec.size)
                stop_time[idx[finished]] = t_new[finished]
                active[idx[finished]] = False

        jumped = ok & active[idx] & (t_new >= next_jump[idx])
        if jumped.any():
            j = idx[jumped]
            tj = t_new[jumped]
            r2j = r2[jumped]
            new_reg = 1 - regime[j]
            regime[j] = new_reg
            jumps[j] += 1
            even = new_reg == 0
            if even.any():
                je, te, r2e = j[even], tj[even], r2j[even]
                first_entry = np.isnan(T0[je])
                T0[je[first_entry]] = te[first_entry]
                y0_sq[je[first_entry]] = r2e[first_entry]
                cont = je[~first_entry]
                eta = te[~first_entry] - cycle_start[cont]
                n_cycles[cont] += 1
                s_sum[cont] += eta - c1
                eta_sq_sum[cont] += eta * eta
                cycle_start[je] = te
                if stop == "embedded":
                    stop_now = r2e <= rad2
                    stop_time[je[stop_now]] = te[stop_now]
                    active[je[stop_now]] = False
            if stop == "jumps":
                reached = jumps[j] >= max_jumps
                stop_time[j[reached]] = tj[reached]
                active[j[reached]] = False
            renew = j[active[j]]
            if renew.size:
                next_jump[renew] = t[renew] + streams.clock.exponential(size=renew.size) / rates[regime[renew]]
            if recorder is not None:
                recorder.jump(float(tj[0]))

        over = active[idx] & (t_new >= cfg.horizon)
        if over.any():
            censored[idx[over]] = True
            active[idx[over]] = False

        if recorder is not None:
            recorder.record(t[0], x[0], regime[0])

    if aborted_total:
        logger.error(f"{aborted_total} of {n} path(s) aborted: non-finite state or |X| > {cfg.max_abs_state:g}")
        if aborted_total == n and n > 1:
            raise SimulationError(f"every one of {n} paths aborted; the model or dt is unstable")
    if censored.any():
        logger.debug(f"{int(censored.sum())} of {n} path(s) censored at horizon {cfg.horizon:g}")

    return EnsembleOutcome(
        stop_time=stop_time, t_end=t.copy(), censored=censored, aborted=aborted, T0=T0,
        n_cycles=n_cycles, s_sum=s_sum, eta_sq_sum=eta_sq_sum, jumps=jumps,
        hit_radius=hit_radius, hit_ball=hit_ball, y0_sq=y0_sq, x_end=x, regime_end=regime.astype(np.int8),
        c1=c1, snapshot_radius=snap_r, snapshot_regime=snap_z,
    )


def run_to_tau(x, z: int, params: ModelParams, spec: DriftSpec, cfg: EngineConfig,
               streams: EngineStreams, record_path: bool = False) -> TauRun:
    """Single replica up to tau = inf(T_2n : |X_{T_2n}| <= M1)."""
    recorder = PathRecorder() if record_path else None
    out = simulate_switching(np.asarray(x, dtype=float), z, 1, params, spec, cfg, streams,
                             stop="embedded", recorder=recorder)
    censored = bool(out.censored[0])
    if out.aborted[0]:
        raise PathAbortedError(float(out.t_end[0]), out.x_end[0], "non-finite or overflowing state")
    return TauRun(
        tau=float(out.stop_time[0]) if not censored else float(out.t_end[0]),
        n_cycles=int(out.n_cycles[0]),
        T0=float(out.T0[0]),
        s_sum=float(out.s_sum[0]),
        tau_m1=float(out.hit_radius[0]),
        y0_sq=float(out.y0_sq[0]),
        censored=censored,
        aborted=False,
        path=recorder.build(censored) if recorder is not None else None,
    )


def hitting_time_continuous(x, z: int, params: ModelParams, spec: DriftSpec, cfg: EngineConfig,
                            streams: EngineStreams, radius: Optional[float] = None):
    """First grid time with |X_t| <= radius; returns (time, censored)."""
    radius = params.M1 if radius is None else radius
    if not radius > 0:
        raise ValueError("radius must be positive")
    out = simulate_switching(np.asarray(x, dtype=float), z, 1, params, spec, cfg, streams,
                             stop="continuous", radius=radius)
    if out.aborted[0]:
        raise PathAbortedError(float(out.t_end[0]), out.x_end[0], "non-finite or overflowing state")
    if out.censored[0]:
        return float(out.t_end[0]), True
    return float(out.stop_time[0]), False


def simulate_path(x, z: int, params: ModelParams, spec: DriftSpec, cfg: EngineConfig,
                  streams: EngineStreams, stop: str = "embedded", until: Optional[float] = None) -> Path:
    """Records every grid point of one trajectory (for path dumps)."""
    recorder = PathRecorder()
    record_times = [until] if stop == "time" else None
    out = simulate_switching(np.asarray(x, dtype=float), z, 1, params, spec, cfg, streams,
                             stop=stop, record_times=record_times, recorder=recorder)
    if out.aborted[0]:
        raise PathAbortedError(float(out.t_end[0]), out.x_end[0], "non-finite or overflowing state")
    return recorder.build(censored=bool(out.censored[0]))


def coupled_halving(x0, z0, n: int, t_end: float, params: ModelParams, spec: DriftSpec,
                    cfg: EngineConfig, streams: EngineStreams,
                    radius: Optional[float] = None, max_jumps: Optional[int] = None) -> CoupledOutcome:
    """Integrates each replica twice on one Brownian path: on the dt grid and on the dt/2 grid,
    both refined by the shared jump times. Coarse increments are sums of fine increments, so the
    difference of the two estimates isolates the discretisation effect.

    With radius set, each resolution records its own first grid time with |X| <= radius and the
    replica stops once both have hit (t_end then acts as the horizon). With max_jumps set, the
    replica stops at that regime switch, which both resolutions share exactly."""
    if max_jumps is not None and max_jumps < 1:
        raise ValueError(f"max_jumps must be at least 1, got {max_jumps!r}")
    d = params.d
    hf = 0.5 * cfg.dt
    rates = np.array([params.lambda_minus, params.lambda_plus])
    bound2 = cfg.max_abs_state ** 2
    rad2 = None if radius is None else float(radius) ** 2

    xf = _position_block(x0, n, d)
    xc = xf.copy()
    dwc = np.zeros((n, d))
    regime = np.array(np.broadcast_to(np.asarray(z0, dtype=np.int64), (n,)), copy=True)
    t = np.zeros(n)
    tc = np.zeros(n)
    g = np.zeros(n, dtype=np.int64)
    jumps = np.zeros(n, dtype=np.int64)
    hit_f = np.full(n, np.nan)
    hit_c = np.full(n, np.nan)
    aborted = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    if rad2 is not None:
        r2 = _sq_norms(xf)
        hit_f[r2 <= rad2] = 0.0
        hit_c[r2 <= rad2] = 0.0
        active &= ~(r2 <= rad2)
    next_jump = streams.clock.exponential(size=n) / rates[regime]

    while True:
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        ti = t[idx]
        next_grid = (g[idx] + 1) * hf
        jump_at = next_jump[idx]
        target = np.minimum(np.minimum(next_grid, jump_at), t_end)
        h = target - ti
        zi = regime[idx]
        dw = np.sqrt(h)[:, None] * streams.noise.standard_normal((idx.size, d))
        xfi = xf[idx]
        xfi = xfi + spec.evaluate_mixed(xfi, zi) * h[:, None] + dw
        xf[idx] = xfi
        dwc[idx] += dw
        t[idx] = target

        on_grid = target >= next_grid
        g[idx[on_grid]] += 1
        at_jump = target >= jump_at
        at_end = target >= t_end
        coarse = (on_grid & (g[idx] % 2 == 0)) | at_jump | at_end
        if coarse.any():
            rows = idx[coarse]
            big_h = t[rows] - tc[rows]
            xcr = xc[rows]
            xc[rows] = xcr + spec.evaluate_mixed(xcr, regime[rows]) * big_h[:, None] + dwc[rows]
            dwc[rows] = 0.0
            tc[rows] = t[rows]

        r2f = _sq_norms(xfi)
        r2c = _sq_norms(xc[idx])
        bad = ~(r2f <= bound2) | ~(r2c <= bound2)
        if bad.any():
            aborted[idx[bad]] = True
            active[idx[bad]] = False
        if rad2 is not None:
            new_f = ~bad & (r2f <= rad2) & np.isnan(hit_f[idx])
            hit_f[idx[new_f]] = target[new_f]
            new_c = ~bad & coarse & (r2c <= rad2) & np.isnan(hit_c[idx])
            hit_c[idx[new_c]] = target[new_c]
            both = ~np.isnan(hit_f[idx]) & ~np.isnan(hit_c[idx])
            active[idx[both]] = False

        flip = idx[at_jump & active[idx]]
        if flip.size:
            jumps[flip] += 1
            if max_jumps is not None:
                done = flip[jumps[flip] >= max_jumps]
                active[done] = False
                flip = flip[jumps[flip] < max_jumps]
            regime[flip] = 1 - regime[flip]
            next_jump[flip] = t[flip] + streams.clock.exponential(size=flip.size) / rates[regime[flip]]
        active[idx[at_end]] = False

    if aborted.any():
        logger.error(f"{int(aborted.sum())} of {n} coupled path(s) aborted")
    return CoupledOutcome(coarse_end=xc, fine_end=xf, coarse_hit=hit_c, fine_hit=hit_f, aborted=aborted,
                          jumps=jumps, t_end=t)

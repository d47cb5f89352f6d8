"""End-to-end orchestration: burst schedules, Monte Carlo, result files.

One :func:`run_once` flies the scenario's trajectory, transmits a ranging
burst at the configured rate, pushes it through every beacon's channel and
estimator, and solves positions per stage:

* stage 1: trilateration of the raw correlation-TOA distances,
* stage 2: trilateration of the Kalman-fused distances,
* stage 3: stage-2 fix with the ceiling-echo height blended into z.

:func:`run_campaign` grids (snr, trial) with paired seeds and aggregates
error statistics; emitters write CSV/JSON files byte-reproducibly.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from hashlib import sha256
from pathlib import Path

import numpy as np

from .channel import apply_channel, image_method_paths
from .errors import (ArgumentError, EchoInconsistencyError, GeometryError,
                     ParseError, ValidationError)
from .estimation import RangePipelineConfig, _RangeTracker
from .localization import BeaconSet, DopGrid, Stage, categorize_dop, \
    fuse_height, height_from_echo, trilaterate
from .scenario import (RoomScenario, default_scenario, load_scenario,
                       scenario_to_dict, validate_scenario)
from .signals import (DEFAULT_BIT_DURATION_S, DEFAULT_BITS_PER_BURST,
                      SignalFrame, make_hop_plan, random_bits,
                      synthesize_fhss)

# Purpose tags for deriving independent generator streams from one root
# seed; every stream is SeedSequence((root, tag, *indices)).
_TX_STREAM = 0
_CHANNEL_STREAM = 1
_ECHO_STREAM = 2
_TRAJECTORY_STREAM = 3
_TRIAL_STREAM = 4

# Wall-mounted beacons sit exactly on the room boundary; the image method
# wants strictly interior endpoints, so receivers are nudged inward by this
# much (far below the one-sample distance quantum).
_WALL_NUDGE_M = 1e-6


def _stream(*path: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(tuple(int(x) for x in path))


def trial_seed(root_seed: int, trial: int) -> int:
    """The root seed of one Monte-Carlo trial.

    Derived from the campaign root and the trial index only, so the same
    trial is seed-paired across SNR points and stage ablations.
    """
    state = _stream(root_seed, _TRIAL_STREAM, trial).generate_state(2)
    return (int(state[0]) << 32) | int(state[1])


def scenario_digest(scenario: RoomScenario) -> str:
    """Short stable fingerprint of a scenario's canonical serialization."""
    canon = json.dumps(scenario_to_dict(scenario), sort_keys=True,
                       separators=(",", ":"))
    return sha256(canon.encode("ascii")).hexdigest()[:16]


def _check_stages(stages) -> tuple[int, ...]:
    try:
        out = tuple(sorted({int(s) for s in stages}))
    except (TypeError, ValueError) as exc:
        raise ArgumentError("stages must be a collection drawn from "
                            "{1, 2, 3}") from exc
    if not out or any(s not in (1, 2, 3) for s in out):
        raise ArgumentError("stages must be a nonempty subset of {1, 2, 3}")
    if 1 not in out:
        raise ArgumentError("stage 1 (trilateration) cannot be disabled")
    return out


# --------------------------------------------------------------------------
# single run

@dataclass(frozen=True, eq=False)
class RunResult:
    """Every fix of one simulated flight, plus what was true at the time.

    Per-stage arrays are keyed by stage number; rows where the stage had no
    fix (fewer than four usable beacons, or a degenerate solve) are NaN.
    Error metrics are recomputed from ``est_m`` and ``truth_m`` on demand,
    so the stored record is self-consistent by construction.
    """

    seed: int
    scenario_digest: str
    stages: tuple[int, ...]
    t_s: np.ndarray                  # burst midpoint timestamps, (n,)
    truth_m: np.ndarray              # true position at t_s, (n, 3)
    n_visible: np.ndarray            # beacons with line of beam, (n,)
    est_m: dict                      # stage -> (n, 3) estimates
    residual_m: dict                 # stage -> (n,) solver residuals
    hdop: np.ndarray                 # DOP at the stage-1 fix, (n,)
    vdop: np.ndarray
    gdop: np.ndarray

    @property
    def n_bursts(self) -> int:
        return int(self.t_s.size)

    def available(self, stage: int) -> np.ndarray:
        """Boolean mask of bursts where this stage produced a fix."""
        return np.isfinite(self.est_m[stage][:, 0])

    def errors_m(self, stage: int) -> np.ndarray:
        """Signed per-axis estimate-minus-truth, (n, 3)."""
        return self.est_m[stage] - self.truth_m

    def error_3d_m(self, stage: int) -> np.ndarray:
        return np.linalg.norm(self.errors_m(stage), axis=1)

    def error_xy_m(self, stage: int) -> np.ndarray:
        err = self.errors_m(stage)
        return np.hypot(err[:, 0], err[:, 1])

    def summary(self) -> dict:
        """Per-stage error statistics over the available fixes."""
        out = {}
        for stage in self.stages:
            mask = self.available(stage)
            n = int(np.count_nonzero(mask))
            if n == 0:
                stats = {key: math.nan for key in (
                    "mean_abs_x_m", "mean_abs_y_m", "mean_abs_z_m",
                    "mean_xy_m", "mean_3d_m", "p50_3d_m", "p95_3d_m",
                    "max_3d_m")}
            else:
                err = self.errors_m(stage)[mask]
                e3d = np.linalg.norm(err, axis=1)
                stats = {
                    "mean_abs_x_m": float(np.mean(np.abs(err[:, 0]))),
                    "mean_abs_y_m": float(np.mean(np.abs(err[:, 1]))),
                    "mean_abs_z_m": float(np.mean(np.abs(err[:, 2]))),
                    "mean_xy_m": float(np.mean(np.hypot(err[:, 0],
                                                        err[:, 1]))),
                    "mean_3d_m": float(np.mean(e3d)),
                    "p50_3d_m": float(np.percentile(e3d, 50)),
                    "p95_3d_m": float(np.percentile(e3d, 95)),
                    "max_3d_m": float(np.max(e3d)),
                }
            stats["n_fixes"] = n
            stats["fix_rate"] = n / self.n_bursts if self.n_bursts else 0.0
            out[stage] = stats
        return out


def _visibility(pos_m: np.ndarray, beacons_m: np.ndarray,
                clover) -> np.ndarray:
    """Cone test of every burst position against every beacon.

    Mirrors channel.beam_visible exactly (same tolerance, coincident
    points count as visible), evaluated for all bursts in one shot.
    """
    facings = np.asarray(clover.facings, dtype=np.float64)
    facings = facings / np.linalg.norm(facings, axis=1, keepdims=True)
    diffs = beacons_m[None, :, :] - pos_m[:, None, :]
    dists = np.linalg.norm(diffs, axis=2)
    threshold = math.cos(math.radians(clover.half_angle_deg)) - 1e-12
    with np.errstate(invalid="ignore", divide="ignore"):
        units = diffs / dists[:, :, None]
        cos = np.einsum("kbx,fx->kbf", units, facings)
        visible = cos.max(axis=2) >= threshold
    return visible | (dists < 1e-12)


def _solve(beacons: BeaconSet, all_positions: np.ndarray,
           distances: np.ndarray):
    """Trilaterate from whichever beacons produced a distance this burst.

    Returns None when fewer than four distances are finite or the solve
    degenerates.
    """
    mask = np.isfinite(distances)
    if np.count_nonzero(mask) < 4:
        return None
    try:
        if mask.all():
            return trilaterate(beacons, distances)
        return trilaterate(BeaconSet(all_positions[mask]), distances[mask])
    except (GeometryError, ArgumentError):
        return None


def run_once(scenario: RoomScenario, stages=(1, 2, 3), seed: int | None = None,
             workers: int = 1) -> RunResult:
    """Simulate one flight end to end.

    Per burst: synthesize the FHSS frame, decide beam visibility per
    beacon, apply each visible beacon's multipath/Doppler/noise channel,
    estimate TOA + Doppler, advance the per-beacon Kalman track, and solve
    the requested stages.  Bursts with fewer than four usable beacons are
    recorded as unavailable and the run continues.

    Fully deterministic for a fixed (scenario, stages, seed) regardless of
    ``workers``: every random draw comes from a stream derived from the
    root seed and the (burst, beacon) indices, and results are combined in
    index order.

    Args:
        scenario: validated scenario.
        stages: subset of {1, 2, 3}; stage 1 is mandatory.
        seed: root seed; None uses scenario.seed.
        workers: worker threads for the per-beacon channel+estimation work.

    Returns:
        RunResult with one row per scheduled burst.
    """
    stage_list = _check_stages(stages)
    root = int(scenario.seed if seed is None else seed)
    if workers < 1:
        raise ArgumentError("workers must be >= 1")
    c = scenario.sound_speed()
    room = np.asarray(scenario.room_dims_m, dtype=np.float64)
    digest = scenario_digest(scenario)

    trajectory = scenario.trajectory.realize(
        room, fallback_seed=_stream(root, _TRAJECTORY_STREAM))
    burst_dur = DEFAULT_BITS_PER_BURST * DEFAULT_BIT_DURATION_S
    rate = scenario.burst_rate_hz
    t_begin = float(trajectory.t_s[0])
    span = trajectory.duration_s - t_begin
    n_bursts = (int(math.floor((span - burst_dur) * rate + 1e-9)) + 1
                if span >= burst_dur else 0)

    t_tx = t_begin + np.arange(n_bursts) / rate
    t_mid = t_tx + burst_dur / 2.0
    beacons_arr = np.asarray(scenario.beacons.positions_m, dtype=np.float64)
    n_beacons = beacons_arr.shape[0]

    est = {s: np.full((n_bursts, 3), np.nan) for s in stage_list}
    residual = {s: np.full(n_bursts, np.nan) for s in stage_list}
    hdop = np.full(n_bursts, np.nan)
    vdop = np.full(n_bursts, np.nan)
    gdop = np.full(n_bursts, np.nan)
    n_visible = np.zeros(n_bursts, dtype=np.int64)

    if n_bursts == 0:
        return RunResult(root, digest, stage_list, t_mid,
                         np.zeros((0, 3)), n_visible, est, residual,
                         hdop, vdop, gdop)

    pos_tx, vel_tx = trajectory.state_at(t_tx)
    truth = trajectory.state_at(t_mid)[0]
    rx_pts = np.clip(beacons_arr, _WALL_NUDGE_M, room - _WALL_NUDGE_M)
    visible = _visibility(pos_tx, rx_pts, scenario.clover)
    n_visible[:] = np.count_nonzero(visible, axis=1)

    # Closing speed toward each (nudged) beacon at transmit time.
    diffs = rx_pts[None, :, :] - pos_tx[:, None, :]
    dists = np.linalg.norm(diffs, axis=2)
    closing = np.einsum("kbx,kx->kb", diffs, vel_tx) / dists

    # Stage-1-only runs are the benchmark configuration: plain rigid
    # correlation per burst, no tracking assistance.  With stage 2 enabled
    # the tracker gates and velocity-compensates the correlation search.
    assist = 2 in stage_list
    trackers = [_RangeTracker(RangePipelineConfig(c, t_mid, beacon_id=i,
                                                  assist=assist,
                                                  doppler_bits=32))
                for i in range(n_beacons)]
    ceiling_h = float(room[2])
    fs = None
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for k in range(n_bursts):
            rng_tx = np.random.default_rng(_stream(root, _TX_STREAM, k))
            bits = random_bits(DEFAULT_BITS_PER_BURST, rng_tx)
            plan = make_hop_plan(DEFAULT_BITS_PER_BURST, seed=rng_tx)
            frame = synthesize_fhss(bits, plan)
            frame = SignalFrame(frame.samples.astype(np.float32),
                                frame.sample_rate_hz)
            fs = frame.sample_rate_hz

            def channel_job(i: int, k: int = k, frame: SignalFrame = frame):
                if not visible[k, i]:
                    return None
                paths = image_method_paths(
                    pos_tx[k], rx_pts[i], room,
                    scenario.channel.max_reflection_order,
                    scenario.channel.wall_reflection_loss, c)
                cfg = replace(scenario.channel,
                              seed=_stream(root, _CHANNEL_STREAM, k, i))
                return apply_channel(frame, paths, float(closing[k, i]),
                                     cfg, c)

            if pool is None:
                received = [channel_job(i) for i in range(n_beacons)]
            else:
                received = list(pool.map(channel_job, range(n_beacons)))

            # For plain correlation, zero-pad to one common length so every
            # beacon runs at the same FFT size (the reference transform is
            # then computed once per burst, not once per beacon).  The
            # assisted tracker correlates inside its own gate, so frame
            # lengths never reach its FFT sizing and padding would only
            # cost copies.
            if assist:
                padded = received
            else:
                longest = max((r.samples.size for r in received
                               if r is not None), default=0)
                padded = []
                for r in received:
                    if r is None or r.samples.size == longest:
                        padded.append(r)
                        continue
                    buf = np.zeros(longest, dtype=r.samples.dtype)
                    buf[:r.samples.size] = r.samples
                    padded.append(SignalFrame(buf, r.sample_rate_hz, r.t0_s))

            def estimate_job(i: int, k: int = k, frame: SignalFrame = frame,
                             padded=padded, plan=plan):
                return trackers[i].step(padded[i], frame, plan,
                                        float(t_mid[k]))

            if pool is None:
                steps = [estimate_job(i) for i in range(n_beacons)]
            else:
                steps = list(pool.map(estimate_job, range(n_beacons)))

            raw_d = np.array([s[0].distance_m if s[0] is not None
                              else np.nan for s in steps])
            fused_d = np.array([s[2] for s in steps])

            fix1 = _solve(scenario.beacons, beacons_arr, raw_d)
            if fix1 is not None:
                est[1][k] = fix1.xyz_m
                residual[1][k] = fix1.residual_m
                if fix1.dop is not None:
                    hdop[k] = fix1.dop.hdop
                    vdop[k] = fix1.dop.vdop
                    gdop[k] = fix1.dop.gdop

            fix2 = None
            if 2 in stage_list:
                fix2 = _solve(scenario.beacons, beacons_arr, fused_d)
                if fix2 is not None:
                    est[2][k] = fix2.xyz_m
                    residual[2][k] = fix2.residual_m

            if 3 in stage_list:
                base = fix2 if 2 in stage_list else fix1
                if base is not None:
                    rng_echo = np.random.default_rng(
                        _stream(root, _ECHO_STREAM, k))
                    rt = 2.0 * (ceiling_h - truth[k, 2]) / c.value_mps
                    if scenario.echo_jitter_s > 0:
                        rt += rng_echo.normal(0.0, scenario.echo_jitter_s)
                    rt = max(rt, 0.0)
                    rt = round(rt * fs) / fs
                    try:
                        height = height_from_echo(rt, ceiling_h, c)
                        fix3 = fuse_height(base, height,
                                           scenario.height_fix_weight,
                                           scenario.height_echo_weight)
                    except EchoInconsistencyError:
                        # Echo implies an impossible height; fall back to
                        # the unfused fix for this burst.
                        fix3 = replace(base, stage=Stage.STAGE3)
                    est[3][k] = fix3.xyz_m
                    residual[3][k] = fix3.residual_m
    finally:
        if pool is not None:
            pool.shutdown()

    return RunResult(root, digest, stage_list, t_mid, truth, n_visible,
                     est, residual, hdop, vdop, gdop)


# --------------------------------------------------------------------------
# campaigns

@dataclass(frozen=True, eq=False)
class CampaignSpec:
    """Monte-Carlo grid: (snr x trial) runs of one scenario.

    Args:
        scenario: base scenario; its channel snr_db is overridden per point.
        snr_list_db: SNR grid, nonempty.
        n_trials: trials per SNR point, >= 1.
        stages: stages to solve, subset of {1, 2, 3} containing 1.
        out_dir: when set, run_campaign writes summary.csv, trials.csv and
            meta.json there (checked writable before computing).
    """

    scenario: RoomScenario
    snr_list_db: tuple = (0.0, 5.0, 10.0, 15.0, 20.0, 25.0)
    n_trials: int = 100
    stages: tuple = (1, 2, 3)
    out_dir: str | None = None

    def __post_init__(self):
        snrs = tuple(float(s) for s in self.snr_list_db)
        if not snrs or any(math.isnan(s) for s in snrs):
            raise ValidationError("must be a nonempty list of numbers",
                                  field="snr_list_db")
        object.__setattr__(self, "snr_list_db", snrs)
        if not isinstance(self.n_trials, int) or self.n_trials < 1:
            raise ValidationError("must be an integer >= 1",
                                  field="n_trials")
        object.__setattr__(self, "stages", _check_stages(self.stages))


@dataclass(frozen=True, eq=False)
class CampaignResult:
    """All runs of a campaign plus deterministic aggregate tables.

    ``runs[si][trial]`` is the RunResult for snr_list_db[si]; the tables
    are tuples of plain dicts in (snr, stage, trial) order.
    """

    spec: CampaignSpec
    runs: tuple
    trial_rows: tuple
    summary_rows: tuple


def _aggregate(spec: CampaignSpec, runs) -> tuple[tuple, tuple]:
    trial_rows = []
    summary_rows = []
    for si, snr in enumerate(spec.snr_list_db):
        summaries = [run.summary() for run in runs[si]]
        for stage in spec.stages:
            per_trial = []
            for trial, (run, summ) in enumerate(zip(runs[si], summaries)):
                stats = summ[stage]
                trial_rows.append({
                    "snr_db": snr, "trial": trial, "seed": run.seed,
                    "stage": stage, "n_fixes": stats["n_fixes"],
                    "mean_3d_m": stats["mean_3d_m"],
                    "mean_xy_m": stats["mean_xy_m"],
                    "mean_z_m": stats["mean_abs_z_m"],
                })
                if stats["n_fixes"] > 0:
                    per_trial.append((stats["mean_3d_m"],
                                      stats["mean_xy_m"],
                                      stats["mean_abs_z_m"],
                                      stats["fix_rate"]))
            n = len(per_trial)
            if n:
                # fsum keeps the aggregates exactly invariant under trial
                # permutation.
                mean_3d = math.fsum(v[0] for v in per_trial) / n
                mean_xy = math.fsum(v[1] for v in per_trial) / n
                mean_z = math.fsum(v[2] for v in per_trial) / n
                fix_rate = math.fsum(v[3] for v in per_trial) / n
                if n > 1:
                    var = math.fsum((v[0] - mean_3d) ** 2
                                    for v in per_trial) / (n - 1)
                    se_3d = math.sqrt(var / n)
                else:
                    se_3d = math.nan
            else:
                mean_3d = mean_xy = mean_z = fix_rate = se_3d = math.nan
            summary_rows.append({
                "snr_db": snr, "stage": stage, "n_trials": n,
                "mean_3d_m": mean_3d, "se_3d_m": se_3d,
                "mean_xy_m": mean_xy, "mean_z_m": mean_z,
                "mean_fix_rate": fix_rate,
            })
    return tuple(trial_rows), tuple(summary_rows)


def run_campaign(spec: CampaignSpec, workers: int = 1) -> CampaignResult:
    """Run the full (snr x trial) grid.

    Trial ``j`` uses the same derived seed at every SNR point, so adjacent
    SNR points are paired comparisons: same trajectory, same bits, same
    fading and noise shapes, different noise level.  Trials may execute in
    parallel; aggregation always reduces in trial order, so the output is
    identical for any ``workers``.

    Args:
        spec: the campaign grid.
        workers: worker threads, spread over the trial runs.

    Returns:
        CampaignResult; also writes the output files if spec.out_dir is
        set (the directory is prepared before any compute starts).
    """
    if workers < 1:
        raise ArgumentError("workers must be >= 1")
    out_paths = None
    if spec.out_dir is not None:
        out_dir = Path(spec.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        out_paths = [out_dir / name for name in
                     ("summary.csv", "trials.csv", "meta.json")]
        for p in out_paths:  # fail on unwritable targets before computing
            with open(p, "a", encoding="utf-8"):
                pass

    root = spec.scenario.seed
    seeds = [trial_seed(root, j) for j in range(spec.n_trials)]
    jobs = []
    for snr in spec.snr_list_db:
        scn = replace(spec.scenario,
                      channel=replace(spec.scenario.channel, snr_db=snr))
        for j in range(spec.n_trials):
            jobs.append((scn, seeds[j]))

    def one(job):
        scn, seed = job
        return run_once(scn, spec.stages, seed=seed, workers=1)

    if workers == 1:
        flat = [one(job) for job in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            flat = list(pool.map(one, jobs))

    runs = tuple(tuple(flat[si * spec.n_trials:(si + 1) * spec.n_trials])
                 for si in range(len(spec.snr_list_db)))
    trial_rows, summary_rows = _aggregate(spec, runs)
    result = CampaignResult(spec, runs, trial_rows, summary_rows)
    if out_paths is not None:
        emit_campaign(result, spec.out_dir)
    return result


def load_campaign_spec(path) -> CampaignSpec:
    """Read a campaign spec file (JSON).

    Keys: ``scenario`` (inline object) or ``scenario_path`` (file), and
    optional ``snr_list_db``, ``n_trials``, ``stages``.  Omitted keys take
    the defaults; unknown keys are rejected.
    """
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} column {exc.colno}: "
                         f"{exc.msg}") from exc
    if not isinstance(data, dict):
        raise ValidationError("campaign spec must be a JSON object",
                              field="")
    allowed = ("scenario", "scenario_path", "snr_list_db", "n_trials",
               "stages")
    for key in data:
        if key not in allowed:
            raise ValidationError("unknown field", field=key)
    if "scenario" in data and "scenario_path" in data:
        raise ValidationError("give either scenario or scenario_path",
                              field="scenario")
    if "scenario_path" in data:
        scenario = load_scenario(data["scenario_path"])
    elif "scenario" in data:
        if not isinstance(data["scenario"], dict):
            raise ValidationError("must be an object", field="scenario")
        scenario = validate_scenario(data["scenario"])
    else:
        scenario = default_scenario()

    snrs = data.get("snr_list_db", (0.0, 5.0, 10.0, 15.0, 20.0, 25.0))
    if not isinstance(snrs, (list, tuple)):
        raise ValidationError("must be a list", field="snr_list_db")
    n_trials = data.get("n_trials", 100)
    if isinstance(n_trials, bool) or not isinstance(n_trials, int):
        raise ValidationError("must be an integer", field="n_trials")
    stages = data.get("stages", (1, 2, 3))
    if not isinstance(stages, (list, tuple)):
        raise ValidationError("must be a list", field="stages")
    try:
        return CampaignSpec(scenario, tuple(snrs), n_trials, tuple(stages))
    except ArgumentError as exc:
        raise ValidationError(str(exc), field="stages") from exc


# --------------------------------------------------------------------------
# emitters

def _fmt(x) -> str:
    """Nine-significant-digit float text (nan/inf spelled out)."""
    return format(float(x), ".9g")


def _jf(x):
    """JSON-safe float: rounded to 9 significant digits, non-finite→None."""
    x = float(x)
    if not math.isfinite(x):
        return None
    return float(format(x, ".9g"))


def _write_text(path, text: str) -> None:
    try:
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"writing {path}: {exc}") from exc


def _csv_line(cells) -> str:
    return ",".join(cells) + "\n"


def run_result_csv(result: RunResult) -> str:
    """CSV text for one run: one row per burst, stable column order."""
    header = ["t_s", "truth_x_m", "truth_y_m", "truth_z_m", "n_visible",
              "hdop", "vdop", "gdop"]
    for s in result.stages:
        header += [f"stage{s}_{suffix}" for suffix in
                   ("x_m", "y_m", "z_m", "err_x_m", "err_y_m", "err_z_m",
                    "err_3d_m", "residual_m")]
    lines = [_csv_line(header)]
    errors = {s: result.errors_m(s) for s in result.stages}
    e3d = {s: result.error_3d_m(s) for s in result.stages}
    for k in range(result.n_bursts):
        cells = [_fmt(result.t_s[k]), _fmt(result.truth_m[k, 0]),
                 _fmt(result.truth_m[k, 1]), _fmt(result.truth_m[k, 2]),
                 str(int(result.n_visible[k])), _fmt(result.hdop[k]),
                 _fmt(result.vdop[k]), _fmt(result.gdop[k])]
        for s in result.stages:
            err = errors[s][k]
            cells += [_fmt(result.est_m[s][k, 0]),
                      _fmt(result.est_m[s][k, 1]),
                      _fmt(result.est_m[s][k, 2]),
                      _fmt(abs(err[0])), _fmt(abs(err[1])),
                      _fmt(abs(err[2])), _fmt(e3d[s][k]),
                      _fmt(result.residual_m[s][k])]
        lines.append(_csv_line(cells))
    return "".join(lines)


def run_result_json(result: RunResult) -> str:
    """JSON text for one run (schema documented in the README)."""
    summary = {}
    for stage, stats in result.summary().items():
        summary[f"stage{stage}"] = {
            key: (val if isinstance(val, int) else _jf(val))
            for key, val in stats.items()}
    fixes = []
    for k in range(result.n_bursts):
        row = {
            "t_s": _jf(result.t_s[k]),
            "truth_m": [_jf(v) for v in result.truth_m[k]],
            "n_visible": int(result.n_visible[k]),
            "hdop": _jf(result.hdop[k]),
            "vdop": _jf(result.vdop[k]),
            "gdop": _jf(result.gdop[k]),
        }
        for s in result.stages:
            if math.isnan(result.est_m[s][k, 0]):
                row[f"stage{s}"] = None
            else:
                err = result.est_m[s][k] - result.truth_m[k]
                row[f"stage{s}"] = {
                    "est_m": [_jf(v) for v in result.est_m[s][k]],
                    "err_m": [_jf(abs(v)) for v in err],
                    "err_3d_m": _jf(math.hypot(*err)),
                    "residual_m": _jf(result.residual_m[s][k]),
                }
        fixes.append(row)
    doc = {
        "seed": result.seed,
        "scenario_digest": result.scenario_digest,
        "stages": list(result.stages),
        "n_bursts": result.n_bursts,
        "summary": summary,
        "fixes": fixes,
    }
    return json.dumps(doc, indent=2) + "\n"


def emit_results(result: RunResult, format: str, path) -> None:
    """Write one run's fixes to ``path`` as CSV or JSON.

    Output is byte-identical for identical results; files always end with
    a newline.
    """
    if format == "csv":
        text = run_result_csv(result)
    elif format == "json":
        text = run_result_json(result)
    else:
        raise ArgumentError(f"format must be 'csv' or 'json', got "
                            f"{format!r}")
    _write_text(path, text)


_TRIAL_COLUMNS = ("snr_db", "trial", "seed", "stage", "n_fixes",
                  "mean_3d_m", "mean_xy_m", "mean_z_m")
_SUMMARY_COLUMNS = ("snr_db", "stage", "n_trials", "mean_3d_m", "se_3d_m",
                    "mean_xy_m", "mean_z_m", "mean_fix_rate")


def _table_csv(rows, columns) -> str:
    lines = [_csv_line(columns)]
    for row in rows:
        cells = []
        for col in columns:
            val = row[col]
            cells.append(str(val) if isinstance(val, int) else _fmt(val))
        lines.append(_csv_line(cells))
    return "".join(lines)


def emit_campaign(result: CampaignResult, out_dir) -> None:
    """Write summary.csv, trials.csv and meta.json into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "summary.csv",
                _table_csv(result.summary_rows, _SUMMARY_COLUMNS))
    _write_text(out / "trials.csv",
                _table_csv(result.trial_rows, _TRIAL_COLUMNS))
    meta = {
        "scenario_digest": scenario_digest(result.spec.scenario),
        "root_seed": result.spec.scenario.seed,
        "snr_list_db": [_jf(s) for s in result.spec.snr_list_db],
        "n_trials": result.spec.n_trials,
        "stages": list(result.spec.stages),
    }
    _write_text(out / "meta.json", json.dumps(meta, indent=2) + "\n")


def emit_dop_grid(grid: DopGrid, path, slice_z_m: float | None = None) -> None:
    """Write a DOP lattice as CSV (x,y,z,hdop,vdop,gdop,category).

    Args:
        grid: the computed lattice.
        path: output file.
        slice_z_m: when given, keep only the z-layer nearest this height.
    """
    keep_z = None
    if slice_z_m is not None:
        iz = int(np.argmin(np.abs(grid.z_centers_m - float(slice_z_m))))
        keep_z = float(grid.z_centers_m[iz])
    lines = [_csv_line(("x_m", "y_m", "z_m", "hdop", "vdop", "gdop",
                        "category"))]
    for x, y, z, h, v, g, singular in grid.iter_rows():
        if keep_z is not None and z != keep_z:
            continue
        category = "singular" if singular else categorize_dop(g)
        lines.append(_csv_line((_fmt(x), _fmt(y), _fmt(z), _fmt(h),
                                _fmt(v), _fmt(g), category)))
    _write_text(path, "".join(lines))

"""Per-interval two-way offset recovery, cascaded summation, and the skew servo.

Each measurement interval, every segment of a linear relay chain runs one
two-way exchange: the four simulated tag streams are reduced to a forward and
a backward delay measurement, the segment clock offset is their
half-difference (the symmetric propagation delay cancels), and the end-to-end
offset is the sum over segments with quadrature SDs.

Three clock configurations are supported: a common reference clock (``crc``),
independent clocks with a free-running relay (``irc``), and independent
clocks with epoch-wise frequency correction (``irc-fc``).  The servo fits the
slope of the first segment's recent offsets and subtracts ``gain * slope``
from the relay trim at each correction epoch; the physical actuator leaves a
configurable residual floor.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .analytic import SegmentBudget
from .coincidence import CoincidenceSummary, EngineConfig, measure_delay, summary_row
from .errors import AcquisitionError, ChronoqError
from .metrics import estimate_skew
from .timetags import (DEFAULT_DELAY_PS_PER_KM, ClockModel, SegmentPhysics,
                       simulate_segment)

__all__ = [
    "SimOptions", "Topology", "SegmentEstimate", "CascadeRecord",
    "ControllerState", "ControllerLogEntry", "CampaignResult",
    "segment_offset", "total_offset", "estimate_skew", "controller_step",
    "apply_trim", "effective_skew", "run_campaign", "worker_count",
    "engines_for_topology",
    "write_campaign_csv", "write_controller_csv", "write_directions_csv",
    "read_campaign_csv", "SCENARIOS",
]

SCENARIOS = ("crc", "irc", "irc-fc")

THREADS_ENV = "CHRONOQ_THREADS"


@dataclass(frozen=True)
class SimOptions:
    """Simulation knobs shared by all segments of a campaign."""

    delay_ps_per_km: float = DEFAULT_DELAY_PS_PER_KM
    dark_rate_cps: float = 0.0
    per_detector_jitter_ps: float | None = None
    efficiency: float = 1.0
    max_rate_cps: float = 5e6
    dead_time_ps: float = 0.0


@dataclass(frozen=True)
class Topology:
    """Linear chain: K segment budgets between K+1 station clocks."""

    budgets: tuple
    clocks: tuple
    sim: SimOptions = SimOptions()

    def __post_init__(self):
        object.__setattr__(self, "budgets", tuple(self.budgets))
        object.__setattr__(self, "clocks", tuple(self.clocks))
        if len(self.budgets) < 1:
            raise ValueError("topology needs at least one segment")
        if len(self.clocks) != len(self.budgets) + 1:
            raise ValueError("need exactly one clock per station (segments + 1)")

    @property
    def n_segments(self) -> int:
        return len(self.budgets)


@dataclass(frozen=True)
class SegmentEstimate:
    """One segment's recovered offset for one interval."""

    interval_index: int
    offset_ps: float
    fwd: CoincidenceSummary
    bwd: CoincidenceSummary
    sd_ps: float
    flag: str = ""


@dataclass(frozen=True)
class CascadeRecord:
    """All segments of one interval plus the end-to-end sum."""

    interval_index: int
    per_segment: tuple
    total_offset_ps: float
    total_sd_ps: float
    flag: str = ""


@dataclass(frozen=True)
class ControllerState:
    """Frequency-correction servo state.

    ``window`` recent intervals feed the slope fit, ``gain`` in (0, 1] damps
    the correction, ``residual_floor`` models the actuator's imperfection
    (the effective skew magnitude never corrects below it).
    """

    window: int = 10
    gain: float = 0.8
    trim_applied: float = 0.0
    residual_floor: float = 8e-16
    last_estimated_skew: float = 0.0

    def __post_init__(self):
        if self.window < 3:
            raise ValueError("window must be >= 3 (slope fit needs 3 points)")
        if not 0.0 < self.gain <= 1.0:
            raise ValueError("gain must be in (0, 1]")
        if not abs(self.trim_applied) < 1e-6:
            raise ValueError("trim magnitude must stay < 1e-6")
        if self.residual_floor < 0:
            raise ValueError("residual_floor must be >= 0")


@dataclass(frozen=True)
class ControllerLogEntry:
    epoch: int
    estimated_skew: float
    trim_applied: float
    effective_skew: float


def _merge_flags(*flags) -> str:
    seen = [f for f in flags if f]
    return ";".join(dict.fromkeys(seen))


def segment_offset(fwd: CoincidenceSummary, bwd: CoincidenceSummary,
                   interval_index: int = 0) -> SegmentEstimate:
    """Two-way offset: half-difference of the directional delays.

    The forward delay carries +offset, the backward delay -offset, and both
    carry the same propagation delay, so the half-difference recovers the
    remote-minus-local clock offset exactly.
    """
    offset = (fwd.delay_ps - bwd.delay_ps) / 2.0
    sd = 0.5 * math.hypot(fwd.predicted_sd_ps, bwd.predicted_sd_ps)
    return SegmentEstimate(interval_index=interval_index, offset_ps=offset,
                           fwd=fwd, bwd=bwd, sd_ps=sd,
                           flag=_merge_flags(fwd.flag, bwd.flag))


def total_offset(segments) -> CascadeRecord:
    """Cascade the per-segment offsets: plain sum, quadrature SD."""
    segs = tuple(segments)
    if not segs:
        raise ValueError("total_offset requires at least one segment estimate")
    idx = segs[0].interval_index
    if any(s.interval_index != idx for s in segs):
        raise ValueError("segment estimates come from different intervals")
    total = math.fsum(s.offset_ps for s in segs)
    total_sd = math.sqrt(math.fsum(s.sd_ps * s.sd_ps for s in segs))
    return CascadeRecord(interval_index=idx, per_segment=segs,
                         total_offset_ps=total, total_sd_ps=total_sd,
                         flag=_merge_flags(*(s.flag for s in segs)))


def controller_step(state: ControllerState, skew_estimate: float) -> ControllerState:
    """Damped proportional correction: trim -= gain * estimated residual skew."""
    return replace(state,
                   trim_applied=state.trim_applied - state.gain * skew_estimate,
                   last_estimated_skew=skew_estimate)


def effective_skew(clock: ClockModel, reference_skew: float = 0.0) -> float:
    """Post-trim fractional rate of a clock relative to the reference."""
    return clock.rate_error - reference_skew


def apply_trim(clock: ClockModel, state: ControllerState,
               reference_skew: float = 0.0) -> ClockModel:
    """Apply the commanded trim to a clock, honoring the actuator floor.

    If the commanded trim would leave the clock's effective skew magnitude
    below ``residual_floor``, the trim is backed off so the residual sits at
    the floor (sign preserved; an exact null lands at +floor).
    """
    trim = state.trim_applied
    eff = clock.skew + trim - reference_skew
    floor = state.residual_floor
    if abs(eff) < floor:
        eff = floor if eff >= 0 else -floor
        trim = eff - clock.skew + reference_skew
    return replace(clock, trim=trim)


@dataclass
class CampaignResult:
    scenario: str
    interval_s: float
    records: list
    controller_log: list

    def segment_offsets(self, k: int) -> np.ndarray:
        return np.array([r.per_segment[k].offset_ps for r in self.records])

    def total_offsets(self) -> np.ndarray:
        return np.array([r.total_offset_ps for r in self.records])

    def times_s(self) -> np.ndarray:
        return np.array([r.interval_index * self.interval_s for r in self.records])

    def clean(self) -> list:
        return [r for r in self.records if not r.flag]


def worker_count(threads=None) -> int:
    """Resolve the worker cap: explicit argument, else CHRONOQ_THREADS, else 1."""
    if threads is None:
        threads = os.environ.get(THREADS_ENV, "1")
    n = int(threads)
    if n < 1:
        raise ValueError("worker count must be >= 1")
    return n


def _failed_summary(reason: str) -> CoincidenceSummary:
    return CoincidenceSummary(delay_ps=math.nan, width_sigma_ps=math.nan,
                              pairs=0.0, car=math.nan, predicted_sd_ps=math.nan,
                              flag=reason)


def _scenario_clocks(scenario: str, topology: Topology) -> tuple:
    if scenario == "crc":
        return (topology.clocks[0],) * len(topology.clocks)
    return topology.clocks


def engines_for_topology(topology: Topology, engine: EngineConfig) -> list:
    """Per-segment engine configs; unset search spans default to twice the
    nominal fiber delay plus coarse-bin slack."""
    out = []
    for budget in topology.budgets:
        if engine.search_span_ps is None:
            nominal = budget.fiber_len_km * topology.sim.delay_ps_per_km
            span = int(2 * nominal) + 20 * engine.coarse_bin_ps
            out.append(replace(engine, search_span_ps=span))
        else:
            out.append(engine)
    return out


def run_campaign(scenario: str, topology: Topology, duration_s: float,
                 interval_s: float, seed: int, *,
                 controller: ControllerState | None = None,
                 epoch_intervals: int = 10,
                 engine: EngineConfig | None = None,
                 threads=None, tag_sink=None) -> CampaignResult:
    """Run a full campaign: simulate, measure, cascade, and (irc-fc) correct.

    Per-interval randomness comes from substreams seeded by (seed,
    interval_index, segment_index), so results are bit-identical regardless
    of the worker count.  Measurement failures flag the affected interval's
    row instead of aborting.  ``tag_sink(interval_index, [streams...])``
    receives every interval's four-per-segment tag streams in index order
    when provided.

    In ``irc-fc`` the relay (station 1) trim updates at correction-epoch
    boundaries only; intervals within an epoch share one trim value and may
    execute concurrently.
    """
    scenario = scenario.lower().replace("_", "-")
    if scenario not in SCENARIOS:
        raise ValueError(f"scenario must be one of {SCENARIOS}")
    if interval_s <= 0 or duration_s <= 0:
        raise ValueError("duration_s and interval_s must be > 0")
    n_intervals = int(round(duration_s / interval_s))
    if n_intervals < 1:
        raise ValueError("campaign must span at least one interval")
    if epoch_intervals < 1:
        raise ValueError("epoch_intervals must be >= 1")

    clocks = list(_scenario_clocks(scenario, topology))
    sim = topology.sim
    engine = engine or EngineConfig()
    state = controller or ControllerState()

    physics_f, physics_b = [], []
    for budget in topology.budgets:
        kwargs = dict(delay_ps_per_km=sim.delay_ps_per_km,
                      dark_rate_cps=sim.dark_rate_cps,
                      per_detector_jitter_ps=sim.per_detector_jitter_ps,
                      efficiency=sim.efficiency, max_rate_cps=sim.max_rate_cps,
                      dead_time_ps=sim.dead_time_ps)
        physics_f.append(SegmentPhysics.from_budget(budget, direction="forward", **kwargs))
        physics_b.append(SegmentPhysics.from_budget(budget, direction="backward", **kwargs))
    engines = engines_for_topology(topology, engine)

    def run_interval(i: int, clocks_now):
        epoch_ps = int(round(i * interval_s * 1e12))
        estimates = []
        tags = [] if tag_sink is not None else None
        for s in range(topology.n_segments):
            rng = np.random.default_rng(np.random.SeedSequence((seed, i, s)))
            streams = simulate_segment(
                physics_f[s], clocks_now[s], clocks_now[s + 1], interval_s, rng,
                physics_bwd=physics_b[s], epoch_ps=epoch_ps, channel_base=4 * s)
            if tags is not None:
                tags.extend(streams)
            try:
                fwd = measure_delay(streams.idler_fwd, streams.signal_fwd, engines[s])
            except (AcquisitionError, ChronoqError):
                fwd = _failed_summary("acquisition_failed")
            try:
                bwd = measure_delay(streams.idler_bwd, streams.signal_bwd, engines[s])
            except (AcquisitionError, ChronoqError):
                bwd = _failed_summary("acquisition_failed")
            estimates.append(segment_offset(fwd, bwd, i))
        return total_offset(estimates), tags

    n_workers = worker_count(threads)
    correcting = scenario == "irc-fc"
    chunk = epoch_intervals if correcting else n_intervals
    base_relay = topology.clocks[1] if correcting else None
    ref_skew = clocks[0].skew
    records, log = [], []
    epoch_no = 0

    pool = ThreadPoolExecutor(max_workers=n_workers) if n_workers > 1 else None
    try:
        start = 0
        while start < n_intervals:
            idxs = range(start, min(start + chunk, n_intervals))
            clocks_now = tuple(clocks)
            if pool is not None:
                results = list(pool.map(lambda i: run_interval(i, clocks_now), idxs))
            else:
                results = [run_interval(i, clocks_now) for i in idxs]
            for i, (record, tags) in zip(idxs, results):
                records.append(record)
                if tag_sink is not None:
                    tag_sink(i, tags)
            start = idxs.stop
            if correcting and start <= n_intervals:
                epoch_no += 1
                recent = [r for r in records[-state.window:] if not r.flag]
                if len(recent) >= 3:
                    pts = [(r.interval_index * interval_s,
                            r.per_segment[0].offset_ps) for r in recent]
                    est, _ = estimate_skew(pts)
                    state = controller_step(state, est)
                    clocks[1] = apply_trim(base_relay, state, ref_skew)
                else:
                    est = math.nan
                log.append(ControllerLogEntry(
                    epoch=epoch_no, estimated_skew=est,
                    trim_applied=state.trim_applied,
                    effective_skew=effective_skew(clocks[1], ref_skew)))
    finally:
        if pool is not None:
            pool.shutdown()

    return CampaignResult(scenario=scenario, interval_s=interval_s,
                          records=records, controller_log=log)


def _fmt(x: float, digits: int = 10) -> str:
    return f"{x:.{digits}g}"


def campaign_header(n_segments: int) -> list:
    cols = ["interval_index", "t_s"]
    cols += [f"seg{k}_offset_ps" for k in range(n_segments)]
    cols += ["total_offset_ps", "total_sd_ps", "flag"]
    return cols


def write_campaign_csv(result: CampaignResult, path):
    """Detailed per-interval log (raw offsets, not de-meaned)."""
    n_seg = len(result.records[0].per_segment) if result.records else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(campaign_header(n_seg))
        for r in result.records:
            row = [r.interval_index, _fmt(r.interval_index * result.interval_s)]
            row += [_fmt(s.offset_ps) for s in r.per_segment]
            row += [_fmt(r.total_offset_ps), _fmt(r.total_sd_ps, 9), r.flag]
            w.writerow(row)


def write_controller_csv(result: CampaignResult, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "estimated_skew", "trim_applied", "effective_skew"])
        for e in result.controller_log:
            w.writerow([e.epoch, _fmt(e.estimated_skew, 9),
                        _fmt(e.trim_applied, 9), _fmt(e.effective_skew, 9)])


def write_directions_csv(result: CampaignResult, path):
    """Per-direction coincidence summaries for every interval and segment."""
    from .coincidence import write_summary_csv

    rows = []
    for r in result.records:
        for k, seg in enumerate(r.per_segment):
            rows.append(summary_row(r.interval_index, f"seg{k}:fwd", seg.fwd))
            rows.append(summary_row(r.interval_index, f"seg{k}:bwd", seg.bwd))
    write_summary_csv(rows, path)


def read_campaign_csv(path) -> dict:
    """Parse a campaign CSV back into arrays (for the analyze pipeline)."""
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ChronoqError(f"{path}: empty campaign file") from None
        seg_cols = [c for c in header if c.startswith("seg") and c.endswith("_offset_ps")]
        expected = campaign_header(len(seg_cols))
        if header != expected:
            raise ChronoqError(f"{path}: line 1: unexpected header {header!r}")
        idx, t_s, segs, total, total_sd, flags = [], [], [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ChronoqError(f"{path}: line {lineno}: wrong column count")
            try:
                idx.append(int(row[0]))
                t_s.append(float(row[1]))
                segs.append([float(v) for v in row[2:2 + len(seg_cols)]])
                total.append(float(row[2 + len(seg_cols)]))
                total_sd.append(float(row[3 + len(seg_cols)]))
            except ValueError:
                raise ChronoqError(f"{path}: line {lineno}: non-numeric field") from None
            flags.append(row[-1])
    return {
        "interval_index": np.array(idx, dtype=int),
        "t_s": np.array(t_s),
        "segment_offsets_ps": np.array(segs) if segs else np.empty((0, len(seg_cols))),
        "total_offset_ps": np.array(total),
        "total_sd_ps": np.array(total_sd),
        "flag": flags,
    }

"""Monte Carlo generation of detector time-tag streams.

Pipeline per segment and interval: a photon-pair source emits simultaneous
pairs as a homogeneous Poisson process; one photon of each pair is retained
and detected locally, the other propagates through a lossy, dispersive fiber
and is detected at the far station.  Each detector thins by efficiency, adds
Gaussian timing jitter, merges Poisson dark counts, and stamps arrivals with
its station clock:

    tag = round((1 + skew + trim) * t_true + offset + white_noise)   [ps]

Timestamps are signed 64-bit integer picoseconds; a 35000 s campaign is ~3.5e16
ps, leaving ample headroom.  True times within an interval are kept relative
to the interval epoch so the clock transform stays numerically exact at
sub-picosecond level even late in a long campaign.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

PS_PER_S = 1e12
#: Standard single-mode fiber group delay; any constant cancels in two-way use.
DEFAULT_DELAY_PS_PER_KM = 4.9e6


class SaturationWarning(UserWarning):
    """A detector was driven above its configured sustained count rate."""


@dataclass(frozen=True)
class ClockModel:
    """Station clock: initial reading offset, fractional rate error, optional noise.

    ``trim`` is the controller-applied rate correction; it is changed only by
    replacing the (frozen) instance through the servo path.
    """

    offset_ps: float = 0.0
    skew: float = 0.0
    white_pm_sigma_ps: float = 0.0
    trim: float = 0.0

    def __post_init__(self):
        if not abs(self.skew) < 1e-6:
            raise ValueError("clock skew magnitude must be < 1e-6")
        if not abs(self.trim) < 1e-6:
            raise ValueError("clock trim magnitude must be < 1e-6")
        if self.white_pm_sigma_ps < 0:
            raise ValueError("white_pm_sigma_ps must be >= 0")

    @property
    def rate_error(self) -> float:
        return self.skew + self.trim


@dataclass(frozen=True)
class ChannelModel:
    """Optical path: length, attenuation, fixed loss, group delay, residual dispersion."""

    length_km: float = 0.0
    atten_db_per_km: float = 0.0
    fixed_loss_db: float = 0.0
    delay_ps_per_km: float = DEFAULT_DELAY_PS_PER_KM
    residual_dispersion_ps: float = 0.0

    def __post_init__(self):
        for name in ("length_km", "atten_db_per_km", "fixed_loss_db",
                     "delay_ps_per_km", "residual_dispersion_ps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def loss_db(self) -> float:
        return self.atten_db_per_km * self.length_km + self.fixed_loss_db

    @property
    def survival_probability(self) -> float:
        return 10.0 ** (-self.loss_db / 10.0)

    @property
    def delay_ps(self) -> float:
        return self.length_km * self.delay_ps_per_km


@dataclass(frozen=True)
class DetectorModel:
    """Single-photon detector: efficiency, jitter, dark rate, saturation guard."""

    efficiency: float = 1.0
    jitter_sigma_ps: float = 0.0
    dark_rate_cps: float = 0.0
    max_rate_cps: float = 5e6
    dead_time_ps: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError("efficiency must be within [0, 1]")
        for name in ("jitter_sigma_ps", "dark_rate_cps", "max_rate_cps", "dead_time_ps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(frozen=True)
class TimeTagStream:
    """Sorted signed-64-bit picosecond timestamps of one detector channel."""

    channel_id: int
    tags_ps: np.ndarray

    def __post_init__(self):
        tags = np.asarray(self.tags_ps, dtype=np.int64)
        object.__setattr__(self, "tags_ps", tags)
        if tags.ndim != 1:
            raise ValueError("tags_ps must be one-dimensional")
        if len(tags) > 1 and np.any(np.diff(tags) < 0):
            raise ValueError("tags_ps must be non-decreasing")

    def __len__(self):
        return len(self.tags_ps)


def gen_pair_emissions(rate_pairs_per_s: float, duration_s: float, rng) -> np.ndarray:
    """Emission times (true time, float ps) of a homogeneous Poisson pair source.

    Sorted by construction (cumulative exponential gaps), count distributed
    Poisson(rate * duration); identical seeds give identical lists.
    """
    if rate_pairs_per_s < 0:
        raise ValueError("rate must be >= 0")
    rng = np.random.default_rng(rng)
    span_ps = duration_s * PS_PER_S
    if rate_pairs_per_s == 0 or duration_s <= 0:
        return np.empty(0, dtype=float)
    mean_gap_ps = PS_PER_S / rate_pairs_per_s
    expected = rate_pairs_per_s * duration_s
    chunks = []
    t_last = 0.0
    # Draw gap batches until the span is exceeded; batch size covers the
    # remaining expectation plus a 6-sigma margin so one batch usually suffices.
    remaining = expected
    while True:
        n = int(remaining + 6.0 * math.sqrt(remaining + 1.0)) + 16
        gaps = rng.exponential(mean_gap_ps, n)
        times = t_last + np.cumsum(gaps)
        if times[-1] >= span_ps:
            chunks.append(times[times < span_ps])
            break
        chunks.append(times)
        t_last = float(times[-1])
        remaining = (span_ps - t_last) / mean_gap_ps
    return np.concatenate(chunks) if len(chunks) > 1 else chunks[0]


def apply_channel(times_ps: np.ndarray, channel: ChannelModel, rng) -> np.ndarray:
    """Propagate photons through a channel: loss thinning, delay, dispersion.

    Each input survives with the channel's transmission probability; survivors
    are shifted by the group delay plus a Gaussian residual-dispersion draw,
    then re-sorted.
    """
    rng = np.random.default_rng(rng)
    t = np.asarray(times_ps, dtype=float)
    p = channel.survival_probability
    if p < 1.0:
        t = t[rng.random(len(t)) < p]
    else:
        t = t.copy()
    t += channel.delay_ps
    if channel.residual_dispersion_ps > 0 and len(t):
        t += rng.normal(0.0, channel.residual_dispersion_ps, len(t))
        t.sort()
    return t


def _apply_dead_time(tags: np.ndarray, dead_ps: float) -> np.ndarray:
    """Non-paralyzable dead time: drop tags within dead_ps after an accepted one."""
    keep = np.ones(len(tags), dtype=bool)
    last = -math.inf
    for i, t in enumerate(tags):
        if t - last < dead_ps:
            keep[i] = False
        else:
            last = t
    return tags[keep]


def detect(times_ps: np.ndarray, det: DetectorModel, clk: ClockModel,
           duration_s: float, rng, *, epoch_ps: int = 0,
           channel_id: int = 0) -> TimeTagStream:
    """Detect photon arrivals and stamp them with the station clock.

    ``times_ps`` are true arrival times relative to the interval epoch;
    ``epoch_ps`` is the integer true time of the interval start, so the clock
    transform sees absolute time while the float arithmetic stays at interval
    magnitude.  Dark counts are merged as a Poisson process over the duration.
    A sustained rate above ``max_rate_cps`` raises :class:`SaturationWarning`
    (tags are still produced).
    """
    rng = np.random.default_rng(rng)
    t = np.asarray(times_ps, dtype=float)
    if det.efficiency < 1.0:
        t = t[rng.random(len(t)) < det.efficiency]
    if det.jitter_sigma_ps > 0 and len(t):
        t = t + rng.normal(0.0, det.jitter_sigma_ps, len(t))
    if det.dark_rate_cps > 0 and duration_s > 0:
        n_dark = rng.poisson(det.dark_rate_cps * duration_s)
        if n_dark:
            t = np.concatenate([t, rng.uniform(0.0, duration_s * PS_PER_S, n_dark)])
    if duration_s > 0 and len(t) / duration_s > det.max_rate_cps:
        warnings.warn(
            f"channel {channel_id}: {len(t) / duration_s:.3g} cps exceeds "
            f"max_rate_cps={det.max_rate_cps:.3g}", SaturationWarning)
    epoch_ps = int(epoch_ps)
    rate_err = clk.rate_error
    reading = t + rate_err * (t + float(epoch_ps)) + clk.offset_ps
    if clk.white_pm_sigma_ps > 0 and len(t):
        reading = reading + rng.normal(0.0, clk.white_pm_sigma_ps, len(t))
    tags = epoch_ps + np.rint(reading).astype(np.int64)
    tags.sort()
    if det.dead_time_ps > 0 and len(tags) > 1:
        tags = _apply_dead_time(tags, det.dead_time_ps)
    return TimeTagStream(channel_id=channel_id, tags_ps=tags)


@dataclass(frozen=True)
class SegmentPhysics:
    """Source/channel/detector bundle for one two-way segment's simulation."""

    pair_rate_per_s: float
    idler_loss_db: float
    channel: ChannelModel
    detector: DetectorModel

    @classmethod
    def from_budget(cls, budget, *, delay_ps_per_km: float = DEFAULT_DELAY_PS_PER_KM,
                    dark_rate_cps: float = 0.0, per_detector_jitter_ps=None,
                    efficiency: float = 1.0, max_rate_cps: float = 5e6,
                    dead_time_ps: float = 0.0, direction: str = "forward"):
        """Build simulation models from a :class:`~chronoq.analytic.SegmentBudget`.

        The budget's loss entries already include detector quantum
        efficiencies, so ``efficiency`` defaults to 1 here to avoid double
        counting.  The budget's pairwise jitter is split evenly between the
        two detectors of a coincidence (per-detector sigma = pairwise/sqrt(2))
        unless ``per_detector_jitter_ps`` overrides it.
        """
        if per_detector_jitter_ps is None:
            per_detector_jitter_ps = budget.jitter_sigma_ps / math.sqrt(2.0)
        disp = (budget.residual_dispersion_ps_f if direction == "forward"
                else budget.residual_dispersion_ps_b)
        return cls(
            pair_rate_per_s=budget.pair_rate_per_interval / budget.interval_s,
            idler_loss_db=budget.idler_loss_db,
            channel=ChannelModel(
                length_km=budget.fiber_len_km,
                atten_db_per_km=budget.atten_db_per_km,
                fixed_loss_db=budget.signal_fixed_loss_db,
                delay_ps_per_km=delay_ps_per_km,
                residual_dispersion_ps=disp,
            ),
            detector=DetectorModel(
                efficiency=efficiency,
                jitter_sigma_ps=per_detector_jitter_ps,
                dark_rate_cps=dark_rate_cps,
                max_rate_cps=max_rate_cps,
                dead_time_ps=dead_time_ps,
            ),
        )


@dataclass(frozen=True)
class SegmentStreams:
    """The four tag streams of one segment and interval.

    Forward: source at the near station k; idler detected at k, signal at k+1.
    Backward: source at the far station k+1; idler at k+1, signal at k.
    """

    idler_fwd: TimeTagStream    # station k clock
    signal_fwd: TimeTagStream   # station k+1 clock
    idler_bwd: TimeTagStream    # station k+1 clock
    signal_bwd: TimeTagStream   # station k clock

    def __iter__(self):
        return iter((self.idler_fwd, self.signal_fwd, self.idler_bwd, self.signal_bwd))


def simulate_segment(physics, clock_k: ClockModel, clock_k1: ClockModel,
                     duration_s: float, rng, *, physics_bwd=None,
                     epoch_ps: int = 0, channel_base: int = 0) -> SegmentStreams:
    """Simulate one interval of a two-way segment; returns the four streams.

    Two independent pair processes run per interval (forward-distributing at
    station k, backward-distributing at station k+1); each pair splits into a
    locally retained idler and a channel-propagated signal.  The RNG is
    consumed in a fixed documented order (forward emissions, idler path,
    signal path, then the backward counterparts) so results are reproducible
    for a given generator state.
    """
    rng = np.random.default_rng(rng)
    if physics_bwd is None:
        physics_bwd = physics
    idler_ch_f = ChannelModel(fixed_loss_db=physics.idler_loss_db, delay_ps_per_km=0.0)
    idler_ch_b = ChannelModel(fixed_loss_db=physics_bwd.idler_loss_db, delay_ps_per_km=0.0)

    fwd = gen_pair_emissions(physics.pair_rate_per_s, duration_s, rng)
    idler_fwd = detect(apply_channel(fwd, idler_ch_f, rng), physics.detector,
                       clock_k, duration_s, rng, epoch_ps=epoch_ps,
                       channel_id=channel_base + 0)
    signal_fwd = detect(apply_channel(fwd, physics.channel, rng), physics.detector,
                        clock_k1, duration_s, rng, epoch_ps=epoch_ps,
                        channel_id=channel_base + 1)

    bwd = gen_pair_emissions(physics_bwd.pair_rate_per_s, duration_s, rng)
    idler_bwd = detect(apply_channel(bwd, idler_ch_b, rng), physics_bwd.detector,
                       clock_k1, duration_s, rng, epoch_ps=epoch_ps,
                       channel_id=channel_base + 2)
    signal_bwd = detect(apply_channel(bwd, physics_bwd.channel, rng), physics_bwd.detector,
                        clock_k, duration_s, rng, epoch_ps=epoch_ps,
                        channel_id=channel_base + 3)
    return SegmentStreams(idler_fwd, signal_fwd, idler_bwd, signal_bwd)

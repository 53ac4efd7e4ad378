"""Closed-form precision model for cascaded two-way optical time transfer.

A chain of N fiber segments, each running an independent two-way exchange of
time-correlated photon pairs, recovers the end-to-end clock offset as the sum
of per-segment offsets.  Each segment's offset SD follows from the measured
coincidence width sigma, the pair count P and the coincidence-to-accidental
ratio CAR of its two directions:

    one-way SD   = sigma / sqrt(2 P / (1 + 1/CAR))
    segment SD   = 1/2 * sqrt(fwd^2 + bwd^2)
    total SD     = sqrt(sum of segment SDs squared)

With a uniform link budget (pair number P0 per interval, lumped loss eta,
fiber attenuation alpha over length l) the total SD over N equidistant
segments is sqrt(N) * sigma / (2 sqrt(P0 eta e^(-alpha l))), while a single
unrelayed link over the same total distance degrades exponentially as
e^(N alpha l / 2).  This module evaluates those expressions and generates the
distance and clock-skew sweep tables used for precision budgeting.

Everything here is pure and side-effect free; sweeps may be parallelized per
grid point by callers.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

from .errors import OutOfRangeError, UndefinedSdError

#: Marker for "no accidental coincidences": CAR is infinite and 1/CAR -> 0.
NO_ACCIDENTALS = math.inf

PS_PER_S = 1e12

_DIRECTIONS = ("forward", "backward")


def db_to_linear(loss_db: float) -> float:
    """Power transmission factor for a loss quoted in dB."""
    return 10.0 ** (-loss_db / 10.0)


@dataclass(frozen=True)
class SegmentBudget:
    """Physical parameters of one two-way segment over a measurement interval.

    Losses are in dB, timing quantities in ps, the fractional frequency skew
    between the segment's two clocks is dimensionless.  Defaults reproduce
    the telecom-band lab link: 2.5e6 pairs per 10 s interval, 11 dB on the
    retained (idler) photon, 3 dB fixed + 0.2 dB/km on the transmitted
    (signal) photon, 64 ps pairwise detector jitter.
    """

    pair_rate_per_interval: float = 2.5e6
    idler_loss_db: float = 11.0
    signal_fixed_loss_db: float = 3.0
    fiber_len_km: float = 100.0
    atten_db_per_km: float = 0.2
    jitter_sigma_ps: float = 64.0
    residual_dispersion_ps_f: float = 0.0
    residual_dispersion_ps_b: float = 0.0
    accidental_pairs_per_interval: float = 0.0
    interval_s: float = 10.0
    skew: float = 0.0

    def __post_init__(self):
        if self.pair_rate_per_interval < 0:
            raise ValueError("pair_rate_per_interval must be >= 0")
        for name in ("idler_loss_db", "signal_fixed_loss_db", "atten_db_per_km",
                     "fiber_len_km", "jitter_sigma_ps", "residual_dispersion_ps_f",
                     "residual_dispersion_ps_b", "accidental_pairs_per_interval"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.interval_s > 0:
            raise ValueError("interval_s must be > 0")

    @property
    def fiber_loss_db(self) -> float:
        return self.atten_db_per_km * self.fiber_len_km

    @property
    def total_loss_db(self) -> float:
        return self.idler_loss_db + self.signal_fixed_loss_db + self.fiber_loss_db


@dataclass(frozen=True)
class DirectionStats:
    """Measured coincidence statistics of one transfer direction.

    ``car`` may be :data:`NO_ACCIDENTALS` (infinity) when the background is
    negligible, in which case 1/CAR is taken as zero downstream.
    """

    width_ps: float
    pairs: float
    car: float

    def __post_init__(self):
        if self.pairs < 0:
            raise ValueError("pairs must be >= 0")
        if self.pairs > 0 and not self.width_ps > 0:
            raise ValueError("width_ps must be > 0 when pairs are present")
        if not (self.car >= 0):  # rejects NaN as well
            raise ValueError("car must be >= 0 (math.inf marks no accidentals)")


@dataclass(frozen=True)
class SdPrediction:
    """Per-segment and total offset SDs; total is the quadrature sum."""

    per_segment_sd_ps: tuple
    total_sd_ps: float


def _check_direction(direction: str):
    if direction not in _DIRECTIONS:
        raise ValueError(f"direction must be one of {_DIRECTIONS}, got {direction!r}")


def detected_pairs(budget: SegmentBudget, direction: str = "forward") -> float:
    """Expected coincident pair count per interval, accidentals included.

    Fractional results are allowed: this is an expectation value, not a draw.
    Degenerate budgets (source off, infinite loss) leave only the accidentals.
    """
    _check_direction(direction)
    eta = db_to_linear(budget.idler_loss_db + budget.signal_fixed_loss_db)
    fiber = db_to_linear(budget.fiber_loss_db)
    return (budget.pair_rate_per_interval * eta * fiber
            + budget.accidental_pairs_per_interval)


def car_of(budget: SegmentBudget, direction: str = "forward") -> float:
    """Coincidence-to-accidental ratio; NO_ACCIDENTALS when P_ac is zero."""
    _check_direction(direction)
    p_ac = budget.accidental_pairs_per_interval
    if p_ac <= 0:
        return NO_ACCIDENTALS
    true_pairs = detected_pairs(budget, direction) - p_ac
    return true_pairs / p_ac


def clock_broadening_ps(skew: float, interval_s: float) -> float:
    """Width contribution of a fractional frequency skew over one interval."""
    return abs(skew) * interval_s * PS_PER_S


def coincidence_width(budget: SegmentBudget, direction: str = "forward") -> float:
    """Total coincidence width: residual dispersion (+) jitter (+) clock skew, in quadrature."""
    _check_direction(direction)
    disp = (budget.residual_dispersion_ps_f if direction == "forward"
            else budget.residual_dispersion_ps_b)
    clk = clock_broadening_ps(budget.skew, budget.interval_s)
    return math.hypot(disp, budget.jitter_sigma_ps, clk)


def direction_stats(budget: SegmentBudget, direction: str = "forward") -> DirectionStats:
    """Bundle the budget's predicted width/pairs/CAR for one direction."""
    return DirectionStats(
        width_ps=coincidence_width(budget, direction),
        pairs=detected_pairs(budget, direction),
        car=car_of(budget, direction),
    )


def _car_correction(car: float) -> float:
    """The (1 + 1/CAR) factor; 1.0 in the no-accidentals limit."""
    if math.isinf(car):
        return 1.0
    if car <= 0:
        raise UndefinedSdError("CAR must be positive (or the no-accidentals marker)")
    return 1.0 + 1.0 / car


def delay_sd_one_way(stats: DirectionStats) -> float:
    """SD of one direction's measured propagation delay."""
    if stats.pairs <= 0:
        raise UndefinedSdError("delay SD undefined without coincidence pairs")
    effective = 2.0 * stats.pairs / _car_correction(stats.car)
    return stats.width_ps / math.sqrt(effective)


def segment_offset_sd(fwd: DirectionStats, bwd: DirectionStats) -> float:
    """SD of one segment's two-way clock offset (half-difference of directions)."""
    return 0.5 * math.hypot(delay_sd_one_way(fwd), delay_sd_one_way(bwd))


def cascade_sd(segment_sds_ps) -> SdPrediction:
    """Quadrature combination of independent per-segment offset SDs."""
    sds = tuple(float(s) for s in segment_sds_ps)
    if not sds:
        raise ValueError("cascade_sd requires at least one segment")
    total = math.sqrt(math.fsum(s * s for s in sds))
    return SdPrediction(per_segment_sd_ps=sds, total_sd_ps=total)


def _single_segment_sd(budget: SegmentBudget) -> float:
    """Offset SD of one segment in the no-accidentals limit: sigma / (2 sqrt(pairs))."""
    exponent = -budget.total_loss_db / 10.0
    if exponent < -300.0:
        raise OutOfRangeError(
            f"link loss {budget.total_loss_db:.1f} dB underflows the pair flux")
    pairs = budget.pair_rate_per_interval * 10.0 ** exponent
    if pairs <= 0:
        raise UndefinedSdError("no detected pairs: zero pair rate or total loss too high")
    return coincidence_width(budget, "forward") / (2.0 * math.sqrt(pairs))


def uniform_cascade_sd(n_segments: int, budget: SegmentBudget) -> float:
    """Total offset SD over n equidistant segments with identical budgets."""
    if n_segments < 1:
        raise ValueError("n_segments must be >= 1")
    return math.sqrt(n_segments) * _single_segment_sd(budget)


def noncascaded_sd(total_len_km: float, budget: SegmentBudget) -> float:
    """Offset SD of a single unrelayed link spanning the full distance."""
    if total_len_km < 0:
        raise ValueError("total_len_km must be >= 0")
    return _single_segment_sd(replace(budget, fiber_len_km=total_len_km))


@dataclass(frozen=True)
class DistanceSweepPoint:
    n_segments: int
    total_km: float
    sd_ps: float


def sweep_distance(n_list, budget: SegmentBudget, km_grid) -> list:
    """Total SD versus total fiber distance for each relay count.

    Rows cover every requested segment count plus the unrelayed (single
    segment) reference curve.  The distance grid must be monotone
    non-decreasing.
    """
    grid = [float(d) for d in km_grid]
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValueError("km_grid must be monotone non-decreasing")
    ns = sorted({int(n) for n in n_list} | {1})
    if any(n < 1 for n in ns):
        raise ValueError("segment counts must be >= 1")
    rows = []
    for n in ns:
        for total in grid:
            seg_budget = replace(budget, fiber_len_km=total / n)
            rows.append(DistanceSweepPoint(n, total, uniform_cascade_sd(n, seg_budget)))
    return rows


@dataclass(frozen=True)
class SkewSweepPoint:
    skew: float
    per_segment_sd_ps: tuple
    total_sd_ps: float


def sweep_skew(measured, skew_grid, interval_s: float, degrade_car: bool = False) -> list:
    """Total SD versus clock frequency skew, rebuilt from skew-free statistics.

    ``measured`` is a sequence of (forward, backward) :class:`DirectionStats`
    pairs taken at zero skew, one pair per segment.  For each skew value every
    width is broadened in quadrature by skew * interval while pair counts and
    CARs stay frozen at their reference values; ``degrade_car=True``
    additionally scales each CAR by width0/width for sensitivity studies.
    """
    segments = [(f, b) for f, b in measured]
    if not segments:
        raise ValueError("sweep_skew requires at least one segment")
    rows = []
    for du in skew_grid:
        clk = clock_broadening_ps(float(du), interval_s)
        seg_sds = []
        for fwd0, bwd0 in segments:
            seg_sds.append(segment_offset_sd(_broaden(fwd0, clk, degrade_car),
                                             _broaden(bwd0, clk, degrade_car)))
        pred = cascade_sd(seg_sds)
        rows.append(SkewSweepPoint(float(du), pred.per_segment_sd_ps, pred.total_sd_ps))
    return rows


def _broaden(stats: DirectionStats, clk_ps: float, degrade_car: bool) -> DirectionStats:
    width = math.hypot(stats.width_ps, clk_ps)
    car = stats.car
    if degrade_car and not math.isinf(car):
        car = car * stats.width_ps / width
    return DirectionStats(width_ps=width, pairs=stats.pairs, car=car)


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def write_distance_sweep_csv(rows, path):
    """Emit distance sweep rows as `n_segments,total_km,sd_ps`."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n_segments", "total_km", "sd_ps"])
        for r in rows:
            w.writerow([r.n_segments, _fmt(r.total_km), _fmt(r.sd_ps)])


def write_skew_sweep_csv(rows, path):
    """Emit skew sweep rows as `skew,segment,sd_ps` (per segment plus total)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["skew", "segment", "sd_ps"])
        for r in rows:
            for k, sd in enumerate(r.per_segment_sd_ps):
                w.writerow([_fmt(r.skew), k, _fmt(sd)])
            w.writerow([_fmt(r.skew), "total", _fmt(r.total_sd_ps)])

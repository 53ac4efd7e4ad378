"""Nonlocal coincidence identification between two time-tag streams.

Finds the two-photon correlation peak between a locally retained idler
stream and a remotely detected signal stream, then extracts the peak delay
(sub-bin centroid), width sigma, background-subtracted pair count P, and the
coincidence-to-accidental ratio (CAR) estimated from the window sidebands.

Stages:

* ``coarse_acquire`` — correlate coarse-binned count sequences over a lag
  window and return the strongest bin (5-sigma significance gate, ties toward
  the smallest |delay|).  The correlation is evaluated sparsely by a windowed
  two-pointer sweep over quantized tags, or densely via FFT when the pair
  density makes enumeration more expensive than transforms; both give the
  identical integer lag histogram.
* ``refine_histogram`` — exact pair-difference histogram around the coarse
  estimate, fine bins anchored to the absolute integer-picosecond grid.
* ``fit_peak`` — background from the outer quarter of bins on each side,
  then two moment iterations over a +-3 sigma core (robust for the
  flat-topped peaks produced by clock-skew smearing, no fitting library).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .analytic import NO_ACCIDENTALS, _car_correction
from .errors import AcquisitionError, ChronoqError
from .timetags import TimeTagStream

#: Below this many background-subtracted core pairs a summary is flagged.
MIN_PAIRS = 16

#: Hard cap on enumerated pair differences (memory guard, ~4 GB of int64).
_MAX_ENUMERATED_PAIRS = 500_000_000

#: Sparse enumeration beyond this many expected pairs switches to the FFT path.
_FFT_PAIR_THRESHOLD = 30_000_000

#: Largest dense count-sequence length the FFT path will allocate.
_MAX_DENSE_BINS = 1 << 26


@dataclass(frozen=True)
class EngineConfig:
    """Tunables of the coincidence pipeline.

    ``search_span_ps = None`` lets ``measure_delay`` bootstrap the span from
    the median tag difference (twice the estimate plus slack); campaigns pass
    an explicit span derived from the nominal fiber delay.
    """

    coarse_bin_ps: int = 1000
    fine_bin_ps: int = 1
    search_span_ps: int | None = None
    refine_window_ps: int = 25_000
    method: str = "auto"  # auto | sparse | fft

    def __post_init__(self):
        if self.coarse_bin_ps < 1 or self.fine_bin_ps < 1:
            raise ValueError("bin widths must be >= 1 ps")
        if self.refine_window_ps < 20 * self.fine_bin_ps:
            raise ValueError("refine window must be at least 20 fine bins")
        if self.method not in ("auto", "sparse", "fft"):
            raise ValueError("method must be auto, sparse or fft")


@dataclass(frozen=True)
class CorrelationHistogram:
    """Pair-difference histogram: counts over [start, start + span) in fixed bins."""

    center_ps: int
    bin_width_ps: int
    counts: np.ndarray
    span_ps: int

    def __post_init__(self):
        object.__setattr__(self, "counts", np.asarray(self.counts, dtype=np.int64))
        if len(self.counts) < 16:
            raise ValueError("histogram needs at least 16 bins")
        if self.span_ps != len(self.counts) * self.bin_width_ps:
            raise ValueError("span must equal bins * bin_width")

    @property
    def start_ps(self) -> int:
        return self.center_ps - self.span_ps // 2

    def bin_centers(self) -> np.ndarray:
        """Mean representable value per bin.

        Tags are round-to-nearest integers, so bin [k, k+w) holds the integer
        differences k..k+w-1 whose mean is k + (w-1)/2; using the geometric
        center k + w/2 would bias every estimate by +0.5 ps.
        """
        w = self.bin_width_ps
        return self.start_ps + np.arange(len(self.counts)) * w + (w - 1) / 2.0


@dataclass(frozen=True)
class CoincidenceSummary:
    """Result of one direction's coincidence measurement.

    ``pairs`` is the background-subtracted core count (fractional); ``car``
    is :data:`~chronoq.analytic.NO_ACCIDENTALS` when the sideband background
    predicts less than one accidental count in the core.  ``flag`` is empty
    for a clean measurement, otherwise names the quality problem.
    """

    delay_ps: float
    width_sigma_ps: float
    pairs: float
    car: float
    predicted_sd_ps: float
    flag: str = ""


def _as_tags(stream) -> np.ndarray:
    if isinstance(stream, TimeTagStream):
        return stream.tags_ps
    return np.asarray(stream, dtype=np.int64)


def _windowed_differences(local: np.ndarray, remote: np.ndarray,
                          lo: int, hi: int) -> np.ndarray:
    """Every (remote - local) difference in [lo, hi), via sorted two-pointer sweep."""
    left = np.searchsorted(remote, local + lo, side="left")
    right = np.searchsorted(remote, local + hi, side="left")
    counts = right - left
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64)
    if total > _MAX_ENUMERATED_PAIRS:
        raise ChronoqError(
            f"{total} pair differences in window would exhaust memory; "
            "reduce the span or use the FFT correlation path")
    starts = np.repeat(left, counts)
    ends = np.cumsum(counts)
    origins = np.repeat(ends - counts, counts)
    idx = starts + (np.arange(total) - origins)
    return remote[idx] - np.repeat(local, counts)


def _lag_counts_sparse(ql, qr, n_lags_half):
    d = _windowed_differences(ql, qr, -n_lags_half, n_lags_half + 1)
    return np.bincount((d + n_lags_half).astype(np.intp), minlength=2 * n_lags_half + 1)


def _lag_counts_fft(ql, qr, n_lags_half):
    qa0, qb0 = int(ql[0]), int(qr[0])
    na = int(ql[-1]) - qa0 + 1
    nb = int(qr[-1]) - qb0 + 1
    dense_a = np.bincount((ql - qa0).astype(np.intp), minlength=na).astype(float)
    dense_b = np.bincount((qr - qb0).astype(np.intp), minlength=nb).astype(float)
    nfft = 1 << (na + nb - 1).bit_length()
    corr = np.fft.irfft(np.conj(np.fft.rfft(dense_a, nfft)) * np.fft.rfft(dense_b, nfft),
                        nfft)
    base = qb0 - qa0
    lags = np.arange(-n_lags_half, n_lags_half + 1)
    m = lags - base
    valid = (m > -na) & (m < nb)
    out = np.zeros(2 * n_lags_half + 1, dtype=np.int64)
    out[valid] = np.rint(corr[m[valid] % nfft]).astype(np.int64)
    return out


def coarse_acquire(local, remote, search_span_ps: int, coarse_bin_ps: int,
                   method: str = "auto") -> float:
    """Locate the correlation peak to within one coarse bin.

    Both streams are quantized to ``coarse_bin_ps`` and their count sequences
    correlated over lags covering +-``search_span_ps``.  Returns the lag (ps)
    of the strongest bin; ties resolve toward the smallest |lag| (negative
    before positive on exact magnitude ties).  Raises
    :class:`~chronoq.errors.AcquisitionError` when no bin exceeds the
    background mean by five standard deviations.
    """
    lt, rt = _as_tags(local), _as_tags(remote)
    if len(lt) == 0 or len(rt) == 0:
        raise ValueError("coarse_acquire requires two non-empty streams")
    bin_ps = int(coarse_bin_ps)
    if bin_ps < 1:
        raise ValueError("coarse_bin_ps must be >= 1")
    half = max(1, -(-int(search_span_ps) // bin_ps))
    ql = lt // bin_ps
    qr = rt // bin_ps
    use = method
    if use == "auto":
        span_r = max(int(qr[-1] - qr[0]) + 1, 1)
        expected_pairs = len(ql) * (len(qr) / span_r) * (2 * half + 1)
        dense_ok = (int(ql[-1] - ql[0]) + int(qr[-1] - qr[0]) + 2) <= _MAX_DENSE_BINS
        use = "fft" if (expected_pairs > _FFT_PAIR_THRESHOLD and dense_ok) else "sparse"
    if use == "fft":
        c = _lag_counts_fft(ql, qr, half)
    else:
        c = _lag_counts_sparse(ql, qr, half)
    mean = float(c.mean())
    peak = int(c.max())
    if peak <= mean + 5.0 * math.sqrt(mean):
        raise AcquisitionError(
            f"no correlation bin above background ({peak} <= {mean:.2f} + 5*sqrt)")
    ties = np.flatnonzero(c == peak) - half
    best = min(ties, key=lambda j: (abs(int(j)), int(j)))
    return float(int(best) * bin_ps)


def refine_histogram(local, remote, center_ps: int, window_ps: int,
                     fine_bin_ps: int) -> CorrelationHistogram:
    """Exact pair-difference histogram of (remote - local) around ``center_ps``.

    Covers [center - window, center + window) in ``fine_bin_ps`` bins; every
    qualifying pair is counted exactly once.  Bin edges are anchored to the
    window start so integer-grid shifts of the inputs shift the histogram
    bin-for-bin.
    """
    lt, rt = _as_tags(local), _as_tags(remote)
    center, window, fine = int(center_ps), int(window_ps), int(fine_bin_ps)
    if fine < 1:
        raise ValueError("fine_bin_ps must be >= 1")
    if window < 20 * fine:
        raise ValueError("window must be at least 20 fine bins")
    n_bins = -(-2 * window // fine)
    lo = center - window
    hi = lo + n_bins * fine
    d = _windowed_differences(lt, rt, lo, hi)
    counts = np.bincount(((d - lo) // fine).astype(np.intp), minlength=n_bins)
    return CorrelationHistogram(center_ps=center, bin_width_ps=fine,
                                counts=counts, span_ps=n_bins * fine)


def _moments(xc: np.ndarray, weights: np.ndarray):
    w = float(weights.sum())
    if w <= 0:
        return 0.0, 0.0, 0.0
    mu = float((weights * xc).sum()) / w
    var = float((weights * (xc - mu) ** 2).sum()) / w
    return w, mu, math.sqrt(max(var, 0.0))


_NO_SIGNAL = dict(width_sigma_ps=math.nan, pairs=0.0, car=math.nan,
                  predicted_sd_ps=math.nan, flag="no_signal")

#: Localization iterations stop once sigma changes by less than this fraction.
_CONVERGENCE = 5e-3
_MAX_ITER = 12

#: A Gaussian's standard deviation restricted to +-3 sigma shrinks by this
#: factor; the reported width is debiased so it estimates the full peak sigma.
_TRUNC3_SHRINK = 0.986526


def _seed_peak(sub: np.ndarray):
    """Initial (center, sigma) in bin units from the smoothed excess counts.

    Moments of the full window are useless as a seed when sparse background
    leaks through the clamp (they stick at window scale), so the seed comes
    from the argmax of a moving-average smooth and its half-maximum width.
    Works for Gaussian and for the flat-topped peaks of skewed-clock data.
    """
    nb = len(sub)
    w = min(max(nb // 64, 3), 129)
    w += 1 - w % 2  # odd
    kernel = np.ones(w) / w
    smooth = np.convolve(sub, kernel, mode="same")
    peak = int(np.argmax(smooth))
    half = smooth[peak] / 2.0
    if half <= 0:
        return None
    lo = peak
    while lo > 0 and smooth[lo - 1] >= half:
        lo -= 1
    hi = peak
    while hi < nb - 1 and smooth[hi + 1] >= half:
        hi += 1
    fwhm = max(hi - lo + 1.0, 1.0)
    # subtract the smoothing kernel's own width in quadrature
    fwhm_core = math.sqrt(max(fwhm * fwhm - w * w / 3.0, 1.0))
    return float(peak), max(fwhm_core / 2.355, 0.5)


def fit_peak(hist: CorrelationHistogram) -> CoincidenceSummary:
    """Extract delay, width, pairs and CAR from a refined histogram.

    Background is the mean count of the outer 25% of bins on each side.
    Localization uses moments of the background-subtracted counts clamped at
    zero per bin (robust against sparse background spikes on wide windows),
    re-centered over a +-3 sigma core until the width estimate converges.
    The reported pairs P, delay centroid and width sigma then come from the
    straight (count - background) sums over the converged core, which are
    unbiased; the clamped moments serve as fallback if noise degenerates
    them.  CAR is raw-core-mean-per-bin over background, with the
    no-accidentals marker when the core expects less than one background
    count in total.  Summaries with fewer than ``MIN_PAIRS`` pairs are
    returned flagged rather than raised.
    """
    counts = hist.counts.astype(float)
    nb = len(counts)
    q = max(1, nb // 4)
    background = float(np.concatenate([counts[:q], counts[-q:]]).mean())
    sub = np.maximum(counts - background, 0.0)
    fine = hist.bin_width_ps
    xc = np.arange(nb) * float(fine) + (fine - 1) / 2.0  # ps offsets from start
    sigma_floor = 0.5 * fine

    seed = _seed_peak(sub)
    if seed is None:
        return CoincidenceSummary(delay_ps=float(hist.center_ps), **_NO_SIGNAL)
    mu, sigma = seed[0] * fine, max(seed[1] * fine, sigma_floor)
    for _ in range(_MAX_ITER):
        core = np.abs(xc - mu) <= 3.0 * sigma
        w, mu_new, sigma_new = _moments(xc[core], sub[core])
        if w <= 0:
            return CoincidenceSummary(delay_ps=float(hist.center_ps), **_NO_SIGNAL)
        sigma_new = max(sigma_new, sigma_floor)
        converged = abs(sigma_new - sigma) <= _CONVERGENCE * sigma
        mu, sigma = mu_new, sigma_new
        if converged:
            break

    core = np.abs(xc - mu) <= 3.0 * sigma
    n_core = int(core.sum())
    raw_core = float(counts[core].sum())
    resid = counts[core] - background  # unbiased final statistics
    pairs = float(resid.sum())
    if pairs <= 0:
        return CoincidenceSummary(delay_ps=float(hist.center_ps), **_NO_SIGNAL)
    mu_fin = float((resid * xc[core]).sum()) / pairs
    if not (xc[core][0] <= mu_fin <= xc[core][-1]):
        mu_fin = mu  # background noise overwhelmed the centroid
    var_fin = float((resid * (xc[core] - mu_fin) ** 2).sum()) / pairs
    sigma_fin = math.sqrt(var_fin) if var_fin > fine * fine / 12.0 else sigma
    sigma_fin /= _TRUNC3_SHRINK  # undo the +-3 sigma core truncation bias

    delay = hist.start_ps + mu_fin
    width = max(sigma_fin, fine / math.sqrt(12.0))  # quantization floor

    expected_bg = background * n_core
    if expected_bg < 1.0:
        car = NO_ACCIDENTALS
    else:
        car = (raw_core / n_core) / background

    flag = ""
    if pairs < MIN_PAIRS:
        flag = "insufficient_statistics"
    if car > 0:
        predicted = width / math.sqrt(2.0 * pairs / _car_correction(car))
    else:
        predicted = math.nan
        flag = flag or "no_signal"
    return CoincidenceSummary(delay_ps=float(delay), width_sigma_ps=float(width),
                              pairs=pairs, car=car, predicted_sd_ps=predicted,
                              flag=flag)


def _auto_span(lt: np.ndarray, rt: np.ndarray, coarse_bin_ps: int) -> int:
    guess = abs(int(np.median(rt)) - int(np.median(lt)))
    return 2 * guess + 20 * int(coarse_bin_ps)


def measure_delay(local, remote, config: EngineConfig = EngineConfig()) -> CoincidenceSummary:
    """Full pipeline: coarse acquisition, refined histogram, peak fit."""
    lt, rt = _as_tags(local), _as_tags(remote)
    span = config.search_span_ps
    if span is None:
        span = _auto_span(lt, rt, config.coarse_bin_ps)
    center = coarse_acquire(lt, rt, span, config.coarse_bin_ps, config.method)
    hist = refine_histogram(lt, rt, int(center), config.refine_window_ps,
                            config.fine_bin_ps)
    return fit_peak(hist)


def write_histogram_csv(hist: CorrelationHistogram, path):
    """Per-interval histogram dump: `bin_center_ps,count`."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_center_ps", "count"])
        for x, c in zip(hist.bin_centers(), hist.counts):
            w.writerow([f"{x:.9g}", int(c)])


def summary_row(interval_index: int, direction: str, s: CoincidenceSummary) -> list:
    car = "inf" if math.isinf(s.car) else f"{s.car:.9g}"
    return [interval_index, direction, f"{s.delay_ps:.9g}", f"{s.width_sigma_ps:.9g}",
            f"{s.pairs:.9g}", car, f"{s.predicted_sd_ps:.9g}"]


def write_summary_csv(rows, path):
    """Coincidence summaries: `interval_index,direction,delay_ps,sigma_ps,pairs,car,predicted_sd_ps`."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["interval_index", "direction", "delay_ps", "sigma_ps",
                    "pairs", "car", "predicted_sd_ps"])
        for r in rows:
            w.writerow(r)

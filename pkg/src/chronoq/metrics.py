"""Offset-series statistics: sample SD, time deviation (TDEV), drift fitting.

TDEV uses the overlapping estimator

    TDEV(m tau0)^2 = 1 / (6 m^2 (N - 3m + 1)) *
                     sum_{i=0}^{N-3m} ( sum_{j=i}^{i+m-1} (x[j+2m] - 2 x[j+m] + x[j]) )^2

which annihilates constant offsets and linear ramps (a constant frequency
offset changes no TDEV value) and decreases as tau^(-1/2) for white phase
noise, with TDEV(tau0) equal to the white-PM sigma itself.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class OffsetSeries:
    """Uniformly sampled time-offset series: values_ps at spacing tau0_s."""

    tau0_s: float
    values_ps: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values_ps", np.asarray(self.values_ps, dtype=float))
        if not self.tau0_s > 0:
            raise ValueError("tau0_s must be > 0")
        if self.values_ps.ndim != 1:
            raise ValueError("values_ps must be one-dimensional")

    def __len__(self):
        return len(self.values_ps)

    @property
    def times_s(self) -> np.ndarray:
        return np.arange(len(self.values_ps)) * self.tau0_s


def _values(series) -> np.ndarray:
    if isinstance(series, OffsetSeries):
        return series.values_ps
    return np.asarray(series, dtype=float)


def sample_sd(series) -> float:
    """Unbiased (n-1) standard deviation of an offset series."""
    v = _values(series)
    if len(v) < 2:
        raise ValueError("sample_sd needs at least two values")
    return float(np.std(v, ddof=1))


@dataclass(frozen=True)
class TdevPoint:
    tau_s: float
    tdev_ps: float
    n_terms: int


def octave_m_list(n: int) -> list:
    """Default averaging factors 1, 2, 4, ... capped at n // 4."""
    ms = []
    m = 1
    while m <= max(1, n // 4):
        ms.append(m)
        m *= 2
    return ms


def tdev(series, m_list=None) -> list:
    """Overlapping time deviation at averaging factors m (tau = m * tau0).

    Factors the series is too short for (need N >= 3m + 1) are omitted with a
    warning rather than raising, so octave grids can be applied uniformly.
    """
    if isinstance(series, OffsetSeries):
        x, tau0 = series.values_ps, series.tau0_s
    else:
        raise TypeError("tdev requires an OffsetSeries (tau0 is needed for the tau axis)")
    n = len(x)
    if n < 4:
        raise ValueError("tdev needs at least 4 samples")
    if m_list is None:
        m_list = octave_m_list(n)
    out = []
    for m in m_list:
        m = int(m)
        if m < 1:
            raise ValueError("averaging factor m must be >= 1")
        n_terms = n - 3 * m + 1
        if n_terms < 1:
            warnings.warn(f"series of length {n} too short for m={m}; point omitted")
            continue
        d = x[2 * m:] - 2.0 * x[m:n - m] + x[:n - 2 * m]
        cs = np.concatenate(([0.0], np.cumsum(d)))
        inner = cs[m:] - cs[:-m]  # moving sums of m consecutive second differences
        tvar = math.fsum(float(s) * float(s) for s in inner) / (6.0 * m * m * n_terms)
        out.append(TdevPoint(tau_s=m * tau0, tdev_ps=math.sqrt(tvar), n_terms=n_terms))
    return out


def fit_drift(series, degree: int):
    """Least-squares polynomial in time; returns coefficients lowest order first.

    degree 1 fits offset = c0 + c1 * t (c1 in ps/s doubles as the skew
    estimate after scaling by 1e-12); degree 2 adds a quadratic drift term.
    """
    if degree not in (1, 2):
        raise ValueError("degree must be 1 or 2")
    if isinstance(series, OffsetSeries):
        t, x = series.times_s, series.values_ps
    else:
        t, x = (np.asarray(a, dtype=float) for a in series)
    if len(x) <= degree + 1:
        raise ValueError(f"need more than {degree + 1} points for degree {degree}")
    if np.ptp(t) == 0:
        raise ValueError("degenerate abscissae: all time values identical")
    coeffs = np.polynomial.polynomial.polyfit(t, x, degree)
    return tuple(float(c) for c in coeffs)


def estimate_skew(points) -> tuple:
    """Fractional frequency skew from a (time_s, offset_ps) series.

    Ordinary least squares; returns (skew, uncertainty), both dimensionless.
    The uncertainty is the slope standard error from the residual variance
    (zero for a perfectly linear series).
    """
    pts = [(float(t), float(v)) for t, v in points]
    if len(pts) < 3:
        raise ValueError("estimate_skew needs at least 3 points")
    t = np.array([p[0] for p in pts])
    x = np.array([p[1] for p in pts])
    if np.ptp(t) == 0:
        raise ValueError("degenerate abscissae: all time values identical")
    c0, c1 = fit_drift((t, x), 1)
    resid = x - (c0 + c1 * t)
    n = len(pts)
    ss_t = float(np.sum((t - t.mean()) ** 2))
    var_slope = float(np.sum(resid ** 2)) / (n - 2) / ss_t
    # slope is ps/s; 1 ps/s == 1e-12 fractional frequency
    return c1 * 1e-12, math.sqrt(max(var_slope, 0.0)) * 1e-12


def write_tdev_csv(points, path):
    """Emit TDEV points as `tau_s,tdev_ps,n_terms`."""
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tau_s", "tdev_ps", "n_terms"])
        for p in points:
            w.writerow([f"{p.tau_s:.9g}", f"{p.tdev_ps:.9g}", p.n_terms])

"""chronoq: cascaded two-way optical time transfer, simulated end to end.

Subsystems:

* :mod:`chronoq.analytic` — closed-form offset-SD model and sweep tables.
* :mod:`chronoq.timetags` — Monte Carlo photon time-tag streams (source,
  channel, detector, clock models).
* :mod:`chronoq.coincidence` — correlation-peak acquisition and fitting.
* :mod:`chronoq.cascade` — per-interval offsets, relay cascading, skew servo.
* :mod:`chronoq.metrics` — sample SD, TDEV, drift fitting.
* :mod:`chronoq.tagio` — bit-exact tag file formats (CSV / binary).
* :mod:`chronoq.config` / :mod:`chronoq.cli` — experiment configs and the
  `chronoq` command-line tool.
"""

__version__ = "0.1.0"

from .analytic import (NO_ACCIDENTALS, DirectionStats, SdPrediction, SegmentBudget,
                       cascade_sd, car_of, coincidence_width, delay_sd_one_way,
                       detected_pairs, direction_stats, noncascaded_sd,
                       segment_offset_sd, sweep_distance, sweep_skew,
                       uniform_cascade_sd)
from .cascade import (CampaignResult, CascadeRecord, ControllerState, SegmentEstimate,
                      SimOptions, Topology, apply_trim, controller_step, run_campaign,
                      segment_offset, total_offset)
from .coincidence import (CoincidenceSummary, CorrelationHistogram, EngineConfig,
                          coarse_acquire, fit_peak, measure_delay, refine_histogram)
from .errors import (AcquisitionError, ChronoqError, ConfigError, OutOfRangeError,
                     TagFileError, UndefinedSdError)
from .metrics import OffsetSeries, estimate_skew, fit_drift, sample_sd, tdev
from .timetags import (ChannelModel, ClockModel, DetectorModel, SegmentPhysics,
                       SegmentStreams, TimeTagStream, apply_channel, detect,
                       gen_pair_emissions, simulate_segment)

"""Experiment configuration: YAML schema, presets, strict validation.

A config file is a nested mapping with a versioned schema.  Unknown keys are
rejected everywhere; every parameter has a default reachable through the
bundled presets, selected with ``defaults: <preset-name>``:

* ``three-station-lab`` — full-scale three-station chain (2 x 100 km fiber,
  2.5e6 pairs per 10 s interval, 11 dB idler / 3 dB + 0.2 dB/km signal
  losses, 64 ps pairwise jitter, relay skew 3.51e-11) including the measured
  direction statistics used by the skew sweep.
* ``desk-2x25km`` — desk-scale variant for fast campaigns (rates /100,
  0.1 s intervals, 2 x 25 km).
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import yaml

from .analytic import DirectionStats, SegmentBudget
from .cascade import ControllerState, SimOptions, Topology
from .coincidence import EngineConfig
from .errors import ConfigError
from .timetags import ClockModel

SCHEMA_VERSION = 1

SCENARIO_NAMES = ("crc", "irc", "irc-fc")


@dataclass(frozen=True)
class StationConfig:
    name: str
    clock: ClockModel


@dataclass(frozen=True)
class OutputOptions:
    save_tags: bool = False
    tag_format: str = "binary"  # binary | csv
    demean_summary: bool = True

    def __post_init__(self):
        if self.tag_format not in ("binary", "csv"):
            raise ConfigError("outputs.tag_format must be 'binary' or 'csv'")


@dataclass(frozen=True)
class DistanceSweepSpec:
    n_list: tuple
    km_grid: tuple


@dataclass(frozen=True)
class SkewSweepSpec:
    interval_s: float
    grid: tuple
    segments: tuple  # of (fwd, bwd) DirectionStats pairs


@dataclass(frozen=True)
class PredictSpec:
    distance: DistanceSweepSpec | None = None
    skew: SkewSweepSpec | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    scenario: str
    duration_s: float
    interval_s: float
    stations: tuple
    budgets: tuple
    sim: SimOptions
    controller: ControllerState
    epoch_intervals: int
    engine: EngineConfig
    outputs: OutputOptions
    predict: PredictSpec

    def topology(self) -> Topology:
        return Topology(budgets=self.budgets,
                        clocks=tuple(s.clock for s in self.stations),
                        sim=self.sim)


_LAB_SEGMENT = {
    "pair_rate_per_interval": 2.5e6,
    "idler_loss_db": 11.0,
    "signal_fixed_loss_db": 3.0,
    "fiber_len_km": 100.0,
    "atten_db_per_km": 0.2,
    "jitter_sigma_ps": 64.0,
    "residual_dispersion_ps_f": 0.0,
    "residual_dispersion_ps_b": 0.0,
    "accidental_pairs_per_interval": 0.0,
}

# Direction statistics of the two lab segments at zero skew (measured widths
# include residual dispersion; pair counts and CARs per 10 s interval).
_LAB_MEASURED = [
    {"fwd": {"width_ps": 74.90, "pairs": 1258.0, "car": 31.3},
     "bwd": {"width_ps": 73.66, "pairs": 857.0, "car": 22.6}},
    {"fwd": {"width_ps": 124.74, "pairs": 373.0, "car": 2.8},
     "bwd": {"width_ps": 119.82, "pairs": 940.0, "car": 8.8}},
]

PRESETS = {
    "three-station-lab": {
        "seed": 1,
        "scenario": "crc",
        "duration_s": 200.0,
        "interval_s": 10.0,
        "topology": {
            "stations": [
                {"name": "A", "clock": {"offset_ps": 0.0, "skew": 0.0,
                                        "white_pm_sigma_ps": 0.0}},
                {"name": "R", "clock": {"offset_ps": 250.0, "skew": 3.51e-11,
                                        "white_pm_sigma_ps": 0.0}},
                {"name": "B", "clock": {"offset_ps": -400.0, "skew": 0.0,
                                        "white_pm_sigma_ps": 0.0}},
            ],
            "segments": [dict(_LAB_SEGMENT), dict(_LAB_SEGMENT)],
        },
        "sim": {"delay_ps_per_km": 4.9e6, "dark_rate_cps": 65000.0,
                "per_detector_jitter_ps": None, "efficiency": 1.0,
                "max_rate_cps": 5.0e6, "dead_time_ps": 0.0},
        "controller": {"window": 10, "gain": 0.8, "residual_floor": 8.0e-16},
        "epoch_intervals": 10,
        "engine": {"coarse_bin_ps": 1000, "fine_bin_ps": 1,
                   "refine_window_ps": 25000, "search_span_ps": None},
        "outputs": {"save_tags": False, "tag_format": "binary",
                    "demean_summary": True},
        "predict": {
            "distance": {"n_list": [1, 2, 3, 4, 5, 6, 7, 8, 9, 10],
                         "km_grid": {"start": 0.0, "stop": 1000.0, "step": 10.0}},
            "skew": {"interval_s": 10.0,
                     "grid": {"start": 0.0, "stop": 4.0e-11, "step": 5.0e-13},
                     "segments": copy.deepcopy(_LAB_MEASURED)},
        },
    },
}

_DESK_SEGMENT = dict(_LAB_SEGMENT, pair_rate_per_interval=2.5e4, fiber_len_km=25.0)
PRESETS["desk-2x25km"] = copy.deepcopy(PRESETS["three-station-lab"])
PRESETS["desk-2x25km"].update({
    "duration_s": 20.0,
    "interval_s": 0.1,
})
PRESETS["desk-2x25km"]["topology"]["segments"] = [dict(_DESK_SEGMENT),
                                                  dict(_DESK_SEGMENT)]
PRESETS["desk-2x25km"]["sim"]["dark_rate_cps"] = 20000.0
PRESETS["desk-2x25km"]["predict"]["skew"]["interval_s"] = 0.1


def _require_mapping(node, context):
    if not isinstance(node, dict):
        raise ConfigError(f"{context}: expected a mapping, got {type(node).__name__}")
    return node


def _reject_unknown(node, context, allowed):
    unknown = set(node) - set(allowed)
    if unknown:
        raise ConfigError(f"{context}: unknown key(s) {sorted(unknown)}")


_MISSING = object()


def _get(node, key, context, kind, default=_MISSING):
    if key not in node:
        if default is _MISSING:
            raise ConfigError(f"{context}: missing required key '{key}'")
        return default
    value = node[key]
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{context}.{key}: expected a number")
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{context}.{key}: expected an integer")
        return value
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{context}.{key}: expected a boolean")
        return value
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{context}.{key}: expected a string")
        return value
    return value


def _parse_grid(node, context):
    """A grid is either an explicit list or {start, stop, step} (inclusive stop)."""
    if isinstance(node, list):
        return tuple(float(v) for v in node)
    node = _require_mapping(node, context)
    _reject_unknown(node, context, ("start", "stop", "step"))
    start = _get(node, "start", context, float)
    stop = _get(node, "stop", context, float)
    step = _get(node, "step", context, float)
    if step <= 0:
        raise ConfigError(f"{context}.step must be > 0")
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    return tuple(start + i * step for i in range(max(n, 0)))


def _parse_clock(node, context):
    node = _require_mapping(node, context)
    _reject_unknown(node, context, ("offset_ps", "skew", "white_pm_sigma_ps"))
    try:
        return ClockModel(
            offset_ps=_get(node, "offset_ps", context, float, 0.0),
            skew=_get(node, "skew", context, float, 0.0),
            white_pm_sigma_ps=_get(node, "white_pm_sigma_ps", context, float, 0.0),
        )
    except ValueError as e:
        raise ConfigError(f"{context}: {e}") from None


def _parse_segment(node, context, interval_s):
    node = _require_mapping(node, context)
    _reject_unknown(node, context, _LAB_SEGMENT.keys())
    kwargs = {k: _get(node, k, context, float, float(v))
              for k, v in _LAB_SEGMENT.items()}
    try:
        return SegmentBudget(interval_s=interval_s, skew=0.0, **kwargs)
    except ValueError as e:
        raise ConfigError(f"{context}: {e}") from None


def _parse_direction_stats(node, context):
    node = _require_mapping(node, context)
    _reject_unknown(node, context, ("width_ps", "pairs", "car"))
    car = node.get("car", math.inf)
    if isinstance(car, str):
        if car not in ("inf", ".inf"):
            raise ConfigError(f"{context}.car: use a number or 'inf'")
        car = math.inf
    try:
        return DirectionStats(width_ps=_get(node, "width_ps", context, float),
                              pairs=_get(node, "pairs", context, float),
                              car=float(car))
    except ValueError as e:
        raise ConfigError(f"{context}: {e}") from None


def _merge(base, overlay):
    """Deep-merge overlay onto base; overlay wins, mappings merge recursively."""
    if not isinstance(base, dict) or not isinstance(overlay, dict):
        return copy.deepcopy(overlay)
    out = copy.deepcopy(base)
    for k, v in overlay.items():
        out[k] = _merge(out[k], v) if k in out else copy.deepcopy(v)
    return out


_TOP_KEYS = ("schema_version", "defaults", "seed", "scenario", "duration_s",
             "interval_s", "topology", "sim", "controller", "epoch_intervals",
             "engine", "outputs", "predict")


def parse_config(data) -> ExperimentConfig:
    """Validate a raw mapping against the schema and resolve to dataclasses."""
    data = _require_mapping(data, "config")
    _reject_unknown(data, "config", _TOP_KEYS)
    version = _get(data, "schema_version", "config", int, SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"config: unsupported schema_version {version}")
    preset = _get(data, "defaults", "config", str, "three-station-lab")
    if preset not in PRESETS:
        raise ConfigError(f"config.defaults: unknown preset {preset!r}; "
                          f"available: {sorted(PRESETS)}")
    merged = _merge(PRESETS[preset], {k: v for k, v in data.items()
                                      if k not in ("schema_version", "defaults")})

    scenario = merged["scenario"].lower().replace("_", "-")
    if scenario not in SCENARIO_NAMES:
        raise ConfigError(f"config.scenario: must be one of {SCENARIO_NAMES}")
    duration_s = _get(merged, "duration_s", "config", float)
    interval_s = _get(merged, "interval_s", "config", float)
    if duration_s <= 0 or interval_s <= 0:
        raise ConfigError("config: duration_s and interval_s must be > 0")
    seed = _get(merged, "seed", "config", int)
    if seed < 0:
        raise ConfigError("config.seed must be >= 0")

    topo = _require_mapping(merged["topology"], "topology")
    _reject_unknown(topo, "topology", ("stations", "segments"))
    raw_stations = topo.get("stations", [])
    raw_segments = topo.get("segments", [])
    if not isinstance(raw_stations, list) or not isinstance(raw_segments, list):
        raise ConfigError("topology.stations and topology.segments must be lists")
    if len(raw_stations) != len(raw_segments) + 1:
        raise ConfigError("topology: need exactly one station per segment end "
                          f"(got {len(raw_stations)} stations, {len(raw_segments)} segments)")
    stations = []
    for i, s in enumerate(raw_stations):
        ctx = f"topology.stations[{i}]"
        s = _require_mapping(s, ctx)
        _reject_unknown(s, ctx, ("name", "clock"))
        stations.append(StationConfig(name=_get(s, "name", ctx, str, f"S{i}"),
                                      clock=_parse_clock(s.get("clock", {}), ctx)))
    budgets = [_parse_segment(seg, f"topology.segments[{i}]", interval_s)
               for i, seg in enumerate(raw_segments)]

    sim_node = _require_mapping(merged["sim"], "sim")
    _reject_unknown(sim_node, "sim", ("delay_ps_per_km", "dark_rate_cps",
                                      "per_detector_jitter_ps", "efficiency",
                                      "max_rate_cps", "dead_time_ps"))
    pdj = sim_node.get("per_detector_jitter_ps")
    sim = SimOptions(
        delay_ps_per_km=_get(sim_node, "delay_ps_per_km", "sim", float, 4.9e6),
        dark_rate_cps=_get(sim_node, "dark_rate_cps", "sim", float, 0.0),
        per_detector_jitter_ps=None if pdj is None else float(pdj),
        efficiency=_get(sim_node, "efficiency", "sim", float, 1.0),
        max_rate_cps=_get(sim_node, "max_rate_cps", "sim", float, 5e6),
        dead_time_ps=_get(sim_node, "dead_time_ps", "sim", float, 0.0),
    )

    ctl_node = _require_mapping(merged["controller"], "controller")
    _reject_unknown(ctl_node, "controller", ("window", "gain", "residual_floor"))
    try:
        controller = ControllerState(
            window=_get(ctl_node, "window", "controller", int, 10),
            gain=_get(ctl_node, "gain", "controller", float, 0.8),
            residual_floor=_get(ctl_node, "residual_floor", "controller", float, 8e-16),
        )
    except ValueError as e:
        raise ConfigError(f"controller: {e}") from None
    epoch_intervals = _get(merged, "epoch_intervals", "config", int, 10)
    if epoch_intervals < 1:
        raise ConfigError("config.epoch_intervals must be >= 1")

    eng_node = _require_mapping(merged["engine"], "engine")
    _reject_unknown(eng_node, "engine", ("coarse_bin_ps", "fine_bin_ps",
                                         "refine_window_ps", "search_span_ps",
                                         "method"))
    span = eng_node.get("search_span_ps")
    try:
        engine = EngineConfig(
            coarse_bin_ps=_get(eng_node, "coarse_bin_ps", "engine", int, 1000),
            fine_bin_ps=_get(eng_node, "fine_bin_ps", "engine", int, 1),
            refine_window_ps=_get(eng_node, "refine_window_ps", "engine", int, 25000),
            search_span_ps=None if span is None else int(span),
            method=_get(eng_node, "method", "engine", str, "auto"),
        )
    except ValueError as e:
        raise ConfigError(f"engine: {e}") from None

    out_node = _require_mapping(merged["outputs"], "outputs")
    _reject_unknown(out_node, "outputs", ("save_tags", "tag_format", "demean_summary"))
    outputs = OutputOptions(
        save_tags=_get(out_node, "save_tags", "outputs", bool, False),
        tag_format=_get(out_node, "tag_format", "outputs", str, "binary"),
        demean_summary=_get(out_node, "demean_summary", "outputs", bool, True),
    )

    pred_node = _require_mapping(merged.get("predict", {}), "predict")
    _reject_unknown(pred_node, "predict", ("distance", "skew"))
    distance = skew = None
    if "distance" in pred_node:
        d = _require_mapping(pred_node["distance"], "predict.distance")
        _reject_unknown(d, "predict.distance", ("n_list", "km_grid"))
        n_list = d.get("n_list", [1])
        if not isinstance(n_list, list) or not n_list:
            raise ConfigError("predict.distance.n_list must be a non-empty list")
        distance = DistanceSweepSpec(
            n_list=tuple(int(n) for n in n_list),
            km_grid=_parse_grid(d.get("km_grid", []), "predict.distance.km_grid"))
    if "skew" in pred_node:
        s = _require_mapping(pred_node["skew"], "predict.skew")
        _reject_unknown(s, "predict.skew", ("interval_s", "grid", "segments"))
        segs = s.get("segments", [])
        if not isinstance(segs, list) or not segs:
            raise ConfigError("predict.skew.segments must be a non-empty list")
        pairs = []
        for i, seg in enumerate(segs):
            ctx = f"predict.skew.segments[{i}]"
            seg = _require_mapping(seg, ctx)
            _reject_unknown(seg, ctx, ("fwd", "bwd"))
            pairs.append((_parse_direction_stats(seg.get("fwd", {}), f"{ctx}.fwd"),
                          _parse_direction_stats(seg.get("bwd", {}), f"{ctx}.bwd")))
        skew = SkewSweepSpec(
            interval_s=_get(s, "interval_s", "predict.skew", float, interval_s),
            grid=_parse_grid(s.get("grid", []), "predict.skew.grid"),
            segments=tuple(pairs))

    return ExperimentConfig(seed=seed, scenario=scenario, duration_s=duration_s,
                            interval_s=interval_s, stations=tuple(stations),
                            budgets=tuple(budgets), sim=sim, controller=controller,
                            epoch_intervals=epoch_intervals, engine=engine,
                            outputs=outputs, predict=PredictSpec(distance, skew))


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r") as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from None
    if data is None:
        data = {}
    return parse_config(data)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Resolved config as a plain mapping (parse(config_to_dict(c)) == c)."""

    def clock_dict(c: ClockModel) -> dict:
        return {"offset_ps": c.offset_ps, "skew": c.skew,
                "white_pm_sigma_ps": c.white_pm_sigma_ps}

    def budget_dict(b: SegmentBudget) -> dict:
        return {k: getattr(b, k) for k in _LAB_SEGMENT}

    def stats_dict(d: DirectionStats) -> dict:
        return {"width_ps": d.width_ps, "pairs": d.pairs,
                "car": "inf" if math.isinf(d.car) else d.car}

    predict = {}
    if cfg.predict.distance is not None:
        predict["distance"] = {"n_list": list(cfg.predict.distance.n_list),
                               "km_grid": list(cfg.predict.distance.km_grid)}
    if cfg.predict.skew is not None:
        predict["skew"] = {
            "interval_s": cfg.predict.skew.interval_s,
            "grid": list(cfg.predict.skew.grid),
            "segments": [{"fwd": stats_dict(f), "bwd": stats_dict(b)}
                         for f, b in cfg.predict.skew.segments]}
    return {
        "schema_version": SCHEMA_VERSION,
        "seed": cfg.seed,
        "scenario": cfg.scenario,
        "duration_s": cfg.duration_s,
        "interval_s": cfg.interval_s,
        "topology": {
            "stations": [{"name": s.name, "clock": clock_dict(s.clock)}
                         for s in cfg.stations],
            "segments": [budget_dict(b) for b in cfg.budgets],
        },
        "sim": asdict(cfg.sim),
        "controller": {"window": cfg.controller.window, "gain": cfg.controller.gain,
                       "residual_floor": cfg.controller.residual_floor},
        "epoch_intervals": cfg.epoch_intervals,
        "engine": {"coarse_bin_ps": cfg.engine.coarse_bin_ps,
                   "fine_bin_ps": cfg.engine.fine_bin_ps,
                   "refine_window_ps": cfg.engine.refine_window_ps,
                   "search_span_ps": cfg.engine.search_span_ps,
                   "method": cfg.engine.method},
        "outputs": {"save_tags": cfg.outputs.save_tags,
                    "tag_format": cfg.outputs.tag_format,
                    "demean_summary": cfg.outputs.demean_summary},
        "predict": predict,
    }


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)

#!/usr/bin/env python3
"""
Synthetic Workload Generator

This module produces ground-truth counter traces for packet-processing service
chains, so that selection, training, drift handling and forecasting can all be
exercised without a hardware testbed.

Response model:
  - The offered load (Mbps) follows the scenario pattern and is converted to
    packets with the 7:4:1 IMIX mean packet size.
  - Each VNF processes its share of min(load, knee) and emits counters that are
    affine in its processed packets, with coefficients derived from the VNF name.
  - Cycles are dominated by busy polling and barely follow the load.
  - Throughput saturates at the capacity knee; latency grows with the reciprocal
    of the residual capacity up to a ceiling.
  - Resource contention lowers the knee and inflates cache-miss counters.
  - Every signal carries Gaussian noise with std = noise_pct of its range.
"""

import sys
import json
import zlib
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np

from drst.commands.error_handler import InvalidSpec, UsageError, handle_file_system_error
from drst.commands.trace_ingest import TraceRecord, write_trace

logger = logging.getLogger("drst.synth_workload")

# 64B : 570B : 1514B = 7 : 4 : 1
IMIX_MIX = ((64, 7), (570, 4), (1514, 1))
IMIX_MEAN_BYTES = sum(size * weight for size, weight in IMIX_MIX) / sum(weight for _, weight in IMIX_MIX)

COUNTER_FAMILIES = (
    "cache_references",
    "llc_loads",
    "llc_stores",
    "l1_misses",
    "instructions",
    "branches",
    "mem_stores",
    "cycles",
)
CACHE_MISS_FAMILIES = ("l1_misses", "llc_loads")

# Per-packet event counts drawn uniformly from these ranges for each VNF
_PER_PACKET_RANGES = {
    "cache_references": (20.0, 40.0),
    "llc_loads": (8.0, 16.0),
    "llc_stores": (3.0, 6.0),
    "l1_misses": (10.0, 20.0),
    "instructions": (300.0, 600.0),
    "branches": (50.0, 100.0),
    "mem_stores": (40.0, 80.0),
    "cycles": (40.0, 60.0),
}
_CPU_HZ = 2.5e9
_CYCLES_NOISE_RATIO = 4.0

THROUGHPUT_KPI = "throughput_mbps"
LATENCY_KPI = "latency_us"

DEFAULT_PARAMS: Dict[str, float] = {
    "rate_min": 500.0,
    "rate_max": 1000.0,
    "period_s": 50.0,
    "noise_pct": 0.02,
    "rate_noise_pct": 0.01,
    "knee": 950.0,
    "level": 0.5,
    "dwell_min_s": 5.0,
    "dwell_max_s": 20.0,
    "throttle": 0.3,
    "miss_gain": 2.0,
    "base_latency_us": 20.0,
    "latency_ceiling_us": 1000.0,
}


class Topology(str, Enum):
    LINEAR = "linear"
    DAG1 = "dag1"
    DAG2 = "dag2"


class StimulusKind(str, Enum):
    LOAD = "load"
    RESOURCE = "resource"
    MIXED = "mixed"


class Pattern(str, Enum):
    CONSTANT = "constant"
    PERIODIC_A = "periodic_A"
    STAGE_RANDOM_B = "stage_random_B"


class DriftKind(str, Enum):
    AFFINE_SHIFT = "affine_shift"
    TOPOLOGY_SWAP = "topology_swap"
    CONTENTION_ONSET = "contention_onset"


def _enum(cls, value: Any, what: str):
    try:
        return cls(value)
    except ValueError:
        allowed = ", ".join(member.value for member in cls)
        raise InvalidSpec(f"Unknown {what} '{value}' (expected one of: {allowed})")


@dataclass(frozen=True)
class ServiceSpec:
    vnf_names: Tuple[str, ...]
    topology: Topology = Topology.LINEAR


@dataclass(frozen=True)
class StimulusSpec:
    kind: StimulusKind = StimulusKind.LOAD
    params: Mapping[str, float] = field(default_factory=dict)

    def param(self, name: str) -> float:
        return float(self.params.get(name, DEFAULT_PARAMS[name]))


@dataclass(frozen=True)
class ScenarioSpec:
    """A service chain, the stimulus applied to it and the sampling grid."""

    service: ServiceSpec
    stimulus: StimulusSpec
    pattern: Pattern
    seed: int = 0
    duration_s: int = 60
    interval_ms: int = 1000

    @property
    def num_samples(self) -> int:
        return (self.duration_s * 1000) // self.interval_ms

    def validate(self) -> "ScenarioSpec":
        """
        Check the scenario invariants.

        Raises:
            InvalidSpec: If any field is out of range
        """
        if not self.service.vnf_names:
            raise InvalidSpec("service.vnf_names must not be empty")
        if len(set(self.service.vnf_names)) != len(self.service.vnf_names):
            raise InvalidSpec("service.vnf_names must be unique")
        if self.duration_s < 1:
            raise InvalidSpec(f"duration_s must be >= 1, got {self.duration_s}")
        if self.interval_ms < 1:
            raise InvalidSpec(f"interval_ms must be >= 1, got {self.interval_ms}")
        if self.num_samples < 1:
            raise InvalidSpec("duration_s is shorter than one interval")

        unknown = sorted(set(self.stimulus.params) - set(DEFAULT_PARAMS))
        if unknown:
            raise InvalidSpec(f"Unknown stimulus params: {', '.join(unknown)}")
        for name, value in self.stimulus.params.items():
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise InvalidSpec(f"Stimulus param '{name}' must be a number")

        rate_min, rate_max = self.stimulus.param("rate_min"), self.stimulus.param("rate_max")
        if not 0 < rate_min <= rate_max:
            raise InvalidSpec("Stimulus params need 0 < rate_min <= rate_max")
        if self.stimulus.param("period_s") <= 0:
            raise InvalidSpec("period_s must be positive")
        if self.stimulus.param("knee") <= 0:
            raise InvalidSpec("knee must be positive")
        if not 0 <= self.stimulus.param("throttle") < 1:
            raise InvalidSpec("throttle must lie in [0, 1)")
        if not 0 <= self.stimulus.param("level") <= 1:
            raise InvalidSpec("level must lie in [0, 1]")
        if self.stimulus.param("noise_pct") < 0 or self.stimulus.param("rate_noise_pct") < 0:
            raise InvalidSpec("Noise percentages must be >= 0")
        if not 0 < self.stimulus.param("dwell_min_s") <= self.stimulus.param("dwell_max_s"):
            raise InvalidSpec("Stimulus params need 0 < dwell_min_s <= dwell_max_s")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {
            "service": {"vnf_names": list(self.service.vnf_names), "topology": self.service.topology.value},
            "stimulus": {"kind": self.stimulus.kind.value, "params": dict(self.stimulus.params)},
            "pattern": self.pattern.value,
            "seed": self.seed,
            "duration_s": self.duration_s,
            "interval_ms": self.interval_ms,
        }

    @classmethod
    def from_dict(cls, document: Mapping[str, Any]) -> "ScenarioSpec":
        """
        Build a scenario from its JSON document.

        Raises:
            InvalidSpec: If the document is incomplete or invalid
        """
        try:
            service = document["service"]
            stimulus = document.get("stimulus", {})
            spec = cls(
                service=ServiceSpec(
                    tuple(str(name) for name in service["vnf_names"]),
                    _enum(Topology, service.get("topology", "linear"), "topology"),
                ),
                stimulus=StimulusSpec(
                    _enum(StimulusKind, stimulus.get("kind", "load"), "stimulus kind"),
                    dict(stimulus.get("params", {})),
                ),
                pattern=_enum(Pattern, document["pattern"], "pattern"),
                seed=int(document.get("seed", 0)),
                duration_s=int(document.get("duration_s", 60)),
                interval_ms=int(document.get("interval_ms", 1000)),
            )
        except (KeyError, TypeError, AttributeError, ValueError) as e:
            raise InvalidSpec(f"Invalid scenario document: {e}") from e
        return spec.validate()


@dataclass(frozen=True)
class DriftInjection:
    at_sample: int
    kind: DriftKind
    magnitude: float

    def validate(self, num_samples: int) -> "DriftInjection":
        if not 0 <= self.at_sample < num_samples:
            raise InvalidSpec(f"Drift at_sample {self.at_sample} is outside the trace (0..{num_samples - 1})")
        if not self.magnitude > 0:
            raise InvalidSpec(f"Drift magnitude must be > 0, got {self.magnitude}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {"at_sample": self.at_sample, "kind": self.kind.value, "magnitude": self.magnitude}

    @classmethod
    def from_dict(cls, document: Mapping[str, Any]) -> "DriftInjection":
        try:
            return cls(int(document["at_sample"]), _enum(DriftKind, document["kind"], "drift kind"),
                       float(document["magnitude"]))
        except (KeyError, TypeError, ValueError) as e:
            raise InvalidSpec(f"Invalid drift document: {e}") from e


def _pattern_unit(pattern: Pattern, n: int, interval_ms: int, rng: np.random.Generator,
                  stimulus: StimulusSpec) -> np.ndarray:
    """Pattern shape in [0, 1] before noise."""
    t_s = np.arange(n, dtype=np.float64) * (interval_ms / 1000.0)
    if pattern == Pattern.CONSTANT:
        return np.full(n, stimulus.param("level"))
    if pattern == Pattern.PERIODIC_A:
        return 0.5 + 0.5 * np.sin(2.0 * np.pi * t_s / stimulus.param("period_s"))

    dwell_min, dwell_max = stimulus.param("dwell_min_s"), stimulus.param("dwell_max_s")
    unit = np.empty(n)
    start = 0
    while start < n:
        level = rng.uniform(0.0, 1.0)
        dwell = rng.uniform(dwell_min, dwell_max)
        length = max(1, int(round(dwell * 1000.0 / interval_ms)))
        unit[start:start + length] = level
        start += length
    return unit


def imix_rate_series(pattern: Pattern, duration_s: int, interval_ms: int, seed: int,
                     params: Optional[Mapping[str, float]] = None) -> np.ndarray:
    """
    Offered load in Mbps for each sample.

    periodic_A is a sinusoid spanning [rate_min, rate_max] with a period of
    period_s plus Gaussian noise of rate_noise_pct of the range; stage_random_B
    holds uniform random levels for uniform random dwell times; constant sits
    at rate_min + level * (rate_max - rate_min).

    Args:
        pattern: One of constant, periodic_A, stage_random_B
        duration_s (int): Trace length in seconds
        interval_ms (int): Sampling interval
        seed (int): Generator seed
        params: Stimulus parameters overriding DEFAULT_PARAMS

    Returns:
        np.ndarray: Rates clipped to [rate_min, rate_max]
    """
    pattern = _enum(Pattern, pattern, "pattern")
    stimulus = StimulusSpec(StimulusKind.LOAD, dict(params or {}))
    n = (duration_s * 1000) // interval_ms
    rng = np.random.default_rng(seed)

    rate_min, rate_max = stimulus.param("rate_min"), stimulus.param("rate_max")
    span = rate_max - rate_min
    rates = rate_min + span * _pattern_unit(pattern, n, interval_ms, rng, stimulus)
    if pattern == Pattern.PERIODIC_A and stimulus.param("rate_noise_pct") > 0:
        rates = rates + rng.normal(0.0, stimulus.param("rate_noise_pct") * span, n)
    return np.clip(rates, rate_min, rate_max)


def service_shares(topology: Topology, num_vnfs: int) -> np.ndarray:
    """Fraction of the service load each VNF processes."""
    shares = np.ones(num_vnfs)
    if num_vnfs <= 2 or topology == Topology.LINEAR:
        return shares
    middle = np.arange(1, num_vnfs - 1)
    if topology == Topology.DAG1:
        shares[middle] = np.where(middle % 2 == 1, 0.6, 0.4)
    else:
        shares[middle] = 1.0 / (num_vnfs - 1)
    return shares


@dataclass(frozen=True)
class VnfProfile:
    """Per-packet counter coefficients of one VNF."""

    name: str
    per_packet: Mapping[str, float]

    @classmethod
    def for_name(cls, name: str) -> "VnfProfile":
        # Keyed on the name alone so that a VNF looks the same in every scenario
        rng = np.random.default_rng(zlib.crc32(name.encode("utf-8")))
        return cls(name, {family: float(rng.uniform(*_PER_PACKET_RANGES[family])) for family in COUNTER_FAMILIES})


def _packets(rate_mbps: np.ndarray, interval_ms: int) -> np.ndarray:
    return rate_mbps * 1e6 / 8.0 / IMIX_MEAN_BYTES * (interval_ms / 1000.0)


def _noise(rng: np.random.Generator, signal: np.ndarray, pct: float, upto: Optional[int] = None) -> np.ndarray:
    # The span is taken before any drift so that earlier samples do not depend on it
    reference = signal[:upto] if upto else signal
    span = float(np.max(reference) - np.min(reference))
    if span == 0.0 or pct == 0.0:
        return np.zeros_like(signal)
    return rng.normal(0.0, pct * span, signal.shape)


def _pre_drift_span(values: np.ndarray, at_sample: int) -> float:
    head = values[:max(at_sample, 1)]
    span = float(np.max(head) - np.min(head))
    return span if span > 0 else max(abs(float(np.mean(head))), 1.0)


def _contention_series(spec: ScenarioSpec, n: int) -> np.ndarray:
    throttle = spec.stimulus.param("throttle")
    if spec.stimulus.kind == StimulusKind.LOAD:
        return np.zeros(n)
    if spec.stimulus.kind == StimulusKind.RESOURCE:
        rng = np.random.default_rng([spec.seed, 2])
        return throttle * _pattern_unit(spec.pattern, n, spec.interval_ms, rng, spec.stimulus)
    # Mixed: load follows the pattern, contention changes in random stages
    rng = np.random.default_rng([spec.seed, 2])
    return throttle * _pattern_unit(Pattern.STAGE_RANDOM_B, n, spec.interval_ms, rng, spec.stimulus)


def generate(spec: ScenarioSpec, drift: Optional[DriftInjection] = None) -> List[TraceRecord]:
    """
    Generate a synthetic trace.

    Args:
        spec (ScenarioSpec): The scenario
        drift (Optional[DriftInjection]): Regime change applied from drift.at_sample on

    Returns:
        List[TraceRecord]: One record per interval, features named '<vnf>.<family>',
        KPIs throughput_mbps and latency_us

    Raises:
        InvalidSpec: If the scenario or the drift is invalid
    """
    spec.validate()
    n = spec.num_samples
    if drift is not None:
        drift.validate(n)
    stimulus = spec.stimulus

    if spec.stimulus.kind == StimulusKind.RESOURCE:
        level = stimulus.param("rate_min") + stimulus.param("level") * (stimulus.param("rate_max") - stimulus.param("rate_min"))
        load = np.full(n, level)
    else:
        load = imix_rate_series(spec.pattern, spec.duration_s, spec.interval_ms, spec.seed, stimulus.params)

    contention = _contention_series(spec, n)
    knee = stimulus.param("knee") * (1.0 - contention)
    miss_factor = 1.0 + stimulus.param("miss_gain") * contention

    vnfs = spec.service.vnf_names
    topology = spec.service.topology
    shares = np.tile(service_shares(topology, len(vnfs)), (n, 1))

    if drift is not None:
        post = slice(drift.at_sample, None)
        m = drift.magnitude
        if drift.kind == DriftKind.TOPOLOGY_SWAP:
            swapped = Topology.DAG1 if topology == Topology.LINEAR else Topology.LINEAR
            shares[post] = service_shares(swapped, len(vnfs))
            knee[post] = knee[post] / (1.0 + 0.25 * m)
        elif drift.kind == DriftKind.CONTENTION_ONSET:
            knee[post] = knee[post] / (1.0 + 0.5 * m)
            miss_factor[post] = miss_factor[post] * (1.0 + m)

    processed = np.minimum(load, knee)
    packets = _packets(processed, spec.interval_ms)
    interval_s = spec.interval_ms / 1000.0
    noise_pct = stimulus.param("noise_pct")
    noise_rng = np.random.default_rng([spec.seed, 1])
    upto = drift.at_sample if drift is not None and drift.at_sample > 1 else None

    columns: Dict[str, np.ndarray] = {}
    for index, vnf in enumerate(vnfs):
        profile = VnfProfile.for_name(vnf)
        vnf_packets = packets * shares[:, index]
        for family in COUNTER_FAMILIES:
            signal = profile.per_packet[family] * vnf_packets
            if family in CACHE_MISS_FAMILIES:
                signal = signal * miss_factor
            if family == "cycles":
                # Busy polling keeps the core saturated regardless of load
                values = _CPU_HZ * interval_s + signal + _noise(noise_rng, signal, _CYCLES_NOISE_RATIO, upto)
            else:
                values = signal + _noise(noise_rng, signal, noise_pct, upto)
            columns[f"{vnf}.{family}"] = values

    throughput_clean = processed
    residual = np.maximum(knee - load, 0.02 * knee)
    base_latency = stimulus.param("base_latency_us")
    latency_clean = np.minimum(stimulus.param("latency_ceiling_us"), base_latency * knee / residual)
    throughput = throughput_clean + _noise(noise_rng, throughput_clean, noise_pct, upto)
    latency = latency_clean + _noise(noise_rng, latency_clean, noise_pct, upto)

    if drift is not None and drift.kind in (DriftKind.AFFINE_SHIFT, DriftKind.TOPOLOGY_SWAP):
        factor = drift.magnitude if drift.kind == DriftKind.AFFINE_SHIFT else 0.5 * drift.magnitude
        for name, values in columns.items():
            values[drift.at_sample:] += factor * _pre_drift_span(values, drift.at_sample)

    names = sorted(columns)
    records = []
    for k in range(n):
        features = {name: round(float(columns[name][k]), 6) for name in names}
        kpis = {THROUGHPUT_KPI: round(float(throughput[k]), 6), LATENCY_KPI: round(float(latency[k]), 6)}
        records.append(TraceRecord(k * spec.interval_ms, features, kpis))

    logger.debug(f"Generated {n} samples for {len(vnfs)} VNFs ({spec.pattern.value}, seed {spec.seed})")
    return records


# Scenario catalog: service graphs x stimulus/pattern combinations

SERVICE_GRAPHS: Dict[str, ServiceSpec] = {
    "bridge": ServiceSpec(("bridge", "l2fwd"), Topology.LINEAR),
    "chain3": ServiceSpec(("fw", "nat", "l3fwd"), Topology.LINEAR),
    "dag1": ServiceSpec(("lb", "fw_a", "fw_b", "nat"), Topology.DAG1),
    "dag2": ServiceSpec(("lb", "ids", "fw", "nat", "l3fwd"), Topology.DAG2),
}

STIMULI: Dict[str, Tuple[StimulusKind, Pattern]] = {
    "load_A": (StimulusKind.LOAD, Pattern.PERIODIC_A),
    "load_B": (StimulusKind.LOAD, Pattern.STAGE_RANDOM_B),
    "resource_B": (StimulusKind.RESOURCE, Pattern.STAGE_RANDOM_B),
    "mixed_A": (StimulusKind.MIXED, Pattern.PERIODIC_A),
}


def preset_names() -> List[str]:
    return [f"{graph}-{stimulus}" for graph in SERVICE_GRAPHS for stimulus in STIMULI]


def preset(name: str, seed: int = 0, duration_s: int = 600, interval_ms: int = 1000) -> ScenarioSpec:
    """
    Look up a catalog scenario such as 'chain3-load_A'.

    Raises:
        InvalidSpec: If the name is not in the catalog
    """
    graph, _, stimulus = name.partition("-")
    if graph not in SERVICE_GRAPHS or stimulus not in STIMULI:
        raise InvalidSpec(f"Unknown preset '{name}'", details={"presets": preset_names()})
    kind, pattern = STIMULI[stimulus]
    return ScenarioSpec(SERVICE_GRAPHS[graph], StimulusSpec(kind, {}), pattern,
                        seed, duration_s, interval_ms).validate()


def _load_document(path: str) -> Dict[str, Any]:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise InvalidSpec(f"{path} is not valid JSON: {e.msg}", details={"line": e.lineno}) from e
    except OSError as e:
        raise handle_file_system_error(e, path) from e


# Functions for the drst CLI

def gen_cli(args: List[str]) -> int:
    """
    Generate a synthetic trace, called by the drst script.

    Args:
        args: Command-line arguments

    Returns:
        int: Exit code
    """
    from drst.cli import build_parser

    parser = build_parser("drst gen", "Generate a synthetic counter trace")
    source = parser.add_mutually_exclusive_group()
    source.add_argument("--spec", help="Scenario JSON document")
    source.add_argument("--preset", help="Catalog scenario name")
    source.add_argument("--list-presets", action="store_true", help="List catalog scenarios")
    parser.add_argument("--drift", help="Drift injection JSON document")
    parser.add_argument("--seed", type=int, help="Override the scenario seed")
    parser.add_argument("--duration", type=int, help="Override duration_s")
    parser.add_argument("--interval-ms", type=int, help="Override interval_ms")
    parser.add_argument("-o", "--output", help="Output trace path (default: stdout)")
    options = parser.parse_args(args)

    if options.list_presets:
        for name in preset_names():
            print(name)
        return 0

    if options.spec:
        spec = ScenarioSpec.from_dict(_load_document(options.spec))
    elif options.preset:
        spec = preset(options.preset)
    else:
        raise UsageError("One of --spec, --preset or --list-presets is required")

    overrides = {
        "seed": options.seed,
        "duration_s": options.duration,
        "interval_ms": options.interval_ms,
    }
    document = spec.to_dict()
    document.update({k: v for k, v in overrides.items() if v is not None})
    spec = ScenarioSpec.from_dict(document)

    drift = DriftInjection.from_dict(_load_document(options.drift)) if options.drift else None
    records = generate(spec, drift)

    if options.output:
        write_trace(options.output, records)
        logger.info(f"Wrote {len(records)} records to {options.output}")
    else:
        write_trace(sys.stdout, records)
    return 0

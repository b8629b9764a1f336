"""Deterministic highway simulation with event trace and metrics."""

from .metrics import MetricsAccumulator, MetricsReport, metrics_from_records
from .scenario import Scenario, SpeedClass, load_scenario, scenario_from_dict
from .trace import EventRecord, EventTrace, parse_trace, read_trace, trace_bytes, trace_digest
from .world import World, flooding_transmissions, relay_route, run

__all__ = [
    "EventRecord",
    "EventTrace",
    "MetricsAccumulator",
    "MetricsReport",
    "Scenario",
    "SpeedClass",
    "World",
    "flooding_transmissions",
    "load_scenario",
    "metrics_from_records",
    "parse_trace",
    "read_trace",
    "relay_route",
    "run",
    "scenario_from_dict",
    "trace_bytes",
    "trace_digest",
]

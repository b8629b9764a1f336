"""Metrics derived purely from trace records.

The simulator feeds records to a :class:`MetricsAccumulator` as it emits
them; replay feeds the parsed trace to a fresh one.  Both must agree.
"""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable

FLOW_OF_KIND = {
    "I2V-BCAST": "i2v",
    "INTRA": "intra",
    "INTER": "inter",
    "JOIN-REQ": "join",
    "KEY-DELIVERY": "join",
}
FLOWS = ("i2v", "v2i", "intra", "inter", "join")


def _flow_stats() -> dict[str, Any]:
    return {"runs": 0, "successes": 0, "rejects": {}, "dropped": {}}


@dataclass
class SearchStats:
    count: int = 0
    total: int = 0
    max: int = 0

    def add(self, trials: int) -> None:
        self.count += 1
        self.total += trials
        self.max = max(self.max, trials)

    @property
    def mean(self) -> float:
        return self.total / self.count if self.count else 0.0


@dataclass
class MetricsReport:
    protocols: dict[str, dict[str, Any]]
    search_tree: dict[str, float]
    search_flat: dict[str, float]
    anonymity_histogram: dict[str, int]
    dissemination: dict[str, float]
    group_events: dict[str, int]
    tamper: dict[str, int]
    audit: dict[str, int]
    messages_sent: dict[str, int]
    leader_checks: int = 0

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> MetricsReport:
        return cls(**data)

    def render_table(self) -> str:
        lines = ["flow    runs  successes  rejects  dropped"]
        for flow in FLOWS:
            s = self.protocols[flow]
            lines.append(f"{flow:<6}{s['runs']:>6}{s['successes']:>11}{sum(s['rejects'].values()):>9}"
                         f"{sum(s['dropped'].values()):>9}")
        lines.append("")
        lines.append("search      count      mean   max")
        for name, st in (("tree", self.search_tree), ("flat", self.search_flat)):
            lines.append(f"{name:<8}{st['count']:>9}{st['mean']:>10.2f}{st['max']:>6}")
        lines.append("")
        d = self.dissemination
        lines.append(f"dissemination events {d['events']}  relay tx {d['relay_total']}  flood tx {d['flood_total']}"
                     f"  mean relay/flood {d['mean_ratio']:.3f}  violations {d['violations']}")
        hist = ", ".join(f"{k}:{v}" for k, v in sorted(self.anonymity_histogram.items(), key=lambda kv: int(kv[0])))
        lines.append(f"anonymity sets  {hist or '-'}")
        lines.append("groups  " + "  ".join(f"{k} {v}" for k, v in sorted(self.group_events.items())))
        lines.append("tamper  " + "  ".join(f"{k} {v}" for k, v in sorted(self.tamper.items())))
        lines.append("audit   " + "  ".join(f"{k} {v}" for k, v in sorted(self.audit.items())))
        lines.append(f"leader checks  {self.leader_checks}")
        return "\n".join(lines)


@dataclass
class MetricsAccumulator:
    flows: dict[str, dict[str, Any]] = field(default_factory=lambda: {f: _flow_stats() for f in FLOWS})
    tree: SearchStats = field(default_factory=SearchStats)
    flat: SearchStats = field(default_factory=SearchStats)
    anonymity: Counter = field(default_factory=Counter)
    diss_events: int = 0
    relay_total: int = 0
    flood_total: int = 0
    ratio_sum: float = 0.0
    violations: int = 0
    group_events: Counter = field(default_factory=Counter)
    tamper: Counter = field(default_factory=Counter)
    audit: Counter = field(default_factory=Counter)
    sent: Counter = field(default_factory=Counter)
    leader_checks: int = 0

    def feed(self, rec: dict[str, Any]) -> None:
        kind, data, outcome = rec["kind"], rec["data"], rec["outcome"]
        if kind == "send":
            self.sent[data["kind"]] += 1
        elif kind == "recv":
            self._recv(data, outcome)
        elif kind == "v2i":
            self._v2i(data, outcome)
        elif kind == "dissemination":
            self.diss_events += 1
            self.relay_total += data["relay_tx"]
            self.flood_total += data["flood_tx"]
            self.ratio_sum += data["relay_tx"] / data["flood_tx"]
            self.violations += data["relay_tx"] > data["flood_tx"]
        elif kind == "group":
            self.group_events[outcome] += 1
        elif kind == "audit":
            self.audit["inter_checked"] += 1
            self.audit["open_failures"] += not data["open_ok"]
            self.audit["id_leaks"] += not data["id_free"]
        elif kind == "run_end":
            self.leader_checks += data.get("leader_checks", 0)

    def _recv(self, data: dict[str, Any], outcome: str) -> None:
        if data["tampered"]:
            self.tamper["tampered"] += 1
            self.tamper[f"tampered_{outcome}"] += 1
        flow = FLOW_OF_KIND.get(data["kind"])
        if flow is None:  # V2I messages are accounted per handshake
            return
        stats = self.flows[flow]
        if outcome == "dropped":
            stats["dropped"][data["cause"]] = stats["dropped"].get(data["cause"], 0) + 1
            return
        stats["runs"] += 1
        if outcome == "accepted":
            stats["successes"] += 1
        else:
            stats["rejects"][data["cause"]] = stats["rejects"].get(data["cause"], 0) + 1

    def _v2i(self, data: dict[str, Any], outcome: str) -> None:
        stats = self.flows["v2i"]
        stats["runs"] += 1
        if outcome == "success":
            stats["successes"] += 1
            self.anonymity[str(data["anonymity"])] += 1
        else:
            stats["rejects"][data["cause"]] = stats["rejects"].get(data["cause"], 0) + 1
        primary = self.flat if data["variant"] == "flat" else self.tree
        if data["trial_count"] is not None:
            primary.add(data["trial_count"])
        if data.get("flat_trial_count") is not None:
            self.flat.add(data["flat_trial_count"])

    def report(self) -> MetricsReport:
        def search(st: SearchStats) -> dict[str, float]:
            return {"count": st.count, "total": st.total, "mean": st.mean, "max": st.max}

        tamper = {"tampered": 0, "tampered_accepted": 0, "tampered_rejected": 0, "tampered_dropped": 0}
        tamper.update(self.tamper)
        audit = {"inter_checked": 0, "open_failures": 0, "id_leaks": 0}
        audit.update(self.audit)
        return MetricsReport(
            protocols={f: {**s, "rejects": dict(sorted(s["rejects"].items())), "dropped": dict(sorted(s["dropped"].items()))}
                       for f, s in self.flows.items()},
            search_tree=search(self.tree),
            search_flat=search(self.flat),
            anonymity_histogram=dict(sorted(self.anonymity.items(), key=lambda kv: int(kv[0]))),
            dissemination={
                "events": self.diss_events,
                "relay_total": self.relay_total,
                "flood_total": self.flood_total,
                "mean_ratio": self.ratio_sum / self.diss_events if self.diss_events else 0.0,
                "violations": self.violations,
            },
            group_events=dict(sorted(self.group_events.items())),
            tamper=tamper,
            audit=audit,
            messages_sent=dict(sorted(self.sent.items())),
            leader_checks=self.leader_checks,
        )


def metrics_from_records(records: Iterable[dict[str, Any]]) -> MetricsReport:
    acc = MetricsAccumulator()
    for rec in records:
        acc.feed(rec)
    return acc.report()

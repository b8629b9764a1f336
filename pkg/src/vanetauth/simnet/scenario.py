"""Scenario configuration: TOML text with nested sections."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ..errors import ConfigError, UnsupportedComm
from ..keytree import pool_size
from ..protocols import TABLE1_PROFILES, ApplicationProfile, CommType, select_mechanism


@dataclass(frozen=True)
class SpeedClass:
    name: str
    min_speed: float  # m/s
    max_speed: float
    cell_length: float  # m
    share: float = 1.0


@dataclass(frozen=True)
class Scenario:
    name: str = "scenario"
    seed: int = 0
    duration: float = 60.0
    tick: float = 0.1
    road_id: str = "H1"
    road_length: float = 3000.0
    lanes: int = 3
    boundary: str = "wrap"  # wrap | exit
    vehicle_count: int = 50
    speed_classes: tuple[SpeedClass, ...] = (SpeedClass("highway", 25.0, 35.0, 200.0),)
    radio_range: float = 250.0
    mean_moving: float = 120.0  # s, exponential on-period
    mean_stopped: float = 8.0  # s, exponential off-period
    branching: tuple[int, ...] = (4, 4, 4)
    k: int = 6
    variant: str = "tree"  # tree | flat | both
    rsu_positions: tuple[float, ...] = (1500.0,)
    tamper_rate: float = 0.0
    i2v_interval: float = 2.0
    v2i_rate: float = 0.05  # per vehicle-second while in range without a session
    session_ttl: float = 30.0
    intra_rate: float = 0.02
    inter_rate: float = 0.02
    profile_i2v: str = "Work zone warning"
    profile_v2i: str = "Emergency vehicle signal"
    profile_intra: str = "Cooperative driving"
    profile_inter: str = "Forward collision warning"
    extra_profiles: tuple[ApplicationProfile, ...] = ()
    break_leader_at: float | None = None  # test hook: corrupt a leader at this time

    def profiles(self) -> dict[str, ApplicationProfile]:
        out = dict(TABLE1_PROFILES)
        out.update({p.name: p for p in self.extra_profiles})
        return out

    def profile(self, flow: str) -> ApplicationProfile:
        return self.profiles()[getattr(self, f"profile_{flow}")]

    @property
    def ticks(self) -> int:
        return int(round(self.duration / self.tick))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True, default=str).encode()).hexdigest()[:16]

    def with_(self, **changes: Any) -> Scenario:
        out = replace(self, **changes)
        out.validate()
        return out

    def validate(self) -> None:
        positive = {
            "duration": self.duration, "tick": self.tick, "road_length": self.road_length,
            "lanes": self.lanes, "vehicle_count": self.vehicle_count, "radio_range": self.radio_range,
            "mean_moving": self.mean_moving, "mean_stopped": self.mean_stopped, "k": self.k,
            "session_ttl": self.session_ttl, "i2v_interval": self.i2v_interval,
        }
        for name, value in positive.items():
            if not value > 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        for name in ("v2i_rate", "intra_rate", "inter_rate"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0 <= self.tamper_rate <= 1:
            raise ConfigError("tamper_rate must lie in [0, 1]")
        if self.boundary not in ("wrap", "exit"):
            raise ConfigError(f"boundary must be 'wrap' or 'exit', got {self.boundary!r}")
        if self.variant not in ("tree", "flat", "both"):
            raise ConfigError(f"variant must be tree, flat or both, got {self.variant!r}")
        if not self.speed_classes:
            raise ConfigError("at least one speed class is required")
        for sc in self.speed_classes:
            if not 0 < sc.min_speed <= sc.max_speed or sc.cell_length <= 0 or sc.share <= 0:
                raise ConfigError(f"bad speed class {sc.name!r}")
        if len(self.branching) < 1 or any(b < 2 for b in self.branching):
            raise ConfigError(f"bad branching {self.branching}")
        c = len(self.branching)
        if self.variant == "flat":
            if not c <= self.k <= pool_size(self.branching):
                raise ConfigError(f"flat key-rings need {c} <= k <= {pool_size(self.branching)}, got k={self.k}")
        elif self.k % c or self.k // c > self.branching[0]:
            raise ConfigError(f"k={self.k} must be a multiple of c={c} with k/c <= {self.branching[0]}")
        if any(not 0 <= p <= self.road_length for p in self.rsu_positions):
            raise ConfigError("RSU positions must lie on the road")
        profiles = self.profiles()
        for flow, comm, same_group in (("i2v", "I2V", True), ("v2i", "V2I", True), ("intra", "V2V", True), ("inter", "V2V", False)):
            name = getattr(self, f"profile_{flow}")
            if name not in profiles:
                raise ConfigError(f"unknown application profile {name!r}")
            try:
                select_mechanism(profiles[name], comm, same_group)
            except UnsupportedComm as exc:
                raise ConfigError(f"profile for {flow} flow: {exc}") from None


def _section(data: dict, name: str) -> dict:
    sec = data.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    return sec


def scenario_from_dict(data: dict[str, Any]) -> Scenario:
    try:
        road = _section(data, "road")
        vehicles = _section(data, "vehicles")
        mobility = _section(data, "mobility")
        tree = _section(data, "keytree")
        rsu = _section(data, "rsu")
        traffic = _section(data, "traffic")
        profiles = _section(data, "profiles")
        debug = _section(data, "debug")
        d = Scenario()
        classes = tuple(
            SpeedClass(name, float(sc["min"]), float(sc["max"]), float(sc["cell_length"]), float(sc.get("share", 1.0)))
            for name, sc in _section(data, "speed_classes").items()
        ) or d.speed_classes
        extra = tuple(
            ApplicationProfile(
                name,
                frozenset(CommType(c) for c in p["comm_types"]),
                bool(p.get("multihop", False)),
                bool(p.get("authentication", True)),
                bool(p.get("integrity", True)),
                bool(p.get("privacy", True)),
                bool(p.get("confidential", False)),
            )
            for name, p in _section(profiles, "custom").items()
        )
        scenario = Scenario(
            name=str(data.get("name", d.name)),
            seed=int(data.get("seed", d.seed)),
            duration=float(data.get("duration", d.duration)),
            tick=float(data.get("tick", d.tick)),
            road_id=str(road.get("id", d.road_id)),
            road_length=float(road.get("length", d.road_length)),
            lanes=int(road.get("lanes", d.lanes)),
            boundary=str(road.get("boundary", d.boundary)),
            vehicle_count=int(vehicles.get("count", d.vehicle_count)),
            speed_classes=classes,
            radio_range=float(data.get("radio_range", d.radio_range)),
            mean_moving=float(mobility.get("mean_moving", d.mean_moving)),
            mean_stopped=float(mobility.get("mean_stopped", d.mean_stopped)),
            branching=tuple(int(b) for b in tree.get("branching", d.branching)),
            k=int(tree.get("k", d.k)),
            variant=str(data.get("variant", tree.get("variant", d.variant))),
            rsu_positions=tuple(float(p) for p in rsu.get("positions", d.rsu_positions)),
            tamper_rate=float(data.get("tamper_rate", d.tamper_rate)),
            i2v_interval=float(traffic.get("i2v_interval", d.i2v_interval)),
            v2i_rate=float(traffic.get("v2i_rate", d.v2i_rate)),
            session_ttl=float(traffic.get("session_ttl", d.session_ttl)),
            intra_rate=float(traffic.get("intra_rate", d.intra_rate)),
            inter_rate=float(traffic.get("inter_rate", d.inter_rate)),
            profile_i2v=str(profiles.get("i2v", d.profile_i2v)),
            profile_v2i=str(profiles.get("v2i", d.profile_v2i)),
            profile_intra=str(profiles.get("intra", d.profile_intra)),
            profile_inter=str(profiles.get("inter", d.profile_inter)),
            extra_profiles=extra,
            break_leader_at=float(debug["break_leader_at"]) if "break_leader_at" in debug else None,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad scenario: {exc!r}") from None
    scenario.validate()
    return scenario


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario {path}: {exc.strerror}") from None
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return scenario_from_dict(data)

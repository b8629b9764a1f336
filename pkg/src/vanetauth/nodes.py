"""Simulated principals: vehicles (OBUs) and road-side units."""

from __future__ import annotations

from dataclasses import dataclass, field

from .crypto import GroupCredential, KeyPair, SymmetricKey
from .keytree import KeyRing


@dataclass(eq=False)
class Vehicle:
    id: str
    keypair: KeyPair
    position: float = 0.0
    speed: float = 0.0
    speed_class: str = "default"
    lane: int = 0
    keyring: KeyRing | None = None
    cruise_speed: float = 0.0
    moving: bool = True
    # group state as installed by key delivery
    group_id: str | None = None
    group_key: SymmetricKey | None = None
    epoch: int = -1
    credential: GroupCredential | None = None
    history: list[tuple[str, float]] = field(default_factory=list)
    sessions: dict[str, SymmetricKey] = field(default_factory=dict)
    seen: set[str] = field(default_factory=set)

    def clear_group(self) -> None:
        self.group_id = None
        self.group_key = None
        self.epoch = -1
        self.credential = None


@dataclass(eq=False)
class RSU:
    id: str  # also the IBS identity string
    position: float
    keypair: KeyPair
    ibs_handle: str
    sessions: dict[str, SymmetricKey] = field(default_factory=dict)

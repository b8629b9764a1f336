"""Cell-bound vehicle groups: formation, joining, leader election and rekeying.

A group lives in one cell of the highway.  Its leader is the member with
the longest tenure; the leader authenticates newcomers by their public-key
signature, hands them the shared group key encrypted to their public key,
and issues their group-signature credential.  Departures and leader changes
trigger a rekey (new epoch, new key, new group-signature public handle).
"""

from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterator

from .crypto import Ciphertext, CryptoProvider, GroupCredential, SchemeTag, SymmetricKey
from .envelope import Envelope, MsgKind
from .errors import BadSignature, EmptyGroup, NotMember, OffRoad, UnknownGroup, WrongCell
from .nodes import Vehicle


@dataclass(frozen=True)
class Road:
    id: str
    length: float
    cell_lengths: dict[str, float]  # speed class -> cell length (m)

    def __post_init__(self):
        if self.length <= 0:
            raise ValueError("road length must be positive")
        if any(cl <= 0 for cl in self.cell_lengths.values()):
            raise ValueError("cell lengths must be positive")


@dataclass(frozen=True, order=True)
class Cell:
    road_id: str
    index: int
    speed_class: str

    @property
    def group_id(self) -> str:
        return f"{self.road_id}/{self.speed_class}/{self.index}"


def cell_of(road: Road, position: float, speed_class: str) -> Cell:
    """Static segment containing ``position``; a boundary opens the higher cell.

    The far end of the road (``position == road.length``) is accepted.
    """
    if not 0 <= position <= road.length:
        raise OffRoad(f"position {position} outside [0, {road.length}] on {road.id}")
    try:
        cell_length = road.cell_lengths[speed_class]
    except KeyError:
        raise OffRoad(f"road {road.id} has no cells for speed class {speed_class!r}") from None
    return Cell(road.id, int(position // cell_length), speed_class)


@dataclass
class MembershipRecord:
    vehicle_id: str
    join_time: float
    credential: GroupCredential | None = None
    has_group_key: bool = False

    def tenure(self, now: float) -> float:
        return now - self.join_time


@dataclass(eq=False)
class Group:
    cell: Cell
    leader: str
    group_key: SymmetricKey
    group_public_handle: str
    epoch: int = 0
    members: dict[str, MembershipRecord] = field(default_factory=dict)

    @property
    def id(self) -> str:
        return self.cell.group_id


def elect_leader(group: Group, now: float) -> str:
    """Longest tenure wins; equal tenure goes to the smallest vehicle id."""
    if not group.members:
        raise EmptyGroup(group.id)
    best = min(group.members.values(), key=lambda r: (-r.tenure(now), r.vehicle_id))
    return best.vehicle_id


class GroupDirectory:
    """Global map of group id to the current group-signature public handle."""

    def __init__(self):
        self._handles: dict[str, str] = {}

    def publish(self, group_id: str, handle: str) -> None:
        self._handles[group_id] = handle

    def withdraw(self, group_id: str) -> None:
        self._handles.pop(group_id, None)

    def lookup(self, group_id: str) -> str:
        try:
            return self._handles[group_id]
        except KeyError:
            raise UnknownGroup(group_id) from None

    def __contains__(self, group_id: str) -> bool:
        return group_id in self._handles


@dataclass(frozen=True)
class GroupEvent:
    time: float
    kind: str  # formed | joined | left | handover | rekey | dissolved
    group_id: str
    epoch: int
    actor: str


def _counter_ids(prefix: str = "g") -> Callable[[], str]:
    it = itertools.count(1)
    return lambda: f"{prefix}{next(it):07d}"


class GroupService:
    """Runs the membership handshakes against one crypto provider.

    Lifecycle events accumulate in ``events`` until the caller drains them.
    """

    def __init__(
        self,
        provider: CryptoProvider,
        road: Road,
        directory: GroupDirectory | None = None,
        next_msg_id: Callable[[], str] | None = None,
    ):
        self.provider = provider
        self.road = road
        self.directory = directory if directory is not None else GroupDirectory()
        self.next_msg_id = next_msg_id or _counter_ids()
        self.events: list[GroupEvent] = []
        self._vehicles: dict[str, Vehicle] = {}

    def drain_events(self) -> list[GroupEvent]:
        out, self.events = self.events, []
        return out

    def _emit(self, now: float, kind: str, group: Group, actor: str) -> None:
        self.events.append(GroupEvent(now, kind, group.id, group.epoch, actor))

    # -- key delivery -------------------------------------------------------

    def _deliver_key(self, group: Group, vehicle: Vehicle, credential: GroupCredential, now: float) -> Envelope:
        meta = f"{group.group_key.key_id}|{group.group_public_handle}|{credential.member_private_handle}"
        plain = group.group_key.secret + struct.pack(">q", group.epoch) + meta.encode()
        ct = self.provider.pk_encrypt(vehicle.keypair.public_handle, plain)
        env = Envelope(self.next_msg_id(), MsgKind.KEY_DELIVERY, group.id, ct.data,
                       {"to": vehicle.id}, (group.leader, vehicle.id), now)
        install_key_delivery(self.provider, vehicle, env)
        rec = group.members[vehicle.id]
        rec.credential = credential
        rec.has_group_key = True
        return env

    def _install_leader(self, group: Group, vehicle: Vehicle, credential: GroupCredential) -> None:
        vehicle.group_id = group.id
        vehicle.group_key = group.group_key
        vehicle.epoch = group.epoch
        vehicle.credential = credential
        rec = group.members[vehicle.id]
        rec.credential = credential
        rec.has_group_key = True

    # -- lifecycle ------------------------------------------------------------

    def create_group(self, cell: Cell, founder: Vehicle, now: float) -> Group:
        key = self.provider.gen_symmetric_key("gk")
        gpk = self.provider.group_setup(founder.id)
        group = Group(cell, founder.id, key, gpk)
        group.members[founder.id] = MembershipRecord(founder.id, now)
        self._vehicles[founder.id] = founder
        self._install_leader(group, founder, self.provider.group_issue(gpk, founder.id, founder.id))
        founder.history.append((group.id, now))
        self.directory.publish(group.id, gpk)
        self._emit(now, "formed", group, founder.id)
        return group

    def join_request(self, vehicle: Vehicle, group: Group, now: float) -> Envelope:
        payload = f"{vehicle.id}|{vehicle.keypair.public_handle}|{group.id}".encode()
        env = Envelope(self.next_msg_id(), MsgKind.JOIN_REQ, vehicle.id, payload, {}, (vehicle.id,), now)
        sig = self.provider.sign(vehicle.keypair.private_handle, env.bound_bytes())
        return Envelope(env.msg_id, env.kind, env.sender_hint, payload, {"sig": sig}, env.hop_path, now)

    def admit(self, group: Group, vehicle: Vehicle, request: Envelope, now: float) -> list[Envelope]:
        """Leader side of the join handshake; returns the transcript."""
        if cell_of(self.road, vehicle.position, vehicle.speed_class) != group.cell:
            raise WrongCell(f"{vehicle.id} is not in cell {group.id}")
        try:
            vid, pk, gid = request.payload.decode().split("|")
        except ValueError:
            raise BadSignature("malformed join request") from None
        sig = request.auth.get("sig")
        if (vid != vehicle.id or gid != group.id or pk != vehicle.keypair.public_handle or sig is None
                or not self.provider.verify(pk, request.bound_bytes(), sig)):
            raise BadSignature(f"join request from {vehicle.id} rejected")
        group.members[vehicle.id] = MembershipRecord(vehicle.id, now)
        self._vehicles[vehicle.id] = vehicle
        credential = self.provider.group_issue(group.group_public_handle, vehicle.id, group.leader)
        transcript = [request.with_hop(group.leader), self._deliver_key(group, vehicle, credential, now)]
        vehicle.history.append((group.id, now))
        self._emit(now, "joined", group, vehicle.id)
        if elect_leader(group, now) != group.leader:
            transcript += self.handover_and_rekey(group, now)
        return transcript

    def join_group(self, group: Group, vehicle: Vehicle, now: float) -> list[Envelope]:
        return self.admit(group, vehicle, self.join_request(vehicle, group, now), now)

    def leave_group(self, group: Group, vehicle: Vehicle, now: float) -> list[Envelope]:
        """Remove ``vehicle``; rekeys the remaining members (empty list if dissolved)."""
        if vehicle.id not in group.members:
            raise NotMember(f"{vehicle.id} not in {group.id}")
        del group.members[vehicle.id]
        self._vehicles.pop(vehicle.id, None)
        vehicle.clear_group()
        self.provider.group_revoke(group.group_public_handle, vehicle.id, group.leader)
        self._emit(now, "left", group, vehicle.id)
        if not group.members:
            self.directory.withdraw(group.id)
            self._emit(now, "dissolved", group, vehicle.id)
            return []
        return self.handover_and_rekey(group, now)

    def handover_and_rekey(self, group: Group, now: float) -> list[Envelope]:
        new_leader = elect_leader(group, now)
        if new_leader != group.leader:
            group.leader = new_leader
            self._emit(now, "handover", group, new_leader)
        group.epoch += 1
        group.group_key = self.provider.gen_symmetric_key("gk")
        group.group_public_handle = self.provider.group_setup(new_leader)
        self.directory.publish(group.id, group.group_public_handle)
        transcript = []
        for vid in sorted(group.members):
            credential = self.provider.group_issue(group.group_public_handle, vid, new_leader)
            vehicle = self._vehicles[vid]
            if vid == new_leader:
                self._install_leader(group, vehicle, credential)
            else:
                transcript.append(self._deliver_key(group, vehicle, credential, now))
        self._emit(now, "rekey", group, new_leader)
        return transcript

    def vehicle(self, vehicle_id: str) -> Vehicle:
        return self._vehicles[vehicle_id]

    def member_vehicles(self, group: Group) -> Iterator[Vehicle]:
        for vid in sorted(group.members):
            yield self._vehicles[vid]


def install_key_delivery(provider: CryptoProvider, vehicle: Vehicle, env: Envelope) -> None:
    """Member side of key delivery: decrypt and install key, epoch and credential."""
    plain = provider.pk_decrypt(vehicle.keypair.private_handle, Ciphertext(env.payload, SchemeTag.PK_ENC))
    (epoch,) = struct.unpack(">q", plain[16:24])
    key_id, gpk, handle = plain[24:].decode().split("|")
    vehicle.group_id = env.sender_hint
    vehicle.group_key = SymmetricKey(key_id, plain[:16])
    vehicle.epoch = epoch
    vehicle.credential = GroupCredential(gpk, handle, vehicle.id)

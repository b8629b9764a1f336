"""Time-stepped highway world: mobility, radio, groups and protocol traffic."""

from __future__ import annotations

import hashlib
import itertools
import math
import random
from collections import deque
from typing import Any, Callable, Iterable

from ..crypto import ModelledProvider
from ..envelope import Envelope, MsgKind
from ..errors import InvariantViolation, VanetAuthError, KeyTreeError, NoPathFound, Rejected, StaleTimestamp
from ..groups import Group, GroupDirectory, GroupService, Road, cell_of, elect_leader
from ..keytree import AnonymityIndex, assign_flat_keyring, assign_keyring, build_tree
from ..nodes import RSU, Vehicle
from ..protocols import (
    dispute_open,
    i2v_broadcast,
    i2v_receive,
    inter_deliver,
    inter_route,
    inter_send,
    intra_receive,
    intra_send,
    serialized_mentions,
    v2i_authenticate,
)
from .metrics import MetricsAccumulator, MetricsReport
from .scenario import Scenario
from .trace import EventRecord, EventTrace


def stream(seed: int, name: str) -> random.Random:
    """Independent, reproducible RNG stream for one concern of the run."""
    digest = hashlib.sha256(f"{seed}/{name}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def in_range(a: float, b: float, radio_range: float) -> bool:
    return abs(a - b) <= radio_range


def flooding_transmissions(
    source_pos: float, nodes: dict[str, float], radio_range: float, source_id: str | None = None
) -> int:
    """Naive flooding: the source sends, every first-time receiver rebroadcasts once.

    ``source_id`` marks the source as one of ``nodes`` (it does not rebroadcast).
    """
    reached: set[str] = {source_id} if source_id is not None else set()
    queue = deque([source_pos])
    while queue:
        pos = queue.popleft()
        for nid in sorted(nodes):
            if nid not in reached and in_range(pos, nodes[nid], radio_range):
                reached.add(nid)
                queue.append(nodes[nid])
    return 1 + len(reached - {source_id})


def relay_route(start: str, goal: str, nodes: dict[str, float], radio_range: float) -> list[str] | None:
    """Fewest-hop path from ``start`` to ``goal`` through ``nodes`` (BFS, id-ordered)."""
    prev: dict[str, str | None] = {start: None}
    queue = deque([start])
    while queue:
        cur = queue.popleft()
        if cur == goal:
            path = [cur]
            while prev[path[-1]] is not None:
                path.append(prev[path[-1]])
            return path[::-1]
        for nid in sorted(nodes):
            if nid not in prev and in_range(nodes[cur], nodes[nid], radio_range):
                prev[nid] = cur
                queue.append(nid)
    return None


class World:
    """Mutable simulation state advanced by :meth:`step`.

    All randomness comes from per-concern streams derived from the scenario
    seed, and every iteration over nodes is in id order, so a run is a pure
    function of the scenario.
    """

    def __init__(self, scenario: Scenario, on_record: Callable[[dict[str, Any]], None] | None = None):
        scenario.validate()
        self.sc = sc = scenario
        self.rng_setup = stream(sc.seed, "setup")
        self.rng_mobility = stream(sc.seed, "mobility")
        self.rng_traffic = stream(sc.seed, "traffic")
        self.rng_tamper = stream(sc.seed, "tamper")
        self.rng_proto = stream(sc.seed, "protocol")
        self.provider = ModelledProvider(f"{sc.seed}/crypto")
        self.road = Road(sc.road_id, sc.road_length, {c.name: c.cell_length for c in sc.speed_classes})
        self.directory = GroupDirectory()
        self._ids = itertools.count(1)
        self.service = GroupService(self.provider, self.road, self.directory, self.next_msg_id)
        self.groups: dict[str, Group] = {}
        self.trace = EventTrace()
        self.metrics = MetricsAccumulator()
        self._on_record = on_record
        self.tick_index = 0
        self.now = 0.0
        self.leader_checks = 0
        self._broken = False
        self.session_expiry: dict[tuple[str, str], float] = {}
        self.profiles = {flow: sc.profile(flow) for flow in ("i2v", "v2i", "intra", "inter")}

        self.tree = build_tree(sc.branching, self.rng_setup)
        self.vehicles: dict[str, Vehicle] = {}
        self.active: list[str] = []
        self._make_vehicles()
        self.rsus = [
            self._make_rsu(f"RSU-{i:02d}", pos) for i, pos in enumerate(sc.rsu_positions, start=1)
        ]
        self.keyrings = [self.vehicles[vid].keyring for vid in sorted(self.vehicles)]
        self.anonymity = AnonymityIndex(self.tree, self.keyrings)

        self.emit("run_start", "world", data={
            "scenario": sc.name, "scenario_digest": sc.digest(), "seed": sc.seed, "variant": sc.variant,
            "vehicles": sc.vehicle_count, "pool_keys": self.tree.total_keys,
        })
        for vid in self.active:
            self._place(self.vehicles[vid])
        self.check_invariants()

    # -- setup ----------------------------------------------------------------

    def _make_vehicles(self) -> None:
        sc, rng = self.sc, self.rng_setup
        width = max(4, len(str(sc.vehicle_count)))
        weights = [c.share for c in sc.speed_classes]
        for i in range(1, sc.vehicle_count + 1):
            vid = f"veh-{i:0{width}d}"
            cls = rng.choices(sc.speed_classes, weights)[0]
            cruise = rng.uniform(cls.min_speed, cls.max_speed)
            v = Vehicle(vid, self.provider.gen_keypair(), position=rng.uniform(0, sc.road_length),
                        speed=cruise, speed_class=cls.name, lane=rng.randrange(sc.lanes), cruise_speed=cruise)
            if sc.variant == "flat":
                v.keyring = assign_flat_keyring(self.tree, vid, sc.k, rng)
            else:
                v.keyring = assign_keyring(self.tree, vid, sc.k, rng)
            self.vehicles[vid] = v
        self.active = sorted(self.vehicles)

    def _make_rsu(self, rid: str, pos: float) -> RSU:
        return RSU(rid, pos, self.provider.gen_keypair(), self.provider.ibs_extract(rid))

    # -- plumbing --------------------------------------------------------------

    def next_msg_id(self) -> str:
        return f"m{next(self._ids):08d}"

    def emit(self, kind: str, actor: str = "", outcome: str = "", digest: str = "", data: dict | None = None) -> None:
        rec = EventRecord(self.now, kind, actor, digest, outcome, data or {}).to_dict()
        self.trace.append(rec)
        self.metrics.feed(rec)
        if self._on_record is not None:
            self._on_record(rec)

    def _sent(self, env: Envelope, actor: str) -> None:
        self.emit("send", actor, "sent", env.digest(), {"msg_id": env.msg_id, "kind": env.kind.value,
                                                        "envelope": env.to_record()})

    def _received(self, env: Envelope, receiver: str, outcome: str, cause: str = "", tampered: bool = False,
                  msg_id: str | None = None) -> None:
        self.emit("recv", receiver, outcome, env.digest(), {"msg_id": msg_id or env.msg_id, "kind": env.kind.value,
                                                            "cause": cause, "tampered": tampered})

    def _link(self, env: Envelope) -> tuple[Envelope, bool]:
        """One radio hop; flips a payload bit with the configured probability."""
        if self.sc.tamper_rate and self.rng_tamper.random() < self.sc.tamper_rate:
            return env.tampered(self.rng_tamper), True
        return env, False

    def _log_control(self, transcript: Iterable[Envelope]) -> None:
        # group management traffic is modelled as reliable (no range limit, no tampering)
        for env in transcript:
            self._sent(env, env.hop_path[0])
            self._received(env, env.hop_path[-1], "accepted")

    def _log_group_events(self) -> None:
        for ev in self.service.drain_events():
            self.emit("group", ev.actor, ev.kind, data={"group": ev.group_id, "epoch": ev.epoch})

    def _accept_once(self, v: Vehicle, env: Envelope) -> None:
        if env.msg_id in v.seen:
            raise Rejected("duplicate", env.msg_id)
        v.seen.add(env.msg_id)

    # -- groups ------------------------------------------------------------------

    def _place(self, v: Vehicle) -> None:
        """Keep ``v`` in the group of its current cell (leave + join on migration)."""
        cell = cell_of(self.road, v.position, v.speed_class)
        if v.group_id == cell.group_id:
            return
        if v.group_id is not None:
            self._leave(v)
        group = self.groups.get(cell.group_id)
        if group is None:
            self.groups[cell.group_id] = self.service.create_group(cell, v, self.now)
        else:
            self._log_control(self.service.join_group(group, v, self.now))
        self._log_group_events()

    def _leave(self, v: Vehicle) -> None:
        group = self.groups[v.group_id]
        self._log_control(self.service.leave_group(group, v, self.now))
        if not group.members:
            del self.groups[group.id]
        self._log_group_events()

    def check_invariants(self) -> None:
        """Leader, key-confidentiality, cell and credential-epoch invariants."""
        for gid in sorted(self.groups):
            g = self.groups[gid]
            expected = elect_leader(g, self.now)
            if g.leader != expected:
                raise InvariantViolation(f"t={self.now}: {gid} leader {g.leader}, tenure argmax {expected}")
            for vid, rec in g.members.items():
                v = self.vehicles[vid]
                if v.group_id != gid or v.group_key != g.group_key or v.epoch != g.epoch:
                    raise InvariantViolation(f"t={self.now}: {vid} does not hold {gid} epoch {g.epoch} key")
                if cell_of(self.road, v.position, v.speed_class) != g.cell:
                    raise InvariantViolation(f"t={self.now}: {vid} outside cell of {gid}")
                if rec.credential is None or rec.credential.group_public_handle != g.group_public_handle:
                    raise InvariantViolation(f"t={self.now}: {vid} credential not from epoch {g.epoch}")
            self.leader_checks += 1
        for vid in self.active:
            v = self.vehicles[vid]
            g = self.groups.get(v.group_id) if v.group_id else None
            if g is None or vid not in g.members:
                raise InvariantViolation(f"t={self.now}: {vid} holds a key but is not a member")

    def _maybe_break(self) -> None:
        # test hook: deliberately violate the leader invariant once
        if self._broken or self.sc.break_leader_at is None or self.now < self.sc.break_leader_at:
            return
        for g in sorted(self.groups.values(), key=lambda g: g.id):
            others = sorted(m for m in g.members if m != g.leader)
            g.leader = others[0] if others else "ghost"
            self._broken = True
            return

    # -- mobility ---------------------------------------------------------------

    def _move(self) -> None:
        sc, rng, dt = self.sc, self.rng_mobility, self.sc.tick
        p_stop = 1 - math.exp(-dt / sc.mean_moving)
        p_go = 1 - math.exp(-dt / sc.mean_stopped)
        classes = {c.name: c for c in sc.speed_classes}
        exited = []
        for vid in self.active:
            v = self.vehicles[vid]
            if v.moving:
                if rng.random() < p_stop:
                    v.moving, v.speed = False, 0.0
            elif rng.random() < p_go:
                cls = classes[v.speed_class]
                v.moving = True
                v.cruise_speed = v.speed = rng.uniform(cls.min_speed, cls.max_speed)
            v.position += v.speed * dt
            if v.position > sc.road_length or (sc.boundary == "wrap" and v.position == sc.road_length):
                if sc.boundary == "wrap":
                    v.position %= sc.road_length
                else:
                    exited.append(vid)
        for vid in exited:
            self.active.remove(vid)
            v = self.vehicles[vid]
            self._leave(v)
            v.clear_group()

    # -- traffic ------------------------------------------------------------------

    def _i2v(self) -> None:
        every = max(1, round(self.sc.i2v_interval / self.sc.tick))
        if self.tick_index % every:
            return
        profile = self.profiles["i2v"]
        for rsu in self.rsus:
            env = i2v_broadcast(self.provider, rsu, f"{profile.name} @{self.now:.1f}".encode(), self.next_msg_id(), self.now)
            self._sent(env, rsu.id)
            for vid in self.active:
                v = self.vehicles[vid]
                if not in_range(v.position, rsu.position, self.sc.radio_range):
                    continue
                copy, tampered = self._link(env)
                try:
                    self._accept_once(v, copy)
                    i2v_receive(self.provider, copy)
                    self._received(copy, vid, "accepted", tampered=tampered)
                except Rejected as exc:
                    self._received(copy, vid, "rejected", exc.cause, tampered)

    def _v2i(self) -> None:
        p = self.sc.v2i_rate * self.sc.tick
        for vid in self.active:
            v = self.vehicles[vid]
            rsu = self._nearest_rsu(v)
            if rsu is None or self.session_expiry.get((vid, rsu.id), -1.0) > self.now:
                continue
            if self.rng_traffic.random() < p:
                self.authenticate(v, rsu)

    def _nearest_rsu(self, v: Vehicle) -> RSU | None:
        best = None
        for rsu in self.rsus:
            d = abs(v.position - rsu.position)
            if d <= self.sc.radio_range and (best is None or d < abs(v.position - best.position)):
                best = rsu
        return best

    def authenticate(self, v: Vehicle, rsu: RSU) -> bool:
        """One V2I handshake with full trace accounting."""
        copies: list[tuple[Envelope, bool]] = []

        def transmit(env: Envelope) -> Envelope:
            self._sent(env, rsu.id if env.kind is MsgKind.V2I_CHAL else v.id)
            copies.append(self._link(env))
            return copies[-1][0]

        variant = self.sc.variant
        data: dict[str, Any] = {"variant": "flat" if variant == "flat" else "tree"}
        try:
            session = v2i_authenticate(
                self.provider, v, rsu, self.tree, self.rng_proto, self.next_msg_id, self.now,
                variant="flat" if variant == "flat" else "tree", shadow_flat=variant == "both", transmit=transmit,
            )
        except (KeyTreeError, Rejected) as exc:
            cause = {NoPathFound: "no_path", StaleTimestamp: "stale_timestamp"}.get(type(exc)) or getattr(exc, "cause", "error")
            for i, (copy, tampered) in enumerate(copies):
                last = i == len(copies) - 1
                self._received(copy, self._v2i_receiver(copy, v, rsu), "rejected" if last else "accepted",
                               cause if last else "", tampered)
            data.update(trial_count=None, flat_trial_count=None, anonymity=None, path=None,
                        messages=len(exc.transcript), msg_ids=[e.msg_id for e in exc.transcript], cause=cause)
            self.emit("v2i", rsu.id, "failure", data=data)
            return False
        for copy, tampered in copies:
            self._received(copy, self._v2i_receiver(copy, v, rsu), "accepted", tampered=tampered)
        self.session_expiry[(v.id, rsu.id)] = self.now + self.sc.session_ttl
        data.update(trial_count=session.trial_count, flat_trial_count=session.flat_trial_count,
                    anonymity=self.anonymity.count(session.path), path=[k.key_id for k in session.path],
                    messages=len(session.transcript), msg_ids=[e.msg_id for e in session.transcript], cause="")
        self.emit("v2i", rsu.id, "success", data=data)
        return True

    @staticmethod
    def _v2i_receiver(env: Envelope, v: Vehicle, rsu: RSU) -> str:
        return v.id if env.kind is MsgKind.V2I_CHAL else rsu.id

    def _intra(self) -> None:
        p = self.sc.intra_rate * self.sc.tick
        profile = self.profiles["intra"]
        for vid in list(self.active):
            v = self.vehicles[vid]
            if self.rng_traffic.random() >= p:
                continue
            env = intra_send(v, f"{profile.name}".encode(), self.next_msg_id(), self.now,
                             confidential=profile.confidential, rng=self.rng_proto)
            self._sent(env, vid)
            self._broadcast_in_group(env, v, self.groups[v.group_id])

    def _broadcast_in_group(self, env: Envelope, sender: Vehicle, group: Group) -> int:
        """Single-hop broadcast to the other members; returns how many were in range."""
        heard = 0
        for mid in sorted(group.members):
            if mid == sender.id:
                continue
            m = self.vehicles[mid]
            if not in_range(m.position, sender.position, self.sc.radio_range):
                self._received(env, mid, "dropped", "out_of_range")
                continue
            heard += 1
            copy, tampered = self._link(env)
            try:
                self._accept_once(m, copy)
                intra_receive(m, copy)
                self._received(copy, mid, "accepted", tampered=tampered)
            except Rejected as exc:
                self._received(copy, mid, "rejected", exc.cause, tampered)
        return heard

    def _target_group(self, v: Vehicle) -> Group | None:
        cell = self.groups[v.group_id].cell
        for delta in (1, -1):
            gid = f"{cell.road_id}/{cell.speed_class}/{cell.index + delta}"
            if gid in self.groups:
                return self.groups[gid]
        return None

    def _inter(self) -> None:
        p = self.sc.inter_rate * self.sc.tick
        for vid in list(self.active):
            v = self.vehicles[vid]
            if self.rng_traffic.random() >= p:
                continue
            target = self._target_group(v)
            if target is not None:
                self.disseminate(v, target)

    def disseminate(self, v: Vehicle, target: Group) -> dict[str, Any]:
        """Inter-group message from ``v`` to ``target`` via leader relay."""
        sc, profile = self.sc, self.profiles["inter"]
        env = inter_send(self.provider, v, target.id, f"{profile.name}".encode(), self.next_msg_id(), self.now)
        self._sent(env, v.id)
        own_leader = self.groups[v.group_id].leader
        try:
            open_ok = dispute_open(self.provider, own_leader, env) == v.id
        except VanetAuthError:
            open_ok = False
        self.emit("audit", own_leader, "checked", env.digest(), {
            "msg_id": env.msg_id, "open_ok": open_ok, "id_free": not serialized_mentions(env, [v.id]),
        })

        positions = {m: self.vehicles[m].position for m in target.members}
        flood_tx = flooding_transmissions(v.position, positions, sc.radio_range)
        relay_tx, hops, rebroadcast = 1, 0, None
        hearing = sorted((abs(pos - v.position), m) for m, pos in positions.items() if in_range(pos, v.position, sc.radio_range))
        leader = self.vehicles[target.leader]
        if not hearing:
            self._received(env, leader.id, "dropped", "no_receiver")
        else:
            first = hearing[0][1]
            route = relay_route(first, leader.id, positions, sc.radio_range)
            if route is None:
                # the relay chain breaks before any verifier sees the envelope
                self._received(env, leader.id, "dropped", "no_route")
            else:
                copy, tampered = self._link(env)
                copy = inter_route(self.vehicles[first], copy)
                for nxt in route[1:]:
                    copy, t = self._link(copy)
                    tampered |= t
                    copy = inter_route(self.vehicles[nxt], copy)
                    hops += 1
                relay_tx += hops
                try:
                    self._accept_once(leader, copy)
                    _, rebroadcast = inter_deliver(self.provider, self.directory, leader, copy, profile,
                                                   self.next_msg_id(), self.now)
                    self._received(copy, leader.id, "accepted", tampered=tampered)
                except Rejected as exc:
                    self._received(copy, leader.id, "rejected", exc.cause, tampered)
        if rebroadcast is not None:
            relay_tx += 1
            self._sent(rebroadcast, leader.id)
            self._broadcast_in_group(rebroadcast, leader, target)
        info = {"msg_id": env.msg_id, "target": target.id, "relay_tx": relay_tx, "flood_tx": flood_tx, "hops": hops,
                "group_size": len(target.members), "rebroadcast": rebroadcast is not None}
        self.emit("dissemination", v.id, "leader_relay", env.digest(), info)
        return info

    # -- stepping ------------------------------------------------------------------

    def step(self) -> None:
        self.tick_index += 1
        self.now = round(self.tick_index * self.sc.tick, 9)
        self._move()
        for vid in list(self.active):
            self._place(self.vehicles[vid])
        self._i2v()
        self._v2i()
        self._intra()
        self._inter()
        self._maybe_break()
        self.check_invariants()

    def finish(self) -> MetricsReport:
        self.emit("run_end", "world", "complete", data={"ticks": self.tick_index, "leader_checks": self.leader_checks})
        return self.metrics.report()


def run(
    scenario: Scenario,
    on_tick: Callable[[World], None] | None = None,
    on_record: Callable[[dict[str, Any]], None] | None = None,
) -> tuple[EventTrace, MetricsReport]:
    """Execute ``scenario``; returns the event trace and the metrics.

    Raises InvariantViolation if any per-tick invariant fails.
    """
    world = World(scenario, on_record)
    if on_tick is not None:
        on_tick(world)
    for _ in range(scenario.ticks):
        world.step()
        if on_tick is not None:
            on_tick(world)
    report = world.finish()
    return world.trace, report

"""The four node-authentication flows as envelope-level handlers.

* I2V: RSU broadcasts carry an identity-based signature under the RSU id.
* V2I: three-message key-tree handshake (request, challenge, response).
* V2V inside a group: MAC under the shared group key, bound to the epoch.
* V2V between groups: group signature, routed to the receiving group's
  leader, which verifies against the group directory and rebroadcasts.

Receive handlers return the accepted payload or raise :class:`Rejected`.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

from . import keytree
from .crypto import BLOCK, Ciphertext, CryptoProvider, SchemeTag, SymmetricKey, cbc_decrypt, cbc_encrypt, mac, mac_verify
from .envelope import Envelope, MsgKind
from .errors import (
    BadGroupSignature,
    BadPadding,
    DirectoryMiss,
    KeyTreeError,
    NoGroupSignature,
    Rejected,
    UnsupportedComm,
    WrongKey,
)
from .groups import GroupDirectory
from .nodes import RSU, Vehicle


class CommType(str, Enum):
    V2V = "V2V"
    V2I = "V2I"
    I2V = "I2V"


class Mechanism(str, Enum):
    IBS = "identity-based signature"
    KEYTREE = "key-tree challenge-response"
    GROUP_MAC = "group-key MAC"
    GROUP_SIG = "group signature"


@dataclass(frozen=True)
class ApplicationProfile:
    name: str
    comm_types: frozenset[CommType]
    multihop: bool
    needs_auth: bool = True
    needs_integrity: bool = True
    needs_privacy: bool = True
    confidential: bool = False


def _profile(name, comms, multihop, privacy):
    return ApplicationProfile(name, frozenset(CommType(c) for c in comms), multihop, True, True, privacy)


# The five safety applications and their requirements.
TABLE1_PROFILES: dict[str, ApplicationProfile] = {
    p.name: p
    for p in (
        _profile("Intersection collision warning", ["V2V"], False, True),
        _profile("Emergency vehicle signal", ["V2I", "I2V"], True, False),
        _profile("Work zone warning", ["V2I", "I2V"], True, False),
        _profile("Forward collision warning", ["V2V"], True, True),
        _profile("Cooperative driving", ["V2V"], True, True),
    )
}


def select_mechanism(profile: ApplicationProfile, comm_type: CommType | str, same_group: bool = True) -> Mechanism:
    comm_type = CommType(comm_type)
    if comm_type not in profile.comm_types:
        raise UnsupportedComm(f"{profile.name} does not use {comm_type.value}")
    if comm_type is CommType.I2V:
        return Mechanism.IBS
    if comm_type is CommType.V2I:
        return Mechanism.KEYTREE
    return Mechanism.GROUP_MAC if same_group else Mechanism.GROUP_SIG


# -- I2V ------------------------------------------------------------------------

def i2v_broadcast(provider: CryptoProvider, rsu: RSU, msg: bytes, msg_id: str, now: float) -> Envelope:
    env = Envelope(msg_id, MsgKind.I2V_BCAST, rsu.id, msg, {}, (rsu.id,), now)
    sig = provider.ibs_sign(rsu.ibs_handle, env.bound_bytes())
    return Envelope(msg_id, env.kind, rsu.id, msg, {"sig": sig}, env.hop_path, now)


def i2v_receive(provider: CryptoProvider, env: Envelope) -> bytes:
    """Accept iff the IBS verifies under the identity named in ``sender_hint``."""
    sig = env.auth.get("sig")
    if env.kind is not MsgKind.I2V_BCAST or sig is None or not provider.ibs_verify(env.sender_hint, env.bound_bytes(), sig):
        raise Rejected("bad_ibs", env.msg_id)
    return env.payload


# -- V2I ------------------------------------------------------------------------

ANONYMOUS = "anonymous"


@dataclass
class VehicleV2IState:
    rsu_id: str
    path: list[SymmetricKey]
    session_key: SymmetricKey


@dataclass
class RsuV2IState:
    session_key: SymmetricKey
    secret: bytes
    path: list[SymmetricKey]
    trial_count: int
    flat_trial_count: int | None
    nonce: bytes


@dataclass
class V2ISession:
    session_key: SymmetricKey
    transcript: list[Envelope]
    path: list[SymmetricKey]
    trial_count: int
    flat_trial_count: int | None


def _encode_request(req: keytree.AuthRequest) -> bytes:
    return req.nonce + struct.pack(">d", req.timestamp) + req.enc_session.data


def _decode_request(env: Envelope) -> keytree.AuthRequest:
    if len(env.payload) < 24:
        raise Rejected("malformed_request", env.msg_id)
    nonce, (ts,), enc = env.payload[:16], struct.unpack(">d", env.payload[16:24]), env.payload[24:]
    tags = tuple(env.auth.get("level_tags", ()))
    return keytree.AuthRequest(Ciphertext(enc, SchemeTag.PK_ENC), nonce, tags, ts)


def v2i_request(
    provider: CryptoProvider, vehicle: Vehicle, rsu: RSU, rng: random.Random, msg_id: str, now: float
) -> tuple[Envelope, VehicleV2IState]:
    if vehicle.keyring is None:
        raise ValueError(f"{vehicle.id} has no key-ring")
    path = keytree.choose_path(vehicle.keyring, rng)
    session_key = provider.gen_symmetric_key("sess")
    req = keytree.make_request(path, rsu.keypair.public_handle, session_key, now, provider)
    env = Envelope(msg_id, MsgKind.V2I_REQ, ANONYMOUS, _encode_request(req), {"level_tags": req.level_tags}, (), now)
    return env, VehicleV2IState(rsu.id, path, session_key)


def v2i_challenge(
    provider: CryptoProvider,
    rsu: RSU,
    tree: keytree.KeyPoolTree,
    env: Envelope,
    rng: random.Random,
    msg_id: str,
    now: float,
    variant: str = "tree",
    shadow_flat: bool = False,
) -> tuple[Envelope, RsuV2IState]:
    """RSU: open the session key, identify the path, issue the layered challenge.

    ``variant`` picks the identification search ("tree" or "flat");
    ``shadow_flat`` additionally runs the flat scan on the same request to
    measure its cost.  Keytree errors propagate.
    """
    req = _decode_request(env)
    try:
        session_key, sealed_ts = keytree.open_request(provider, rsu.keypair.private_handle, req)
    except (BadPadding, WrongKey) as exc:
        raise Rejected("bad_session", str(exc)) from None
    if sealed_ts != req.timestamp:
        raise Rejected("bad_session", "sealed timestamp differs from request")
    identify = keytree.identify_flat if variant == "flat" else keytree.identify_path
    found = identify(tree, req, now)
    flat_trials = None
    if shadow_flat and variant != "flat":
        flat_trials = keytree.identify_flat(tree, req, now).trial_count
    challenge, secret = keytree.make_challenge(found.keys, rng)
    out = Envelope(msg_id, MsgKind.V2I_CHAL, rsu.id, challenge.data, {}, (rsu.id,), now)
    out = Envelope(msg_id, out.kind, rsu.id, out.payload, {"mac": mac(session_key, out.bound_bytes())}, out.hop_path, now)
    state = RsuV2IState(session_key, secret, found.keys, found.trial_count, flat_trials, req.nonce)
    return out, state


def v2i_respond(state: VehicleV2IState, env: Envelope, rng: random.Random, msg_id: str, now: float) -> Envelope:
    tag = env.auth.get("mac")
    if tag is None or not mac_verify(state.session_key, env.bound_bytes(), tag):
        raise Rejected("bad_challenge", env.msg_id)
    try:
        response = keytree.answer_challenge(state.path, Ciphertext(env.payload, SchemeTag.SYM_CBC), state.session_key, rng)
    except BadPadding:
        raise Rejected("bad_challenge", "challenge layers did not decrypt") from None
    return Envelope(msg_id, MsgKind.V2I_RESP, ANONYMOUS, response.data, {}, (), now)


def v2i_accept(state: RsuV2IState, env: Envelope) -> SymmetricKey:
    response = Ciphertext(env.payload, SchemeTag.SYM_CBC)
    if env.kind is not MsgKind.V2I_RESP or not keytree.verify_response(state.secret, state.session_key, response):
        raise Rejected("bad_response", env.msg_id)
    return state.session_key


def v2i_authenticate(
    provider: CryptoProvider,
    vehicle: Vehicle,
    rsu: RSU,
    tree: keytree.KeyPoolTree,
    rng: random.Random,
    next_msg_id: Callable[[], str],
    now: float,
    variant: str = "tree",
    shadow_flat: bool = False,
    transmit: Callable[[Envelope], Envelope] = lambda e: e,
    rsu_now: float | None = None,
) -> V2ISession:
    """Run request, challenge and response end to end.

    ``transmit`` models the channel for every envelope (e.g. tampering).
    On failure the raised error carries ``transcript`` (envelopes sent so
    far); on success both sides record the session key.
    """
    rsu_now = now if rsu_now is None else rsu_now
    transcript: list[Envelope] = []

    def send(env: Envelope) -> Envelope:
        transcript.append(env)
        return transmit(env)

    try:
        req, v_state = v2i_request(provider, vehicle, rsu, rng, next_msg_id(), now)
        chal, r_state = v2i_challenge(provider, rsu, tree, send(req), rng, next_msg_id(), rsu_now, variant, shadow_flat)
        resp = v2i_respond(v_state, send(chal), rng, next_msg_id(), now)
        session_key = v2i_accept(r_state, send(resp))
    except (KeyTreeError, Rejected) as exc:
        exc.transcript = transcript
        raise
    rsu.sessions[r_state.nonce.hex()] = session_key
    vehicle.sessions[rsu.id] = v_state.session_key
    return V2ISession(session_key, transcript, r_state.path, r_state.trial_count, r_state.flat_trial_count)


# -- V2V inside a group -----------------------------------------------------------

def intra_send(
    member: Vehicle, msg: bytes, msg_id: str, now: float, confidential: bool = False, rng: random.Random | None = None,
    relay_of: str | None = None,
) -> Envelope:
    if member.group_key is None or member.group_id is None:
        raise ValueError(f"{member.id} holds no group key")
    payload = msg
    if confidential:
        payload = cbc_encrypt(member.group_key, msg, (rng or random.Random()).randbytes(BLOCK)).data
    ctx = {"epoch": member.epoch, "enc": int(confidential)}
    if relay_of is not None:
        ctx["relay_of"] = relay_of
    env = Envelope(msg_id, MsgKind.INTRA, member.group_id, payload, dict(ctx), (member.id,), now)
    return Envelope(msg_id, env.kind, env.sender_hint, payload, {**ctx, "mac": mac(member.group_key, env.bound_bytes(**ctx))},
                    env.hop_path, now)


def intra_receive(member: Vehicle, env: Envelope) -> bytes:
    if env.kind is not MsgKind.INTRA:
        raise Rejected("wrong_kind", env.kind.value)
    if member.group_key is None or env.sender_hint != member.group_id:
        raise Rejected("wrong_group", env.sender_hint)
    if env.auth.get("epoch") != member.epoch:
        raise Rejected("stale_epoch", f"{env.auth.get('epoch')} != {member.epoch}")
    ctx = {k: v for k, v in env.auth.items() if k != "mac"}
    tag = env.auth.get("mac")
    if tag is None or not mac_verify(member.group_key, env.bound_bytes(**ctx), tag):
        raise Rejected("bad_mac", env.msg_id)
    if ctx.get("enc"):
        try:
            return cbc_decrypt(member.group_key, Ciphertext(env.payload, SchemeTag.SYM_CBC))
        except BadPadding:
            raise Rejected("bad_mac", "payload did not decrypt") from None
    return env.payload


# -- V2V between groups -------------------------------------------------------------

def inter_send(
    provider: CryptoProvider, member: Vehicle, target_group: str, msg: bytes, msg_id: str, now: float
) -> Envelope:
    """Group-signed envelope; addressed to our own group it degrades to INTRA."""
    if member.group_id == target_group:
        return intra_send(member, msg, msg_id, now)
    if member.credential is None or member.group_id is None:
        raise ValueError(f"{member.id} holds no group credential")
    env = Envelope(msg_id, MsgKind.INTER, member.group_id, msg, {"target": target_group}, (), now)
    sig = provider.group_sign(member.credential, env.bound_bytes(target=target_group))
    return Envelope(msg_id, env.kind, env.sender_hint, msg, {"target": target_group, "gsig": sig}, (), now)


def inter_route(vehicle: Vehicle, env: Envelope) -> Envelope:
    """Relay step toward the leader: stamp this hop, no verification."""
    return env.with_hop(vehicle.id)


def inter_verify(provider: CryptoProvider, directory: GroupDirectory, env: Envelope) -> bytes:
    if env.kind is not MsgKind.INTER:
        raise Rejected("wrong_kind", env.kind.value)
    if env.sender_hint not in directory:
        raise DirectoryMiss(env.sender_hint)
    gpk = directory.lookup(env.sender_hint)
    sig = env.auth.get("gsig")
    target = env.auth.get("target")
    if sig is None or not provider.group_verify(gpk, env.bound_bytes(target=target), sig):
        raise BadGroupSignature(env.msg_id)
    return env.payload


def inter_deliver(
    provider: CryptoProvider,
    directory: GroupDirectory,
    leader: Vehicle,
    env: Envelope,
    profile: ApplicationProfile,
    msg_id: str,
    now: float,
) -> tuple[bytes, Envelope | None]:
    """Leader: verify the foreign group signature, then rebroadcast if multihop.

    The rebroadcast is an INTRA envelope under the leader's group key.
    """
    if env.auth.get("target") != leader.group_id:
        raise Rejected("not_target", f"{env.auth.get('target')} != {leader.group_id}")
    payload = inter_verify(provider, directory, env)
    if not profile.multihop:
        return payload, None
    return payload, intra_send(leader, payload, msg_id, now, relay_of=env.msg_id)


def dispute_open(provider: CryptoProvider, leader: Vehicle | str, env: Envelope) -> str:
    """Reveal the signer of an INTER envelope; only the signing group's leader may."""
    sig = env.auth.get("gsig")
    if env.kind is not MsgKind.INTER or sig is None:
        raise NoGroupSignature(f"{env.kind.value} envelope carries no group signature")
    leader_id = leader if isinstance(leader, str) else leader.id
    return provider.group_open(leader_id, sig)


def serialized_mentions(env: Envelope, ids: Sequence[str]) -> list[str]:
    """Which of ``ids`` appear verbatim in the serialized envelope."""
    blob = env.serialize()
    return [i for i in ids if i.encode() in blob]

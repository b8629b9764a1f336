"""The four flows as envelope handlers: I2V, V2I, intra-group and inter-group."""

import itertools
import random

import pytest

from vanetauth.crypto import Signature, SchemeTag
from vanetauth.envelope import Envelope, MsgKind
from vanetauth.errors import (
    BadGroupSignature,
    DirectoryMiss,
    NoGroupSignature,
    NoPathFound,
    NotLeader,
    Rejected,
    StaleTimestamp,
    UnsupportedComm,
)
from vanetauth.keytree import assign_keyring, build_tree
from vanetauth.nodes import RSU
from vanetauth.protocols import (
    TABLE1_PROFILES,
    CommType,
    Mechanism,
    dispute_open,
    i2v_broadcast,
    i2v_receive,
    inter_deliver,
    inter_route,
    inter_send,
    inter_verify,
    intra_receive,
    intra_send,
    serialized_mentions,
    v2i_authenticate,
)

MULTIHOP = TABLE1_PROFILES["Forward collision warning"]
SINGLE_HOP = TABLE1_PROFILES["Intersection collision warning"]


def _ids():
    it = itertools.count(1)
    return lambda: f"t{next(it):05d}"


@pytest.fixture
def two_groups(town):
    """Cell 0 with A (leader), B; cell 1 with C (leader), D."""
    vs = {}
    for i, (vid, pos) in enumerate([("veh-A", 10.0), ("veh-B", 20.0), ("veh-C", 310.0), ("veh-D", 320.0)]):
        vs[vid] = town.vehicle(vid, pos)
        town.place(vs[vid], float(i))
    g1, g2 = town.groups["R/std/0"], town.groups["R/std/1"]
    return town, vs, g1, g2


def _rsu(provider, rid="RSU-01"):
    return RSU(rid, 0.0, provider.gen_keypair(), provider.ibs_extract(rid))


# -- application profiles ---------------------------------------------------------------

def test_table_rows():
    assert len(TABLE1_PROFILES) == 5
    ev = TABLE1_PROFILES["Emergency vehicle signal"]
    assert ev.comm_types == {CommType.V2I, CommType.I2V} and not ev.needs_privacy and ev.multihop
    fcw = TABLE1_PROFILES["Forward collision warning"]
    assert fcw.comm_types == {CommType.V2V} and fcw.needs_privacy
    assert TABLE1_PROFILES["Work zone warning"].comm_types == {CommType.V2I, CommType.I2V}
    assert not TABLE1_PROFILES["Intersection collision warning"].multihop
    assert TABLE1_PROFILES["Cooperative driving"].multihop


def test_select_mechanism():
    from vanetauth.protocols import select_mechanism

    assert select_mechanism(TABLE1_PROFILES["Emergency vehicle signal"], "I2V") is Mechanism.IBS
    assert select_mechanism(TABLE1_PROFILES["Emergency vehicle signal"], CommType.V2I) is Mechanism.KEYTREE
    assert select_mechanism(MULTIHOP, "V2V", same_group=True) is Mechanism.GROUP_MAC
    assert select_mechanism(MULTIHOP, "V2V", same_group=False) is Mechanism.GROUP_SIG
    with pytest.raises(UnsupportedComm):
        select_mechanism(TABLE1_PROFILES["Work zone warning"], "V2V")
    with pytest.raises(UnsupportedComm):
        select_mechanism(MULTIHOP, "I2V")


# -- I2V --------------------------------------------------------------------------------------

def test_i2v_honest_tampered_and_impersonated(town):
    rsu, other = _rsu(town.provider), _rsu(town.provider, "RSU-02")
    env = i2v_broadcast(town.provider, rsu, b"work zone ahead", "m1", 3.0)
    assert env.kind is MsgKind.I2V_BCAST and env.auth["sig"].scheme_tag is SchemeTag.IBS
    assert i2v_receive(town.provider, env) == b"work zone ahead"
    with pytest.raises(Rejected) as exc:
        i2v_receive(town.provider, env.tampered(random.Random(1)))
    assert exc.value.cause == "bad_ibs"
    spoof = i2v_broadcast(town.provider, other, b"work zone ahead", "m1", 3.0)
    claimed = Envelope(spoof.msg_id, spoof.kind, "RSU-01", spoof.payload, spoof.auth, spoof.hop_path, spoof.timestamp)
    with pytest.raises(Rejected):
        i2v_receive(town.provider, claimed)


def test_i2v_every_bit_flip_rejected(town):
    rsu = _rsu(town.provider)
    env = i2v_broadcast(town.provider, rsu, b"xy", "m2", 1.0)
    for bit in range(16):
        buf = bytearray(env.payload)
        buf[bit // 8] ^= 1 << (bit % 8)
        bad = Envelope(env.msg_id, env.kind, env.sender_hint, bytes(buf), env.auth, env.hop_path, env.timestamp)
        with pytest.raises(Rejected):
            i2v_receive(town.provider, bad)


# -- V2I ------------------------------------------------------------------------------------------

@pytest.fixture
def v2i(town):
    tree = build_tree((4, 4, 4), 3)
    rsu = _rsu(town.provider)
    v = town.vehicle("veh-A", 0.0)
    v.keyring = assign_keyring(tree, v.id, 6, 1)
    return town, tree, rsu, v


def test_v2i_honest_run_is_three_messages(v2i):
    town, tree, rsu, v = v2i
    rng = random.Random(0)
    for _ in range(50):
        s = v2i_authenticate(town.provider, v, rsu, tree, rng, _ids(), 10.0)
        assert [e.kind for e in s.transcript] == [MsgKind.V2I_REQ, MsgKind.V2I_CHAL, MsgKind.V2I_RESP]
        assert 3 <= s.trial_count <= 12
        assert tuple(s.path) in v.keyring.paths
        # both ends hold the same session secret
        assert v.sessions[rsu.id].secret == s.session_key.secret
        assert s.session_key in rsu.sessions.values()


def test_v2i_request_does_not_name_vehicle_or_keys(v2i):
    town, tree, rsu, v = v2i
    s = v2i_authenticate(town.provider, v, rsu, tree, random.Random(1), _ids(), 10.0)
    for env in s.transcript:
        blob = env.serialize()
        assert b"veh-A" not in blob
        assert not any(k.key_id.encode() in blob for k in v.keyring.keys)


def test_v2i_shadow_flat_counts(v2i):
    town, tree, rsu, v = v2i
    s = v2i_authenticate(town.provider, v, rsu, tree, random.Random(2), _ids(), 10.0, shadow_flat=True)
    assert s.flat_trial_count is not None and s.flat_trial_count >= 3
    f = v2i_authenticate(town.provider, v, rsu, tree, random.Random(2), _ids(), 10.0, variant="flat")
    assert f.flat_trial_count is None and f.trial_count >= 3


def test_v2i_foreign_keyring(v2i):
    town, tree, rsu, v = v2i
    v.keyring = assign_keyring(build_tree((4, 4, 4), 999), v.id, 6, 1)
    with pytest.raises(NoPathFound) as exc:
        v2i_authenticate(town.provider, v, rsu, tree, random.Random(3), _ids(), 10.0)
    assert len(exc.value.transcript) == 1
    assert rsu.id not in v.sessions and not rsu.sessions


def test_v2i_stale_timestamp(v2i):
    town, tree, rsu, v = v2i
    with pytest.raises(StaleTimestamp):
        v2i_authenticate(town.provider, v, rsu, tree, random.Random(4), _ids(), 10.0, rsu_now=13.0)
    assert not rsu.sessions


def _tamper_at(index):
    rng = random.Random(index)
    counter = itertools.count()

    def transmit(env):
        return env.tampered(rng) if next(counter) == index else env
    return transmit


@pytest.mark.parametrize("index,cause", [(1, "bad_challenge"), (2, "bad_response")])
def test_v2i_tampered_messages_rejected(v2i, index, cause):
    town, tree, rsu, v = v2i
    for trial in range(30):
        with pytest.raises(Rejected) as exc:
            v2i_authenticate(town.provider, v, rsu, tree, random.Random(trial), _ids(), 10.0,
                             transmit=_tamper_at(index))
        assert exc.value.cause == cause
    assert not rsu.sessions


def test_v2i_tampered_request_rejected(v2i):
    town, tree, rsu, v = v2i
    for trial in range(60):
        with pytest.raises((Rejected, NoPathFound)):
            v2i_authenticate(town.provider, v, rsu, tree, random.Random(trial), _ids(), 10.0, transmit=_tamper_at(0))
    assert not rsu.sessions


def test_v2i_rsu_without_private_key_cannot_open(v2i):
    town, tree, rsu, v = v2i
    impostor = RSU("RSU-01", 0.0, town.provider.gen_keypair(), rsu.ibs_handle)
    from vanetauth.protocols import v2i_challenge, v2i_request

    req, _ = v2i_request(town.provider, v, rsu, random.Random(0), "r1", 1.0)
    with pytest.raises(Rejected) as exc:
        v2i_challenge(town.provider, impostor, tree, req, random.Random(0), "c1", 1.0)
    assert exc.value.cause == "bad_session"


# -- intra-group ----------------------------------------------------------------------------------------

def test_intra_same_group_accept(two_groups):
    town, vs, g1, g2 = two_groups
    env = intra_send(vs["veh-A"], b"brake", "i1", 5.0)
    assert env.kind is MsgKind.INTRA and env.sender_hint == g1.id
    assert intra_receive(vs["veh-B"], env) == b"brake"


def test_intra_other_group_reject(two_groups):
    town, vs, g1, g2 = two_groups
    env = intra_send(vs["veh-A"], b"brake", "i1", 5.0)
    with pytest.raises(Rejected) as exc:
        intra_receive(vs["veh-C"], env)
    assert exc.value.cause == "wrong_group"


def test_intra_old_epoch_reject(two_groups):
    town, vs, g1, g2 = two_groups
    env = intra_send(vs["veh-A"], b"brake", "i1", 5.0)
    town.service.handover_and_rekey(g1, 6.0)
    with pytest.raises(Rejected) as exc:
        intra_receive(vs["veh-B"], env)
    assert exc.value.cause == "stale_epoch"
    forged_epoch = Envelope(env.msg_id, env.kind, env.sender_hint, env.payload, {**env.auth, "epoch": g1.epoch},
                            env.hop_path, env.timestamp)
    with pytest.raises(Rejected) as exc:
        intra_receive(vs["veh-B"], forged_epoch)
    assert exc.value.cause == "bad_mac"


def test_intra_tamper_reject(two_groups):
    town, vs, g1, g2 = two_groups
    env = intra_send(vs["veh-A"], b"brake now", "i1", 5.0)
    rng = random.Random(0)
    for _ in range(100):
        with pytest.raises(Rejected) as exc:
            intra_receive(vs["veh-B"], env.tampered(rng))
        assert exc.value.cause == "bad_mac"


def test_intra_confidential(two_groups):
    town, vs, g1, g2 = two_groups
    env = intra_send(vs["veh-A"], b"commercial offer", "i2", 5.0, confidential=True, rng=random.Random(1))
    assert b"commercial offer" not in env.payload
    assert intra_receive(vs["veh-B"], env) == b"commercial offer"
    rng = random.Random(2)
    for _ in range(50):
        with pytest.raises(Rejected):
            intra_receive(vs["veh-B"], env.tampered(rng))


def test_intra_wrong_kind(two_groups):
    town, vs, g1, g2 = two_groups
    env = inter_send(town.provider, vs["veh-A"], g2.id, b"x", "x1", 5.0)
    with pytest.raises(Rejected) as exc:
        intra_receive(vs["veh-B"], env)
    assert exc.value.cause == "wrong_kind"


# -- inter-group ----------------------------------------------------------------------------------------

def test_inter_shape_and_privacy(two_groups):
    town, vs, g1, g2 = two_groups
    env = inter_send(town.provider, vs["veh-B"], g2.id, b"slow traffic", "x1", 5.0)
    assert env.kind is MsgKind.INTER
    assert env.sender_hint == g1.id
    assert set(env.auth) == {"target", "gsig"}
    assert env.auth["gsig"].scheme_tag is SchemeTag.GSIG
    assert env.hop_path == ()
    assert serialized_mentions(env, list(vs)) == []


def test_inter_route_and_deliver(two_groups):
    town, vs, g1, g2 = two_groups
    env = inter_send(town.provider, vs["veh-B"], g2.id, b"slow traffic", "x1", 5.0)
    relayed = inter_route(vs["veh-D"], env)
    assert relayed.hop_path == ("veh-D",)
    payload, rebroadcast = inter_deliver(town.provider, town.directory, vs["veh-C"], relayed, MULTIHOP, "x2", 5.0)
    assert payload == b"slow traffic"
    assert rebroadcast.kind is MsgKind.INTRA and rebroadcast.auth["relay_of"] == "x1"
    assert intra_receive(vs["veh-D"], rebroadcast) == b"slow traffic"


def test_inter_single_hop_profile_not_rebroadcast(two_groups):
    town, vs, g1, g2 = two_groups
    env = inter_send(town.provider, vs["veh-B"], g2.id, b"m", "x1", 5.0)
    _, rebroadcast = inter_deliver(town.provider, town.directory, vs["veh-C"], env, SINGLE_HOP, "x2", 5.0)
    assert rebroadcast is None


def test_inter_own_group_is_intra(two_groups):
    town, vs, g1, g2 = two_groups
    env = inter_send(town.provider, vs["veh-B"], g1.id, b"m", "x1", 5.0)
    assert env.kind is MsgKind.INTRA and "gsig" not in env.auth
    assert intra_receive(vs["veh-A"], env) == b"m"


def test_inter_directory_miss(two_groups):
    town, vs, g1, g2 = two_groups
    env = inter_send(town.provider, vs["veh-B"], g2.id, b"m", "x1", 5.0)
    town.directory.withdraw(g1.id)
    with pytest.raises(DirectoryMiss) as exc:
        inter_verify(town.provider, town.directory, env)
    assert exc.value.cause == "unknown_group"


def test_inter_tampered_and_forged(two_groups):
    town, vs, g1, g2 = two_groups
    env = inter_send(town.provider, vs["veh-B"], g2.id, b"slow traffic", "x1", 5.0)
    rng = random.Random(0)
    for _ in range(50):
        with pytest.raises(BadGroupSignature):
            inter_verify(town.provider, town.directory, env.tampered(rng))
    fake = Envelope(env.msg_id, env.kind, env.sender_hint, env.payload,
                    {"target": g2.id, "gsig": Signature(bytes(32), SchemeTag.GSIG)}, (), env.timestamp)
    with pytest.raises(BadGroupSignature):
        inter_verify(town.provider, town.directory, fake)


def test_inter_non_member_signature(two_groups):
    town, vs, g1, g2 = two_groups
    # D (group 2) signs but claims group 1
    env = inter_send(town.provider, vs["veh-D"], "R/std/5", b"m", "x1", 5.0)
    claimed = Envelope(env.msg_id, env.kind, g1.id, env.payload, env.auth, (), env.timestamp)
    with pytest.raises(BadGroupSignature):
        inter_verify(town.provider, town.directory, claimed)


def test_inter_cross_epoch_signature(two_groups):
    town, vs, g1, g2 = two_groups
    env = inter_send(town.provider, vs["veh-B"], g2.id, b"m", "x1", 5.0)
    town.service.handover_and_rekey(g1, 6.0)
    with pytest.raises(BadGroupSignature):
        inter_verify(town.provider, town.directory, env)


def test_inter_wrong_target_leader(two_groups):
    town, vs, g1, g2 = two_groups
    env = inter_send(town.provider, vs["veh-C"], "R/std/7", b"m", "x1", 5.0)
    with pytest.raises(Rejected) as exc:
        inter_deliver(town.provider, town.directory, vs["veh-A"], env, MULTIHOP, "x2", 5.0)
    assert exc.value.cause == "not_target"


def test_dispute_open(two_groups):
    town, vs, g1, g2 = two_groups
    env = inter_send(town.provider, vs["veh-B"], g2.id, b"m", "x1", 5.0)
    assert dispute_open(town.provider, vs["veh-A"], env) == "veh-B"
    with pytest.raises(NotLeader):
        dispute_open(town.provider, vs["veh-C"], env)
    with pytest.raises(NoGroupSignature):
        dispute_open(town.provider, vs["veh-A"], intra_send(vs["veh-B"], b"m", "i1", 5.0))


def test_envelope_record_roundtrip(two_groups):
    town, vs, g1, g2 = two_groups
    envs = [
        inter_send(town.provider, vs["veh-B"], g2.id, b"m", "x1", 5.0),
        intra_send(vs["veh-A"], b"m", "i1", 5.0, confidential=True, rng=random.Random(0)),
        i2v_broadcast(town.provider, _rsu(town.provider), b"m", "b1", 1.0),
    ]
    for env in envs:
        back = Envelope.from_record(env.to_record())
        assert back == env
        assert back.digest() == env.digest()

"""Key tree: construction, key-ring assignment, trial-verification search, challenge layers.

Oracles used here are computed independently of the module under test:
edge counts by enumeration, trial counts from child indices, flat trial
counts from scan positions, anonymity sets by exhaustive scan, and collision
probabilities by an exact product formula.
"""

import itertools
import math
import random
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from vanetauth import keytree
from vanetauth.crypto import ModelledProvider, SchemeTag, SymmetricKey, cbc_encrypt, mac_verify
from vanetauth.errors import (
    BadBranching,
    BadPadding,
    BadParams,
    IndivisibleK,
    NoPathFound,
    StaleTimestamp,
    TooManyPaths,
)
from vanetauth.keytree import (
    AuthRequest,
    anonymity_set,
    answer_challenge,
    assign_flat_keyring,
    assign_keyring,
    build_tree,
    choose_path,
    collision_probability_exact,
    collision_probability_flat,
    collision_probability_mc,
    identify_flat,
    identify_path,
    make_challenge,
    make_request,
    open_request,
    peel_challenge,
    tag_input,
    verify_response,
)

PROVIDER = ModelledProvider("keytree-tests")
RSU = PROVIDER.gen_keypair()


def _request(path, now=100.0):
    return make_request(path, RSU.public_handle, PROVIDER.gen_symmetric_key("sess"), now, PROVIDER)


def _enumerate_edges(branching):
    """Every node below the root, as index tuples, by brute-force enumeration."""
    edges = []
    for depth in range(1, len(branching) + 1):
        edges.extend(itertools.product(*(range(b) for b in branching[:depth])))
    return edges


@pytest.fixture(scope="module")
def tree444():
    return build_tree((4, 4, 4), 1)


# -- build_tree -----------------------------------------------------------------

def test_tree_444_has_84_keys_and_64_leaves(tree444):
    edges = _enumerate_edges((4, 4, 4))
    assert len(edges) == 84 == 4 + 16 + 64
    assert set(tree444.edge_keys) == set(edges)
    assert tree444.total_keys == 84
    assert len(list(tree444.leaves())) == 64
    assert len({k.secret for k in tree444.edge_keys.values()}) == 84
    assert len({k.key_id for k in tree444.edge_keys.values()}) == 84


def test_single_level_tree():
    tree = build_tree((2,), 0)
    assert tree.levels == 1 and tree.total_keys == 2


@pytest.mark.parametrize("branching", [(0, 4, 4), (1,), (), (4, 1, 4), (4, -2)])
def test_bad_branching(branching):
    with pytest.raises(BadBranching):
        build_tree(branching, 0)


def test_tree_deterministic_under_seed():
    a, b, c = build_tree((3, 3), 5), build_tree((3, 3), 5), build_tree((3, 3), 6)
    secrets = lambda t: [t.edge_keys[e].secret for e in sorted(t.edge_keys)]
    assert secrets(a) == secrets(b)
    assert a.flat_order == b.flat_order
    assert secrets(a) != secrets(c)


@settings(max_examples=60, deadline=None)
@given(branching=st.lists(st.integers(2, 5), min_size=1, max_size=4), seed=st.integers(0, 10**6))
def test_pool_size_matches_enumeration(branching, seed):
    tree = build_tree(branching, seed)
    expected = len(_enumerate_edges(branching))
    assert tree.total_keys == keytree.pool_size(branching) == expected
    assert sorted(tree.flat_order) == sorted(tree.edge_keys)


# -- assign_keyring ---------------------------------------------------------------

def test_keyring_k6_two_disjoint_paths(tree444):
    rng = random.Random(3)
    for i in range(200):
        ring = assign_keyring(tree444, f"v{i}", 6, rng)
        assert len(ring.leaves) == 2
        assert len({leaf[0] for leaf in ring.leaves}) == 2
        union = {tree444.edge_keys[leaf[:d]] for leaf in ring.leaves for d in (1, 2, 3)}
        assert ring.keys == frozenset(union)
        assert len(ring.keys) == 6


def test_keyring_k3_single_path(tree444):
    ring = assign_keyring(tree444, "v", 3, 9)
    assert len(ring.leaves) == 1
    assert list(ring.paths[0]) == tree444.path_keys(ring.leaves[0])
    assert len(ring.keys) == 3


@pytest.mark.parametrize("k", [5, 7, 1, 2, 0])
def test_keyring_indivisible(tree444, k):
    with pytest.raises(IndivisibleK):
        assign_keyring(tree444, "v", k, 0)


def test_keyring_too_many_paths(tree444):
    assert assign_keyring(tree444, "v", 12, 0).keys.__len__() == 12
    with pytest.raises(TooManyPaths):
        assign_keyring(tree444, "v", 15, 0)


def test_flat_keyring(tree444):
    ring = assign_flat_keyring(tree444, "v", 6, 1)
    assert ring.is_flat and len(ring.flat_keys) == 6 == len(ring.keys)
    with pytest.raises(BadParams):
        assign_flat_keyring(tree444, "v", 85, 1)


# -- choose_path ---------------------------------------------------------------------

def test_choose_path_single_leaf(tree444):
    ring = assign_keyring(tree444, "v", 3, 1)
    rng = random.Random(0)
    assert all(choose_path(ring, rng) == list(ring.paths[0]) for _ in range(50))


def test_choose_path_uniform_two_leaves(tree444):
    ring = assign_keyring(tree444, "v", 6, 2)
    rng = random.Random(2024)
    draws = 10_000
    hits = sum(choose_path(ring, rng) == list(ring.paths[0]) for _ in range(draws))
    # binomial(10000, 1/2): sd = 50, so [0.45, 0.55] is a 10-sigma band
    assert 0.45 <= hits / draws <= 0.55
    assert 0.45 <= (draws - hits) / draws <= 0.55


def test_choose_path_length_is_c(tree444):
    rng = random.Random(1)
    for i in range(50):
        ring = assign_keyring(tree444, "v", 6, i)
        assert len(choose_path(ring, rng)) == 3
    flat = assign_flat_keyring(tree444, "v", 6, 1)
    assert len(choose_path(flat, rng)) == 3


# -- requests ---------------------------------------------------------------------------

def test_request_tags_verify_per_level(tree444):
    path = tree444.path_keys((1, 2, 3))
    req = _request(path, now=5.0)
    assert len(req.level_tags) == 3
    for i, key in enumerate(path, start=1):
        assert mac_verify(key, tag_input(req.nonce, i, 5.0), req.level_tags[i - 1])


def test_requests_are_fresh(tree444):
    path = tree444.path_keys((0, 0, 0))
    a, b = _request(path), _request(path)
    assert a.nonce != b.nonce
    assert set(t.data for t in a.level_tags).isdisjoint(t.data for t in b.level_tags)


def test_rsu_opens_session_and_timestamp(tree444):
    session = PROVIDER.gen_symmetric_key("sess")
    req = make_request(tree444.path_keys((0, 1, 2)), RSU.public_handle, session, 42.5, PROVIDER)
    key, ts = open_request(PROVIDER, RSU.private_handle, req)
    assert key.secret == session.secret and ts == 42.5


# -- identify_path ---------------------------------------------------------------------------

def test_tree_search_brute_force_over_all_paths(tree444):
    worst = 0
    for leaf in tree444.leaves():
        path = tree444.path_keys(leaf)
        found = identify_path(tree444, _request(path), 100.0)
        assert found.keys == path
        # oracle: each level tries children 0..index of the matching child
        assert found.trial_count == sum(i + 1 for i in leaf)
        assert found.trial_count <= 12
        worst = max(worst, found.trial_count)
    assert worst == 12  # reached by the last-child path (3, 3, 3)


def test_tree_search_garbage_tags(tree444):
    path = tree444.path_keys((0, 0, 0))
    req = _request(path)
    garbage = AuthRequest(req.enc_session, req.nonce, tuple(type(t)(bytes(32), t.scheme_tag) for t in req.level_tags),
                          req.timestamp)
    with pytest.raises(NoPathFound) as exc:
        identify_path(tree444, garbage, 100.0)
    assert exc.value.trial_count == 4  # all level-1 children, no match


def test_tree_search_foreign_keyring(tree444):
    other = build_tree((4, 4, 4), 99)
    with pytest.raises(NoPathFound):
        identify_path(tree444, _request(other.path_keys((1, 1, 1))), 100.0)


def test_tree_search_inconsistent_path_rejected(tree444):
    # level-2 key not under the level-1 key: not a root path
    path = [tree444.edge_keys[(0,)], tree444.edge_keys[(1, 0)], tree444.edge_keys[(1, 0, 0)]]
    with pytest.raises(NoPathFound) as exc:
        identify_path(tree444, _request(path), 100.0)
    assert exc.value.trial_count == 1 + 4


@pytest.mark.parametrize("skew", [2.0, -2.0, 0.0, 1.999])
def test_fresh_window_accepts(tree444, skew):
    path = tree444.path_keys((2, 2, 2))
    assert identify_path(tree444, _request(path, now=10.0), 10.0 + skew).keys == path


@pytest.mark.parametrize("skew", [2.001, -2.5, 30.0])
def test_stale_timestamp(tree444, skew):
    req = _request(tree444.path_keys((2, 2, 2)), now=10.0)
    with pytest.raises(StaleTimestamp):
        identify_path(tree444, req, 10.0 + skew)
    with pytest.raises(StaleTimestamp):
        identify_flat(tree444, req, 10.0 + skew)


@settings(max_examples=200, deadline=None)
@given(branching=st.lists(st.integers(2, 4), min_size=1, max_size=4), seed=st.integers(0, 10**6), data=st.data())
def test_tree_search_bound_property(branching, seed, data):
    tree = build_tree(branching, seed)
    leaf = tuple(data.draw(st.integers(0, b - 1)) for b in branching)
    found = identify_path(tree, _request(tree.path_keys(leaf)), 100.0)
    assert found.keys == tree.path_keys(leaf)
    assert found.trial_count == sum(i + 1 for i in leaf) <= sum(branching)


# -- identify_flat -----------------------------------------------------------------------------

def test_flat_search_instrumented(tree444):
    position = {edge: i for i, edge in enumerate(tree444.flat_order)}
    total = 0
    for leaf in tree444.leaves():
        path = tree444.path_keys(leaf)
        found = identify_flat(tree444, _request(path), 100.0)
        assert found.keys == path
        expected = sum(position[leaf[:d]] + 1 for d in (1, 2, 3))
        assert found.trial_count == expected <= 3 * 84
        total += found.trial_count
    assert total / 64 > 12


def test_flat_search_garbage_scans_whole_pool(tree444):
    req = _request(tree444.path_keys((0, 0, 0)))
    garbage = AuthRequest(req.enc_session, req.nonce, tuple(type(t)(bytes(32), t.scheme_tag) for t in req.level_tags),
                          req.timestamp)
    with pytest.raises(NoPathFound) as exc:
        identify_flat(tree444, garbage, 100.0)
    assert exc.value.trial_count == 84


def test_flat_search_upper_bound_252(tree444):
    # a "path" made of the three keys scanned last needs c*n trials
    last = tree444.flat_order[-1]
    path = [tree444.edge_keys[last]] * 3
    assert identify_flat(tree444, _request(path), 100.0).trial_count == 252


# -- challenge / response -------------------------------------------------------------------------

def _layered_length(c):
    size = 16
    for _ in range(c):
        size = 16 + 16 * (size // 16 + 1)
    return size


@pytest.mark.parametrize("branching", [(4,), (4, 4), (4, 4, 4), (2, 2, 2, 2)])
def test_challenge_layers(branching):
    tree = build_tree(branching, 3)
    leaf = tuple(b - 1 for b in branching)
    path = tree.path_keys(leaf)
    ch, secret = make_challenge(path, random.Random(1))
    assert len(secret) == 16
    assert ch.scheme_tag is SchemeTag.SYM_CBC
    assert len(ch.data) == _layered_length(len(branching))
    assert peel_challenge(path, ch) == secret


def test_challenge_single_level_is_plain_cbc():
    tree = build_tree((4,), 3)
    path = tree.path_keys((2,))
    ch, secret = make_challenge(path, random.Random(8))
    assert len(ch.data) == 48
    from vanetauth.crypto import cbc_decrypt
    assert cbc_decrypt(path[0], ch) == secret


def test_challenge_outermost_layer_is_level1(tree444):
    path = tree444.path_keys((1, 2, 3))
    ch, secret = make_challenge(path, random.Random(4))
    from vanetauth.crypto import Ciphertext, cbc_decrypt
    inner = cbc_decrypt(path[0], ch)  # only the level-1 key opens the outer layer
    with pytest.raises(BadPadding):
        cbc_decrypt(path[2], Ciphertext(ch.data, SchemeTag.SYM_CBC))
    assert len(inner) == _layered_length(2)


def test_challenge_wrong_key_fails(tree444):
    path = tree444.path_keys((1, 2, 3))
    ch, secret = make_challenge(path, random.Random(5))
    for i in range(3):
        wrong = list(path)
        wrong[i] = tree444.edge_keys[(0,) * (i + 1)]
        try:
            assert peel_challenge(wrong, ch) != secret
        except BadPadding:
            pass


def test_answer_and_verify(tree444):
    rng = random.Random(6)
    path = tree444.path_keys((3, 0, 1))
    session = PROVIDER.gen_symmetric_key("sess")
    ch, secret = make_challenge(path, rng)
    resp = answer_challenge(path, ch, session, rng)
    assert verify_response(secret, session, resp)
    # attacker without path keys sends noise
    noise = type(resp)(rng.randbytes(48), SchemeTag.SYM_CBC)
    assert not verify_response(secret, session, noise)
    # replay of an old response against a fresh secret
    _, fresh = make_challenge(path, rng)
    assert not verify_response(fresh, session, resp)
    # response under a different session key
    forged = cbc_encrypt(PROVIDER.gen_symmetric_key("x"), secret, bytes(16))
    assert not verify_response(secret, session, forged)


# -- anonymity -----------------------------------------------------------------------------------------

def _scan(rings, path):
    """Exhaustive oracle: rings holding every key of the path."""
    need = {k.key_id for k in path}
    return sum(need <= {k.key_id for k in ring.keys} for ring in rings)


def test_anonymity_population_of_one(tree444):
    ring = assign_keyring(tree444, "solo", 6, 1)
    for path in ring.paths:
        assert anonymity_set(tree444, [ring], path) == 1


def test_anonymity_duplicate_ring(tree444):
    ring = assign_keyring(tree444, "a", 6, 1)
    twin = assign_keyring(tree444, "b", 6, 1)
    assert twin.leaves == ring.leaves
    assert anonymity_set(tree444, [ring, twin], ring.paths[0]) == 2


def test_anonymity_matches_exhaustive_scan_500(tree444):
    rng = random.Random(500)
    rings = [assign_keyring(tree444, f"v{i}", 6, rng) for i in range(500)]
    index = keytree.AnonymityIndex(tree444, rings)
    sizes = []
    for leaf in tree444.leaves():
        path = tree444.path_keys(leaf)
        assert index.count(path) == _scan(rings, path)
    for ring in rings:
        for path in ring.paths:
            n = index.count(path)
            assert n == _scan(rings, path) >= 1
            sizes.append(n)
    # each ring holds 2 of 64 leaves: expected sharers of one path = 1 + 499 * 2/64
    assert abs(sum(sizes) / len(sizes) - (1 + 499 * 2 / 64)) < 3


def test_anonymity_flat_rings_and_mixed_paths(tree444):
    rng = random.Random(7)
    rings = [assign_flat_keyring(tree444, f"f{i}", 12, rng) for i in range(80)]
    rings += [assign_keyring(tree444, f"t{i}", 6, rng) for i in range(80)]
    index = keytree.AnonymityIndex(tree444, rings)
    for ring in rings:
        path = choose_path(ring, rng)
        assert index.count(path) == _scan(rings, path)


# -- collision probability -----------------------------------------------------------------------------

def _collision_oracle(n, k):
    """1 - P(disjoint) as a product of k ratios; no binomial coefficients involved."""
    p_disjoint = Fraction(1)
    for i in range(k):
        p_disjoint *= Fraction(n - k - i, n - i)
    return 1 - p_disjoint


def test_collision_84_6():
    exact = collision_probability_exact(84, 6)
    assert exact == _collision_oracle(84, 6)
    assert collision_probability_flat(84, 6) == float(_collision_oracle(84, 6))
    assert round(collision_probability_flat(84, 6), 3) == 0.368


def test_collision_degenerate_cases():
    assert collision_probability_flat(10, 10) == 1.0
    assert collision_probability_flat(7, 4) == 1.0  # 2k > n forces overlap
    assert collision_probability_exact(10**6, 1) == Fraction(1, 10**6)


@pytest.mark.parametrize("n,k", [(84, 85), (5, 0), (0, 0), (3, -1)])
def test_collision_bad_params(n, k):
    with pytest.raises(BadParams):
        collision_probability_flat(n, k)


@settings(max_examples=300, deadline=None)
@given(n=st.integers(1, 400), data=st.data())
def test_collision_matches_oracle_property(n, data):
    k = data.draw(st.integers(1, n))
    assert collision_probability_exact(n, k) == _collision_oracle(n, k)


@pytest.mark.parametrize("n,k", [(84, 6), (84, 3), (50, 5), (200, 10), (20, 2), (1000, 12)])
def test_collision_monte_carlo_within_3_se(n, k):
    p, se = collision_probability_mc(n, k, 20_000, n * 31 + k)
    exact = float(_collision_oracle(n, k))
    assert abs(p - exact) <= 3 * max(se, math.sqrt(exact * (1 - exact) / 20_000))

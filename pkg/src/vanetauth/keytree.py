"""Anonymous V2I authentication over a tree-structured symmetric key pool.

The central pool is a tree with ``c`` levels; every edge carries one secret
key, so a root-to-leaf path is an ordered vector of ``c`` keys.  A vehicle
holds ``k/c`` such paths and, per authentication, proves knowledge of one
of them.  The request never names key indices: it carries one MAC tag per
level over a fresh nonce, and the RSU discovers the keys by trial
verification, descending only into the subtree of the key it just found.

A flat variant (the same pool scanned as an unstructured list) is kept for
search-cost comparison.
"""

from __future__ import annotations

import itertools
import math
import random
import struct
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Iterator, NamedTuple, Sequence

from .crypto import (
    BLOCK,
    Ciphertext,
    CryptoProvider,
    MacTag,
    SchemeTag,
    SymmetricKey,
    cbc_decrypt,
    cbc_encrypt,
    mac,
    mac_verify,
)
from .errors import (
    BadBranching,
    BadPadding,
    BadParams,
    IndivisibleK,
    NoPathFound,
    StaleTimestamp,
    TooManyPaths,
)

FRESHNESS_WINDOW = 2.0
SECRET_BYTES = BLOCK

Edge = tuple[int, ...]

# Type aliases for the challenge/response messages.
Challenge = Ciphertext
ChallengeResponse = Ciphertext


def _as_rng(rng: random.Random | int | str | None) -> random.Random:
    return rng if isinstance(rng, random.Random) else random.Random(rng)


@dataclass(frozen=True, eq=False)
class KeyPoolTree:
    branching: tuple[int, ...]
    edge_keys: dict[Edge, SymmetricKey]
    flat_order: tuple[Edge, ...]  # seeded scan order for the flat variant
    _edge_of: dict[str, Edge] = field(repr=False)

    @property
    def levels(self) -> int:
        return len(self.branching)

    @property
    def total_keys(self) -> int:
        return len(self.edge_keys)

    @property
    def max_tree_trials(self) -> int:
        return sum(self.branching)

    def children(self, prefix: Edge) -> Iterator[Edge]:
        for i in range(self.branching[len(prefix)]):
            yield prefix + (i,)

    def leaves(self) -> Iterator[Edge]:
        return itertools.product(*(range(b) for b in self.branching))

    def path_keys(self, leaf: Edge) -> list[SymmetricKey]:
        return [self.edge_keys[leaf[: i + 1]] for i in range(len(leaf))]

    def edge_of(self, key: SymmetricKey) -> Edge:
        return self._edge_of[key.key_id]

    def leaf_of(self, path: Sequence[SymmetricKey]) -> Edge | None:
        """Leaf whose root path is exactly ``path``, or None for non-tree key sets."""
        if len(path) != self.levels:
            return None
        try:
            edges = [self._edge_of[k.key_id] for k in path]
        except KeyError:
            return None
        leaf = edges[-1]
        if len(leaf) != self.levels or any(edges[i] != leaf[: i + 1] for i in range(self.levels)):
            return None
        return leaf


def pool_size(branching: Sequence[int]) -> int:
    """Number of edges (and so keys) in a tree with the given branching."""
    return sum(math.prod(branching[: i + 1]) for i in range(len(branching)))


def build_tree(branching: Sequence[int], rng_seed: random.Random | int | str = 0) -> KeyPoolTree:
    branching = tuple(branching)
    if not branching or any(not isinstance(b, int) or b < 2 for b in branching):
        raise BadBranching(f"need at least one level and every branching >= 2, got {branching}")
    rng = _as_rng(rng_seed)
    edge_keys: dict[Edge, SymmetricKey] = {}
    seen: set[bytes] = set()
    frontier: list[Edge] = [()]
    for b in branching:
        nxt = []
        for parent in frontier:
            for i in range(b):
                edge = parent + (i,)
                secret = rng.randbytes(16)
                while secret in seen:
                    secret = rng.randbytes(16)
                seen.add(secret)
                edge_keys[edge] = SymmetricKey("pool/" + ".".join(map(str, edge)), secret)
                nxt.append(edge)
        frontier = nxt
    order = list(edge_keys)
    rng.shuffle(order)
    edge_of = {key.key_id: edge for edge, key in edge_keys.items()}
    return KeyPoolTree(branching, edge_keys, tuple(order), edge_of)


@dataclass(frozen=True, eq=False)
class KeyRing:
    """Key material held by one vehicle.

    Tree rings list their leaves and the matching root paths; flat rings keep
    ``flat_keys`` and an empty ``leaves``.  ``keys`` is the union either way.
    """

    owner: str
    levels: int
    leaves: tuple[Edge, ...]
    paths: tuple[tuple[SymmetricKey, ...], ...]
    keys: frozenset[SymmetricKey]
    flat_keys: tuple[SymmetricKey, ...] = ()

    @property
    def is_flat(self) -> bool:
        return not self.leaves


def assign_keyring(tree: KeyPoolTree, owner: str, k: int, rng: random.Random | int | str) -> KeyRing:
    """Give ``owner`` k/c root paths whose level-1 edges are pairwise distinct."""
    c = tree.levels
    if k < c or k % c:
        raise IndivisibleK(f"k={k} is not a positive multiple of c={c}")
    m = k // c
    if m > tree.branching[0]:
        raise TooManyPaths(f"{m} edge-disjoint paths need b_1 >= {m}, got {tree.branching[0]}")
    rng = _as_rng(rng)
    tops = sorted(rng.sample(range(tree.branching[0]), m))
    leaves = tuple((top,) + tuple(rng.randrange(b) for b in tree.branching[1:]) for top in tops)
    paths = tuple(tuple(tree.path_keys(leaf)) for leaf in leaves)
    keys = frozenset(key for path in paths for key in path)
    return KeyRing(owner, c, leaves, paths, keys)


def assign_flat_keyring(tree: KeyPoolTree, owner: str, k: int, rng: random.Random | int | str) -> KeyRing:
    """Draw k keys without replacement from the pool, ignoring its structure."""
    if not 1 <= k <= tree.total_keys or k < tree.levels:
        raise BadParams(f"flat key-ring needs c <= k <= n, got k={k}, n={tree.total_keys}")
    rng = _as_rng(rng)
    edges = rng.sample(tree.flat_order, k)
    flat = tuple(tree.edge_keys[e] for e in edges)
    return KeyRing(owner, tree.levels, (), (), frozenset(flat), flat)


def choose_path(keyring: KeyRing, rng: random.Random) -> list[SymmetricKey]:
    """Pick the key vector for one authentication (level 1 first)."""
    if keyring.is_flat:
        return rng.sample(keyring.flat_keys, keyring.levels)
    return list(keyring.paths[rng.randrange(len(keyring.paths))])


@dataclass(frozen=True)
class AuthRequest:
    enc_session: Ciphertext
    nonce: bytes
    level_tags: tuple[MacTag, ...]
    timestamp: float


def tag_input(nonce: bytes, level: int, timestamp: float) -> bytes:
    """Bytes MACed under the level-``level`` key (levels count from 1)."""
    return nonce + struct.pack(">Hd", level, timestamp)


def make_request(
    path: Sequence[SymmetricKey],
    rsu_public_handle: str,
    session_key: SymmetricKey,
    now: float,
    provider: CryptoProvider,
) -> AuthRequest:
    nonce = provider.random_bytes(16)
    enc_session = provider.pk_encrypt(rsu_public_handle, session_key.secret + struct.pack(">d", now))
    tags = tuple(mac(key, tag_input(nonce, i, now)) for i, key in enumerate(path, start=1))
    return AuthRequest(enc_session, nonce, tags, now)


def open_request(provider: CryptoProvider, rsu_private_handle: str, request: AuthRequest) -> tuple[SymmetricKey, float]:
    """RSU side: recover the proposed session key and the sealed timestamp."""
    plain = provider.pk_decrypt(rsu_private_handle, request.enc_session)
    if len(plain) != 16 + 8:
        raise BadPadding("session envelope has the wrong length")
    (ts,) = struct.unpack(">d", plain[16:])
    return SymmetricKey("session", plain[:16]), ts


class Identified(NamedTuple):
    keys: list[SymmetricKey]
    trial_count: int


def _check_fresh(request: AuthRequest, now: float, window: float) -> None:
    if not abs(now - request.timestamp) <= window:
        raise StaleTimestamp(f"request time {request.timestamp} outside +/-{window}s of {now}")


def identify_path(tree: KeyPoolTree, request: AuthRequest, now: float, window: float = FRESHNESS_WINDOW) -> Identified:
    """Level-by-level search: only children of the matched edge are tried.

    Raises NoPathFound (with ``trial_count`` set) when some level has no match.
    """
    _check_fresh(request, now, window)
    if len(request.level_tags) != tree.levels:
        err = NoPathFound(f"expected {tree.levels} tags, got {len(request.level_tags)}")
        err.trial_count = 0
        raise err
    trials = 0
    prefix: Edge = ()
    keys: list[SymmetricKey] = []
    for level, tag in enumerate(request.level_tags, start=1):
        msg = tag_input(request.nonce, level, request.timestamp)
        for edge in tree.children(prefix):
            trials += 1
            if mac_verify(tree.edge_keys[edge], msg, tag):
                prefix = edge
                keys.append(tree.edge_keys[edge])
                break
        else:
            err = NoPathFound(f"no level-{level} key verifies")
            err.trial_count = trials
            raise err
    return Identified(keys, trials)


def identify_flat(tree: KeyPoolTree, request: AuthRequest, now: float, window: float = FRESHNESS_WINDOW) -> Identified:
    """Unstructured search: every level scans the whole pool in ``flat_order``."""
    _check_fresh(request, now, window)
    trials = 0
    keys: list[SymmetricKey] = []
    for level, tag in enumerate(request.level_tags, start=1):
        msg = tag_input(request.nonce, level, request.timestamp)
        for edge in tree.flat_order:
            trials += 1
            if mac_verify(tree.edge_keys[edge], msg, tag):
                keys.append(tree.edge_keys[edge])
                break
        else:
            err = NoPathFound(f"no pool key verifies level {level}")
            err.trial_count = trials
            raise err
    return Identified(keys, trials)


def make_challenge(path: Sequence[SymmetricKey], rng: random.Random) -> tuple[Challenge, bytes]:
    """Encrypt a fresh secret under every path key; the level-1 layer is outermost."""
    secret = rng.randbytes(SECRET_BYTES)
    data = secret
    for key in reversed(path):
        data = cbc_encrypt(key, data, rng.randbytes(BLOCK)).data
    return Ciphertext(data, SchemeTag.SYM_CBC), secret


def peel_challenge(path: Sequence[SymmetricKey], challenge: Challenge) -> bytes:
    data = challenge.data
    for key in path:
        data = cbc_decrypt(key, Ciphertext(data, SchemeTag.SYM_CBC))
    return data


def answer_challenge(
    path: Sequence[SymmetricKey], challenge: Challenge, session_key: SymmetricKey, rng: random.Random
) -> ChallengeResponse:
    secret = peel_challenge(path, challenge)
    return cbc_encrypt(session_key, secret, rng.randbytes(BLOCK))


def verify_response(secret: bytes, session_key: SymmetricKey, response: ChallengeResponse) -> bool:
    try:
        return cbc_decrypt(session_key, response) == secret
    except BadPadding:
        return False


class AnonymityIndex:
    """Precomputed owner counts so anonymity sets cost O(c) per lookup.

    Tree rings are counted by leaf (a ring holds every edge of a root path
    exactly when it holds that leaf); flat rings by intersecting per-key
    owner sets.
    """

    def __init__(self, tree: KeyPoolTree, keyrings: Iterable[KeyRing]):
        self.tree = tree
        self._leaf_count: Counter[Edge] = Counter()
        self._owners: dict[str, set[int]] = {}
        self._tree_owners: dict[str, set[int]] = {}
        for idx, ring in enumerate(keyrings):
            if ring.is_flat:
                for key in ring.keys:
                    self._owners.setdefault(key.key_id, set()).add(idx)
            else:
                self._leaf_count.update(ring.leaves)
                for key in ring.keys:
                    self._tree_owners.setdefault(key.key_id, set()).add(idx)

    def count(self, path: Sequence[SymmetricKey]) -> int:
        leaf = self.tree.leaf_of(path)
        if leaf is not None:
            tree_part = self._leaf_count.get(leaf, 0)
        else:
            tree_part = len(set.intersection(*(self._tree_owners.get(k.key_id, set()) for k in path)))
        flat_part = len(set.intersection(*(self._owners.get(k.key_id, set()) for k in path)))
        return tree_part + flat_part


def anonymity_set(tree: KeyPoolTree, all_keyrings: Iterable[KeyRing], path: Sequence[SymmetricKey]) -> int:
    """Number of key-rings that contain every key of ``path``."""
    return AnonymityIndex(tree, all_keyrings).count(path)


def collision_probability_exact(n: int, k: int) -> Fraction:
    if not (isinstance(n, int) and isinstance(k, int)) or not 1 <= k <= n:
        raise BadParams(f"need 1 <= k <= n, got n={n}, k={k}")
    return 1 - Fraction(math.comb(n - k, k), math.comb(n, k))


def collision_probability_flat(n: int, k: int) -> float:
    """Probability that two independent k-key rings from an n-key pool share a key."""
    return float(collision_probability_exact(n, k))


def collision_probability_mc(n: int, k: int, pairs: int, rng: random.Random | int) -> tuple[float, float]:
    """Monte-Carlo estimate and its standard error."""
    if not 1 <= k <= n:
        raise BadParams(f"need 1 <= k <= n, got n={n}, k={k}")
    rng = _as_rng(rng)
    pool = range(n)
    hits = sum(1 for _ in range(pairs) if not set(rng.sample(pool, k)).isdisjoint(rng.sample(pool, k)))
    p = hits / pairs
    return p, math.sqrt(p * (1 - p) / pairs)

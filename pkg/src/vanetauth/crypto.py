"""Cryptographic provider used by every authentication flow.

Symmetric primitives are real: AES-128 in CBC mode with byte-count (PKCS#7)
padding and HMAC-SHA256.  Public-key, identity-based and group schemes are
*modelled*: signatures are random tokens bound to ``(key, message digest)``
in an in-process registry, so verification is an exact lookup and a token
the provider never issued can never verify.  A backend built on real
pairing arithmetic only has to implement :class:`CryptoProvider`.

Everything random is drawn from the provider's seeded generator, which keeps
whole simulation runs reproducible.
"""

from __future__ import annotations

import hashlib
import hmac
import random
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Protocol

from cryptography.hazmat.primitives import padding
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .errors import (
    BadPadding,
    CryptoError,
    NotLeader,
    UnknownGroup,
    UnknownIdentity,
    UnknownKey,
    WrongKey,
)

BLOCK = 16
KEY_BYTES = 16
TOKEN_BYTES = 32


class SchemeTag(str, Enum):
    PK_ENC = "PK-ENC"
    SYM_CBC = "SYM-CBC"
    PK_SIG = "PK-SIG"
    IBS = "IBS"
    GSIG = "GSIG"
    MAC = "MAC"


@dataclass(frozen=True)
class KeyPair:
    public_handle: str
    private_handle: str


@dataclass(frozen=True)
class SymmetricKey:
    key_id: str
    secret: bytes

    def __post_init__(self):
        if len(self.secret) != KEY_BYTES:
            raise ValueError(f"symmetric key must be {KEY_BYTES} bytes, got {len(self.secret)}")

    def __repr__(self) -> str:
        return f"SymmetricKey({self.key_id!r})"


@dataclass(frozen=True)
class GroupCredential:
    group_public_handle: str
    member_private_handle: str
    member_id: str


@dataclass(frozen=True)
class _Sealed:
    data: bytes
    scheme_tag: SchemeTag

    def hex(self) -> str:
        return self.data.hex()


class Ciphertext(_Sealed):
    pass


class Signature(_Sealed):
    pass


class MacTag(_Sealed):
    pass


def _digest(msg: bytes) -> bytes:
    return hashlib.sha256(msg).digest()


# -- symmetric primitives (stateless) ----------------------------------------

def cbc_encrypt(key: SymmetricKey, plaintext: bytes, iv: bytes) -> Ciphertext:
    """Pad ``plaintext`` to whole blocks and encrypt it; the IV leads the output."""
    if len(iv) != BLOCK:
        raise ValueError("iv must be 16 bytes")
    padder = padding.PKCS7(BLOCK * 8).padder()
    padded = padder.update(plaintext) + padder.finalize()
    enc = Cipher(algorithms.AES(key.secret), modes.CBC(iv)).encryptor()
    return Ciphertext(iv + enc.update(padded) + enc.finalize(), SchemeTag.SYM_CBC)


def cbc_decrypt(key: SymmetricKey, ciphertext: Ciphertext) -> bytes:
    data = ciphertext.data
    if ciphertext.scheme_tag is not SchemeTag.SYM_CBC:
        raise CryptoError(f"expected SYM-CBC ciphertext, got {ciphertext.scheme_tag.value}")
    if len(data) < 2 * BLOCK or len(data) % BLOCK:
        raise BadPadding("ciphertext length is not IV plus whole blocks")
    dec = Cipher(algorithms.AES(key.secret), modes.CBC(data[:BLOCK])).decryptor()
    padded = dec.update(data[BLOCK:]) + dec.finalize()
    unpadder = padding.PKCS7(BLOCK * 8).unpadder()
    try:
        return unpadder.update(padded) + unpadder.finalize()
    except ValueError as exc:
        raise BadPadding(str(exc)) from None


def mac(key: SymmetricKey, msg: bytes) -> MacTag:
    return MacTag(hmac.new(key.secret, msg, hashlib.sha256).digest(), SchemeTag.MAC)


def mac_verify(key: SymmetricKey, msg: bytes, tag: MacTag) -> bool:
    if not isinstance(tag, MacTag) or tag.scheme_tag is not SchemeTag.MAC:
        return False
    return hmac.compare_digest(mac(key, msg).data, tag.data)


class CryptoProvider(Protocol):
    """Interface every backend implements (the modelled one and any real one)."""

    def random_bytes(self, n: int) -> bytes: ...
    def gen_keypair(self) -> KeyPair: ...
    def gen_symmetric_key(self, label: str = "k") -> SymmetricKey: ...
    def pk_encrypt(self, public_handle: str, plaintext: bytes) -> Ciphertext: ...
    def pk_decrypt(self, private_handle: str, ciphertext: Ciphertext) -> bytes: ...
    def sign(self, private_handle: str, msg: bytes) -> Signature: ...
    def verify(self, public_handle: str, msg: bytes, sig: Signature) -> bool: ...
    def sym_encrypt_cbc(self, key: SymmetricKey, plaintext: bytes, iv: bytes) -> Ciphertext: ...
    def sym_decrypt_cbc(self, key: SymmetricKey, ciphertext: Ciphertext) -> bytes: ...
    def mac(self, key: SymmetricKey, msg: bytes) -> MacTag: ...
    def mac_verify(self, key: SymmetricKey, msg: bytes, tag: MacTag) -> bool: ...
    def ibs_extract(self, identity: str) -> str: ...
    def ibs_sign(self, handle: str, msg: bytes) -> Signature: ...
    def ibs_verify(self, identity: str, msg: bytes, sig: Signature) -> bool: ...
    def group_setup(self, leader_id: str) -> str: ...
    def group_issue(self, group_public_handle: str, member_id: str, issuer: str) -> GroupCredential: ...
    def group_revoke(self, group_public_handle: str, member_id: str, issuer: str) -> None: ...
    def group_sign(self, credential: GroupCredential, msg: bytes) -> Signature: ...
    def group_verify(self, group_public_handle: str, msg: bytes, sig: Signature) -> bool: ...
    def group_open(self, leader_id: str, sig: Signature) -> str: ...


@dataclass
class _GroupState:
    opener: str
    members: dict[str, str] = field(default_factory=dict)  # member_private_handle -> member_id
    revoked: set[str] = field(default_factory=set)


class ModelledProvider:
    """Deterministic in-process backend.

    Key generation and registry mutation are serialized by a lock; verification
    and encryption only read shared state and may run concurrently.
    """

    def __init__(self, seed: int | str = 0):
        self._rng = random.Random(seed)
        self._lock = threading.Lock()
        self._counter = 0
        self._pk_secrets: dict[str, bytes] = {}  # public handle -> 32-byte secret
        self._sk_to_pk: dict[str, str] = {}
        self._sig_registry: dict[bytes, tuple] = {}
        self._ibs_handles: dict[str, str] = {}  # handle -> identity
        self._ibs_by_identity: dict[str, str] = {}
        self._groups: dict[str, _GroupState] = {}
        self._credentials: dict[str, tuple[str, str]] = {}  # member handle -> (group, member_id)

    # -- randomness and handles -------------------------------------------

    def random_bytes(self, n: int) -> bytes:
        with self._lock:
            return self._rng.randbytes(n)

    def _handle(self, prefix: str) -> str:
        # caller holds the lock
        self._counter += 1
        return f"{prefix}-{self._counter:06d}{self._rng.randbytes(4).hex()}"

    def _token(self) -> bytes:
        # caller holds the lock; a collision would alias two registry entries
        while True:
            tok = self._rng.randbytes(TOKEN_BYTES)
            if tok not in self._sig_registry:
                return tok

    # -- public-key signatures / encryption -------------------------------

    def gen_keypair(self) -> KeyPair:
        with self._lock:
            pk = self._handle("pk")
            sk = self._handle("sk")
            self._pk_secrets[pk] = self._rng.randbytes(2 * KEY_BYTES)
            self._sk_to_pk[sk] = pk
        return KeyPair(pk, sk)

    def gen_symmetric_key(self, label: str = "k") -> SymmetricKey:
        with self._lock:
            return SymmetricKey(self._handle(label), self._rng.randbytes(KEY_BYTES))

    def pk_encrypt(self, public_handle: str, plaintext: bytes) -> Ciphertext:
        secret = self._pk_secrets.get(public_handle)
        if secret is None:
            raise UnknownKey(public_handle)
        enc_key = SymmetricKey("pke", secret[:KEY_BYTES])
        body = cbc_encrypt(enc_key, plaintext, self.random_bytes(BLOCK)).data
        tag = hmac.new(secret[KEY_BYTES:], body, hashlib.sha256).digest()[:BLOCK]
        return Ciphertext(_digest(public_handle.encode())[:8] + body + tag, SchemeTag.PK_ENC)

    def pk_decrypt(self, private_handle: str, ciphertext: Ciphertext) -> bytes:
        pk = self._sk_to_pk.get(private_handle)
        if pk is None:
            raise UnknownKey(private_handle)
        if ciphertext.scheme_tag is not SchemeTag.PK_ENC:
            raise CryptoError("not a PK-ENC ciphertext")
        data = ciphertext.data
        if data[:8] != _digest(pk.encode())[:8]:
            raise WrongKey("ciphertext was not encrypted for this key")
        secret = self._pk_secrets[pk]
        body, tag = data[8:-BLOCK], data[-BLOCK:]
        expected = hmac.new(secret[KEY_BYTES:], body, hashlib.sha256).digest()[:BLOCK]
        if not hmac.compare_digest(tag, expected):
            raise BadPadding("PK-ENC integrity check failed")
        return cbc_decrypt(SymmetricKey("pke", secret[:KEY_BYTES]), Ciphertext(body, SchemeTag.SYM_CBC))

    def sign(self, private_handle: str, msg: bytes) -> Signature:
        with self._lock:
            pk = self._sk_to_pk.get(private_handle)
            if pk is None:
                raise UnknownKey(private_handle)
            tok = self._token()
            self._sig_registry[tok] = (SchemeTag.PK_SIG, pk, _digest(msg))
        return Signature(tok, SchemeTag.PK_SIG)

    def verify(self, public_handle: str, msg: bytes, sig: Signature) -> bool:
        if sig.scheme_tag is not SchemeTag.PK_SIG:
            return False
        return self._sig_registry.get(sig.data) == (SchemeTag.PK_SIG, public_handle, _digest(msg))

    # -- symmetric (delegates to the stateless primitives) ----------------

    def sym_encrypt_cbc(self, key: SymmetricKey, plaintext: bytes, iv: bytes) -> Ciphertext:
        return cbc_encrypt(key, plaintext, iv)

    def sym_decrypt_cbc(self, key: SymmetricKey, ciphertext: Ciphertext) -> bytes:
        return cbc_decrypt(key, ciphertext)

    def mac(self, key: SymmetricKey, msg: bytes) -> MacTag:
        return mac(key, msg)

    def mac_verify(self, key: SymmetricKey, msg: bytes, tag: MacTag) -> bool:
        return mac_verify(key, msg, tag)

    # -- identity-based signatures ----------------------------------------

    def ibs_extract(self, identity: str) -> str:
        """Trusted-authority step: derive the signing handle for ``identity``."""
        if not identity:
            raise ValueError("identity must be non-empty")
        with self._lock:
            handle = self._ibs_by_identity.get(identity)
            if handle is None:
                handle = self._handle("ibk")
                self._ibs_handles[handle] = identity
                self._ibs_by_identity[identity] = handle
        return handle

    def ibs_sign(self, handle: str, msg: bytes) -> Signature:
        with self._lock:
            identity = self._ibs_handles.get(handle)
            if identity is None:
                raise UnknownIdentity(handle)
            tok = self._token()
            self._sig_registry[tok] = (SchemeTag.IBS, identity, _digest(msg))
        return Signature(tok, SchemeTag.IBS)

    def ibs_verify(self, identity: str, msg: bytes, sig: Signature) -> bool:
        if sig.scheme_tag is not SchemeTag.IBS:
            return False
        return self._sig_registry.get(sig.data) == (SchemeTag.IBS, identity, _digest(msg))

    # -- group signatures ---------------------------------------------------

    def group_setup(self, leader_id: str) -> str:
        with self._lock:
            gpk = self._handle("gpk")
            self._groups[gpk] = _GroupState(opener=leader_id)
        return gpk

    def _group(self, gpk: str) -> _GroupState:
        state = self._groups.get(gpk)
        if state is None:
            raise UnknownGroup(gpk)
        return state

    def group_issue(self, group_public_handle: str, member_id: str, issuer: str) -> GroupCredential:
        with self._lock:
            state = self._group(group_public_handle)
            if issuer != state.opener:
                raise NotLeader(f"{issuer} cannot issue for {group_public_handle}")
            if member_id in state.members.values():
                # one credential per (group, member, epoch): reissue the existing one
                gsk = next(h for h, m in state.members.items() if m == member_id)
            else:
                gsk = self._handle("gsk")
                state.members[gsk] = member_id
                self._credentials[gsk] = (group_public_handle, member_id)
            state.revoked.discard(member_id)
        return GroupCredential(group_public_handle, gsk, member_id)

    def group_revoke(self, group_public_handle: str, member_id: str, issuer: str) -> None:
        with self._lock:
            state = self._group(group_public_handle)
            if issuer != state.opener:
                raise NotLeader(issuer)
            state.revoked.add(member_id)

    def group_sign(self, credential: GroupCredential, msg: bytes) -> Signature:
        with self._lock:
            bound = self._credentials.get(credential.member_private_handle)
            if bound is None or bound[0] != credential.group_public_handle:
                raise UnknownKey("credential was not issued by this provider")
            tok = self._token()
            self._sig_registry[tok] = (SchemeTag.GSIG, bound[0], bound[1], _digest(msg))
        return Signature(tok, SchemeTag.GSIG)

    def group_verify(self, group_public_handle: str, msg: bytes, sig: Signature) -> bool:
        if sig.scheme_tag is not SchemeTag.GSIG:
            return False
        entry = self._sig_registry.get(sig.data)
        if entry is None or entry[0] is not SchemeTag.GSIG:
            return False
        _, gpk, member_id, digest = entry
        if gpk != group_public_handle or digest != _digest(msg):
            return False
        state = self._groups.get(gpk)
        return state is not None and member_id not in state.revoked

    def group_open(self, leader_id: str, sig: Signature) -> str:
        entry = self._sig_registry.get(sig.data) if sig.scheme_tag is SchemeTag.GSIG else None
        if entry is None or entry[0] is not SchemeTag.GSIG:
            raise UnknownKey("not a group signature issued by this provider")
        gpk, member_id = entry[1], entry[2]
        if self._group(gpk).opener != leader_id:
            raise NotLeader(f"{leader_id} is not the opener of {gpk}")
        return member_id

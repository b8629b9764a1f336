"""On-air message container and its stable serialized form."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from .crypto import Ciphertext, MacTag, SchemeTag, Signature, _Sealed


class MsgKind(str, Enum):
    I2V_BCAST = "I2V-BCAST"
    V2I_REQ = "V2I-REQ"
    V2I_CHAL = "V2I-CHAL"
    V2I_RESP = "V2I-RESP"
    INTRA = "INTRA"
    INTER = "INTER"
    JOIN_REQ = "JOIN-REQ"
    KEY_DELIVERY = "KEY-DELIVERY"


_SEALED_TYPES = {"Signature": Signature, "MacTag": MacTag, "Ciphertext": Ciphertext}


def _encode(value: Any) -> Any:
    if isinstance(value, _Sealed):
        return {"type": type(value).__name__, "scheme": value.scheme_tag.value, "data": value.data.hex()}
    if isinstance(value, bytes):
        return {"type": "bytes", "data": value.hex()}
    if isinstance(value, (list, tuple)):
        return [_encode(v) for v in value]
    return value


def _decode(value: Any) -> Any:
    if isinstance(value, dict):
        data = bytes.fromhex(value["data"])
        if value["type"] == "bytes":
            return data
        return _SEALED_TYPES[value["type"]](data, SchemeTag(value["scheme"]))
    if isinstance(value, list):
        return tuple(_decode(v) for v in value)
    return value


@dataclass(frozen=True)
class Envelope:
    msg_id: str
    kind: MsgKind
    sender_hint: str
    payload: bytes
    auth: dict[str, Any] = field(default_factory=dict)
    hop_path: tuple[str, ...] = ()
    timestamp: float = 0.0

    def to_record(self) -> dict[str, Any]:
        return {
            "msg_id": self.msg_id,
            "kind": self.kind.value,
            "sender_hint": self.sender_hint,
            "payload": self.payload.hex(),
            "auth": {name: _encode(v) for name, v in self.auth.items()},
            "hop_path": list(self.hop_path),
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> Envelope:
        return cls(
            msg_id=rec["msg_id"],
            kind=MsgKind(rec["kind"]),
            sender_hint=rec["sender_hint"],
            payload=bytes.fromhex(rec["payload"]),
            auth={name: _decode(v) for name, v in rec["auth"].items()},
            hop_path=tuple(rec["hop_path"]),
            timestamp=rec["timestamp"],
        )

    def serialize(self) -> bytes:
        return json.dumps(self.to_record(), separators=(",", ":")).encode()

    def digest(self) -> str:
        return hashlib.sha256(self.serialize()).hexdigest()[:16]

    def bound_bytes(self, **context: Any) -> bytes:
        """Canonical bytes an authenticator covers: header, payload and ``context``."""
        head = [self.msg_id, self.kind.value, self.sender_hint, self.payload.hex(), repr(self.timestamp)]
        head.extend(f"{k}={context[k]}" for k in sorted(context))
        return "\x1f".join(head).encode()

    def with_hop(self, node_id: str) -> Envelope:
        return dataclasses.replace(self, hop_path=self.hop_path + (node_id,))

    def tampered(self, rng: random.Random) -> Envelope:
        """Copy with one payload bit flipped."""
        if not self.payload:
            raise ValueError("cannot tamper with an empty payload")
        buf = bytearray(self.payload)
        bit = rng.randrange(len(buf) * 8)
        buf[bit // 8] ^= 1 << (bit % 8)
        return dataclasses.replace(self, payload=bytes(buf))

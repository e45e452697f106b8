"""Domain core: canonical encoding, hashing, Merkle roots, signatures, money and ids.

Every commitment in the kernel is ``hash256(canonical_serialize(record))``, so
the encoding here must be byte-stable: a restricted JSON profile with sorted
keys, no whitespace and no floats.
"""

from __future__ import annotations

import base64
import hashlib
import json
import random
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .errors import (
    AmountOverflow,
    CurrencyMismatch,
    EmptyLeafSet,
    NonCanonicalValue,
)

LEAF_PREFIX = b"\x00"
NODE_PREFIX = b"\x01"

# signed 64-bit ceiling, mirrors what an on-chain uint would refuse
MAX_MINOR_UNITS = 2**63 - 1


class Digest:
    """A 32-byte SHA-256 value, rendered as 64 lowercase hex chars externally."""

    __slots__ = ("_raw",)

    def __init__(self, raw: bytes):
        if not isinstance(raw, (bytes, bytearray)) or len(raw) != 32:
            raise ValueError("digest must be exactly 32 bytes")
        self._raw = bytes(raw)

    @classmethod
    def from_hex(cls, text: str) -> "Digest":
        if not isinstance(text, str) or len(text) != 64 or text != text.lower():
            raise ValueError(f"not a canonical digest: {text!r}")
        return cls(bytes.fromhex(text))

    @classmethod
    def zero(cls) -> "Digest":
        return cls(bytes(32))

    @property
    def raw(self) -> bytes:
        return self._raw

    def hex(self) -> str:
        return self._raw.hex()

    def __bytes__(self):
        return self._raw

    def __eq__(self, other):
        return isinstance(other, Digest) and other._raw == self._raw

    def __hash__(self):
        return hash(self._raw)

    def __repr__(self):
        return f"Digest({self.hex()[:16]}...)"

    def __str__(self):
        return self.hex()


def _encode(value, out: list) -> None:
    # bool first: bool is an int subclass
    if value is None:
        out.append("null")
    elif value is True:
        out.append("true")
    elif value is False:
        out.append("false")
    elif isinstance(value, int):
        out.append(str(int(value)))
    elif isinstance(value, str):
        out.append(json.dumps(value, ensure_ascii=False))
    elif isinstance(value, Digest):
        out.append('"' + value.hex() + '"')
    elif isinstance(value, dict):
        for k in value:
            if not isinstance(k, str):
                raise NonCanonicalValue(f"map key {k!r} is not a string")
        out.append("{")
        for i, k in enumerate(sorted(value, key=lambda s: s.encode("utf-8"))):
            if i:
                out.append(",")
            out.append(json.dumps(k, ensure_ascii=False))
            out.append(":")
            _encode(value[k], out)
        out.append("}")
    elif isinstance(value, (list, tuple)):
        out.append("[")
        for i, item in enumerate(value):
            if i:
                out.append(",")
            _encode(item, out)
        out.append("]")
    elif isinstance(value, float):
        raise NonCanonicalValue(f"floating-point value {value!r}")
    else:
        raise NonCanonicalValue(f"unsupported type {type(value).__name__}")


def canonical_serialize(value) -> bytes:
    """Serialize maps/lists/str/int/bool/None/Digest to canonical JSON bytes."""
    out: list = []
    _encode(value, out)
    return "".join(out).encode("utf-8")


def canonical_text(value) -> str:
    return canonical_serialize(value).decode("utf-8")


def hash256(data: bytes) -> Digest:
    return Digest(hashlib.sha256(data).digest())


def commit(record) -> Digest:
    """Commitment to a structured record: hash of its canonical bytes."""
    return hash256(canonical_serialize(record))


def leaf_digest(leaf: bytes) -> Digest:
    return hash256(LEAF_PREFIX + leaf)


def node_digest(left: Digest, right: Digest) -> Digest:
    return hash256(NODE_PREFIX + left.raw + right.raw)


def merkle_root(leaves) -> Digest:
    """Domain-separated Merkle root; an odd trailing node is promoted unchanged."""
    level = [leaf_digest(bytes(leaf)) for leaf in leaves]
    if not level:
        raise EmptyLeafSet("merkle_root needs at least one leaf")
    while len(level) > 1:
        nxt = [node_digest(level[i], level[i + 1]) for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]


# -- signatures -------------------------------------------------------------


@dataclass(frozen=True)
class KeyPair:
    public_key: bytes
    secret_key: bytes = field(repr=False)


def keygen(rng: random.Random) -> KeyPair:
    """Ed25519 key pair whose seed is drawn from the run PRNG (reproducible)."""
    seed = rng.randbytes(32)
    sk = Ed25519PrivateKey.from_private_bytes(seed)
    pk = sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    return KeyPair(public_key=pk, secret_key=seed)


def sign(secret_key: bytes, msg: bytes) -> bytes:
    return Ed25519PrivateKey.from_private_bytes(secret_key).sign(msg)


def verify(public_key: bytes, msg: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(bytes(public_key)).verify(bytes(signature), msg)
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True


def b64url(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def b64url_decode(text: str) -> bytes:
    return base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))


# -- money ------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class Amount:
    """Integer minor units (cents for USD). $1 == 100 minor units."""

    minor_units: int
    currency: str = "USD"

    def __post_init__(self):
        if isinstance(self.minor_units, bool) or not isinstance(self.minor_units, int):
            raise TypeError("minor_units must be an int")
        if self.minor_units < 0:
            raise ValueError("amounts are non-negative")
        if self.minor_units > MAX_MINOR_UNITS:
            raise AmountOverflow(self.minor_units)

    def _check(self, other: "Amount") -> None:
        if not isinstance(other, Amount):
            raise TypeError(f"expected Amount, got {type(other).__name__}")
        if other.currency != self.currency:
            raise CurrencyMismatch(f"{self.currency} vs {other.currency}")

    def __add__(self, other: "Amount") -> "Amount":
        self._check(other)
        return Amount(self.minor_units + other.minor_units, self.currency)

    def __sub__(self, other: "Amount") -> "Amount":
        self._check(other)
        if other.minor_units > self.minor_units:
            raise ValueError("amount subtraction would go negative")
        return Amount(self.minor_units - other.minor_units, self.currency)

    @classmethod
    def zero(cls, currency: str = "USD") -> "Amount":
        return cls(0, currency)

    def to_record(self) -> dict:
        return {"minor_units": self.minor_units, "currency": self.currency}

    @classmethod
    def from_record(cls, rec) -> "Amount":
        if isinstance(rec, int) and not isinstance(rec, bool):
            return cls(rec)
        return cls(rec["minor_units"], rec.get("currency", "USD"))


def total(amounts, currency: str = "USD") -> Amount:
    acc = Amount.zero(currency)
    for a in amounts:
        acc = acc + a
    return acc


# -- identifiers and time ---------------------------------------------------


def parse_rail_id(rail_id: str) -> tuple:
    """Split ``"<family>:<network>"``; exactly one separator, both halves non-empty."""
    if not isinstance(rail_id, str) or rail_id.count(":") != 1:
        raise ValueError(f"malformed rail_id {rail_id!r}")
    family, network = rail_id.split(":")
    if not family or not network:
        raise ValueError(f"malformed rail_id {rail_id!r}")
    return family, network


class IdFactory:
    """Run-unique opaque ids: a per-kind counter plus PRNG salt."""

    def __init__(self, rng: random.Random):
        self._rng = rng
        self._counters: dict = {}

    def new(self, kind: str) -> str:
        n = self._counters.get(kind, 0) + 1
        self._counters[kind] = n
        return f"{kind}-{n:04d}-{self._rng.getrandbits(32):08x}"


class Clock:
    """Logical time. The kernel has no wall clock.

    ``stamp()`` hands out a global sequence number, which orders events that
    share a tick (an anchor and the block that follows it, say).
    """

    def __init__(self, start: int = 0):
        self.now = start
        self.seq = 0

    def stamp(self) -> int:
        self.seq += 1
        return self.seq

    def advance(self, n: int = 1) -> int:
        if n < 0:
            raise ValueError("time only moves forward")
        self.now += n
        return self.now

"""Audit rails (hash-chained receipt ledger) and the telemetry store."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .core import Amount, Digest, canonical_serialize, commit, hash256

GENESIS_PREV = Digest.zero()


@dataclass(frozen=True)
class AuditEvent:
    seq: int
    event_type: str
    workflow_id: str | None
    escrow_id: str | None
    payload_hash: Digest
    prev_hash: Digest
    tick: int
    event_hash: Digest

    def body(self) -> dict:
        return {
            "seq": self.seq,
            "event_type": self.event_type,
            "workflow_id": self.workflow_id,
            "escrow_id": self.escrow_id,
            "payload_hash": self.payload_hash,
            "prev_hash": self.prev_hash,
            "tick": self.tick,
        }

    def to_record(self) -> dict:
        rec = self.body()
        rec["event_hash"] = self.event_hash
        return rec

    def to_bytes(self) -> bytes:
        return canonical_serialize(self.to_record())


class AuditLedger:
    """Append-only event log; each event links to the hash of its predecessor.

    Each event also carries ``event_hash`` (hash of its own body) so that the
    final line of an exported file is tamper-evident without a successor.
    """

    def __init__(self, clock):
        self._clock = clock
        self._events: list = []
        self._payloads: list = []

    def __len__(self):
        return len(self._events)

    @property
    def events(self) -> tuple:
        return tuple(self._events)

    def head_hash(self) -> Digest:
        if not self._events:
            return GENESIS_PREV
        return hash256(self._events[-1].to_bytes())

    def append(self, event_type: str, refs: dict | None = None, payload=None) -> AuditEvent:
        refs = refs or {}
        prev = self.head_hash()
        payload = {} if payload is None else payload
        body = {
            "seq": len(self._events),
            "event_type": event_type,
            "workflow_id": refs.get("workflow_id"),
            "escrow_id": refs.get("escrow_id"),
            "payload_hash": commit(payload),
            "prev_hash": prev,
            "tick": self._clock.now,
        }
        ev = AuditEvent(**body, event_hash=commit(body))
        self._events.append(ev)
        self._payloads.append(payload)
        return ev

    def payload(self, seq: int):
        return self._payloads[seq]

    def find(self, event_type: str | None = None, **refs) -> list:
        out = []
        for ev in self._events:
            if event_type is not None and ev.event_type != event_type:
                continue
            if any(getattr(ev, k) != v for k, v in refs.items()):
                continue
            out.append(ev)
        return out

    def export_jsonl(self, path) -> Path:
        path = Path(path)
        with path.open("wb") as fh:
            for ev in self._events:
                fh.write(ev.to_bytes() + b"\n")
        return path

    def to_jsonl_bytes(self) -> bytes:
        return b"".join(ev.to_bytes() + b"\n" for ev in self._events)


def verify_audit_chain(events) -> bool:
    """Walk AuditEvent objects (or their records) recomputing every link."""
    lines = []
    for ev in events:
        if isinstance(ev, AuditEvent):
            lines.append(ev.to_bytes())
        else:
            lines.append(canonical_serialize(ev))
    return verify_audit_lines(lines)


def _parse_digest(value) -> Digest | None:
    try:
        return Digest.from_hex(value)
    except (ValueError, TypeError):
        return None


_FIELDS = {"seq", "event_type", "workflow_id", "escrow_id", "payload_hash", "prev_hash", "tick", "event_hash"}


def verify_audit_lines(lines) -> bool:
    prev = GENESIS_PREV
    for expected_seq, line in enumerate(lines):
        try:
            rec = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, ValueError):
            return False
        if not isinstance(rec, dict) or set(rec) != _FIELDS:
            return False
        try:
            if canonical_serialize(rec) != line:
                return False
        except Exception:
            return False
        if rec["seq"] != expected_seq or not isinstance(rec["tick"], int):
            return False
        stored_prev = _parse_digest(rec["prev_hash"])
        stored_self = _parse_digest(rec["event_hash"])
        if stored_prev is None or stored_self is None or _parse_digest(rec["payload_hash"]) is None:
            return False
        if stored_prev != prev:
            return False
        body = {k: v for k, v in rec.items() if k != "event_hash"}
        if hash256(canonical_serialize(body)) != stored_self:
            return False
        prev = hash256(line)
    return True


def verify_audit_file(path) -> bool:
    data = Path(path).read_bytes()
    if not data:
        return True
    if not data.endswith(b"\n"):
        return False
    return verify_audit_lines(data[:-1].split(b"\n"))


@dataclass(frozen=True)
class TelemetrySample:
    workflow_id: str
    step_label: str
    latency_ms: int
    tokens: int
    cost: Amount
    tick: int

    def __post_init__(self):
        if self.latency_ms < 0:
            raise ValueError("latency_ms must be >= 0")
        if self.tokens < 0:
            raise ValueError("tokens must be >= 0")

    def to_record(self) -> dict:
        return {
            "workflow_id": self.workflow_id,
            "step_label": self.step_label,
            "latency_ms": self.latency_ms,
            "tokens": self.tokens,
            "cost": self.cost.to_record(),
            "tick": self.tick,
        }


class TelemetryStore:
    """Raw samples stay off-chain; only the per-session hash is anchored."""

    def __init__(self):
        self._samples: dict = {}

    def record_telemetry(self, sample: TelemetrySample) -> None:
        self._samples.setdefault(sample.workflow_id, []).append(sample)

    def samples(self, workflow_id: str) -> list:
        return list(self._samples.get(workflow_id, ()))

    def telemetry_session_hash(self, workflow_id: str) -> Digest:
        return commit([s.to_record() for s in self._samples.get(workflow_id, ())])

    def to_record(self) -> dict:
        return {wf: [s.to_record() for s in ss] for wf, ss in self._samples.items()}

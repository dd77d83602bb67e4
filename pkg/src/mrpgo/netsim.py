"""Deterministic synchronous message-passing simulator with byte accounting.

Execution proceeds in rounds: every message sent during round k is delivered
at the start of round k+1, before any compute. Within a round, robots
compute in sorted-id order and deliveries are sorted by (from, to, sequence),
so a run is a pure function of (protocol, seed). Actors must keep their
state in per-robot slots; the simulator gives them no shared mutable state.

Wire encoding for the ledger (little-endian): every message carries a
16-byte header {kind:u8, from:u8, to:u8, pad:u8, round:u32, count:u32,
reserved:u32} plus an 8-byte payload length, i.e. a 24-byte envelope. Body
entries: a pose is 7 f64 (quaternion + translation) plus an 8-byte node id
= 64 bytes; a rank-r lifted pose is 4r f64 plus the id; a weight update is
one f64 plus an 8-byte edge id = 16 bytes; control values are 8 bytes each.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol

import numpy as np

from .geometry import LiftedPose, Pose3

ENVELOPE_BYTES = 24
POSE_ENTRY_BYTES = 7 * 8 + 8
WEIGHT_ENTRY_BYTES = 8 + 8


class MessageKind(Enum):
    PUBLIC_POSES = "public_poses"
    WEIGHT_UPDATE = "weight_update"
    FRAME_ALIGNMENT_RESULT = "frame_alignment_result"
    SPANNING_TREE_GROW = "spanning_tree_grow"
    CONTROL = "control"


# ledger column for Table-style per-module breakdowns
MODULE_OF_KIND = {
    MessageKind.FRAME_ALIGNMENT_RESULT: "init",
    MessageKind.SPANNING_TREE_GROW: "init",
    MessageKind.PUBLIC_POSES: "dpgo",
    MessageKind.WEIGHT_UPDATE: "dpgo",
    MessageKind.CONTROL: "dpgo",
}


def payload_size(kind: MessageKind, payload: Any) -> int:
    """Total message bytes: 24-byte envelope plus per-entry body bytes."""
    body = 0
    if payload is None:
        body = 0
    elif kind is MessageKind.PUBLIC_POSES:
        for _, value in payload:
            if isinstance(value, LiftedPose):
                body += 8 + 8 * 4 * value.rank
            else:
                body += POSE_ENTRY_BYTES
    elif kind is MessageKind.WEIGHT_UPDATE:
        body = WEIGHT_ENTRY_BYTES * len(payload)
    elif kind in (MessageKind.FRAME_ALIGNMENT_RESULT, MessageKind.SPANNING_TREE_GROW):
        body = POSE_ENTRY_BYTES  # one transform
    elif kind is MessageKind.CONTROL:
        body = 8 * len(payload)
    else:  # pragma: no cover
        raise TypeError(f"unsized payload for kind {kind}")
    return ENVELOPE_BYTES + body


@dataclass(frozen=True)
class Message:
    sender: int
    receiver: int
    kind: MessageKind
    payload: Any
    round: int
    payload_bytes: int


class LocalityViolation(RuntimeError):
    pass


@dataclass
class Ledger:
    """Complete record of simulated traffic with per-module byte totals."""

    entries: list[Message] = field(default_factory=list)

    def record(self, msg: Message) -> None:
        self.entries.append(msg)

    def total_bytes(self, module: str | None = None) -> int:
        if module is None:
            return sum(m.payload_bytes for m in self.entries)
        return sum(
            m.payload_bytes for m in self.entries if MODULE_OF_KIND[m.kind] == module
        )

    def message_count(self, kind: MessageKind | None = None) -> int:
        if kind is None:
            return len(self.entries)
        return sum(1 for m in self.entries if m.kind is kind)

    def messages(self, kind: MessageKind | None = None) -> list[Message]:
        if kind is None:
            return list(self.entries)
        return [m for m in self.entries if m.kind is kind]

    def rounds_with(self, kind: MessageKind) -> list[int]:
        return sorted({m.round for m in self.entries if m.kind is kind})

    def per_round_bytes(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for m in self.entries:
            out[m.round] = out.get(m.round, 0) + m.payload_bytes
        return out

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["round", "from", "to", "kind", "bytes"])
            for m in self.entries:
                writer.writerow([m.round, m.sender, m.receiver, m.kind.value, m.payload_bytes])


class RoundProtocol(Protocol):
    """Per-round handlers driven by :func:`run_rounds`.

    ``compute`` is called once per robot per round (sorted ids) with the
    messages delivered to that robot this round; it returns outgoing
    (receiver, kind, payload) triples. ``finished`` is polled after each
    round; ``outputs`` is collected at the end.
    """

    def compute(self, robot: int, round_no: int, inbox: list[Message], ctx: "SimContext") -> Iterable[tuple[int, MessageKind, Any]]: ...

    def finished(self, round_no: int) -> bool: ...

    def outputs(self) -> Any: ...


@dataclass
class SimContext:
    rng: np.random.Generator
    round_no: int = 0


class ProtocolError(RuntimeError):
    def __init__(self, round_no: int, robot: int, cause: BaseException):
        super().__init__(f"protocol handler failed at round {round_no}, robot {robot}: {cause}")
        self.round_no = round_no
        self.robot = robot
        self.__cause__ = cause


class Simulator:
    """Synchronous-round scheduler; optional send predicates guard every message."""

    def __init__(self):
        self._send_checks: list[Callable[[Message], None]] = []

    def register_send_check(self, check: Callable[[Message], None]) -> None:
        self._send_checks.append(check)

    def run_rounds(
        self,
        robots: Iterable[int],
        protocol: RoundProtocol,
        max_rounds: int,
        seed: int = 0,
    ) -> tuple[Any, Ledger]:
        robot_ids = sorted(robots)
        if any(not (0 <= r <= 255) for r in robot_ids):
            raise ValueError("robot ids must fit the u8 header field")
        ledger = Ledger()
        ctx = SimContext(rng=np.random.default_rng(seed))
        pending: list[Message] = []
        for round_no in range(max_rounds):
            ctx.round_no = round_no
            inboxes: dict[int, list[Message]] = {r: [] for r in robot_ids}
            for m in sorted(pending, key=lambda m: (m.sender, m.receiver)):
                inboxes[m.receiver].append(m)
            pending = []
            for robot in robot_ids:
                try:
                    out = protocol.compute(robot, round_no, inboxes[robot], ctx) or []
                except ProtocolError:
                    raise
                except Exception as e:
                    raise ProtocolError(round_no, robot, e) from e
                for receiver, kind, payload in out:
                    if receiver not in inboxes:
                        raise ProtocolError(
                            round_no, robot, ValueError(f"unknown receiver {receiver}")
                        )
                    msg = Message(
                        sender=robot,
                        receiver=receiver,
                        kind=kind,
                        payload=payload,
                        round=round_no,
                        payload_bytes=payload_size(kind, payload),
                    )
                    for check in self._send_checks:
                        check(msg)
                    ledger.record(msg)
                    pending.append(msg)
            if protocol.finished(round_no):
                break
        return protocol.outputs(), ledger


def run_rounds(
    robots: Iterable[int],
    protocol: RoundProtocol,
    max_rounds: int,
    seed: int = 0,
) -> tuple[Any, Ledger]:
    return Simulator().run_rounds(robots, protocol, max_rounds, seed)

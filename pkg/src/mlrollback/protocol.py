"""Sender-based payload logging, the send wrapper and the replay routine.

No event log exists: after a failure every process contributes only its
current iteration (the front line), and the replay routine regenerates the
send sequence from the kernel's static schedule.

Iteration numbers are 0-based counts of committed iterations. A checkpoint
taken at ``cp`` holds ``cp`` committed iterations, and a payload sent during
iteration ``i`` is logged iff ``i - cp < log_size``. A survivor sitting at
iteration ``c`` can therefore replay everything it sent since the checkpoint
iff ``c - cp <= log_size``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .sim import FailureDetected, SendOutcome, World, post_send

Schedule = Callable[[int, int], Sequence[tuple[int, int]]]


class MissingLogEntry(LookupError):
    """A replay needed a payload that was never stored or has been evicted."""


class SendAction(enum.Enum):
    SENT_AND_LOGGED = "sent"
    REPLAYED = "replayed"
    SKIPPED_FUTURE = "skipped_future"
    SKIPPED_IRRELEVANT = "skipped_irrelevant"


class Rollback(enum.Enum):
    LOCAL = "local"
    GLOBAL = "global"


@dataclass
class PayloadLog:
    entries: dict[tuple[int, int, int], bytes] = field(default_factory=dict)
    bytes_total: int = 0
    window_start: int = 0
    peak_bytes: int = 0
    capped: int = 0

    def store(self, iter: int, dst: int, seq: int, payload: bytes) -> None:
        key = (iter, dst, seq)
        old = self.entries.get(key)
        if old is not None:
            # re-execution of an aborted iteration logs identical bytes again
            self.bytes_total -= len(old)
        self.entries[key] = bytes(payload)
        self.bytes_total += len(payload)
        self.peak_bytes = max(self.peak_bytes, self.bytes_total)

    def evict_before(self, iter: int) -> None:
        for key in [k for k in self.entries if k[0] < iter]:
            self.bytes_total -= len(self.entries.pop(key))
        self.window_start = max(self.window_start, iter)

    def clear(self, window_start: int) -> None:
        self.entries.clear()
        self.bytes_total = 0
        self.window_start = window_start

    def retained_iters(self) -> set[int]:
        return {k[0] for k in self.entries}

    def check(self, last_cp_iter: int, log_size: int) -> None:
        if self.bytes_total != sum(len(v) for v in self.entries.values()):
            raise AssertionError("bytes_total out of sync with retained payloads")
        iters = self.retained_iters()
        if iters:
            if max(iters) - min(iters) >= log_size:
                raise AssertionError(f"log spans more than {log_size} iterations")
            if min(iters) < last_cp_iter or max(iters) - last_cp_iter >= log_size:
                raise AssertionError("log holds payloads outside the green zone")


@dataclass
class ProtocolState:
    rank: int
    n_procs: int
    cp_int: int
    log_size: int
    last_cp_iter: int = 0
    log: PayloadLog = field(default_factory=PayloadLog)
    peer_iters: list[int] = field(default_factory=list)
    replayed: int = 0
    strict: bool = False

    def __post_init__(self):
        if not self.peer_iters:
            self.peer_iters = [0] * self.n_procs

    def on_checkpoint(self, iter: int) -> None:
        self.last_cp_iter = iter
        self.log.evict_before(iter)


def append_log(proto: ProtocolState, iter: int, dst: int, seq: int, payload: bytes) -> bool:
    """Store a payload unless the capping rule excludes its iteration."""
    log = proto.log
    if iter < log.window_start:
        raise ValueError(f"append for iteration {iter} below window start {log.window_start}")
    if iter - proto.last_cp_iter >= proto.log_size:
        log.capped += 1
        return False
    log.store(iter, dst, seq, payload)
    if proto.strict:
        log.check(proto.last_cp_iter, proto.log_size)
    return True


def get_log(log: PayloadLog, iter: int, dst: int, seq: int) -> bytes:
    try:
        return log.entries[(iter, dst, seq)]
    except KeyError:
        raise MissingLogEntry(f"no payload for iteration {iter}, dst {dst}, seq {seq}") from None


def send_wrapper(proto: ProtocolState, world: World, dst: int, tag: int,
                 payload: bytes | None, current_iter: int, seq: int) -> SendAction:
    """Route one kernel send attributed to ``current_iter``.

    The dispatch compares ``current_iter`` with the peer iterations:
    a destination that has already completed the iteration does not need
    the message; a sender that is past the iteration replays it from the
    log; otherwise it is a regular send, logged first.
    """
    me = proto.rank
    if current_iter < proto.peer_iters[dst]:
        if current_iter < proto.peer_iters[me]:
            return SendAction.SKIPPED_IRRELEVANT
        if payload is not None:
            # keep the log complete so a later failure in this interval can be replayed
            append_log(proto, current_iter, dst, seq, payload)
        return SendAction.SKIPPED_FUTURE
    if current_iter < proto.peer_iters[me]:
        data = get_log(proto.log, current_iter, dst, seq)
        action = SendAction.REPLAYED
        proto.replayed += 1
    else:
        if payload is None:
            raise ValueError("a regular send needs a payload")
        append_log(proto, current_iter, dst, seq, payload)
        data = payload
        action = SendAction.SENT_AND_LOGGED
    if post_send(world, me, dst, tag, data, current_iter, seq) is SendOutcome.REVOKED_ERROR:
        raise FailureDetected(me, dst)
    return action


@dataclass(frozen=True)
class FrontLine:
    iters: tuple[int, ...]

    @property
    def minit(self) -> int:
        return min(self.iters)

    @property
    def maxit(self) -> int:
        return max(self.iters)


def gather_front_line(world: World, protos: Sequence[ProtocolState]) -> FrontLine:
    """Allgather of current iterations; overwrites every ``peer_iters``."""
    front = FrontLine(tuple(p.current_iter for p in world.procs))
    for proto in protos:
        proto.peer_iters = list(front.iters)
    world.record(None, "front_line", None, front.minit, None, f"max={front.maxit}")
    return front


def decide_rollback(front: FrontLine, last_cp_iter: int, log_size: int) -> Rollback:
    if front.maxit - last_cp_iter <= log_size:
        return Rollback.LOCAL
    return Rollback.GLOBAL


def replay(proto: ProtocolState, world: World, front: FrontLine, schedule: Schedule,
           own_iter: int) -> list[SendAction]:
    """Re-issue the sends of iterations ``[front.minit, own_iter)`` from the log.

    No receives are posted and no kernel computation runs.
    """
    actions = []
    for it in range(front.minit, own_iter):
        seqs: dict[int, int] = {}
        for dst, tag in schedule(proto.rank, it):
            seq = seqs.get(dst, 0)
            seqs[dst] = seq + 1
            action = send_wrapper(proto, world, dst, tag, None, it, seq)
            world.record(proto.rank, "replay", dst, it, None, action.value)
            actions.append(action)
    return actions


"""Deterministic virtual runtime with MPI-like point-to-point semantics.

Processes never run concurrently: a scheduler (see :mod:`mlrollback.runtime`)
interleaves them in ascending rank order. Failures are fail-stop and can only
be observed from inside a communication call, in the style of ULFM.
"""
from __future__ import annotations

import enum
import json
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Iterable


class SimulationError(RuntimeError):
    """Base class for errors raised by the virtual runtime."""


class ConfigError(SimulationError):
    pass


class DeadlockError(SimulationError):
    pass


class FailureDetected(Exception):
    """Raised into a process when a communication call observes a failure.

    Not an error: this is the entry point into recovery.
    """

    def __init__(self, rank: int, peer: int | None = None):
        super().__init__(rank, peer)
        self.rank = rank
        self.peer = peer


class Status(enum.Enum):
    ALIVE = "alive"
    DEAD = "dead"
    RESPAWNED = "respawned"


class SendOutcome(enum.Enum):
    BUFFERED = "buffered"
    REVOKED_ERROR = "revoked"


class RecvStatus(enum.Enum):
    DATA = "data"
    FAILURE_DETECTED = "failure_detected"
    # no matching message yet and nothing has failed; the caller must retry
    PENDING = "pending"


@dataclass(frozen=True)
class RecvOutcome:
    status: RecvStatus
    message: "Message | None" = None

    @property
    def payload(self) -> bytes | None:
        return None if self.message is None else self.message.payload


@dataclass(frozen=True)
class Message:
    src: int
    dst: int
    tag: int
    iter: int
    seq: int
    payload: bytes
    epoch: int

    @property
    def key(self) -> tuple[int, int, int, int]:
        return (self.src, self.dst, self.iter, self.seq)


@dataclass(frozen=True)
class FailureSpec:
    """Kill ``rank`` at failure point ``phase`` of iteration ``iter``.

    Iterations are 0-based; iteration ``i`` is the one executed by a process
    that has committed exactly ``i`` iterations. ``phase`` indexes the kernel's
    failure points (one per communication phase, see ``Kernel.kill_points``).
    """

    rank: int
    iter: int
    phase: int

    @classmethod
    def parse(cls, text: str) -> "FailureSpec":
        try:
            rank, it, phase = (int(p) for p in text.split(":"))
        except ValueError:
            raise ConfigError(f"bad failure spec {text!r}, expected rank:iter:phase") from None
        return cls(rank, it, phase)

    def __str__(self) -> str:
        return f"{self.rank}:{self.iter}:{self.phase}"


@dataclass
class VirtualProcess:
    rank: int
    status: Status = Status.ALIVE
    inbox: dict[tuple[int, int], deque[Message]] = field(default_factory=dict)
    current_iter: int = 0
    observed_revocation: bool = False

    @property
    def alive(self) -> bool:
        return self.status is not Status.DEAD

    def inbox_size(self) -> int:
        return sum(len(q) for q in self.inbox.values())


TRACE_FIELDS = ("step", "rank", "op", "peer", "iter", "phase", "outcome")


class World:
    """Set of virtual processes, their mailboxes and the communicator epoch."""

    def __init__(self, n_procs: int, rng_seed: int = 0, *, trace: bool = True):
        if n_procs < 1:
            raise ConfigError("n_procs must be >= 1")
        self.n_procs = n_procs
        self.procs = [VirtualProcess(r) for r in range(n_procs)]
        self.epoch = 0
        self.failed: set[int] = set()
        self.revoked = False
        self.rng_seed = rng_seed
        self.trace_enabled = trace
        self.trace: list[tuple] = []
        self.step = 0
        # counts every operation that changes state; used for deadlock detection
        self.op_count = 0
        self.barriers: dict[Any, set[int]] = {}
        self.pending_failures: list[FailureSpec] = []
        self.n_iters: int | None = None
        self.n_failure_points: int | None = None
        self.finished = False

    def record(self, rank, op, peer=None, iter=None, phase=None, outcome=None) -> None:
        if self.trace_enabled:
            self.trace.append((self.step, rank, op, peer, iter, phase, outcome))

    def events(self) -> Iterable[dict]:
        for ev in self.trace:
            yield dict(zip(TRACE_FIELDS, ev))

    def trace_lines(self) -> Iterable[str]:
        for ev in self.events():
            yield json.dumps(ev)

    def export_trace(self, path) -> None:
        with open(path, "w") as fh:
            for line in self.trace_lines():
                fh.write(line + "\n")

    def alive_ranks(self) -> list[int]:
        return [p.rank for p in self.procs if p.alive]

    # -- barriers -------------------------------------------------------------

    def barrier_arrive(self, rank: int, key) -> bool:
        """Register ``rank`` at barrier ``key``; return True if this completed it."""
        members = self.barriers.setdefault(key, set())
        if rank in members:
            return False
        members.add(rank)
        self.op_count += 1
        return len(members) == self.n_procs

    def barrier_complete(self, key) -> bool:
        return len(self.barriers.get(key, ())) == self.n_procs

    def barrier_poll(self, rank: int, key) -> RecvStatus:
        if self.barrier_complete(key):
            return RecvStatus.DATA
        if self.revoked or self.failed:
            _detect(self, self.procs[rank])
            return RecvStatus.FAILURE_DETECTED
        return RecvStatus.PENDING


def _detect(world: World, proc: VirtualProcess) -> None:
    proc.observed_revocation = True
    world.revoked = True
    world.op_count += 1


def post_send(world: World, src: int, dst: int, tag: int, payload: bytes, iter: int,
              seq: int = 0) -> SendOutcome:
    sender = world.procs[src]
    if not sender.alive:
        raise SimulationError(f"dead rank {src} cannot send")
    if sender.observed_revocation:
        world.record(src, "send", dst, iter, None, SendOutcome.REVOKED_ERROR.value)
        return SendOutcome.REVOKED_ERROR
    msg = Message(src, dst, tag, iter, seq, bytes(payload), world.epoch)
    receiver = world.procs[dst]
    # eager buffering: enqueued even when the receiver is dead; never consumed then
    receiver.inbox.setdefault((src, tag), deque()).append(msg)
    world.op_count += 1
    return SendOutcome.BUFFERED


def post_recv(world: World, dst: int, src: int, tag: int) -> RecvOutcome:
    receiver = world.procs[dst]
    if not receiver.alive:
        raise SimulationError(f"dead rank {dst} cannot receive")
    queue = receiver.inbox.get((src, tag))
    if queue:
        msg = queue.popleft()
        world.op_count += 1
        return RecvOutcome(RecvStatus.DATA, msg)
    if world.revoked or not world.procs[src].alive:
        _detect(world, receiver)
        return RecvOutcome(RecvStatus.FAILURE_DETECTED)
    return RecvOutcome(RecvStatus.PENDING)


def inject_failure(world: World, spec: FailureSpec) -> None:
    """Schedule ``spec``; the scheduler kills the victim when it reaches the point."""
    if world.finished:
        raise ConfigError("cannot inject a failure into a finished run")
    if not 0 <= spec.rank < world.n_procs:
        raise ConfigError(f"failure rank {spec.rank} out of range")
    if not world.procs[spec.rank].alive:
        raise ConfigError(f"rank {spec.rank} is already dead")
    if world.n_iters is not None and not 0 <= spec.iter < world.n_iters:
        raise ConfigError(f"failure iteration {spec.iter} outside run of {world.n_iters}")
    if world.n_failure_points is not None and not 0 <= spec.phase < world.n_failure_points:
        raise ConfigError(f"failure phase {spec.phase} outside 0..{world.n_failure_points - 1}")
    world.pending_failures.append(spec)


def kill(world: World, rank: int) -> None:
    proc = world.procs[rank]
    proc.status = Status.DEAD
    world.failed.add(rank)
    world.op_count += 1
    world.record(rank, "fail", None, proc.current_iter, None, "dead")


def recover_world(world: World) -> World:
    """Revoke/shrink/respawn: every dead rank comes back under its old rank."""
    if not world.failed:
        raise SimulationError("recover_world called with no dead process")
    world.epoch += 1
    for rank in sorted(world.failed):
        proc = world.procs[rank]
        proc.status = Status.RESPAWNED
        proc.current_iter = 0
    world.failed.clear()
    for proc in world.procs:
        proc.inbox.clear()
        proc.observed_revocation = False
    world.revoked = False
    world.barriers.clear()
    world.op_count += 1
    world.record(None, "recover", None, None, None, f"epoch={world.epoch}")
    return world

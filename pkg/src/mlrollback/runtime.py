"""Scheduler, per-process program and the recovery orchestration.

Each virtual process runs a generator. It yields :class:`Tick` at the phase
boundaries of an iteration and ``BLOCKED`` while a receive or barrier cannot
complete yet. The scheduler advances every live process by one phase per
step, in ascending rank order, which keeps every run deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from .protocol import (FrontLine, ProtocolState, Rollback, SendAction, decide_rollback,
                       gather_front_line, replay, send_wrapper)
from .sim import (ConfigError, DeadlockError, FailureDetected, FailureSpec, RecvStatus,
                  SimulationError, World, inject_failure, kill, post_recv, recover_world)
from .transact import TxnState

BLOCKED = "blocked"
MODES = ("local", "global", "hybrid")


class DeliveryError(SimulationError):
    """A receive matched a message attributed to another iteration."""


@dataclass(frozen=True)
class Tick:
    boundary: int


@dataclass
class RecoveryRecord:
    epoch: int
    dead: tuple[int, ...]
    cp_iter: int
    detect_iters: dict[int, int]
    front: FrontLine
    mode: Rollback
    replayed: int


class ProcessContext:
    """What a kernel iteration sees of its process: state, sends and receives."""

    def __init__(self, sim: "Simulation", rank: int, state: dict[str, np.ndarray], iter: int):
        self.sim = sim
        self.world = sim.world
        self.rank = rank
        self.proc = sim.world.procs[rank]
        self.proc.current_iter = iter
        self.txn = TxnState(state, sim.kernel.protected, enabled=sim.transactional)
        self.txn.current_iter = iter
        self.proto = ProtocolState(rank, sim.n_procs, sim.cp_int, sim.log_size,
                                   last_cp_iter=iter, strict=sim.strict)
        self.proto.log.window_start = iter
        self.phase = 0
        self.seqs: dict[int, int] = {}
        self.pending: list[tuple] = []
        self.detected = False
        self.detect_iter: int | None = None
        self.done = False
        self.parked = False
        self.program = None

    @property
    def state(self) -> dict[str, np.ndarray]:
        return self.txn.committed

    @property
    def shadow(self) -> dict[str, np.ndarray]:
        return self.txn.shadow

    @property
    def current_iter(self) -> int:
        return self.proc.current_iter

    def send(self, dst: int, tag: int, data) -> SendAction:
        payload = np.ascontiguousarray(data, dtype="<f8").tobytes()
        seq = self.seqs.get(dst, 0)
        self.seqs[dst] = seq + 1
        action = send_wrapper(self.proto, self.world, dst, tag, payload, self.current_iter, seq)
        self.world.record(self.rank, "send", dst, self.current_iter, self.phase, action.value)
        return action

    def recv(self, src: int, tag: int):
        while True:
            out = post_recv(self.world, self.rank, src, tag)
            if out.status is RecvStatus.DATA:
                msg = out.message
                if msg.iter != self.current_iter:
                    raise DeliveryError(
                        f"rank {self.rank} in iteration {self.current_iter} matched a message "
                        f"from {src} attributed to iteration {msg.iter}")
                self.pending.append((msg.src, msg.dst, msg.iter, msg.tag, msg.seq))
                self.world.record(self.rank, "recv", src, self.current_iter, self.phase, "data")
                return np.frombuffer(msg.payload, dtype="<f8")
            if out.status is RecvStatus.FAILURE_DETECTED:
                self.world.record(self.rank, "recv", src, self.current_iter, self.phase,
                                  "failure_detected")
                raise FailureDetected(self.rank, src)
            yield BLOCKED

    def boundary(self, b: int):
        self.phase = b
        yield Tick(b)

    def barrier(self, key):
        if self.world.barrier_arrive(self.rank, key) and key[0] == "ckpt":
            self.sim.global_checkpoint(key[1])
        while True:
            status = self.world.barrier_poll(self.rank, key)
            if status is RecvStatus.DATA:
                return
            if status is RecvStatus.FAILURE_DETECTED:
                self.world.record(self.rank, "barrier", None, self.current_iter, None,
                                  "failure_detected")
                raise FailureDetected(self.rank)
            yield BLOCKED

    def begin(self) -> None:
        self.txn.begin()
        self.seqs.clear()
        self.pending.clear()
        self.proto.peer_iters[self.rank] = self.current_iter

    def commit(self) -> None:
        self.txn.commit()
        self.sim.on_commit(self)

    def abort(self) -> None:
        if self.txn.iter_open:
            self.txn.abort()
        self.pending.clear()


def program(ctx: ProcessContext):
    sim = ctx.sim
    while True:
        it = ctx.current_iter
        if (0 < it < sim.n_iters and it > ctx.proto.last_cp_iter
                and ckpt.should_checkpoint(it, sim.cp_int)):
            yield from ctx.barrier(("ckpt", it))
        if it >= sim.n_iters:
            yield from ctx.barrier(("final",))
            return
        ctx.begin()
        yield from ctx.boundary(0)
        yield from sim.kernel.iteration(ctx, it)


@dataclass
class Outcome:
    final_metric: float
    recoveries: list[RecoveryRecord]
    recompute_by_rank: list[int]
    payload_peak_by_rank: list[int]
    replayed: int
    unfired_failures: list[FailureSpec]
    steps: int
    shadow_nbytes: int
    delivered: list[list[tuple]] = field(repr=False)


class Simulation:
    """One deterministic run of a kernel under the message-logging protocol."""

    def __init__(self, kernel, *, n_iters: int, cp_int: int, log_size: int | None = None,
                 mode: str = "local", failures=(), store=None, seed: int = 0,
                 trace: bool = True, strict: bool = False, transactional: bool = True,
                 disable_replay: bool = False):
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if cp_int < 1 or n_iters < 1:
            raise ConfigError("cp_int and n_iters must be positive")
        log_size = cp_int if log_size is None else log_size
        if not 1 <= log_size <= cp_int:
            raise ConfigError("log_size must lie in 1..cp_int")
        if mode == "local" and log_size != cp_int:
            raise ConfigError("local mode requires log_size == cp_int")
        self.kernel = kernel
        self.n_procs = kernel.n_procs
        self.n_iters = n_iters
        self.cp_int = cp_int
        self.log_size = log_size
        self.mode = mode
        self.strict = strict
        self.transactional = transactional
        self.disable_replay = disable_replay
        self.store = store if store is not None else ckpt.MemoryStore(kernel.name)
        self.world = World(self.n_procs, seed, trace=trace)
        self.world.n_iters = n_iters
        self.world.n_failure_points = len(kernel.kill_points)
        for spec in failures:
            inject_failure(self.world, spec)
        self.last_cp = 0
        self.highwater = [0] * self.n_procs
        self.recompute = [0] * self.n_procs
        self.payload_peak = [0] * self.n_procs
        self.delivered: list[list[tuple]] = [[] for _ in range(self.n_procs)]
        self.recoveries: list[RecoveryRecord] = []
        self.replayed = 0
        self.park_at: tuple[int, int] | None = None
        self.ctxs = [self._spawn(r, kernel.init_state(r), 0) for r in range(self.n_procs)]

    def _spawn(self, rank: int, state, iter: int) -> ProcessContext:
        ctx = ProcessContext(self, rank, state, iter)
        ctx.program = program(ctx)
        return ctx

    # -- hooks called from process programs ------------------------------------

    def on_commit(self, ctx: ProcessContext) -> None:
        r, it = ctx.rank, ctx.current_iter
        if it < self.highwater[r]:
            self.recompute[r] += 1
        else:
            self.highwater[r] = it + 1
        self.delivered[r].extend(ctx.pending)
        ctx.pending.clear()
        ctx.proc.current_iter = it + 1
        self.world.op_count += 1
        self.world.record(r, "commit", None, it, ctx.phase, None)

    def global_checkpoint(self, iter: int) -> None:
        """Called once every rank has reached the checkpoint barrier for ``iter``."""
        for ctx in self.ctxs:
            ckpt.write_checkpoint(self.store, ctx.rank, iter, ctx.state)
            ctx.proto.on_checkpoint(iter)
        self.last_cp = iter
        self.world.record(None, "checkpoint", None, iter, None, "written")

    # -- scheduling --------------------------------------------------------------

    def _runnable(self, ctx: ProcessContext) -> bool:
        return (ctx.proc.alive and not ctx.detected and not ctx.done and not ctx.parked)

    def _advance(self, ctx: ProcessContext) -> None:
        try:
            ev = next(ctx.program)
        except StopIteration:
            ctx.done = True
            self.world.op_count += 1
            return
        except FailureDetected:
            ctx.detected = True
            ctx.detect_iter = ctx.current_iter
            return
        if ev is BLOCKED:
            return
        self.world.op_count += 1
        it = ctx.current_iter
        for spec in self.world.pending_failures:
            if (spec.rank == ctx.rank and spec.iter == it
                    and self.kernel.kill_points[spec.phase] == ev.boundary):
                self.world.pending_failures.remove(spec)
                self.payload_peak[ctx.rank] = max(self.payload_peak[ctx.rank],
                                                  ctx.proto.log.peak_bytes)
                kill(self.world, ctx.rank)
                return
        if self.park_at == (it, ev.boundary):
            ctx.parked = True

    def _needs_recovery(self) -> bool:
        world = self.world
        return bool(world.failed) and all(c.detected for c in self.ctxs if c.proc.alive)

    def step(self) -> None:
        world = self.world
        before = world.op_count
        for ctx in self.ctxs:
            if self._runnable(ctx):
                self._advance(ctx)
        if self._needs_recovery():
            self.recover_and_resume()
        elif world.op_count == before:
            raise DeadlockError(f"no process can make progress at step {world.step}")
        world.step += 1

    def run(self) -> Outcome:
        while not all(c.done for c in self.ctxs):
            if self.park_at is not None and all(
                    c.parked or c.done for c in self.ctxs if c.proc.alive):
                return None
            self.step()
        self.world.finished = True
        return self._outcome()

    # -- deliberate abort, used to check the transactional property -------------

    def run_until(self, iter: int, boundary: int) -> None:
        """Run until every process sits at ``boundary`` of iteration ``iter``."""
        self.park_at = (iter, boundary)
        self.run()
        self.park_at = None

    def abort_all(self) -> None:
        """Abort the open iteration on every process and restart it."""
        for proc in self.world.procs:
            proc.inbox.clear()
        for ctx in self.ctxs:
            ctx.abort()
            ctx.parked = False
            ctx.program = program(ctx)
        self.world.record(None, "abort_all", None, None, None, None)

    # -- recovery ---------------------------------------------------------------

    def _restore(self, ctx: ProcessContext) -> int:
        try:
            iter, state = ckpt.read_checkpoint(self.store, ctx.rank)
        except ckpt.MissingCheckpoint:
            iter, state = 0, self.kernel.init_state(ctx.rank)
        if iter != self.last_cp:
            raise SimulationError(f"rank {ctx.rank} checkpoint at {iter}, expected {self.last_cp}")
        ctx.txn = TxnState(state, self.kernel.protected, enabled=self.transactional)
        ctx.txn.current_iter = iter
        ctx.proc.current_iter = iter
        ctx.proto.last_cp_iter = iter
        ctx.proto.log.clear(iter)
        self.delivered[ctx.rank] = [k for k in self.delivered[ctx.rank] if k[2] < iter]
        return iter

    def recover_and_resume(self) -> RecoveryRecord:
        world = self.world
        dead = tuple(sorted(world.failed))
        survivors = [c for c in self.ctxs if c.rank not in world.failed]
        detect = {c.rank: c.detect_iter for c in survivors}
        detect.update({r: world.procs[r].current_iter for r in dead})
        for ctx in survivors:
            ctx.abort()
            ctx.program.close()
            ctx.detected = False
        recover_world(world)
        for r in dead:
            ctx = self._spawn(r, {}, self.last_cp)
            self._restore(ctx)
            self.ctxs[r] = ctx
        protos = [c.proto for c in self.ctxs]
        front = gather_front_line(world, protos)
        if self.mode == "local":
            mode = Rollback.LOCAL
        elif self.mode == "global":
            mode = Rollback.GLOBAL
        else:
            mode = decide_rollback(front, self.last_cp, self.log_size)
        replayed = 0
        if mode is Rollback.LOCAL:
            if not self.disable_replay:
                for ctx in survivors:
                    actions = replay(ctx.proto, world, front, self.kernel.send_schedule,
                                     ctx.current_iter)
                    replayed += sum(a is SendAction.REPLAYED for a in actions)
        else:
            for ctx in survivors:
                self.payload_peak[ctx.rank] = max(self.payload_peak[ctx.rank],
                                                  ctx.proto.log.peak_bytes)
                self._restore(ctx)
            gather_front_line(world, protos)
        for ctx in self.ctxs:
            ctx.program = program(ctx)
            ctx.phase = 0
        self.replayed += replayed
        rec = RecoveryRecord(world.epoch, dead, self.last_cp, detect, front, mode, replayed)
        self.recoveries.append(rec)
        world.record(None, "rollback", None, self.last_cp, None, mode.value)
        return rec

    def _outcome(self) -> Outcome:
        for ctx in self.ctxs:
            self.payload_peak[ctx.rank] = max(self.payload_peak[ctx.rank],
                                              ctx.proto.log.peak_bytes)
        return Outcome(
            final_metric=self.kernel.metric([c.state for c in self.ctxs]),
            recoveries=self.recoveries,
            recompute_by_rank=list(self.recompute),
            payload_peak_by_rank=list(self.payload_peak),
            replayed=self.replayed,
            unfired_failures=list(self.world.pending_failures),
            steps=self.world.step,
            shadow_nbytes=self.ctxs[0].txn.shadow_nbytes(),
            delivered=self.delivered,
        )

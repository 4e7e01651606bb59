"""3D six-neighbour halo-exchange kernel standing in for LULESH.

Each iteration exchanges face halos three times: the field ``u``, an
intermediate Laplacian ``g``, and the updated ``u``. Physical boundaries are
Dirichlet (the halo there stays zero). The verification value is the field
at the global origin cell, which rank 0 owns.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..sim import ConfigError

# face order: -x, +x, -y, +y, -z, +z
DIRECTIONS = ((0, -1), (0, 1), (1, -1), (1, 1), (2, -1), (2, 1))


def _opposite(d: int) -> int:
    return d ^ 1


@dataclass(frozen=True)
class StencilTopology:
    n_procs: int
    p: int

    @classmethod
    def for_procs(cls, n_procs: int) -> "StencilTopology":
        p = round(n_procs ** (1 / 3))
        if p ** 3 != n_procs:
            raise ConfigError(f"stencil needs a cubic process count, got {n_procs}")
        return cls(n_procs, p)

    def coords(self, rank: int) -> tuple[int, int, int]:
        x = rank % self.p
        y = (rank // self.p) % self.p
        return x, y, rank // (self.p * self.p)

    def rank_of(self, x: int, y: int, z: int) -> int:
        return x + self.p * (y + self.p * z)

    def neighbors(self, rank: int) -> list[int | None]:
        """Neighbour per face in ``DIRECTIONS`` order; None at a physical boundary."""
        c = self.coords(rank)
        out = []
        for axis, step in DIRECTIONS:
            nc = list(c)
            nc[axis] += step
            out.append(self.rank_of(*nc) if 0 <= nc[axis] < self.p else None)
        return out


def _face(a: np.ndarray, axis: int, side: int, halo: bool) -> tuple:
    """Index of the boundary slab (``halo=False``) or halo slab on one side."""
    if side < 0:
        pos = 0 if halo else 1
    else:
        pos = -1 if halo else -2
    idx = [slice(1, -1)] * 3
    idx[axis] = pos
    return tuple(idx)


def laplacian(a: np.ndarray) -> np.ndarray:
    c = a[1:-1, 1:-1, 1:-1]
    return (a[:-2, 1:-1, 1:-1] + a[2:, 1:-1, 1:-1] + a[1:-1, :-2, 1:-1] + a[1:-1, 2:, 1:-1]
            + a[1:-1, 1:-1, :-2] + a[1:-1, 1:-1, 2:] - 6.0 * c)


def neighbor_sum(a: np.ndarray) -> np.ndarray:
    return (a[:-2, 1:-1, 1:-1] + a[2:, 1:-1, 1:-1] + a[1:-1, :-2, 1:-1] + a[1:-1, 2:, 1:-1]
            + a[1:-1, 1:-1, :-2] + a[1:-1, 1:-1, 2:])


def stencil_send_schedule(rank: int, iter: int, topology: StencilTopology) -> list[tuple[int, int]]:
    sched = []
    nbrs = topology.neighbors(rank)
    for phase in range(3):
        for d, nb in enumerate(nbrs):
            if nb is not None:
                sched.append((nb, 10 * (phase + 1) + d))
    return sched


def origin_energy(state: dict[str, np.ndarray]) -> float:
    """Field value at the global origin; ``state`` must be rank 0's."""
    return float(state["u"][1, 1, 1])


class StencilKernel:
    name = "stencil"
    n_phases = 3
    # before the first exchange, at the local update, at the constraint pass
    kill_points = (0, 2, 3)
    protected = None  # the whole domain is shadowed
    default_cp_int = 20

    def __init__(self, n_procs: int, *, m: int = 12, seed: int = 1, dt: float = 0.05,
                 source: float = 1.0, noise: float = 0.01):
        self.n_procs = n_procs
        self.topology = StencilTopology.for_procs(n_procs)
        self.m = m
        self.seed = seed
        self.dt = dt
        self.source = source
        self.noise = noise

    def init_state(self, rank: int) -> dict[str, np.ndarray]:
        m = self.m
        u = np.zeros((m + 2, m + 2, m + 2))
        if self.noise:
            rng = np.random.default_rng([self.seed, rank])
            u[1:-1, 1:-1, 1:-1] = self.noise * rng.random((m, m, m))
        if rank == 0:
            u[1, 1, 1] += self.source
        return {"u": u, "dtc": np.array(0.0)}

    def send_schedule(self, rank: int, iter: int) -> list[tuple[int, int]]:
        return stencil_send_schedule(rank, iter, self.topology)

    def metric(self, states: list[dict[str, np.ndarray]]) -> float:
        return origin_energy(states[0])

    def _exchange(self, ctx, a: np.ndarray, phase: int):
        nbrs = self.topology.neighbors(ctx.rank)
        base = 10 * (phase + 1)
        for d, nb in enumerate(nbrs):
            if nb is not None:
                axis, side = DIRECTIONS[d]
                ctx.send(nb, base + d, a[_face(a, axis, side, halo=False)])
        for d, nb in enumerate(nbrs):
            if nb is not None:
                axis, side = DIRECTIONS[d]
                # the neighbour on side d sent its face facing us
                face = yield from ctx.recv(nb, base + _opposite(d))
                a[_face(a, axis, side, halo=True)] = face.reshape(self.m, self.m)

    def iteration(self, ctx, iter: int):
        sh = ctx.shadow
        u = sh["u"]
        yield from self._exchange(ctx, u, 0)
        g = np.zeros_like(u)
        g[1:-1, 1:-1, 1:-1] = laplacian(u)
        yield from ctx.boundary(1)

        yield from self._exchange(ctx, g, 1)
        yield from ctx.boundary(2)

        u[1:-1, 1:-1, 1:-1] += self.dt * (0.5 * g[1:-1, 1:-1, 1:-1] + neighbor_sum(g) / 12.0)
        yield from self._exchange(ctx, u, 2)
        yield from ctx.boundary(3)

        sh["dtc"] = np.array(np.abs(laplacian(u)).max())
        ctx.commit()

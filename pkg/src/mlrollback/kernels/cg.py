"""Conjugate gradient with the NAS CG communication structure.

The matrix is split over a 2D process grid. Each iteration performs a local
matvec, a recursive-doubling reduction of ``w`` within the process row, an
exchange with the transpose partner(s), and two more row reductions for the
scalars ``d`` and ``rho``. Outer iterations (every ``inner`` inner ones)
update the eigenvalue estimate ``zeta = shift + 1/(x.z)`` like NAS CG.

Dot products use ``math.fsum`` so results are bitwise reproducible no matter
how the arrays happen to be aligned in memory.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from ..sim import ConfigError

TAG_W = 100
TAG_T = 200
TAG_D = 300
TAG_RHO = 400


def _dot(a: np.ndarray, b: np.ndarray) -> float:
    return math.fsum(a * b)


@dataclass(frozen=True)
class CgTopology:
    n_procs: int
    rows: int
    cols: int

    @classmethod
    def for_procs(cls, n_procs: int) -> "CgTopology":
        if n_procs < 1 or n_procs & (n_procs - 1):
            raise ConfigError(f"CG needs a power-of-two process count, got {n_procs}")
        log2 = n_procs.bit_length() - 1
        cols = 1 << (log2 // 2)
        return cls(n_procs, n_procs // cols, cols)

    def coords(self, rank: int) -> tuple[int, int]:
        return divmod(rank, self.cols)

    def rank_of(self, row: int, col: int) -> int:
        return row * self.cols + col

    def reduce_partners(self, rank: int) -> list[int]:
        row, col = self.coords(rank)
        return [self.rank_of(row, col ^ (1 << k)) for k in range(self.cols.bit_length() - 1)]

    def transpose_partners(self, rank: int) -> list[int]:
        row, col = self.coords(rank)
        if self.rows == self.cols:
            return [self.rank_of(col, row)]
        # rows == 2*cols: column block ``col`` spans row blocks 2col and 2col+1
        return [self.rank_of(2 * col, row // 2), self.rank_of(2 * col + 1, row // 2)]


@dataclass
class CgProblem:
    topology: CgTopology
    n: int
    blocks: dict[int, sp.csr_matrix]
    matrix: sp.csr_matrix

    @property
    def row_block(self) -> int:
        return self.n // self.topology.rows

    @property
    def col_block(self) -> int:
        return self.n // self.topology.cols


def random_spd(seed: int, n: int, nnz_per_row: int) -> sp.csr_matrix:
    """Symmetric, strictly diagonally dominant random sparse matrix."""
    rng = np.random.default_rng(seed)
    rows = np.repeat(np.arange(n), nnz_per_row)
    cols = rng.integers(0, n, size=rows.size)
    vals = rng.random(rows.size)
    b = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    a = ((b + b.T) * 0.5).tocsr()
    a.setdiag(0.0)
    a.eliminate_zeros()
    diag = np.asarray(abs(a).sum(axis=1)).ravel() + 1.0
    a = (a + sp.diags(diag)).tocsr()
    a.sort_indices()
    return a


@lru_cache(maxsize=8)
def make_problem(seed: int, n: int, nnz_per_row: int, n_procs: int) -> CgProblem:
    topo = CgTopology.for_procs(n_procs)
    if n % topo.rows or n % topo.cols:
        raise ConfigError(f"n={n} is not divisible by the {topo.rows}x{topo.cols} grid")
    a = random_spd(seed, n, nnz_per_row)
    rb, cb = n // topo.rows, n // topo.cols
    blocks = {}
    for rank in range(n_procs):
        row, col = topo.coords(rank)
        blocks[rank] = a[row * rb:(row + 1) * rb, col * cb:(col + 1) * cb].tocsr()
    return CgProblem(topo, n, blocks, a)


def cg_send_schedule(rank: int, iter: int, topology: CgTopology) -> list[tuple[int, int]]:
    """(dst, tag) of every send of one iteration, in program order."""
    sched = [(p, TAG_W + k) for k, p in enumerate(topology.reduce_partners(rank))]
    sched += [(p, TAG_T) for p in topology.transpose_partners(rank)]
    sched += [(p, TAG_D + k) for k, p in enumerate(topology.reduce_partners(rank))]
    sched += [(p, TAG_RHO + k) for k, p in enumerate(topology.reduce_partners(rank))]
    return sched


def zeta_metric(state: dict[str, np.ndarray]) -> float:
    return float(state["zeta"])


class CGKernel:
    name = "cg"
    n_phases = 4
    # failure points sit in the local compute sections: before the row
    # reduction of w, before the d reduction, before the rho reduction, and
    # after the last exchange (just before the commit)
    kill_points = (0, 2, 3, 4)
    protected = ("z", "r")
    default_cp_int = 25

    def __init__(self, n_procs: int, *, n: int = 1024, seed: int = 1, nnz_per_row: int = 8,
                 inner: int = 25, shift: float = 10.0):
        self.n_procs = n_procs
        self.seed = seed
        self.inner = inner
        self.shift = shift
        self.problem = make_problem(seed, n, nnz_per_row, n_procs)
        self.topology = self.problem.topology

    def init_state(self, rank: int) -> dict[str, np.ndarray]:
        x = np.ones(self.problem.col_block)
        return {
            "x": x,
            "z": np.zeros_like(x),
            "r": x.copy(),
            "p": x.copy(),
            "rho": np.array(float(self.problem.n)),
            "zeta": np.array(0.0),
        }

    def send_schedule(self, rank: int, iter: int) -> list[tuple[int, int]]:
        return cg_send_schedule(rank, iter, self.topology)

    def metric(self, states: list[dict[str, np.ndarray]]) -> float:
        return zeta_metric(states[0])

    def _row_reduce(self, ctx, value: np.ndarray, tag: int):
        for k, partner in enumerate(self.topology.reduce_partners(ctx.rank)):
            ctx.send(partner, tag + k, value)
            other = yield from ctx.recv(partner, tag + k)
            value = value + other
        return value

    def iteration(self, ctx, iter: int):
        """One inner CG iteration as a generator driven by the scheduler."""
        st, sh = ctx.state, ctx.shadow
        rank = ctx.rank
        p = st["p"]
        w = self.problem.blocks[rank] @ p
        w = yield from self._row_reduce(ctx, w, TAG_W)
        yield from ctx.boundary(1)

        partners = self.topology.transpose_partners(rank)
        for partner in partners:
            ctx.send(partner, TAG_T, w)
        parts = []
        for partner in partners:
            parts.append((yield from ctx.recv(partner, TAG_T)))
        q = parts[0] if len(parts) == 1 else np.concatenate(parts)
        yield from ctx.boundary(2)

        d = yield from self._row_reduce(ctx, np.array([_dot(p, q)]), TAG_D)
        yield from ctx.boundary(3)

        rho = float(st["rho"])
        alpha = rho / d[0] if d[0] != 0.0 else 0.0
        sh["z"] = sh["z"] + alpha * p
        sh["r"] = sh["r"] - alpha * q
        outer_end = (iter + 1) % self.inner == 0
        partial = [_dot(sh["r"], sh["r"])]
        if outer_end:
            partial += [_dot(st["x"], sh["z"]), _dot(sh["z"], sh["z"])]
        sums = yield from self._row_reduce(ctx, np.array(partial), TAG_RHO)
        yield from ctx.boundary(4)

        ctx.commit()
        # past the last exchange: these updates are never rolled back
        rho_new = sums[0]
        beta = rho_new / rho if rho != 0.0 else 0.0
        st["p"] = st["r"] + beta * p
        st["rho"] = np.array(rho_new)
        if outer_end:
            st["zeta"] = np.array(self.shift + 1.0 / sums[1])
            x = st["z"] / math.sqrt(sums[2])
            st["x"] = x
            st["z"] = np.zeros_like(x)
            st["r"] = x.copy()
            st["p"] = x.copy()
            st["rho"] = np.array(1.0)

"""Acceptance gate: one PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -s`` or
``python3 tests/test_acceptance.py``.
"""
import sys
from contextlib import contextmanager
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from mlrollback import harness
from mlrollback.harness import RunConfig, baseline_metric, metrics_from, simulate
from mlrollback.kernels import make_kernel
from mlrollback.kernels.cg import CgTopology
from mlrollback.protocol import Rollback
from mlrollback.runtime import Simulation
from mlrollback.sim import FailureSpec

CG16 = RunConfig(kernel="cg", n_procs=16, n_iters=50, cp_int=25, trace=False)
ST27 = RunConfig(kernel="stencil", n_procs=27, n_iters=45, cp_int=20, trace=False)

PROPERTY = settings(max_examples=25, deadline=None, derandomize=True)


@contextmanager
def criterion(capsys, number, text):
    try:
        yield
    except BaseException:
        with capsys.disabled():
            print(f"\ncriterion {number}: FAIL  {text}")
        raise
    with capsys.disabled():
        print(f"\ncriterion {number}: PASS  {text}")


def _metrics(cfg):
    return metrics_from(cfg, simulate(cfg)[1])


def test_criterion_1_correctness_sweep(capsys):
    with criterion(capsys, 1, "local rollback is bitwise-equal to fault-free over the sweep"):
        for tmpl, rank in ((CG16, 2), (ST27, 13)):
            base = harness.metric_hex(baseline_metric(tmpl))
            cp = tmpl.cp_int
            rows = harness.sweep(tmpl, rank, range(cp, 2 * cp))
            n_phases = len(make_kernel(tmpl.kernel, tmpl.n_procs).kill_points)
            assert len(rows) == cp * n_phases
            bad = [m.run_id + f"@{m.fail_iter}:{m.fail_phase}" for m in rows
                   if m.final_metric_hex != base]
            assert not bad, bad
            assert all(m.mode_taken == "local" for m in rows)
            assert all(not m.outcome.unfired_failures for m in rows)


@PROPERTY
@given(k=st.integers(0, 24), rank=st.integers(0, 15), phase=st.integers(0, 3),
       second=st.integers(1, 15))
def _recompute_property(k, rank, phase, second):
    it = 25 + k
    local = _metrics(replace(CG16, failures=[f"{rank}:{it}:{phase}"]))
    assert local.recompute_iters_failed_rank == k
    assert local.recompute_iters_total == k
    survivors = [v for r, v in enumerate(local.outcome.recompute_by_rank) if r != rank]
    assert survivors == [0] * 15

    glob = _metrics(replace(CG16, failures=[f"{rank}:{it}:{phase}"], mode="global"))
    rec = glob.outcome.recoveries[0]
    assert glob.recompute_iters_total == sum(d - 25 for d in rec.detect_iters.values())

    # ranks 0 and 8 crash together and are recovered at once
    double = _metrics(replace(CG16, failures=[f"0:{it}:{phase}", f"8:{it}:{phase}"]))
    assert len(double.outcome.recoveries) == 1
    assert double.recompute_iters_total == 2 * k
    # any other pair: the second victim may notice the first failure before its own
    # crash point and then crash after the first recovery, which costs the same
    other = (rank + second) % 16
    pair = _metrics(replace(CG16, failures=[f"{rank}:{it}:{phase}", f"{other}:{it}:{phase}"]))
    assert pair.recompute_iters_total == 2 * k
    for m in (local, glob, double, pair):
        assert m.final_metric == baseline_metric(CG16)


def test_criterion_2_recompute_accounting(capsys):
    with criterion(capsys, 2, "local recompute = k, global = sum(detect - cp), double = 2k"):
        _recompute_property()


def test_criterion_3_hybrid_switching(capsys):
    with criterion(capsys, 3, "hybrid picks local iff maxit - cp <= log_size, no missing logs"):
        for tmpl, rank in ((CG16, 2), (ST27, 13)):
            cp = tmpl.cp_int
            log_size = cp // 2
            hyb = replace(tmpl, mode="hybrid", log_size=log_size)
            rows = harness.sweep(hyb, rank, range(cp, 2 * cp))
            base = baseline_metric(tmpl)
            seen = set()
            for m in rows:
                (rec,) = m.outcome.recoveries
                want = Rollback.LOCAL if rec.front.maxit - cp <= log_size else Rollback.GLOBAL
                assert rec.mode is want, (m.fail_iter, m.fail_phase, rec.front.maxit)
                assert m.final_metric == base
                seen.add(rec.mode)
            assert seen == {Rollback.LOCAL, Rollback.GLOBAL}


def test_criterion_4_detection_spread(capsys):
    with criterion(capsys, 4, "CG kill phases: first -> same iter, last -> next, middle -> split"):
        it = 30
        for n_procs in (16, 64):
            tmpl = replace(CG16, n_procs=n_procs)
            last = len(make_kernel("cg", n_procs).kill_points) - 1
            for phase in range(last + 1):
                out = simulate(replace(tmpl, failures=[f"0:{it}:{phase}"]))[1]
                det = [d for r, d in out.recoveries[0].detect_iters.items() if r != 0]
                assert set(det) <= {it, it + 1}
                if phase == 0:
                    assert set(det) == {it}
                elif phase == last:
                    assert set(det) == {it + 1}
                else:
                    assert set(det) == {it, it + 1}, (n_procs, phase)
                assert out.final_metric == baseline_metric(tmpl)


def _cg_iteration_bytes(n, n_procs, rank, outer_end):
    topo = CgTopology.for_procs(n_procs)
    rb = n // topo.rows
    red = len(topo.reduce_partners(rank))
    tr = len(topo.transpose_partners(rank))
    doubles = red * rb + tr * rb + red + red * (3 if outer_end else 1)
    return 8 * doubles


def _step_checked(sim):
    while not all(c.done for c in sim.ctxs):
        sim.step()
        for c in sim.ctxs:
            c.proto.log.check(c.proto.last_cp_iter, sim.log_size)
    return sim._outcome()


def test_criterion_5_payload_log(capsys):
    with criterion(capsys, 5, "log bytes and window invariant at every step, exact peak bytes"):
        # invariants after every scheduler step, with and without capping
        for kernel, n_procs, fails in (("cg", 16, ["2:33:1"]), ("stencil", 27, ["13:27:2"])):
            k = make_kernel(kernel, n_procs)
            for mode, log_size in (("local", None), ("hybrid", 5), ("hybrid", 1)):
                sim = Simulation(k, n_iters=45, cp_int=20, log_size=log_size, mode=mode,
                                 failures=[FailureSpec.parse(f) for f in fails], strict=True,
                                 trace=False)
                _step_checked(sim)

        # peak with log_size = cp_int, fault free
        out = simulate(replace(CG16, strict=True))[1]
        inner = make_kernel("cg", 16).inner
        for rank in range(16):
            windows = [sum(_cg_iteration_bytes(1024, 16, rank, (i + 1) % inner == 0)
                           for i in range(lo, min(lo + 25, 50))) for lo in (0, 25)]
            assert out.payload_peak_by_rank[rank] == max(windows)

        kernel = make_kernel("stencil", 27)
        out = simulate(replace(ST27, strict=True))[1]
        face = kernel.m * kernel.m * 8
        for rank in range(27):
            sends = len(kernel.send_schedule(rank, 0))
            assert out.payload_peak_by_rank[rank] == sends * face * ST27.cp_int


def _states(sim):
    return [{k: v.tobytes() for k, v in c.state.items()} for c in sim.ctxs]


def test_criterion_6_transaction_property(capsys):
    with criterion(capsys, 6, "abort after any phase then rerun == straight-through, bitwise"):
        for name, n_procs in (("cg", 16), ("stencil", 27)):
            k = make_kernel(name, n_procs)
            ref = Simulation(k, n_iters=30, cp_int=10, trace=False)
            metric = ref.run().final_metric
            expected = _states(ref)
            for it in (7, 24):
                for b in range(k.n_phases + 1):
                    sim = Simulation(k, n_iters=30, cp_int=10, trace=False)
                    sim.run_until(it, b)
                    assert all((c.current_iter, c.phase) == (it, b) for c in sim.ctxs)
                    sim.abort_all()
                    assert sim.run().final_metric == metric
                    assert _states(sim) == expected, (name, it, b)
            # the check has teeth: without shadow buffers a late abort corrupts state
            sim = Simulation(k, n_iters=30, cp_int=10, trace=False, transactional=False)
            sim.run_until(24, k.n_phases)
            sim.abort_all()
            sim.run()
            assert _states(sim) != expected


def test_criterion_7_determinism(capsys, tmp_path):
    with criterion(capsys, 7, "identical invocations give byte-identical traces and metrics"):
        for cfg in (replace(CG16, trace=True, failures=["2:30:1"]),
                    replace(ST27, trace=True, mode="hybrid", log_size=10,
                            failures=["0:33:2"])):
            dirs = []
            for tag in ("a", "b"):
                d = tmp_path / f"{cfg.kernel}_{tag}"
                harness.run(replace(cfg, out_dir=str(d)))
                dirs.append(d)
            for name in ("metrics.csv", "trace.jsonl"):
                assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes()
            ck = sorted(p.name for p in (dirs[0] / "ckpt").iterdir())
            for name in ck:
                assert ((dirs[0] / "ckpt" / name).read_bytes()
                        == (dirs[1] / "ckpt" / name).read_bytes())


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))

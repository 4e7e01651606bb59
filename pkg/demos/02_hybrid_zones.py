"""Capped payload logs: when does local rollback stop being possible?

With ``log_size`` below the checkpoint interval a process only keeps
payloads for the first ``log_size`` iterations after each checkpoint. A
failure late in the interval leaves some survivor without the payloads a
restarted peer needs, so the hybrid mode falls back to a global rollback.

The sweep below crashes rank 0 at every iteration of one interval and
prints which rollback was taken and how much work was redone.
"""
from dataclasses import replace

from mlrollback import RunConfig, sweep
from mlrollback.harness import baseline_metric, run

tmpl = RunConfig(kernel="stencil", n_procs=27, n_iters=45, cp_int=20, log_size=10,
                 mode="hybrid", trace=False)
clean = baseline_metric(tmpl)

print("fail_iter  maxit-cp  mode    recompute")
for m in sweep(tmpl, fail_rank=0, fail_iters=range(20, 40), phases=[2]):
    rec = m.outcome.recoveries[0]
    print(f"{m.fail_iter:>9}  {rec.front.maxit - rec.cp_iter:>8}  {m.mode_taken:<6}  "
          f"{m.recompute_iters_total:>9}")
    assert m.final_metric == clean

# Same crash point, three policies. The final value never changes, only the cost.
print()
for mode, log_size in (("local", 20), ("hybrid", 10), ("global", 20)):
    cfg = replace(tmpl, mode=mode, log_size=log_size, failures=["0:33:1"])
    m = run(cfg)
    print(f"{mode:<6} log_size={log_size:<2}  recompute={m.recompute_iters_total:<4} "
          f"peak log bytes={m.payload_bytes_peak}")

"""Why each iteration must be a transaction.

A survivor that notices a failure in the middle of an iteration abandons
that iteration and later runs it again. If it had already changed its
vectors in place, the rerun would start from the wrong data. Shadow copies
make the abandoned half-iteration harmless.

The simulator can switch the shadow copies off, which shows the damage.
"""
from mlrollback import RunConfig
from mlrollback.harness import baseline_metric, metric_hex, simulate

clean = baseline_metric(RunConfig(kernel="cg", n_procs=16, n_iters=30))

for phase in range(4):
    row = []
    for transactional in (True, False):
        cfg = RunConfig(kernel="cg", n_procs=16, n_iters=30, cp_int=10, trace=False,
                        failures=[f"2:13:{phase}"], transactional=transactional)
        out = simulate(cfg)[1]
        row.append("ok " if out.final_metric == clean else "BAD")
    print(f"crash at phase {phase}: with shadow {row[0]}  without shadow {row[1]}")

# The price of the shadow copy differs a lot between the kernels: CG copies
# two vectors, the stencil copies its whole block.
for kernel, n in (("cg", 16), ("stencil", 27)):
    out = simulate(RunConfig(kernel=kernel, n_procs=n, n_iters=1, trace=False))[1]
    print(f"{kernel:<8} shadow bytes per iteration and rank: {out.shadow_nbytes}")

print("reference zeta:", metric_hex(clean))

"""Sequential cache warmup for the acceptance suite.  Delete me."""
import sys
import time

sys.path.insert(0, "tests")
import stages


def step(name, fn):
    t0 = time.time()
    print(f"[{time.strftime('%H:%M:%S')}] start {name}", flush=True)
    fn()
    print(f"[{time.strftime('%H:%M:%S')}] done {name} "
          f"({(time.time() - t0) / 60:.1f} min)", flush=True)


step("ndo_o1", lambda: stages.desk_estimator(1))
step("ablation", stages.ablation_stage)
step("spiral", lambda: stages.experiment_stage("spiral"))
step("ndo_o2", lambda: stages.desk_estimator(2))
step("oscillator", lambda: stages.experiment_stage("oscillator"))
step("stiff1", lambda: stages.experiment_stage("stiff1"))
step("threebody", lambda: stages.experiment_stage("threebody"))
step("cli_a", lambda: stages.cli_stage("a"))
step("cli_b", lambda: stages.cli_stage("b"))
print("prewarm complete", flush=True)

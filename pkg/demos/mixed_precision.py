"""Walk one seed through the mixed-precision pipeline on the spiral task.

Pretrain, profile Hessian sensitivity, search a plan no larger than the
uniform 2-bit model, then compare uniform 2-bit QAT against the plan
fine-tuned in stages. Takes about a minute.

    python demos/mixed_precision.py [seed]
"""

import sys

from adaptq import experiments as ex
from adaptq.data import desk_task
from adaptq.quantizer import LayerQuant
from adaptq.search import uniform_plan

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
task = desk_task()

fp = ex.pretrained(seed, task)
print(f"full precision        {ex.accuracy(fp, task):.4f}")

prof = ex.profile(fp, task, seed)
print("\nlayer     avg trace   ||W-Q||^2 at 1..4 bits")
for layer in prof.layers:
    pert = "  ".join(f"{layer.perturbation[b]:8.4f}" for b in ex.CANDIDATES)
    print(f"{layer.name:<8} {layer.avg_trace:10.4f}   {pert}")

plan = ex.mixed_plan(prof, 2)
target = uniform_plan(prof, 2).total_size_bytes
print(f"\nplan {plan.assignment}")
print(f"size {plan.total_size_bytes} B (target {target} B), ~{plan.equivalent_bits:.2f} bits per weight")

u2 = ex.qat(fp, task, LayerQuant("kmeans", 2), seed)
print(f"\nuniform 2-bit k-means {ex.accuracy(u2, task):.4f}")
print(f"one-shot mixed plan   {ex.accuracy(ex.single_shot(fp, task, plan, seed), task):.4f}")
print(f"staged mixed plan     {ex.accuracy(ex.msft(fp, task, plan, seed), task):.4f}")

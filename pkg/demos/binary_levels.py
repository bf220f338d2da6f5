"""Compare static and adaptive 1-bit quantizers layer by layer.

Static binarization puts every layer on {-a, +a}. The adaptive scheme
follows each layer's own mean and spread, so wide early layers and
narrow late layers get different pairs of values.

    python demos/binary_levels.py
"""

import numpy as np

from adaptq import experiments as ex
from adaptq.binary import adaptive_fit, entropy_regularize, static_binarize
from adaptq.data import desk_task
from adaptq.quantizer import LayerQuant

task = desk_task()
fp = ex.pretrained(0, task)

print("layer     mean     std    static a   adaptive pair      +1 share")
for name, w in zip(fp.names, fp.weights):
    w = w.data
    p = adaptive_fit(w)
    share = np.mean(static_binarize(entropy_regularize(w)) > 0)
    print(f"{name:<8} {w.mean():+.3f}  {w.std():.3f}   {np.abs(w).mean():.3f}    "
          f"({p.beta - p.d:+.3f}, {p.beta + p.d:+.3f})   {share:.3f}")

print()
for spec in (LayerQuant("kmeans", 1), LayerQuant("static", 1), LayerQuant("adaptive", 1)):
    net = ex.qat(fp, task, spec, 0)
    print(f"{spec.describe():<16} {ex.accuracy(net, task):.4f}")

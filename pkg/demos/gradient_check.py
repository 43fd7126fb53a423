"""
Reverse-mode gradients and a finite-difference check
=====================================================

"""

import numpy as np

from diverse_vse import RunConfig, Tape, Tensor, backward, finite_diff_check
from diverse_vse import tensor as T
from diverse_vse.cli import GRADCHECK_DEFAULTS, gradcheck_report

# record a small computation on a tape and run it backwards
w = Tensor(np.array([[0.5, -1.0], [2.0, 0.25]]), requires_grad=True, name="w")
x = Tensor(np.array([[1.0, 2.0]]))
with Tape() as tape:
    loss = T.tanh_ew(x @ w).sum()
backward(loss, tape)
print("loss", float(loss.value))
print("d loss / d w\n", w.grad)

# the same gradient from central differences (evaluated in extended precision)
report = finite_diff_check(lambda ps: T.tanh_ew(x @ ps[0]).sum(), [w], n_probe=4, rng=0)
print("max relative error on w:", report.max_rel_error)

# the full model objective on a tiny seeded batch
report = gradcheck_report(RunConfig(**GRADCHECK_DEFAULTS), probes=30)
print(f"full loss: max relative error {report.max_rel_error:.2e} over {report.n_probe} probes")

"""
Training a two-layer ReLU network by gradient flow
==================================================

A wide bias-free ReLU network is fitted to labels from a small teacher
network with forward-Euler gradient descent. Along the way we watch two
things: the loss, and the per-neuron balance gap ``m (w_j^2 - |u_j|^2)``,
which the continuous flow conserves exactly and the discrete one only up to
``O(eta)``.
"""

import numpy as np

from adaptive_kernel import FlowConfig, InitSpec, balance_gap, init_network, run_flow
from adaptive_kernel.experiments import gen_teacher

# Data: 50 Gaussian inputs in R^5 labelled by a width-2 teacher.
data, teacher = gen_teacher(n=50, d=5, J=2, seed=0)
print(f"teacher second-layer weights: {np.round(teacher.w, 3)}")

# A balanced initialization puts |w_j| = |u_j| for every neuron.
net0 = init_network(InitSpec("balanced-from-measure", seed=0, radius=1.0), m=200, d=5)
print(f"initial max |gap| = {np.max(np.abs(balance_gap(net0))):.1e}")

# %%
# Train at two step sizes over the same time horizon. The gap drift halves
# when the step halves: it is a discretization artefact, not a property of
# the flow.
for eta, steps in ((0.02, 5000), (0.01, 10000)):
    res = run_flow(net0, data, FlowConfig(eta=eta, max_steps=steps, eps_grad=1e-12))
    print(f"eta={eta:<5} loss {res.log.loss[0]:.3e} -> {res.log.loss[-1]:.3e}   "
          f"max |gap| along the run {max(res.log.max_balance_gap):.2e}")

# %%
# The trajectory log is plain CSV and round-trips exactly.
print(res.log.to_csv().splitlines()[:3])

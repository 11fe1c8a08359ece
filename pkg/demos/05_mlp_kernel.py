"""
Gradient kernels of deeper ReLU networks
========================================

For a bias-free ReLU MLP the inner product of parameter gradients at two
inputs follows a layer-by-layer recursion. At depth two it collapses to the
two-layer kernel; at depth three we compare it with finite differences.
"""

import numpy as np

from adaptive_kernel import MlpState, gd_kernel, mlp_kernel
from adaptive_kernel.model import NetworkState
from adaptive_kernel.verify import fd_param_grads

rng = np.random.default_rng(1)
net = NetworkState(rng.standard_normal(6), rng.standard_normal((6, 3)))
x, z = rng.standard_normal(3), rng.standard_normal(3)
print(f"depth 2: recursion {mlp_kernel(MlpState.from_network(net), x, z):.12f}   "
      f"two-layer kernel {gd_kernel(net, x, z):.12f}")

# %%
mlp = MlpState.random([3, 5, 4, 1], seed=2)
fd = fd_param_grads(mlp, x) @ fd_param_grads(mlp, z)
print(f"depth 3: recursion {mlp_kernel(mlp, x, z):.8f}   finite differences {fd:.8f}")

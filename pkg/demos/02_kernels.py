"""
The kernels of a finite network
===============================

At any point of training the network defines a gradient-descent kernel
``K = K0part + K1part`` (an activation-gated linear part plus a feature part)
and an RKHS kernel ``H``. At initialization and infinite width ``K`` has a
closed form in ``t = x.z`` for unit inputs; at finite width the ordering
``K >= K0part >= K1part >= H / D^2`` holds in the PSD sense.
"""

import numpy as np

from adaptive_kernel import gram, numerical_rank, psd_chain_check
from adaptive_kernel.kernels import k0_closed_form, k0_monte_carlo
from adaptive_kernel.model import NetworkState, to_signed_measure, init_network, InitSpec
from adaptive_kernel.verify import unit_pair

# %%
# Closed form against Monte Carlo at a few angles.
for t in (-1.0, -0.5, 0.0, 0.5, 1.0):
    x, z = unit_pair(t, 5)
    mc, se = k0_monte_carlo(x, z, 100_000, seed=1, return_stderr=True)
    print(f"t={t:+.1f}  closed {k0_closed_form(x, z):.5f}  MC {mc:.5f} +- {se:.5f}")

# %%
# The PSD chain on a balanced network viewed as a signed measure.
rng = np.random.default_rng(0)
net = init_network(InitSpec(seed=0, radius=1.5), m=40, d=4)
mu = to_signed_measure(net)
X = rng.standard_normal((25, 4))
report = psd_chain_check(mu, X, mu.support_radius())
for name in ("K-K0part", "K0part-K1part", "K1part-H/D2"):
    print(f"min eig of {name:<14} {report[name]['min_eig']:+.2e}")

# %%
# One neuron: H only ever sees one feature, so its Gram has rank one, while
# K also carries the gated linear part and sees every active input direction.
one = NetworkState(np.array([1.0]), rng.standard_normal((1, 4)))
print("rank H =", numerical_rank(gram("H", one, X).matrix),
      " rank K =", numerical_rank(gram("K", one, X).matrix),
      " active inputs =", int(np.sum(X @ one.U[0] >= 0)))

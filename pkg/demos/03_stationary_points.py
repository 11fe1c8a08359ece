"""
What a trained network has converged to
=======================================

At a stationary point of the unregularized flow the residual is orthogonal
to every neuron's feature, which makes the network a projection in the RKHS
of its own adaptive kernel. With weight decay ``lam`` the network is close to
kernel ridge regression with the feature kernel and ``lam_eff = n lam / m``,
and the discrepancy is an exact linear function of the remaining velocity.
"""

import numpy as np

from adaptive_kernel.spectral import check_nn_equals_ridgeless, check_projection_optimality
from adaptive_kernel.verify import train_to_stationarity

# %%
# Train to a small gradient norm and test the projection property.
res, data = train_to_stationarity(n=20, m=100, d=5, eps_grad=1e-7, max_steps=200_000)
print(f"{res.termination} after {res.steps} steps, |grad| = {res.grad_norm:.1e}")
rep = check_projection_optimality(res.net, data, eps_grad=1e-7)
print(f"max |<Delta, feature_j>| = {rep['max_abs_r']:.2e} (bound {rep['r_bound']:.2e})")
print(f"Delta' W K W Delta = {rep['quad_form']:.2e}")

# %%
# Weight decay: compare with ridge regression on held-out points. The gap is
# not zero at finite training time; it equals n sqrt(m) phi(x)' (Phi'Phi + n
# lam I)^{-1} v_w where v_w is the residual second-layer velocity, and the
# last column confirms that identity to rounding.
X_eval = np.random.default_rng(1).standard_normal((200, 5))
for lam in (1e-1, 1e-2):
    res, data = train_to_stationarity(n=20, m=100, d=5, lam=lam, eps_grad=1e-10,
                                      max_steps=100_000)
    r = check_nn_equals_ridgeless(res.net, data, lam, X_eval)
    print(f"lam={lam:<5} |grad| {r['grad_norm']:.1e}  held-out gap {r['max_gap_eval']:.1e}  "
          f"gap/|grad| {r['max_gap_eval'] / r['grad_norm']:.0f}  "
          f"identity err {r['velocity_identity_err']:.1e}")

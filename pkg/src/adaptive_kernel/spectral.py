"""Symmetric eigensolves, pseudo-inverses, kernel ridge(less) regression and the
stationarity checks built on them.

All checks live at the empirical sample measure: a "kernel operator" is the
Gram matrix weighted by the sample probabilities.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .dynamics import Dataset, _norm, grad, residual
from .kernels import GramMatrix, gram, numerical_rank
from .model import NetworkState, forward, relu

__all__ = [
    "NumericalError",
    "RidgeSolution",
    "Spectrum",
    "check_nn_equals_ridgeless",
    "check_projection_optimality",
    "eig_sym",
    "kernel_null_inclusion",
    "pinv_apply",
    "pinv_matrix",
    "ridge_solve",
]

STATIONARITY_SLACK = 10.0


class NumericalError(ArithmeticError):
    """An eigensolver failed to converge."""


def _as_matrix(G):
    return G.matrix if isinstance(G, GramMatrix) else np.asarray(G, dtype=float)


@dataclass
class Spectrum:
    """Eigenvalues in descending order, optionally with eigenvectors as columns."""

    values: np.ndarray
    vectors: Optional[np.ndarray] = None
    source: str = ""
    t: float = 0.0

    def __len__(self):
        return self.values.shape[0]

    def truncate(self, keep: float) -> "Spectrum":
        """Keep the leading ``ceil(keep * n)`` eigenvalues."""
        if not 0 < keep <= 1:
            raise ValueError("keep fraction must lie in (0, 1]")
        k = int(np.ceil(keep * len(self) - 1e-12))
        vecs = None if self.vectors is None else self.vectors[:, :k]
        return Spectrum(self.values[:k].copy(), vecs, self.source, self.t)

    def rows(self):
        return [(self.t, i, float(v)) for i, v in enumerate(self.values)]

    def to_csv(self, header=True) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        if header:
            writer.writerow(("t", "index", "eigenvalue"))
        for t, i, v in self.rows():
            writer.writerow((repr(t), i, repr(v)))
        return buf.getvalue()


def eig_sym(G, vectors: bool = False, t: float = 0.0) -> Spectrum:
    A = _as_matrix(G)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NumericalError("eigensolver input contains non-finite entries")
    scale = max(float(np.max(np.abs(A))), np.finfo(float).tiny) if A.size else 1.0
    if A.size and np.max(np.abs(A - A.T)) > 1e-8 * scale:
        raise ValueError("eig_sym requires a symmetric matrix")
    try:
        if vectors:
            vals, vecs = np.linalg.eigh(A)
        else:
            vals, vecs = np.linalg.eigvalsh(A), None
    except np.linalg.LinAlgError as err:
        raise NumericalError(f"eigensolver did not converge for a {A.shape[0]}x{A.shape[0]} "
                             f"matrix (max |entry| {scale:.3e}): {err}") from err
    order = np.argsort(vals)[::-1]
    source = G.tag if isinstance(G, GramMatrix) else ""
    return Spectrum(vals[order], None if vecs is None else vecs[:, order], source, t)


def pinv_matrix(G, rcond: float = 1e-10) -> np.ndarray:
    spec = eig_sym(G, vectors=True)
    top = float(np.max(np.abs(spec.values))) if len(spec) else 0.0
    if top == 0:
        return np.zeros_like(_as_matrix(G))
    cut = rcond * top
    keep = np.abs(spec.values) > cut
    V = spec.vectors[:, keep]
    return (V / spec.values[keep]) @ V.T


def pinv_apply(G, Y, rcond: float = 1e-10) -> np.ndarray:
    """Moore-Penrose inverse applied to ``Y``, dropping eigenvalues below ``rcond * max|eig|``."""
    return pinv_matrix(G, rcond) @ np.asarray(Y, dtype=float)


@dataclass
class RidgeSolution:
    """Coefficients ``c`` of ``f(x) = k(x, X) @ c``.

    ``cross_kernel(Xnew)`` returns the ``(len(Xnew), n)`` kernel block against
    the training inputs; it is attached by the caller that knows the kernel.
    """

    coef: np.ndarray
    lam_eff: float
    cross_kernel: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, repr=False)

    def predict(self, Xnew) -> np.ndarray:
        if self.cross_kernel is None:
            raise ValueError("no cross kernel attached to this ridge solution")
        return self.cross_kernel(np.atleast_2d(Xnew)) @ self.coef


def ridge_solve(G, Y, lam_eff: float, rcond: float = 1e-10, cross_kernel=None) -> RidgeSolution:
    """``c = (lam_eff I + G)^{-1} Y``; the pseudo-inverse path when ``lam_eff == 0``."""
    if lam_eff < 0:
        raise ValueError("lam_eff must be non-negative")
    A = _as_matrix(G)
    Y = np.asarray(Y, dtype=float)
    if lam_eff == 0:
        c = pinv_apply(A, Y, rcond)
    else:
        c = np.linalg.solve(A + lam_eff * np.eye(A.shape[0]), Y)
    return RidgeSolution(c, float(lam_eff), cross_kernel)


def kernel_null_inclusion(K, H, rel: float = 1e-10, tol: float = 1e-6) -> dict:
    """Check ``Ker(K) c Ker(H)`` on Gram matrices.

    Every eigenvector of ``K`` whose eigenvalue is below ``rel * max eig`` must
    satisfy ``||H v|| <= tol * ||H||_2``.
    """
    K, H = _as_matrix(K), _as_matrix(H)
    spec = eig_sym(K, vectors=True)
    top = max(float(spec.values[0]), 0.0)
    null = spec.vectors[:, spec.values <= rel * top] if top > 0 else spec.vectors
    h_norm = float(np.linalg.norm(H, 2))
    worst = float(np.max(np.linalg.norm(H @ null, axis=0))) if null.shape[1] else 0.0
    return {"rank_K": numerical_rank(K, rel), "rank_H": numerical_rank(H, rel),
            "null_dim_K": int(null.shape[1]), "max_H_on_null": worst,
            "bound": tol * h_norm, "pass": worst <= tol * h_norm}


def check_projection_optimality(net: NetworkState, data: Dataset, eps_grad: float,
                                slack: float = STATIONARITY_SLACK) -> dict:
    """Normal-equation residuals of the network at (approximate) stationarity.

    ``r_j = sum_i p_i Delta_i ||Theta_j|| relu(x_i . Theta_j)`` is the
    correlation of the residual with each feature of the adaptive RKHS; it
    vanishes at an exact stationary point. In the weights,
    ``r_j = sqrt(m) ||Theta_j|| v_j`` with ``v_j`` the second-layer velocity,
    so a velocity norm below ``eps_grad`` bounds ``|r_j|`` by
    ``eps_grad * sqrt(m) * max_j ||Theta_j||``, the scale used here.

    The same report carries ``Delta' W K W Delta``, which equals the squared
    velocity norm and so is bounded by ``slack * eps_grad**2``, together with
    the Gram-level inclusion ``Ker(K) c Ker(H)``.
    """
    p = data.weights
    delta = residual(net, data).delta
    Theta = net.Theta
    norms = np.linalg.norm(Theta, axis=1)
    r = norms * (relu(data.X @ Theta.T).T @ (p * delta))
    scale = np.sqrt(net.m) * float(np.max(norms))
    vel = grad(net, data)
    K = gram("K", net, data.X).matrix
    H = gram("H", net, data.X).matrix
    Wd = p * delta
    quad = float(Wd @ K @ Wd)
    return {
        "max_abs_r": float(np.max(np.abs(r))),
        "r_bound": slack * eps_grad * scale,
        "scale": scale,
        "grad_norm": _norm(vel),
        "quad_form": quad,
        "quad_bound": slack * eps_grad**2,
        "null_inclusion": kernel_null_inclusion(K, H),
        "pass": bool(np.max(np.abs(r)) <= slack * eps_grad * scale
                     and quad <= slack * eps_grad**2),
    }


def adaptive_feature_kernel(net: NetworkState):
    """Cross-kernel ``(A, B) -> int relu(a.Theta) relu(b.Theta) |rho|(dTheta)`` of the network."""
    def cross(A, B=None):
        B = A if B is None else B
        return relu(np.atleast_2d(A) @ net.U.T) @ relu(np.atleast_2d(B) @ net.U.T).T
    return cross


def check_nn_equals_ridgeless(net: NetworkState, data: Dataset, lam: float, X_eval,
                              rcond: float = 1e-10) -> dict:
    """Compare a (near-)stationary regularized network with adaptive kernel ridge.

    The kernel is ``H^lam(x, z) = int relu(x.Theta) relu(z.Theta) |rho|(dTheta)``
    of the network's own measure and the ridge is ``n * lam / m``. At an exact
    stationary point the two predictors coincide everywhere.
    """
    cross = adaptive_feature_kernel(net)
    lam_eff = data.n * lam / net.m
    G = cross(data.X)
    sol = ridge_solve(G, data.Y, lam_eff, rcond,
                      cross_kernel=lambda A: cross(A, data.X))
    X_eval = np.atleast_2d(np.asarray(X_eval, dtype=float))
    gap_eval = np.abs(forward(net, X_eval) - sol.predict(X_eval))
    gap_train = np.abs(forward(net, data.X) - sol.predict(data.X))
    vel = grad(net, data, lam)
    # Exact decomposition of the discrepancy through the second-layer velocity:
    # with rescaled features Phi = relu(X Theta') and c = theta / m,
    # (Phi'Phi + n lam I)(c_ridge - c) = n sqrt(m) v_w, so
    # f_ridge(x) - f_nn(x) = n sqrt(m) phi(x)' (Phi'Phi + n lam I)^{-1} v_w.
    if lam > 0:
        Phi = relu(data.X @ net.Theta.T)
        A = Phi.T @ Phi + data.n * lam * np.eye(net.m)
        dc = np.linalg.solve(A, data.n * np.sqrt(net.m) * vel.w)
        predicted = relu(X_eval @ net.Theta.T) @ dc
        actual = sol.predict(X_eval) - forward(net, X_eval)
        identity_err = float(np.max(np.abs(predicted - actual)))
    else:
        identity_err = None
    return {
        "lam": float(lam),
        "lam_eff": lam_eff,
        "max_gap_eval": float(np.max(gap_eval)),
        "max_gap_train": float(np.max(gap_train)),
        "grad_norm": _norm(vel),
        "grad_norm_w": float(np.linalg.norm(vel.w)),
        "rank_H": numerical_rank(G),
        "ridge_train_residual": float(np.max(np.abs(data.Y - sol.predict(data.X)))),
        "nn_train_residual": float(np.max(np.abs(data.Y - forward(net, data.X)))),
        "velocity_identity_err": identity_err,
    }

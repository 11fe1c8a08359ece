"""Kernels induced by training: the GD kernel, its two parts, the RKHS kernel,
the infinite-width initial kernel and the recursive multi-layer kernel.

For a signed measure with atoms ``Theta_j`` (mass ``1/m``)::

    K0part(x, z) = mean_j ||Theta_j||^2 1[x.Theta_j >= 0] 1[z.Theta_j >= 0] x.z
    K1part(x, z) = mean_j relu(x.Theta_j) relu(z.Theta_j)
    K            = K0part + K1part
    H(x, z)      = mean_j ||Theta_j||^2 relu(x.Theta_j) relu(z.Theta_j)

For a network the same quantities are written in the original weights, e.g.
``K(x, z) = sum_j relu(x.u_j) relu(z.u_j) + w_j^2 1[.] 1[.] x.z``; the two
forms coincide when the network is balanced.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import NetworkState, SignedAtomMeasure, relu, relu_gate

__all__ = [
    "GramMatrix",
    "KernelError",
    "MlpState",
    "TAGS",
    "gd_kernel",
    "gram",
    "h_kernel",
    "k0_closed_form",
    "k0_monte_carlo",
    "mlp_forward",
    "mlp_kernel",
    "mlp_param_grads",
    "numerical_rank",
    "psd_chain_check",
]

TAGS = ("K", "K0part", "K1part", "H", "K0closed", "MLP")


class KernelError(ValueError):
    """Bad kernel input or a broken evaluator."""


# -- pointwise evaluators -----------------------------------------------------


def _parts(obj, X, Z):
    """Return (K0part, K1part, H) cross matrices between rows of X and rows of Z."""
    if isinstance(obj, NetworkState):
        m = obj.m
        A, B = X @ obj.U.T, Z @ obj.U.T
        k1 = relu(A) @ relu(B).T
        k0 = ((relu_gate(A) * obj.w**2) @ relu_gate(B).T) * (X @ Z.T)
        h = m * ((relu(A) * np.sum(obj.U**2, axis=1)) @ relu(B).T)
        return k0, k1, h
    if isinstance(obj, SignedAtomMeasure):
        m = obj.m
        sq = np.sum(obj.atoms**2, axis=1)
        A, B = X @ obj.atoms.T, Z @ obj.atoms.T
        k1 = relu(A) @ relu(B).T / m
        k0 = ((relu_gate(A) * sq) @ relu_gate(B).T) * (X @ Z.T) / m
        h = (relu(A) * sq) @ relu(B).T / m
        return k0, k1, h
    raise KernelError(f"expected a NetworkState or SignedAtomMeasure, got {type(obj).__name__}")


def _dim(obj) -> int:
    if not isinstance(obj, (NetworkState, SignedAtomMeasure)):
        raise KernelError(f"expected a NetworkState or SignedAtomMeasure, got {type(obj).__name__}")
    return obj.d


def _rows(x, d):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != d:
        raise KernelError(f"input dimension {x.shape[1]} does not match d={d}")
    return x


def gd_kernel(obj, x, z) -> float:
    """GD kernel ``K(x, z)`` from a network (parameter form) or a measure."""
    x, z = _rows(x, _dim(obj)), _rows(z, _dim(obj))
    k0, k1, _ = _parts(obj, x, z)
    return float(k0[0, 0] + k1[0, 0])


def h_kernel(obj, x, z) -> float:
    """RKHS kernel ``H(x, z) = int ||Theta||^2 relu(x.Theta) relu(z.Theta) |rho|(dTheta)``."""
    x, z = _rows(x, _dim(obj)), _rows(z, _dim(obj))
    return float(_parts(obj, x, z)[2][0, 0])


def k0_closed_form(x, z) -> float:
    """Infinite-width initial GD kernel for unit-norm inputs.

    ``((pi - arccos t) / pi) t + sqrt(1 - t^2) / (2 pi)`` with ``t = x.z``.
    """
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    for v in (x, z):
        if abs(np.linalg.norm(v) - 1.0) > 1e-8:
            raise KernelError(f"k0_closed_form needs unit vectors, got norm {np.linalg.norm(v)}")
    return _k0_of_t(float(x @ z))


def _k0_of_t(t):
    t = np.clip(t, -1.0, 1.0)
    return (np.pi - np.arccos(t)) / np.pi * t + np.sqrt(1.0 - t * t) / (2 * np.pi)


def k0_monte_carlo(x, z, m_samples: int, seed: int = 0, return_stderr: bool = False):
    """Empirical ``K_0(x, z)`` of a fresh Gaussian/Rademacher network of width ``m_samples``.

    With ``return_stderr`` the standard error of the estimate is returned as
    well: the sample standard deviation of ``m_samples * summand_j`` over
    ``sqrt(m_samples)``.
    """
    from .model import InitSpec, init_network

    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    for v in (x, z):
        if abs(np.linalg.norm(v) - 1.0) > 1e-8:
            raise KernelError("k0_monte_carlo needs unit vectors")
    net = init_network(InitSpec("gaussian-rademacher", seed=seed), m_samples, x.shape[0])
    a, b = net.U @ x, net.U @ z
    terms = relu(a) * relu(b) + net.w**2 * relu_gate(a) * relu_gate(b) * float(x @ z)
    value = float(terms.sum())
    if not return_stderr:
        return value
    stderr = float(np.std(terms * m_samples, ddof=1) / np.sqrt(m_samples))
    return value, stderr


# -- multi-layer perceptrons --------------------------------------------------


@dataclass(frozen=True)
class MlpState:
    """Bias-free ReLU MLP with a scalar linear output.

    ``weights[l]`` has shape ``(L_l, L_{l+1})``; entry ``(i, j)`` connects
    node ``i`` of layer ``l`` to node ``j`` of layer ``l + 1``.
    """

    weights: Sequence[np.ndarray]

    def __post_init__(self):
        ws = [np.atleast_2d(np.asarray(W, dtype=float)) for W in self.weights]
        if not ws:
            raise KernelError("an MLP needs at least one weight matrix")
        for a, b in zip(ws, ws[1:]):
            if a.shape[1] != b.shape[0]:
                raise KernelError(f"non-conforming layer shapes {a.shape} -> {b.shape}")
        if ws[-1].shape[1] != 1:
            raise KernelError("only scalar-output MLPs are supported")
        if not all(np.all(np.isfinite(W)) for W in ws):
            raise KernelError("MLP weights must be finite")
        object.__setattr__(self, "weights", tuple(ws))

    @property
    def sizes(self):
        return [W.shape[0] for W in self.weights] + [1]

    @property
    def depth(self):
        return len(self.weights)

    @classmethod
    def from_network(cls, net: NetworkState) -> "MlpState":
        return cls([net.U.T, net.w[:, None]])

    @classmethod
    def random(cls, sizes, seed=0) -> "MlpState":
        rng = np.random.default_rng(seed)
        return cls([rng.standard_normal((a, b)) / np.sqrt(a) for a, b in zip(sizes, sizes[1:])])

    def tail(self) -> "MlpState":
        return MlpState(self.weights[1:])


def _mlp_pass(mlp, x):
    outs, pres = [np.asarray(x, dtype=float)], []
    for l, W in enumerate(mlp.weights):
        v = outs[-1] @ W
        pres.append(v)
        if l < mlp.depth - 1:
            outs.append(relu(v))
    return outs, pres


def mlp_forward(mlp: MlpState, x) -> float:
    return float(_mlp_pass(mlp, x)[1][-1][0])


def _deltas(mlp, pres):
    # deltas[l] = dg / dv^{l+1}, for each weight matrix l
    deltas = [np.ones(1)]
    for l in range(mlp.depth - 1, 0, -1):
        deltas.insert(0, relu_gate(pres[l - 1]) * (mlp.weights[l] @ deltas[0]))
    return deltas


def mlp_param_grads(mlp: MlpState, x):
    """``dg(x)/dTheta^l`` for every layer, by backpropagation."""
    outs, pres = _mlp_pass(mlp, x)
    return [np.outer(o, dl) for o, dl in zip(outs, _deltas(mlp, pres))]


def mlp_kernel(mlp: MlpState, x, z) -> float:
    """Parameter-gradient kernel of an MLP through the layer recursion.

    ``K^{h+1}(x, z) = K^h(o1(x), o1(z)) + sum_ij dg(x)/dTheta0_ij dg(z)/dTheta0_ij``
    with the single linear layer as base case, ``K^1(x, z) = x.z``.
    """
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    if x.shape != (mlp.sizes[0],) or z.shape != x.shape:
        raise KernelError(f"inputs must have shape ({mlp.sizes[0]},)")
    if mlp.depth == 1:
        return float(x @ z)
    ox, px = _mlp_pass(mlp, x)
    oz, pz = _mlp_pass(mlp, z)
    first = float(x @ z) * float(_deltas(mlp, px)[0] @ _deltas(mlp, pz)[0])
    return mlp_kernel(mlp.tail(), ox[1], oz[1]) + first


# -- Gram matrices ------------------------------------------------------------


@dataclass
class GramMatrix:
    matrix: np.ndarray
    tag: str
    provenance: dict = field(default_factory=dict)
    symmetry_defect: float = 0.0

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def min_eig(self) -> float:
        return float(np.linalg.eigvalsh(self.matrix)[0])

    def is_psd(self) -> bool:
        return self.min_eig() >= -1e-8 * max(float(np.trace(self.matrix)), 0.0)

    def sidecar(self) -> dict:
        return {"tag": self.tag, "provenance": self.provenance, "n": self.n,
                "symmetry_defect": self.symmetry_defect}

    def to_csv(self) -> str:
        return "\n".join(",".join(repr(float(v)) for v in row) for row in self.matrix) + "\n"

    def save(self, path):
        from .io import atomic_write

        atomic_write(path, self.to_csv())
        atomic_write(str(path) + ".json", json.dumps(self.sidecar(), indent=2))

    @classmethod
    def load(cls, path) -> "GramMatrix":
        with open(path) as fh:
            rows = [list(map(float, line.split(","))) for line in fh if line.strip()]
        with open(str(path) + ".json") as fh:
            meta = json.load(fh)
        return cls(np.array(rows), meta["tag"], meta.get("provenance", {}),
                   meta.get("symmetry_defect", 0.0))


def gram(tag: str, obj, X, provenance=None) -> GramMatrix:
    """Symmetric Gram matrix of the kernel ``tag`` on the rows of ``X``.

    ``obj`` is a NetworkState or SignedAtomMeasure for K/K0part/K1part/H, an
    MlpState for MLP, and ignored for K0closed (rows are normalized first).
    """
    if tag not in TAGS:
        raise KernelError(f"unknown kernel tag {tag!r}; expected one of {TAGS}")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if not np.all(np.isfinite(X)):
        raise KernelError("X must be finite")
    if tag == "K0closed":
        norms = np.linalg.norm(X, axis=1, keepdims=True)
        Xn = X / np.where(norms == 0, 1.0, norms)
        A = _k0_of_t(Xn @ Xn.T)
    elif tag == "MLP":
        n = X.shape[0]
        A = np.empty((n, n))
        for i in range(n):
            for j in range(i, n):
                A[i, j] = A[j, i] = mlp_kernel(obj, X[i], X[j])
    else:
        X = _rows(X, _dim(obj))
        k0, k1, h = _parts(obj, X, X)
        A = {"K": k0 + k1, "K0part": k0, "K1part": k1, "H": h}[tag]
    defect = float(np.max(np.abs(A - A.T))) if A.size else 0.0
    scale = float(np.max(np.abs(A))) if A.size else 0.0
    if defect > 1e-8 * max(scale, np.finfo(float).tiny):
        raise KernelError(f"{tag} evaluator is not symmetric (defect {defect:.3e})")
    if provenance is None:
        provenance = {"source": type(obj).__name__ if obj is not None else None}
    return GramMatrix(0.5 * (A + A.T), tag, dict(provenance), defect)


def numerical_rank(G, rel: float = 1e-10) -> int:
    """Number of eigenvalues above ``rel`` times the largest eigenvalue."""
    M = G.matrix if isinstance(G, GramMatrix) else np.asarray(G, dtype=float)
    ev = np.linalg.eigvalsh(M)
    top = ev[-1]
    if top <= 0:
        return 0
    return int(np.sum(ev > rel * top))


def psd_chain_check(measure: SignedAtomMeasure, X, D: float) -> dict:
    """Minimum eigenvalues of ``K - K0part``, ``K0part - K1part`` and ``K1part - H / D^2``.

    Each difference passes when its minimum eigenvalue is at least
    ``-1e-8`` times the trace of the larger kernel in the pair.
    """
    radius = measure.support_radius()
    if D < radius:
        raise KernelError(f"D={D} is smaller than the support radius {radius}")
    K = gram("K", measure, X).matrix
    K0 = gram("K0part", measure, X).matrix
    K1 = gram("K1part", measure, X).matrix
    H = gram("H", measure, X).matrix
    out = {"D": float(D), "support_radius": radius}
    for name, big, small in (("K-K0part", K, K0), ("K0part-K1part", K0, K1),
                             ("K1part-H/D2", K1, H / D**2)):
        lo = float(np.linalg.eigvalsh(big - small)[0])
        bound = -1e-8 * float(np.trace(big))
        out[name] = {"min_eig": lo, "bound": bound, "pass": lo >= bound}
    out["pass"] = all(out[k]["pass"] for k in ("K-K0part", "K0part-K1part", "K1part-H/D2"))
    return out

"""Two-layer ReLU networks, their rescaled view and the induced signed measure.

The network computes ``f(x) = sum_j w_j * relu(x @ u_j)``. Rescaling each
neuron by ``sqrt(m)`` gives ``theta_j = sqrt(m) w_j`` and
``Theta_j = sqrt(m) u_j`` so that ``f(x) = (1/m) sum_j theta_j relu(x @ Theta_j)``.
Under the balanced condition ``|w_j| = ||u_j||`` the network is the integral
of ``||Theta|| relu(x @ Theta)`` against the signed empirical measure of the
atoms ``Theta_j``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

__all__ = [
    "BalanceError",
    "ConfigError",
    "InitSpec",
    "NetworkState",
    "SignedAtomMeasure",
    "balance_gap",
    "balance_tolerance",
    "forward",
    "init_network",
    "relu",
    "relu_gate",
    "to_signed_measure",
]

SCHEMES = ("balanced-from-measure", "gaussian-rademacher", "custom-unbalanced")


class ConfigError(ValueError):
    """Invalid configuration value."""


class BalanceError(ValueError):
    """The network violates the balanced condition beyond tolerance."""

    def __init__(self, index, gap, tol):
        self.index = int(index)
        self.gap = float(gap)
        self.tol = float(tol)
        super().__init__(
            f"neuron {self.index} is unbalanced: gap {self.gap:.3e} exceeds "
            f"tolerance {self.tol:.3e} (pass force=True to override)"
        )


def relu(z):
    return np.maximum(z, 0.0)


def relu_gate(z):
    # gate is open on the boundary z == 0
    return (z >= 0.0).astype(float)


@dataclass(frozen=True)
class NetworkState:
    """Weights of a two-layer ReLU network without biases.

    Parameters
    ----------
    w : ndarray of shape (m,)
        Second-layer weights.
    U : ndarray of shape (m, d)
        First-layer weights, one row ``u_j`` per neuron.
    seed : int, optional
        Seed the weights were drawn with, kept for provenance.
    """

    w: np.ndarray
    U: np.ndarray
    seed: Optional[int] = None

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float).reshape(-1)
        U = np.asarray(self.U, dtype=float)
        if U.ndim == 1:
            U = U.reshape(w.shape[0], -1)
        if U.ndim != 2 or U.shape[0] != w.shape[0]:
            raise ValueError(f"U must have shape (m, d) with m={w.shape[0]}, got {U.shape}")
        if w.shape[0] < 1 or U.shape[1] < 1:
            raise ValueError("need m >= 1 and d >= 1")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(U))):
            raise ValueError("network weights must be finite")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "U", U)

    @property
    def m(self) -> int:
        return self.w.shape[0]

    @property
    def d(self) -> int:
        return self.U.shape[1]

    @property
    def theta(self) -> np.ndarray:
        """Rescaled second-layer weights ``sqrt(m) * w``."""
        return np.sqrt(self.m) * self.w

    @property
    def Theta(self) -> np.ndarray:
        """Rescaled neuron directions ``sqrt(m) * U``."""
        return np.sqrt(self.m) * self.U

    @classmethod
    def from_rescaled(cls, theta, Theta, seed=None):
        theta = np.asarray(theta, dtype=float)
        m = theta.shape[0]
        return cls(theta / np.sqrt(m), np.asarray(Theta, dtype=float) / np.sqrt(m), seed)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.w, self.U.ravel()])

    def unflat(self, vec) -> "NetworkState":
        vec = np.asarray(vec, dtype=float)
        return NetworkState(vec[: self.m], vec[self.m:].reshape(self.m, self.d), self.seed)

    def to_dict(self) -> dict:
        return {"m": self.m, "d": self.d, "seed": self.seed,
                "w": self.w.tolist(), "U": self.U.tolist()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: dict) -> "NetworkState":
        net = cls(np.asarray(doc["w"], dtype=float), np.asarray(doc["U"], dtype=float),
                  doc.get("seed"))
        if net.m != doc.get("m", net.m) or net.d != doc.get("d", net.d):
            raise ValueError("declared m/d disagree with the weight arrays")
        return net

    @classmethod
    def from_json(cls, text: str) -> "NetworkState":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class SignedAtomMeasure:
    """Empirical signed measure with atoms ``Theta_j`` of mass ``1/m`` each."""

    signs: np.ndarray
    atoms: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        signs = np.asarray(self.signs, dtype=float).reshape(-1)
        atoms = np.atleast_2d(np.asarray(self.atoms, dtype=float))
        if atoms.shape[0] != signs.shape[0]:
            raise ValueError("one sign per atom is required")
        if not np.all(np.isin(signs, (-1.0, 1.0))):
            raise ValueError("signs must be +1 or -1")
        object.__setattr__(self, "signs", signs)
        object.__setattr__(self, "atoms", atoms)

    @property
    def m(self) -> int:
        return self.signs.shape[0]

    @property
    def d(self) -> int:
        return self.atoms.shape[1]

    @property
    def mass(self) -> float:
        return 1.0 / self.m

    def total_variation(self) -> float:
        return self.m * self.mass

    def positive(self) -> np.ndarray:
        return self.atoms[self.signs > 0]

    def negative(self) -> np.ndarray:
        return self.atoms[self.signs < 0]

    def support_radius(self) -> float:
        return float(np.max(np.linalg.norm(self.atoms, axis=1)))

    def integrate(self, X) -> np.ndarray:
        """Evaluate ``x -> int ||Theta|| relu(x @ Theta) rho(dTheta)`` at rows of X."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        norms = np.linalg.norm(self.atoms, axis=1)
        return relu(X @ self.atoms.T) @ (self.signs * norms) / self.m

    def to_network(self) -> NetworkState:
        norms = np.linalg.norm(self.atoms, axis=1)
        return NetworkState.from_rescaled(self.signs * norms, self.atoms)


@dataclass(frozen=True)
class InitSpec:
    """How to draw initial weights.

    ``radius`` is the radius of the sphere the base atoms are drawn from for
    the balanced and unbalanced schemes. ``gap`` is the rescaled balance gap
    ``theta_j**2 - ||Theta_j||**2`` imposed by ``custom-unbalanced``.
    """

    scheme: str = "balanced-from-measure"
    seed: int = 0
    radius: float = 1.0
    m_plus: Optional[int] = None
    gap: float = 1.0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown init scheme {self.scheme!r}; expected one of {SCHEMES}")
        if not np.isfinite(self.radius) or self.radius < 0:
            raise ConfigError(f"radius must be a non-negative finite number, got {self.radius}")


def _sphere(rng, k, d, radius):
    z = rng.standard_normal((k, d))
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return radius * z / norms


def init_network(spec: InitSpec, m: int, d: int) -> NetworkState:
    """Draw an initial network according to ``spec``.

    ``balanced-from-measure`` samples ``Theta_j`` uniformly on the sphere of
    radius ``spec.radius``, with the first ``m_plus`` atoms positive, and sets
    ``u_j = Theta_j / sqrt(m)``, ``w_j = +-||u_j||``. ``gaussian-rademacher``
    draws ``w_j = +-1/sqrt(m)`` and ``u_j ~ N(0, I/m)``. ``custom-unbalanced``
    starts from the balanced draw and moves ``theta_j`` so that every neuron
    carries the rescaled gap ``spec.gap``.
    """
    if m < 1 or d < 1:
        raise ConfigError(f"need m >= 1 and d >= 1, got m={m}, d={d}")
    rng = np.random.default_rng(spec.seed)
    if spec.scheme == "gaussian-rademacher":
        w = rng.choice((-1.0, 1.0), size=m) / np.sqrt(m)
        U = rng.standard_normal((m, d)) / np.sqrt(m)
        return NetworkState(w, U, spec.seed)

    if m < 2:
        raise ConfigError("balanced schemes need m >= 2 (one atom of each sign)")
    m_plus = -(-m // 2) if spec.m_plus is None else int(spec.m_plus)
    if not 1 <= m_plus <= m - 1:
        raise ConfigError(f"m_plus must lie in [1, m-1], got {m_plus}")
    Theta = _sphere(rng, m, d, spec.radius)
    signs = np.where(np.arange(m) < m_plus, 1.0, -1.0)
    U = Theta / np.sqrt(m)
    if spec.scheme == "balanced-from-measure":
        w = signs * np.linalg.norm(U, axis=1)
        return NetworkState(w, U, spec.seed)

    theta_sq = np.sum(Theta**2, axis=1) + spec.gap
    if np.any(theta_sq < 0):
        raise ConfigError("gap is too negative for the chosen radius")
    w = signs * np.sqrt(theta_sq) / np.sqrt(m)
    return NetworkState(w, U, spec.seed)


def forward(net: NetworkState, x) -> np.ndarray | float:
    """Network output at a point (returns a float) or at the rows of a matrix."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.d:
        raise ValueError(f"input dimension {x.shape[-1]} does not match d={net.d}")
    out = relu(np.atleast_2d(x) @ net.U.T) @ net.w
    return float(out[0]) if x.ndim == 1 else out


def balance_gap(net: NetworkState) -> np.ndarray:
    """Per-neuron rescaled gap ``theta_j**2 - ||Theta_j||**2``."""
    return net.m * (net.w**2 - np.sum(net.U**2, axis=1))


def balance_tolerance(net: NetworkState) -> np.ndarray:
    return 1e-6 * (1.0 + np.sum(net.Theta**2, axis=1))


def to_signed_measure(net: NetworkState, force: bool = False) -> SignedAtomMeasure:
    """Atoms ``Theta_j = sqrt(m) u_j`` signed by ``sign(w_j)``.

    Dead neurons (``w_j == 0``) get sign +1; their atom then sits wherever
    ``u_j`` is, which is the origin for a genuinely dead neuron.
    """
    if not force:
        excess = np.abs(balance_gap(net)) - balance_tolerance(net)
        worst = int(np.argmax(excess))
        if excess[worst] > 0:
            raise BalanceError(worst, balance_gap(net)[worst], balance_tolerance(net)[worst])
    signs = np.where(net.w < 0, -1.0, 1.0)
    return SignedAtomMeasure(signs, net.Theta, {"seed": net.seed})

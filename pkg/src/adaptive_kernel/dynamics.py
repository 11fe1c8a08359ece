"""Discretized gradient flow on both layers of a two-layer ReLU network.

Velocities are negative gradients of the objective

    sum_i p_i * loss(y_i, f(x_i)) + lam / (2m) * (||w||^2 + ||U||_F^2)

where ``p`` are the sample weights of the (empirical or quadrature) measure.
Everything is closed form; there is no autodiff.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .model import ConfigError, NetworkState, balance_gap, relu, relu_gate

__all__ = [
    "Dataset",
    "DivergenceError",
    "FlowConfig",
    "FlowResult",
    "GuardBandError",
    "LogCoshLoss",
    "ResidualView",
    "SquaredLoss",
    "TrajectoryLog",
    "check_residual_ode",
    "default_step",
    "euler_step",
    "get_loss",
    "grad",
    "guard_band_violations",
    "loss_rate_check",
    "objective",
    "residual",
    "run_flow",
]


class DivergenceError(FloatingPointError):
    """An Euler update produced non-finite weights."""

    def __init__(self, message, last_state=None, log=None):
        super().__init__(message)
        self.last_state = last_state
        self.log = log


class GuardBandError(ValueError):
    """Some sample sits too close to an activation boundary."""

    def __init__(self, pairs):
        self.pairs = [(int(i), int(j)) for i, j in pairs]
        shown = ", ".join(map(str, self.pairs[:10]))
        more = "" if len(self.pairs) <= 10 else f" (+{len(self.pairs) - 10} more)"
        super().__init__(f"samples inside the activation guard band (i, j): {shown}{more}")


# -- data ---------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    """Design matrix, targets and probability weights of the sample measure."""

    X: np.ndarray
    Y: np.ndarray
    weights: Optional[np.ndarray] = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        Y = np.asarray(self.Y, dtype=float).reshape(-1)
        n = X.shape[0]
        if n < 1 or Y.shape[0] != n:
            raise ValueError(f"X has {n} rows but Y has {Y.shape[0]} entries")
        p = np.full(n, 1.0 / n) if self.weights is None else np.asarray(self.weights, float)
        if p.shape != (n,) or np.any(p < 0) or not np.isclose(p.sum(), 1.0, atol=1e-12):
            raise ValueError("weights must be a nonnegative n-vector summing to 1")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise ValueError("dataset entries must be finite")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "weights", p)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


# -- losses -------------------------------------------------------------------


class SquaredLoss:
    name = "squared"
    alpha = 1.0

    def value(self, y, f):
        return 0.5 * (y - f) ** 2

    def dfdf(self, y, f):
        return f - y


class LogCoshLoss:
    """``alpha/2 (f-y)^2 + log cosh(f-y)``, strongly convex with modulus ``alpha``."""

    name = "logcosh"

    def __init__(self, alpha=1.0):
        if alpha <= 0:
            raise ConfigError("strong-convexity modulus alpha must be positive")
        self.alpha = float(alpha)

    def value(self, y, f):
        r = f - y
        # log cosh r = |r| + log1p(exp(-2|r|)) - log 2, stable for large |r|
        a = np.abs(r)
        return 0.5 * self.alpha * r**2 + a + np.log1p(np.exp(-2 * a)) - np.log(2.0)

    def dfdf(self, y, f):
        r = f - y
        return self.alpha * r + np.tanh(r)


def get_loss(name="squared", alpha=1.0):
    if name == "squared":
        return SquaredLoss()
    if name == "logcosh":
        return LogCoshLoss(alpha)
    raise ConfigError(f"unknown loss {name!r}; expected 'squared' or 'logcosh'")


# -- configuration ------------------------------------------------------------


@dataclass(frozen=True)
class FlowConfig:
    """Settings for :func:`run_flow`. ``eta=None`` selects :func:`default_step`."""

    eta: Optional[float] = None
    max_steps: int = 10_000
    lam: float = 0.0
    eps_grad: float = 1e-8
    loss: str = "squared"
    alpha: float = 1.0
    log_every: int = 100

    def __post_init__(self):
        if self.eta is not None and not self.eta >= 0:
            raise ConfigError(f"eta must be non-negative, got {self.eta}")
        if self.lam < 0:
            raise ConfigError(f"lam must be non-negative, got {self.lam}")
        if not self.eps_grad > 0:
            raise ConfigError(f"eps_grad must be positive, got {self.eps_grad}")
        if self.max_steps < 0 or self.log_every < 1:
            raise ConfigError("max_steps must be >= 0 and log_every >= 1")
        get_loss(self.loss, self.alpha)

    def loss_fn(self):
        return get_loss(self.loss, self.alpha)

    def to_dict(self) -> dict:
        return asdict(self)


# -- core maps ----------------------------------------------------------------


def _pre(net, X):
    if X.shape[1] != net.d:
        raise ValueError(f"data dimension {X.shape[1]} does not match network d={net.d}")
    return X @ net.U.T


def objective(net: NetworkState, data: Dataset, lam: float = 0.0, loss=None) -> float:
    loss = loss or SquaredLoss()
    f = relu(_pre(net, data.X)) @ net.w
    fit = float(data.weights @ loss.value(data.Y, f))
    reg = lam / (2 * net.m) * (float(net.w @ net.w) + float(np.sum(net.U**2)))
    return fit + reg


@dataclass(frozen=True)
class ResidualView:
    """Residual ``Delta_i = -d loss(y_i, f(x_i)) / df``; equals ``y - f`` for squared loss."""

    delta: np.ndarray
    loss: str = "squared"


def residual(net: NetworkState, data: Dataset, loss=None) -> ResidualView:
    loss = loss or SquaredLoss()
    f = relu(_pre(net, data.X)) @ net.w
    return ResidualView(-loss.dfdf(data.Y, f), loss.name)


def grad(net: NetworkState, data: Dataset, lam: float = 0.0, loss=None) -> NetworkState:
    """Velocity field of the flow (the negative objective gradient), shaped like ``net``."""
    loss = loss or SquaredLoss()
    Z = _pre(net, data.X)
    A = relu(Z)
    r = data.weights * -loss.dfdf(data.Y, A @ net.w)
    dw = A.T @ r
    dU = net.w[:, None] * (relu_gate(Z).T @ (r[:, None] * data.X))
    if lam:
        dw = dw - lam / net.m * net.w
        dU = dU - lam / net.m * net.U
    if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(dU))):
        raise DivergenceError("non-finite velocity", last_state=net)
    return NetworkState(dw, dU, net.seed)


def _norm(vel: NetworkState) -> float:
    return float(np.sqrt(vel.w @ vel.w + np.sum(vel.U**2)))


def default_step(net: NetworkState, data: Dataset) -> float:
    """``1e-2 / (1 + max row sum of K(X, X) diag(p))`` for the network's own GD kernel."""
    Z = _pre(net, data.X)
    A = relu(Z)
    G = relu_gate(Z)
    K = A @ A.T + ((G * net.w**2) @ G.T) * (data.X @ data.X.T)
    return 1e-2 / (1.0 + float(np.max(np.abs(K) @ data.weights)))


def _resolve_eta(cfg, net, data):
    return default_step(net, data) if cfg.eta is None else cfg.eta


def euler_step(net: NetworkState, data: Dataset, cfg: FlowConfig, velocity=None) -> NetworkState:
    """One forward-Euler step ``net + eta * velocity``."""
    eta = _resolve_eta(cfg, net, data)
    vel = velocity if velocity is not None else grad(net, data, cfg.lam, cfg.loss_fn())
    w = net.w + eta * vel.w
    U = net.U + eta * vel.U
    if not (np.all(np.isfinite(w)) and np.all(np.isfinite(U))):
        raise DivergenceError("non-finite weights after Euler step", last_state=net)
    return NetworkState(w, U, net.seed)


# -- trajectories -------------------------------------------------------------


@dataclass
class TrajectoryLog:
    """Append-only time series of training diagnostics."""

    t: list = field(default_factory=list)
    step: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    max_balance_gap: list = field(default_factory=list)
    spectrum_id: list = field(default_factory=list)

    COLUMNS = ("t", "loss", "grad_norm", "max_balance_gap", "spectrum_id")

    def append(self, t, step, loss, grad_norm, max_gap, spectrum_id=""):
        if self.t and not t > self.t[-1]:
            raise ValueError("log times must be strictly increasing")
        self.t.append(float(t))
        self.step.append(int(step))
        self.loss.append(float(loss))
        self.grad_norm.append(float(grad_norm))
        self.max_balance_gap.append(float(max_gap))
        self.spectrum_id.append(str(spectrum_id))

    def __len__(self):
        return len(self.t)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.COLUMNS)
        for row in zip(self.t, self.loss, self.grad_norm, self.max_balance_gap, self.spectrum_id):
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrajectoryLog":
        log = cls()
        for k, row in enumerate(csv.DictReader(io.StringIO(text))):
            log.append(float(row["t"]), k, float(row["loss"]), float(row["grad_norm"]),
                       float(row["max_balance_gap"]), row["spectrum_id"])
        return log


@dataclass
class FlowResult:
    net: NetworkState
    log: TrajectoryLog
    termination: str
    steps: int
    t: float
    grad_norm: float
    eta: float

    def summary(self) -> dict:
        return {"termination": self.termination, "steps": self.steps, "t": self.t,
                "grad_norm": self.grad_norm, "eta": self.eta,
                "final_loss": self.log.loss[-1] if len(self.log) else None}


def run_flow(
    net0: NetworkState,
    data: Dataset,
    cfg: FlowConfig,
    callback: Optional[Callable[[int, float, NetworkState], Optional[str]]] = None,
    callback_steps=(),
) -> FlowResult:
    """Integrate the flow until the velocity norm drops below ``cfg.eps_grad``.

    The step size is fixed for the whole run (resolved once from ``net0`` when
    ``cfg.eta`` is None). ``callback(step, t, net)`` fires at every step listed
    in ``callback_steps`` and at termination; a string it returns is stored
    as the spectrum id of the log record written at that step.
    """
    loss = cfg.loss_fn()
    eta = _resolve_eta(cfg, net0, data)
    step_cfg = cfg if cfg.eta is not None else _with_eta(cfg, eta)
    pending = sorted({int(s) for s in callback_steps})
    net = net0
    log = TrajectoryLog()

    def record(k, vel_norm):
        sid = ""
        if callback is not None and (pending and pending[0] == k or final):
            while pending and pending[0] <= k:
                pending.pop(0)
            sid = callback(k, k * eta, net) or ""
        t = k * eta
        if not log.t or t > log.t[-1]:
            log.append(t, k, objective(net, data, cfg.lam, loss), vel_norm,
                       float(np.max(np.abs(balance_gap(net)))), sid)

    k = 0
    final = False
    with np.errstate(over="ignore", invalid="ignore"):
        while True:
            try:
                vel = grad(net, data, cfg.lam, loss)
            except DivergenceError as err:
                err.log = log
                raise
            gnorm = _norm(vel)
            if gnorm < cfg.eps_grad:
                termination = "stationary"
            elif k >= cfg.max_steps:
                termination = "max_steps"
            else:
                termination = None
            final = termination is not None
            if final or k % cfg.log_every == 0 or (pending and pending[0] == k):
                record(k, gnorm)
            if final:
                break
            try:
                net = euler_step(net, data, step_cfg, vel)
            except DivergenceError as err:
                err.log = log
                raise
            k += 1
    return FlowResult(net, log, termination, k, k * eta, gnorm, eta)


def _with_eta(cfg, eta):
    d = cfg.to_dict()
    d["eta"] = eta
    return FlowConfig(**d)


# -- identities ---------------------------------------------------------------


def guard_band_violations(net: NetworkState, X, rel=1e-3):
    """Pairs (i, j) with ``|x_i . u_j| < rel * ||x_i|| ||u_j||``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Z = X @ net.U.T
    band = rel * np.outer(np.linalg.norm(X, axis=1), np.linalg.norm(net.U, axis=1))
    return list(zip(*np.nonzero(np.abs(Z) < band)))


def check_residual_ode(net: NetworkState, data: Dataset, eta: float, rel_guard=1e-3):
    """Compare the one-step change of ``E[Delta^2 / 2]`` with ``-Delta' W K W Delta``.

    Returns ``(lhs, rhs, rel_err)`` where ``lhs`` is the forward difference
    across one Euler step of size ``eta`` (unregularized squared loss) and
    ``rhs`` is the GD-kernel quadratic form at the current weights.
    """
    from .kernels import gram  # local import: kernels depends on this module's types

    bad = guard_band_violations(net, data.X, rel_guard)
    if bad:
        raise GuardBandError(bad)
    p = data.weights
    delta = residual(net, data).delta
    K = gram("K", net, data.X).matrix
    Wd = p * delta
    rhs = -float(Wd @ K @ Wd)
    nxt = euler_step(net, data, FlowConfig(eta=eta))
    before = 0.5 * float(p @ delta**2)
    after = 0.5 * float(p @ residual(nxt, data).delta ** 2)
    lhs = (after - before) / eta if eta > 0 else rhs
    scale = max(abs(rhs), abs(lhs))
    rel_err = abs(lhs - rhs) / scale if scale > 0 else 0.0
    return lhs, rhs, rel_err


def loss_rate_check(net: NetworkState, data: Dataset, loss, eta: float):
    """Measured ``d E[loss]/dt`` against ``-2 alpha lambda_t (E[loss] - E[loss*])``.

    ``lambda_t`` is the smallest eigenvalue of ``K(X, X) / n``; the optimum is
    taken at ``f = y`` pointwise. Returns ``(rate, bound, lambda_t)``.
    """
    from .kernels import gram

    p = data.weights
    f = relu(data.X @ net.U.T) @ net.w
    cur = float(p @ loss.value(data.Y, f))
    nxt = euler_step(net, data, FlowConfig(eta=eta, loss=loss.name, alpha=loss.alpha))
    f2 = relu(data.X @ nxt.U.T) @ nxt.w
    rate = (float(p @ loss.value(data.Y, f2)) - cur) / eta
    lam_t = float(np.linalg.eigvalsh(gram("K", net, data.X).matrix / data.n)[0])
    opt = float(p @ loss.value(data.Y, data.Y))
    return rate, -2 * loss.alpha * lam_t * (cur - opt), lam_t


def config_from_json(text: str) -> FlowConfig:
    doc = json.loads(text)
    unknown = set(doc) - set(FlowConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown FlowConfig keys: {sorted(unknown)}")
    return FlowConfig(**doc)

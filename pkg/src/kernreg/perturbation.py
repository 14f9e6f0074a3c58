"""Input-perturbation penalties and attacks.

Every penalty follows the same pattern: a search step with frozen parameters
finds the maximizing inputs (the *witnesses*), then a differentiable
expression is rebuilt at those witnesses so its parameter gradient can be
taken with the witnesses held constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping

import numpy as np

from kernreg.autodiff import Tensor, grad, ops
from kernreg.network import LossKind, Network, per_example_loss, predict

Params = Mapping[str, "np.ndarray | Tensor"]


class Geometry(str, Enum):
    L2 = "l2"
    LINF = "linf"

    def dual_norm(self, g: np.ndarray) -> np.ndarray:
        """Per-example dual norm of gradients with a leading batch axis."""
        flat = g.reshape(len(g), -1)
        if self is Geometry.L2:
            return np.linalg.norm(flat, axis=1)
        return np.abs(flat).sum(axis=1)

    def attack_norm(self, d: np.ndarray) -> np.ndarray:
        flat = d.reshape(len(d), -1)
        if self is Geometry.L2:
            return np.linalg.norm(flat, axis=1)
        return np.abs(flat).max(axis=1)


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    steps: int = 5
    step_size: float | None = None
    geometry: Geometry = Geometry.L2
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "geometry", Geometry(self.geometry))
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be positive")

    @property
    def alpha(self) -> float:
        if self.step_size is not None:
            return self.step_size
        factor = 2.0 if self.geometry is Geometry.L2 else 2.5
        return factor * self.epsilon / self.steps

    def with_epsilon(self, epsilon: float) -> "AttackConfig":
        return AttackConfig(epsilon, self.steps, self.step_size, self.geometry, self.random_start, self.seed)


def _plain(params: Params) -> dict[str, np.ndarray]:
    return {k: (v.data if isinstance(v, Tensor) else np.asarray(v)) for k, v in params.items()}


def _bcast(per_example: np.ndarray, ndim: int) -> np.ndarray:
    return per_example.reshape((-1,) + (1,) * (ndim - 1))


def project(delta: np.ndarray, epsilon: float, geometry: Geometry) -> np.ndarray:
    """Project each example's perturbation onto the epsilon ball."""
    if epsilon == 0:
        return np.zeros_like(delta)
    if geometry is Geometry.LINF:
        return np.clip(delta, -epsilon, epsilon)
    norms = geometry.attack_norm(delta)
    scale = np.minimum(1.0, epsilon / np.maximum(norms, 1e-300))
    return delta * _bcast(scale, delta.ndim)


def _ascent_direction(g: np.ndarray, geometry: Geometry) -> np.ndarray:
    if geometry is Geometry.LINF:
        return np.sign(g)
    norms = geometry.dual_norm(g)
    safe = np.where(norms > 0, norms, 1.0)
    return g / _bcast(safe, g.ndim)


def _random_start(shape, cfg: AttackConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.geometry is Geometry.LINF:
        return rng.uniform(-cfg.epsilon, cfg.epsilon, size=shape)
    d = rng.normal(size=shape)
    dim = int(np.prod(shape[1:]))
    radius = cfg.epsilon * rng.random(shape[0]) ** (1.0 / dim)
    return project(d * _bcast(radius / np.maximum(Geometry.L2.attack_norm(d), 1e-300), d.ndim), cfg.epsilon, cfg.geometry)


ValueAndGrad = Callable[[np.ndarray, slice], tuple[np.ndarray, np.ndarray, np.ndarray]]


def projected_ascent(
    x: np.ndarray,
    value_and_grad: ValueAndGrad,
    cfg: AttackConfig,
    delta0: np.ndarray | None = None,
    visit: Callable[[np.ndarray, np.ndarray], None] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-example projected gradient ascent keeping the best iterate seen.

    ``value_and_grad(x_adv, rows)`` returns per-example objective values,
    their input gradients and the logits, for the batch rows ``rows``.
    ``visit(delta, logits)`` is called at every iterate, including the start.
    Returns ``(best_delta, best_value)``.
    """
    if delta0 is not None:
        delta = project(np.asarray(delta0, dtype=np.float64), cfg.epsilon, cfg.geometry)
    elif cfg.random_start and cfg.epsilon > 0:
        delta = _random_start(x.shape, cfg, np.random.default_rng(cfg.seed))
    else:
        delta = np.zeros_like(x)
    rows = slice(0, len(x))
    value, g, logits = value_and_grad(x + delta, rows)
    if visit is not None:
        visit(delta, logits)
    best, best_value = delta.copy(), value.copy()
    if cfg.epsilon == 0:
        return best, best_value
    for _ in range(cfg.steps):
        delta = project(delta + cfg.alpha * _ascent_direction(g, cfg.geometry), cfg.epsilon, cfg.geometry)
        value, g, logits = value_and_grad(x + delta, rows)
        if visit is not None:
            visit(delta, logits)
        better = value > best_value
        best[better] = delta[better]
        best_value = np.where(better, value, best_value)
    return best, best_value


def _network_value_and_grad(
    net: Network,
    params: dict[str, np.ndarray],
    scalar: Callable[[Tensor, slice], Tensor],
    chunk: int,
) -> ValueAndGrad:
    """Wrap a per-example scalar of the logits into a chunked value-and-input-gradient function."""

    def fn(x_adv: np.ndarray, rows: slice):
        values, grads, logits = [], [], []
        start0 = rows.start or 0
        for s in range(0, len(x_adv), chunk):
            xt = Tensor(x_adv[s : s + chunk], requires_grad=True)
            out = net.forward(params, xt)
            per = scalar(out, slice(start0 + s, start0 + s + len(xt.data)))
            (g,) = grad(per, xt, grad_outputs=Tensor(np.ones(per.shape)))
            values.append(per.data)
            grads.append(g.data)
            logits.append(out.data)
        return np.concatenate(values), np.concatenate(grads), np.concatenate(logits)

    return fn


def input_gradients(net: Network, params: Params, x: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Per-example, per-class input gradients, shape (K, n, *input_shape)."""
    params = _plain(params)
    out = []
    for k in range(net.n_outputs):
        sel = np.zeros(net.n_outputs)
        sel[k] = 1.0
        fn = _network_value_and_grad(net, params, lambda z, rows: ops.sum(z * sel, axis=1), chunk)
        out.append(fn(np.asarray(x, dtype=np.float64), slice(0, len(x)))[1])
    return np.stack(out)


# ---------------------------------------------------------------------------
# PGD on the loss


def pgd_attack(
    net: Network,
    params: Params,
    loss_kind: LossKind | str,
    x: np.ndarray,
    y: np.ndarray,
    cfg: AttackConfig,
    delta0: np.ndarray | None = None,
    visit: Callable[[np.ndarray, np.ndarray], None] | None = None,
    chunk: int = 512,
) -> np.ndarray:
    """Perturbation in the epsilon ball (approximately) maximizing the per-example loss."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    single = x.ndim == len(net.input_shape)
    if single:
        x, y = x[None], np.atleast_1d(y)
    kind = LossKind(loss_kind)
    params = _plain(params)
    fn = _network_value_and_grad(net, params, lambda z, rows: per_example_loss(kind, z, y[rows]), chunk)
    delta, _ = projected_ascent(x, fn, cfg, delta0=delta0, visit=visit)
    return delta[0] if single else delta


def robust_loss_expr(net: Network, P: Params, kind: LossKind | str, x: np.ndarray, y: np.ndarray, delta: np.ndarray) -> Tensor:
    """Mean loss at the frozen adversarial points ``x + delta``."""
    logits = net.forward(P, np.asarray(x) + delta)
    per = per_example_loss(kind, logits, y)
    return ops.sum(per) * (1.0 / per.shape[0])


# ---------------------------------------------------------------------------
# lower-bound penalties


@dataclass(frozen=True)
class Witness:
    cls: int
    index: int  # row of the batch
    x: np.ndarray
    delta: np.ndarray
    value: float


@dataclass
class PenaltyResult:
    value: float
    per_class: np.ndarray
    witnesses: list[Witness] = field(default_factory=list)


def _class_selector(n: int, K: int) -> np.ndarray:
    """Rows of the K-fold replicated batch select their block's class."""
    sel = np.zeros((K * n, K))
    sel[np.arange(K * n), np.repeat(np.arange(K), n)] = 1.0
    return sel


def adv_search(
    net: Network,
    params: Params,
    batch: np.ndarray,
    cfg: AttackConfig,
    delta0: np.ndarray | None = None,
    chunk: int = 512,
) -> tuple[np.ndarray, np.ndarray]:
    """Ascent on ``f_k(x + delta) - f_k(x)`` for every class k and example at once.

    Returns deltas of shape (K, n, ...) and gains of shape (K, n).
    """
    params = _plain(params)
    batch = np.asarray(batch, dtype=np.float64)
    n, K = len(batch), net.n_outputs
    base = predict(net, params, batch)  # (n, K)
    sel = _class_selector(n, K)
    offset = base.T.reshape(-1)  # block k holds f_k(x_i)
    rep = np.tile(batch, (K,) + (1,) * (batch.ndim - 1))

    def scalar(z: Tensor, rows: slice) -> Tensor:
        return ops.sum(z * sel[rows], axis=1) - offset[rows]

    fn = _network_value_and_grad(net, params, scalar, chunk)
    d0 = None if delta0 is None else np.asarray(delta0).reshape(rep.shape)
    delta, gain = projected_ascent(rep, fn, cfg, delta0=d0)
    return delta.reshape((K, n) + batch.shape[1:]), gain.reshape(K, n)


def adv_penalty(
    net: Network,
    params: Params,
    batch: np.ndarray,
    cfg: AttackConfig,
    squared: bool = True,
    delta0: np.ndarray | None = None,
) -> PenaltyResult:
    """``sum_k ||f_k||_delta**2`` (or unsquared), with one maximizing (x, delta) witness per class."""
    batch = np.asarray(batch, dtype=np.float64)
    delta, gain = adv_search(net, params, batch, cfg, delta0=delta0)
    witnesses = []
    per_class = np.zeros(net.n_outputs)
    for k in range(net.n_outputs):
        i = int(np.argmax(gain[k]))
        per_class[k] = max(gain[k, i], 0.0)
        witnesses.append(Witness(k, i, batch[i], delta[k, i], per_class[k]))
    value = float(np.sum(per_class**2) if squared else np.sum(per_class))
    return PenaltyResult(value, per_class, witnesses)


def adv_penalty_expr(net: Network, P: Params, witnesses: list[Witness], squared: bool = True) -> Tensor:
    """Differentiable penalty at frozen witnesses."""
    K = len(witnesses)
    xs = np.stack([w.x for w in witnesses])
    ds = np.stack([w.delta for w in witnesses])
    sel = np.eye(net.n_outputs)[[w.cls for w in witnesses]]
    gains = ops.sum((net.forward(P, xs + ds) - net.forward(P, xs)) * sel, axis=1)
    if K == 0:
        return Tensor(0.0)
    return ops.sum(gains * gains) if squared else ops.sum(gains)


def grad_norm_search(net: Network, params: Params, batch: np.ndarray, geometry: Geometry | str = Geometry.L2) -> PenaltyResult:
    """``sum_k (max_x ||grad_x f_k(x)||_dual)**2`` with the maximizing example per class."""
    batch = np.asarray(batch, dtype=np.float64)
    return max_gradient_norm(input_gradients(net, params, batch), batch, geometry)


def max_gradient_norm(grads: np.ndarray, batch: np.ndarray, geometry: Geometry | str = Geometry.L2) -> PenaltyResult:
    """Reduce per-class input gradients (K, n, ...) to the grad-norm penalty and its witnesses."""
    geometry = Geometry(geometry)
    witnesses = []
    per_class = np.zeros(len(grads))
    for k in range(len(grads)):
        norms = geometry.dual_norm(grads[k])
        i = int(np.argmax(norms))
        per_class[k] = norms[i]
        witnesses.append(Witness(k, i, batch[i], np.zeros_like(batch[i]), norms[i]))
    return PenaltyResult(float(np.sum(per_class**2)), per_class, witnesses)


def grad_norm_penalty(net: Network, params: Params, batch: np.ndarray, geometry: Geometry | str = Geometry.L2) -> float:
    return grad_norm_search(net, params, batch, geometry).value


def grad_norm_expr(net: Network, P: Params, witnesses: list[Witness], geometry: Geometry | str = Geometry.L2) -> Tensor:
    """Squared dual norm of each class gradient at its witness, summed; twice differentiable in P."""
    geometry = Geometry(geometry)
    xt = Tensor(np.stack([w.x for w in witnesses]), requires_grad=True)
    sel = np.eye(net.n_outputs)[[w.cls for w in witnesses]]
    (g,) = grad(ops.sum(net.forward(P, xt) * sel), xt, create_graph=True)
    flat = ops.reshape(g, (len(witnesses), -1))
    if geometry is Geometry.L2:
        return ops.sum(flat * flat)
    l1 = ops.sum(ops.abs(flat), axis=1)
    return ops.sum(l1 * l1)


def loss_grad_expr(
    net: Network,
    P: Params,
    x: np.ndarray,
    y: np.ndarray,
    loss_kind: LossKind | str,
    geometry: Geometry | str = Geometry.L2,
) -> Tensor:
    """Mean over the batch of ``||grad_x loss||_2**2`` (l2) or ``||grad_x loss||_1`` (linf)."""
    geometry = Geometry(geometry)
    xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    per = per_example_loss(loss_kind, net.forward(P, xt), y)
    (g,) = grad(ops.sum(per), xt, create_graph=True)
    flat = ops.reshape(g, (len(xt.data), -1))
    total = ops.sum(flat * flat) if geometry is Geometry.L2 else ops.sum(ops.abs(flat))
    return total * (1.0 / len(xt.data))


def loss_grad_penalty(
    net: Network,
    params: Params,
    x: np.ndarray,
    y: np.ndarray,
    loss_kind: LossKind | str,
    geometry: Geometry | str = Geometry.L2,
) -> float:
    return loss_grad_expr(net, _plain(params), x, y, loss_kind, geometry).item()

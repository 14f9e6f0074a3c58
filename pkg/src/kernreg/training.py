"""Objective assembly and optimization: SGD/Adam, step-halving, projected steps with continuation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from kernreg.autodiff import Tensor, grad, ops
from kernreg.deformation import (
    DeformFamily,
    adv_deform_penalty,
    augment,
    tangent_prop_expr,
    tangent_prop_penalty,
    tangent_vectors,
)
from kernreg.data import mutate_sequence
from kernreg.network import LossKind, Network, accuracy, per_example_loss, predict
from kernreg.perturbation import (
    AttackConfig,
    Geometry,
    adv_penalty,
    adv_penalty_expr,
    grad_norm_expr,
    grad_norm_search,
    loss_grad_expr,
    pgd_attack,
)
from kernreg.spectral import ContinuationConfig, PowerState, continuation_tau, layer_norms, project_spectral, sn_penalty_term

# ---------------------------------------------------------------------------
# penalties


@dataclass(frozen=True)
class WeightDecay:
    lam: float
    kind: str = field(default="weight_decay", init=False)


@dataclass(frozen=True)
class SNPenalty:
    lam: float
    method: str = "power"
    iterations: int = 1
    kind: str = field(default="sn_penalty", init=False)


@dataclass(frozen=True)
class SNProject:
    tau0: float
    kappa: float = 2.0  # epochs
    kind: str = field(default="sn_project", init=False)


@dataclass(frozen=True)
class Adv:
    lam: float
    attack: AttackConfig
    squared: bool = True
    kind: str = field(default="adv", init=False)


@dataclass(frozen=True)
class GradNorm:
    lam: float
    geometry: Geometry = Geometry.L2
    kind: str = field(default="grad_norm", init=False)


@dataclass(frozen=True)
class LossGrad:
    lam: float
    geometry: Geometry = Geometry.L2
    kind: str = field(default="loss_grad", init=False)


@dataclass(frozen=True)
class PGDRobust:
    attack: AttackConfig
    kind: str = field(default="pgd_robust", init=False)


@dataclass(frozen=True)
class DeformAdv:
    lam: float
    family: DeformFamily
    m: int = 32
    kind: str = field(default="deform_adv", init=False)


@dataclass(frozen=True)
class TangentProp:
    lam: float
    family: DeformFamily
    q: int = 30
    kind: str = field(default="tangent_prop", init=False)


Penalty = WeightDecay | SNPenalty | SNProject | Adv | GradNorm | LossGrad | PGDRobust | DeformAdv | TangentProp


def validate_penalties(penalties: Sequence[Penalty]) -> None:
    counts: dict[str, int] = {}
    for p in penalties:
        counts[p.kind] = counts.get(p.kind, 0) + 1
        lam = getattr(p, "lam", 0.0)
        if lam < 0:
            raise ValueError(f"{p.kind}: lambda must be nonnegative, got {lam}")
    for kind in ("sn_project", "pgd_robust"):
        if counts.get(kind, 0) > 1:
            raise ValueError(f"at most one {kind} per objective, got {counts[kind]}")


def penalty_column(p: Penalty, index: int, penalties: Sequence[Penalty]) -> str:
    """Stable CSV column name; repeated kinds get a numeric suffix."""
    same = [q for q in penalties if q.kind == p.kind]
    if len(same) == 1:
        return f"pen_{p.kind}"
    return f"pen_{p.kind}_{same.index(p)}"


# ---------------------------------------------------------------------------
# objective


@dataclass
class Objective:
    value: float
    grads: dict[str, np.ndarray]
    loss: float
    terms: dict[str, float]
    clean_loss: float | None = None  # set when the loss is the robust one


class ObjectiveState:
    """Per-run state for penalties that carry information across steps."""

    def __init__(self, seed: int = 0):
        self.power = PowerState(seed)
        self.step = 0
        self.seed = seed


def _sub_batch(x: np.ndarray, y: np.ndarray, size: int | None, rng: np.random.Generator):
    if size is None or size >= len(x):
        return x, y
    idx = np.sort(rng.choice(len(x), size, replace=False))
    return x[idx], y[idx]


def compose_objective(
    net: Network,
    params: Mapping[str, np.ndarray],
    loss_kind: LossKind | str,
    penalties: Sequence[Penalty],
    x: np.ndarray,
    y: np.ndarray,
    state: ObjectiveState | None = None,
    penalty_batch: int | None = None,
) -> Objective:
    """Loss (or robust loss) plus all penalty terms, and its exact parameter gradient
    with every inner maximizer frozen at its witness."""
    validate_penalties(penalties)
    state = state or ObjectiveState()
    kind = LossKind(loss_kind)
    names = list(params)
    plain = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    P = {k: Tensor(v, requires_grad=True) for k, v in plain.items()}
    rng = np.random.default_rng([state.seed, state.step, 17])
    px, py = _sub_batch(x, y, penalty_batch, rng)

    robust = next((p for p in penalties if isinstance(p, PGDRobust)), None)
    clean_loss = None
    if robust is not None:
        cfg = robust.attack
        cfg = AttackConfig(cfg.epsilon, cfg.steps, cfg.step_size, cfg.geometry, cfg.random_start, cfg.seed + state.step)
        delta = pgd_attack(net, plain, kind, x, y, cfg)
        per = per_example_loss(kind, net.forward(P, x + delta), y)
        clean_loss = float(per_example_loss(kind, predict(net, plain, x), y).data.mean())
    else:
        per = per_example_loss(kind, net.forward(P, x), y)
    loss_t = ops.sum(per) * (1.0 / len(x))
    total = loss_t
    terms: dict[str, float] = {}
    extra_grads = {k: np.zeros_like(v) for k, v in plain.items()}

    for i, p in enumerate(penalties):
        col = penalty_column(p, i, penalties)
        term: Tensor | None = None
        if isinstance(p, WeightDecay):
            term = p.lam * sum((ops.sum(P[k] * P[k]) for k in names), Tensor(0.0))
        elif isinstance(p, SNPenalty):
            value, g = sn_penalty_term(plain, p.lam, p.method, p.iterations, state.power)
            for k in names:
                extra_grads[k] += g[k]
            terms[col] = value
            continue
        elif isinstance(p, SNProject | PGDRobust):
            continue
        elif isinstance(p, Adv):
            if p.lam == 0 or p.attack.epsilon == 0:
                terms[col] = 0.0
                continue
            res = adv_penalty(net, plain, px, p.attack, p.squared)
            term = p.lam * adv_penalty_expr(net, P, res.witnesses, p.squared)
        elif isinstance(p, GradNorm):
            res = grad_norm_search(net, plain, px, p.geometry)
            term = p.lam * grad_norm_expr(net, P, res.witnesses, p.geometry)
        elif isinstance(p, LossGrad):
            term = p.lam * loss_grad_expr(net, P, px, py, kind, p.geometry)
        elif isinstance(p, DeformAdv):
            res = adv_deform_penalty(net, plain, px, p.family, p.m, seed=int(rng.integers(2**31)))
            term = p.lam * adv_penalty_expr(net, P, res.witnesses, squared=True)
        elif isinstance(p, TangentProp):
            T = tangent_vectors(px, p.family, p.q, seed=int(rng.integers(2**31)))
            res = tangent_prop_penalty(net, plain, px, T)
            term = p.lam * tangent_prop_expr(net, P, res.witnesses)
        else:  # pragma: no cover - exhaustive over Penalty
            raise TypeError(f"unknown penalty {p!r}")
        terms[col] = term.item()
        total = total + term

    gs = grad(total, [P[k] for k in names])
    grads = {k: g.data + extra_grads[k] for k, g in zip(names, gs)}
    sn_total = sum(terms[penalty_column(p, i, penalties)] for i, p in enumerate(penalties) if isinstance(p, SNPenalty))
    value = total.item() + sn_total
    return Objective(value, grads, loss_t.item(), terms, clean_loss)


# ---------------------------------------------------------------------------
# optimizers


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "sgd"  # "sgd" or "adam"
    lr: float = 0.05
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.name not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.name!r}")
        if self.lr < 0:
            raise ValueError("learning rate must be nonnegative")


class SGD:
    """Heavy-ball momentum: v <- mu v + g; w <- w - lr v."""

    def __init__(self, cfg: OptimizerConfig):
        self.cfg = cfg
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> None:
        for k, g in grads.items():
            v = self.velocity.get(k)
            v = g.copy() if v is None else self.cfg.momentum * v + g
            self.velocity[k] = v
            params[k] = params[k] - lr * v


class Adam:
    def __init__(self, cfg: OptimizerConfig):
        self.cfg = cfg
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> None:
        b1, b2 = self.cfg.betas
        self.t += 1
        for k, g in grads.items():
            m = b1 * self.m.get(k, np.zeros_like(g)) + (1 - b1) * g
            v = b2 * self.v.get(k, np.zeros_like(g)) + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            params[k] = params[k] - lr * m_hat / (np.sqrt(v_hat) + self.cfg.eps)


def make_optimizer(cfg: OptimizerConfig) -> SGD | Adam:
    return SGD(cfg) if cfg.name == "sgd" else Adam(cfg)


@dataclass(frozen=True)
class TrainConfig:
    optimizer: OptimizerConfig = OptimizerConfig()
    epochs: int = 10
    batch_size: int = 128
    halve_every: int = 40  # epochs
    seed: int = 0
    loss: LossKind = LossKind.CROSS_ENTROPY
    penalties: tuple[Penalty, ...] = ()
    penalty_batch: int | None = None  # examples per step used by the lower-bound penalties
    augment: DeformFamily | None = None  # random deformation of every training batch
    mutation_p: float = 0.0  # one-hot sequence resampling probability
    eval_every: int = 1

    def __post_init__(self):
        object.__setattr__(self, "loss", LossKind(self.loss))
        object.__setattr__(self, "penalties", tuple(self.penalties))
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.halve_every < 1:
            raise ValueError("halve_every must be at least 1")
        validate_penalties(self.penalties)


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Initial rate halved every ``halve_every`` epochs (0-based epoch index)."""
    return cfg.optimizer.lr * 0.5 ** (epoch // cfg.halve_every)


# ---------------------------------------------------------------------------
# training loop


class DivergenceError(RuntimeError):
    def __init__(self, message: str, last_good: dict[str, np.ndarray], step: int, checkpoint: str | None = None):
        super().__init__(message)
        self.last_good = last_good
        self.step = step
        self.checkpoint = checkpoint


@dataclass
class TrainRecord:
    columns: list[str]
    rows: list[dict[str, float]] = field(default_factory=list)
    best_epoch: int = -1
    best_val_acc: float = -math.inf
    best_params: dict[str, np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> list[float]:
        return [r[name] for r in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([_fmt(r[c]) for c in self.columns])


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


StepCallback = Callable[[int, Mapping[str, np.ndarray], dict], None]


def train(
    net: Network,
    params: Mapping[str, np.ndarray],
    data: tuple[np.ndarray, np.ndarray],
    cfg: TrainConfig,
    val: tuple[np.ndarray, np.ndarray] | None = None,
    test: tuple[np.ndarray, np.ndarray] | None = None,
    on_step: StepCallback | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[dict[str, np.ndarray], TrainRecord]:
    """Mini-batch training of the composed objective.

    With an ``SNProject`` penalty every layer is projected onto the spectral
    ball of radius ``tau_t`` after each optimizer step, ``t`` being the
    0-based step index.  ``on_step(t, params, info)`` sees the parameters
    after the update and projection.
    """
    x, y = np.asarray(data[0], dtype=np.float64), np.asarray(data[1])
    if len(x) == 0:
        raise ValueError("training data is empty")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    names = list(params)
    rng = np.random.default_rng(cfg.seed)
    state = ObjectiveState(cfg.seed)
    opt = make_optimizer(cfg.optimizer)
    steps_per_epoch = math.ceil(len(x) / cfg.batch_size)
    project = next((p for p in cfg.penalties if isinstance(p, SNProject)), None)
    robust = next((p for p in cfg.penalties if isinstance(p, PGDRobust)), None)
    cont = ContinuationConfig(project.tau0, project.kappa, steps_per_epoch) if project else None

    pen_cols = [penalty_column(p, i, cfg.penalties) for i, p in enumerate(cfg.penalties) if p.kind not in ("sn_project", "pgd_robust")]
    columns = ["epoch", "loss", "train_acc", "val_acc"]
    if test is not None:
        columns.append("test_acc")
    if robust is not None:
        columns.append("clean_loss")
    columns += pen_cols + [f"sigma_{k}" for k in names]
    if project:
        columns.append("tau_t")
    record = TrainRecord(columns)
    last_good = {k: v.copy() for k, v in params.items()}
    tau_t = float("nan")
    step = 0

    for epoch in range(cfg.epochs):
        lr = lr_at(cfg, epoch)
        order = rng.permutation(len(x))
        sums: dict[str, float] = {"loss": 0.0, "clean_loss": 0.0, **{c: 0.0 for c in pen_cols}}
        count = 0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            xb, yb = x[idx], y[idx]
            if cfg.augment is not None:
                xb = augment(xb, cfg.augment, seed=int(rng.integers(2**31)))
            if cfg.mutation_p > 0:
                xb = mutate_sequence(xb, cfg.mutation_p, rng)
            state.step = step
            with np.errstate(over="ignore", invalid="ignore"):
                obj = compose_objective(net, params, cfg.loss, cfg.penalties, xb, yb, state, cfg.penalty_batch)
            if not (np.isfinite(obj.value) and all(np.all(np.isfinite(g)) for g in obj.grads.values())):
                raise DivergenceError(f"non-finite objective at epoch {epoch}, step {step}", last_good, step)
            with np.errstate(over="ignore", invalid="ignore"):
                opt.step(params, obj.grads, lr)
            if project:
                tau_t = continuation_tau(step, cont)
                for k in names:
                    params[k] = project_spectral(params[k], tau_t)
            if on_step is not None:
                on_step(step, params, {"epoch": epoch, "tau_t": tau_t, "objective": obj})
            sums["loss"] += obj.value * len(idx)
            if obj.clean_loss is not None:
                sums["clean_loss"] += obj.clean_loss * len(idx)
                if obj.loss < obj.clean_loss - 1e-9 * max(1.0, abs(obj.clean_loss)):
                    raise AssertionError(f"robust loss {obj.loss} below clean loss {obj.clean_loss}")
            for c in pen_cols:
                sums[c] += obj.terms.get(c, 0.0) * len(idx)
            count += len(idx)
            step += 1

        if not all(np.all(np.isfinite(v)) for v in params.values()):
            raise DivergenceError(f"non-finite parameters after epoch {epoch}", last_good, step)
        last_good = {k: v.copy() for k, v in params.items()}
        row: dict[str, float] = {"epoch": epoch, "loss": sums["loss"] / count}
        row["train_acc"] = accuracy(predict(net, params, x), y)
        row["val_acc"] = accuracy(predict(net, params, val[0]), val[1]) if val is not None else float("nan")
        if test is not None:
            row["test_acc"] = accuracy(predict(net, params, test[0]), test[1])
        if robust is not None:
            row["clean_loss"] = sums["clean_loss"] / count
        for c in pen_cols:
            row[c] = sums[c] / count
        for k, s in layer_norms(params).items():
            row[f"sigma_{k}"] = s
        if project:
            row["tau_t"] = tau_t
        record.rows.append(row)
        score = row["val_acc"] if val is not None else row["train_acc"]
        if score > record.best_val_acc:
            record.best_val_acc, record.best_epoch = score, epoch
            record.best_params = {k: v.copy() for k, v in params.items()}
        if on_epoch is not None:
            on_epoch(row)
    return params, record


# ---------------------------------------------------------------------------
# grid search


@dataclass
class GridResult:
    best_index: int
    best_point: dict
    table: list[dict]


def grid_points(axes: Mapping[str, Iterable]) -> list[dict]:
    """Cartesian product of named value lists, in row-major order."""
    points: list[dict] = [{}]
    for name, values in axes.items():
        points = [{**p, name: v} for p in points for v in values]
    return points


def grid_search(points: Sequence[dict], run: Callable[[dict], TrainRecord]) -> GridResult:
    """Train every point and keep the one whose best recorded validation accuracy is highest."""
    if not points:
        raise ValueError("empty grid")
    table = []
    for i, point in enumerate(points):
        rec = run(point)
        row = {"index": i, **point, "best_epoch": rec.best_epoch, "best_val_acc": rec.best_val_acc}
        if rec.rows and "test_acc" in rec.rows[rec.best_epoch]:
            row["test_acc_at_best"] = rec.rows[rec.best_epoch]["test_acc"]
        if rec.rows:
            row["final_val_acc"] = rec.rows[-1]["val_acc"]
        table.append(row)
    best = max(range(len(table)), key=lambda i: (table[i]["best_val_acc"], -i))
    return GridResult(best, dict(points[best]), table)

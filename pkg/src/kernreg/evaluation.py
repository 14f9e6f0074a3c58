"""Robust accuracy, lower/upper norm reports, normalized margins and the robust margin bound."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from kernreg.network import Network, predict
from kernreg.perturbation import AttackConfig, Geometry, adv_penalty, pgd_attack
from kernreg.spectral import layer_norms


def correct(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-example correctness; a single logit column means {-1, +1} labels."""
    labels = np.asarray(labels)
    if logits.shape[1] == 1:
        return labels * logits[:, 0] > 0
    return np.argmax(logits, axis=1) == labels


# ---------------------------------------------------------------------------
# robust accuracy


@dataclass
class RobustPoint:
    epsilon: float
    steps: int
    geometry: str
    accuracy: float


def robust_accuracy_curve(
    net: Network,
    params: Mapping[str, np.ndarray],
    x: np.ndarray,
    y: np.ndarray,
    epsilons: Sequence[float],
    steps: int = 40,
    geometry: Geometry | str = Geometry.L2,
    loss_kind: str = "cross-entropy",
    step_size: float | None = None,
) -> list[RobustPoint]:
    """Robust accuracy over an increasing epsilon grid.

    An example counts as broken as soon as any iterate of the attack
    misclassifies it.  Attacks are nested: each radius starts from the
    previous radius's perturbation, and an example broken at a smaller
    radius stays broken, so the curve is nonincreasing by construction.
    """
    geometry = Geometry(geometry)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    order = np.argsort(np.asarray(epsilons, dtype=np.float64), kind="stable")
    broken = ~correct(predict(net, params, x), y)
    delta = np.zeros_like(x)
    results: dict[int, RobustPoint] = {}
    for j in order:
        eps = float(epsilons[j])
        if eps < 0:
            raise ValueError("epsilon must be nonnegative")
        if eps > 0:
            hit = np.zeros(len(x), dtype=bool)

            def visit(d, logits, hit=hit):
                hit |= ~correct(logits, y)

            cfg = AttackConfig(eps, steps, step_size, geometry)
            delta = pgd_attack(net, params, loss_kind, x, y, cfg, delta0=delta, visit=visit)
            broken = broken | hit
        results[j] = RobustPoint(eps, steps, geometry.value, float(np.mean(~broken)))
    return [results[j] for j in range(len(epsilons))]


def robust_accuracy(net, params, x, y, cfg: AttackConfig, loss_kind: str = "cross-entropy") -> float:
    """Fraction of examples classified correctly at every iterate of a PGD attack with ``cfg``."""
    return robust_accuracy_curve(net, params, x, y, [cfg.epsilon], cfg.steps, cfg.geometry, loss_kind, cfg.step_size)[0].accuracy


def write_robust_csv(path, points: Sequence[RobustPoint]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epsilon", "steps", "geometry", "accuracy"])
        for p in points:
            w.writerow([repr(p.epsilon), p.steps, p.geometry, repr(p.accuracy)])


# ---------------------------------------------------------------------------
# norm report


@dataclass
class NormReport:
    epsilon: float
    lower_per_class: np.ndarray  # sup gain / epsilon for each output
    lower: float  # sqrt of the summed squares of lower_per_class
    upper: float  # product of exact layer spectral norms
    layers: dict[str, float]
    n_samples: int

    @property
    def ratio(self) -> float:
        return self.upper / self.lower if self.lower > 0 else math.inf

    def consistent(self, tol: float = 1e-6) -> bool:
        """Every per-class lower estimate is below the Lipschitz upper bound."""
        return bool(np.all(self.lower_per_class <= self.upper + tol))

    def rows(self) -> list[tuple[str, float]]:
        out = [("epsilon", self.epsilon), ("n_samples", float(self.n_samples)), ("lower", self.lower)]
        out += [(f"lower_class_{k}", float(v)) for k, v in enumerate(self.lower_per_class)]
        out.append(("upper", self.upper))
        out += [(f"sigma_{k}", v) for k, v in self.layers.items()]
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["quantity", "value"])
            for name, v in self.rows():
                w.writerow([name, repr(float(v))])


class NormChainError(AssertionError):
    pass


def norm_report(
    net: Network,
    params: Mapping[str, np.ndarray],
    sample: np.ndarray,
    epsilon: float = 1.0,
    steps: int = 20,
    geometry: Geometry | str = Geometry.L2,
    max_samples: int = 1000,
) -> NormReport:
    """Adversarial lower estimate of the per-class Lipschitz constants against the
    product of exact per-layer spectral norms."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    sample = np.asarray(sample, dtype=np.float64)[:max_samples]
    res = adv_penalty(net, params, sample, AttackConfig(epsilon, steps, geometry=geometry), squared=False)
    per_class = res.per_class / epsilon
    layers = layer_norms(params)
    upper = float(np.prod(list(layers.values())))
    lower = float(np.sqrt(np.sum(per_class**2)))
    return NormReport(epsilon, per_class, lower, upper, layers, len(sample))


def assert_norm_chain(report: NormReport, tol: float = 1e-6) -> None:
    if not report.consistent(tol):
        worst = float(np.max(report.lower_per_class))
        raise NormChainError(f"lower estimate {worst} exceeds upper bound {report.upper}")


# ---------------------------------------------------------------------------
# margins


def raw_margins(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """y f(x) for one output column, f_y - max_{k != y} f_k otherwise."""
    labels = np.asarray(labels)
    if logits.shape[1] == 1:
        return labels * logits[:, 0]
    idx = np.arange(len(labels))
    true = logits[idx, labels]
    other = logits.copy()
    other[idx, labels] = -np.inf
    return true - other.max(axis=1)


@dataclass
class MarginTable:
    raw: np.ndarray
    normalized: np.ndarray  # sorted ascending, paired with raw
    cdf: np.ndarray
    proxy: float
    proxy_tag: str

    def cdf_at(self, value: float) -> float:
        """Empirical CDF P(normalized <= value)."""
        return float(np.searchsorted(self.normalized, value, side="right") / len(self.normalized))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["raw", "normalized", "cdf"])
            for r, g, c in zip(self.raw, self.normalized, self.cdf):
                w.writerow([repr(float(r)), repr(float(g)), repr(float(c))])


def margin_cdf(
    net: Network,
    params: Mapping[str, np.ndarray],
    x: np.ndarray,
    y: np.ndarray,
    proxy: float,
    proxy_tag: str = "lower",
) -> MarginTable:
    if not (proxy > 0 and math.isfinite(proxy)):
        raise ValueError(f"margin normalization needs a positive finite proxy, got {proxy}")
    raw = raw_margins(predict(net, params, x), y)
    order = np.argsort(raw, kind="stable")
    raw = raw[order]
    n = len(raw)
    return MarginTable(raw, raw / proxy, np.arange(1, n + 1) / n, float(proxy), proxy_tag)


# ---------------------------------------------------------------------------
# margin bound


@dataclass
class MarginBound:
    first_term: float
    complexity: float
    unclamped: float
    value: float
    threshold: float
    metadata: dict = field(default_factory=dict)


def input_radius_proxy(x: np.ndarray) -> float:
    """Mean Euclidean norm of the inputs, standing in for the kernel-feature radius."""
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(np.linalg.norm(x.reshape(len(x), -1), axis=1)))


def margin_bound(
    margins: np.ndarray,
    norm: float,
    epsilon: float,
    gamma: float,
    n: int | None = None,
    b_bar: float = 1.0,
    confidence: float = 0.05,
    c1: float = 1.0,
    c2: float = 1.0,
) -> MarginBound:
    """Empirical robust margin loss plus a complexity term with explicit constants.

    The first term counts margins below ``gamma + 2 * epsilon * norm``.  The
    constants ``c1`` and ``c2`` and the dropped logarithmic factors make this a
    shape-level estimate, never a certified probability.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    if norm <= 0:
        raise ValueError("norm must be positive")
    if not 0 < confidence < 1:
        raise ValueError("confidence must lie in (0, 1)")
    margins = np.asarray(margins, dtype=np.float64)
    n = len(margins) if n is None else n
    threshold = gamma + 2.0 * epsilon * norm
    first = float(np.count_nonzero(margins < threshold)) / n
    complexity = c1 * norm * b_bar / (gamma * math.sqrt(n)) + c2 * math.sqrt(math.log(1.0 / confidence) / n)
    total = first + complexity
    meta = {
        "c1": c1,
        "c2": c2,
        "b_bar": b_bar,
        "b_bar_proxy": "mean input l2 norm",
        "log_factors": "omitted",
        "certified": False,
    }
    return MarginBound(first, complexity, total, min(max(total, 0.0), 1.0), threshold, meta)

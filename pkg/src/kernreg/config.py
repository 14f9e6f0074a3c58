"""Run configuration: JSON text validated into typed blocks, with dotted overrides."""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Annotated, Any, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from kernreg.deformation import DeformFamily, mnist_family
from kernreg.perturbation import AttackConfig, Geometry
from kernreg.training import (
    Adv,
    DeformAdv,
    GradNorm,
    LossGrad,
    OptimizerConfig,
    Penalty,
    PGDRobust,
    SNPenalty,
    SNProject,
    TangentProp,
    TrainConfig,
    WeightDecay,
)


class ConfigError(ValueError):
    """Configuration problem with a key path and, when known, a line number."""

    def __init__(self, message: str, path: str = "", line: int | None = None):
        self.path = path
        self.line = line
        where = path or "<root>"
        if line is not None:
            where += f" (line {line})"
        super().__init__(f"{where}: {message}")


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


NonNeg = Annotated[float, Field(ge=0)]


class DatasetBlock(_Block):
    name: Literal["gaussian-blobs-2d", "ring-vs-blob-2d", "onehot-sequences", "mnist"] = "gaussian-blobs-2d"
    n: int = Field(200, ge=1)  # synthetic sets only
    seed: int = 0
    train_size: int = 1000  # mnist only
    val_size: int = 1000
    test_size: int = -1
    options: dict[str, Any] = {}


class ModelBlock(_Block):
    preset: Literal["mnist-vgg", "mnist-conv3", "sequence", "mlp", "linear"] = "mlp"
    options: dict[str, Any] = {}
    init_seed: int | None = None  # defaults to the run seed


class FamilyBlock(_Block):
    kind: Literal["mnist", "identity", "translation", "rotation", "scaling", "elastic"] = "mnist"
    max_shift: NonNeg = 0.0
    max_angle: NonNeg = 0.0
    max_log_scale: NonNeg = 0.0
    elastic_sigma: float = Field(4.0, gt=0)
    elastic_amplitude: NonNeg = 0.0
    scale: NonNeg = 1.0

    def build(self) -> DeformFamily:
        if self.kind == "mnist":
            return mnist_family(self.scale)
        fields = self.model_dump(exclude={"kind"})
        return DeformFamily(self.kind, **fields)


class AttackBlock(_Block):
    epsilon: NonNeg
    steps: int = Field(5, ge=1)
    step_size: float | None = Field(None, gt=0)
    geometry: Geometry = Geometry.L2

    def build(self, seed: int = 0) -> AttackConfig:
        return AttackConfig(self.epsilon, self.steps, self.step_size, self.geometry, seed=seed)


class WeightDecayBlock(_Block):
    kind: Literal["weight_decay"]
    lam: NonNeg


class SNPenaltyBlock(_Block):
    kind: Literal["sn_penalty"]
    lam: NonNeg
    method: Literal["power", "svd"] = "power"
    iterations: int = Field(1, ge=1)


class SNProjectBlock(_Block):
    kind: Literal["sn_project"]
    tau0: float = Field(gt=0)
    kappa: float = Field(2.0, gt=0)


class AdvBlock(_Block):
    kind: Literal["adv"]
    lam: NonNeg
    attack: AttackBlock
    squared: bool = True


class GradNormBlock(_Block):
    kind: Literal["grad_norm"]
    lam: NonNeg
    geometry: Geometry = Geometry.L2


class LossGradBlock(_Block):
    kind: Literal["loss_grad"]
    lam: NonNeg
    geometry: Geometry = Geometry.L2


class PGDRobustBlock(_Block):
    kind: Literal["pgd_robust"]
    attack: AttackBlock


class DeformAdvBlock(_Block):
    kind: Literal["deform_adv"]
    lam: NonNeg
    family: FamilyBlock = FamilyBlock()
    m: int = Field(32, ge=1)


class TangentPropBlock(_Block):
    kind: Literal["tangent_prop"]
    lam: NonNeg
    family: FamilyBlock = FamilyBlock()
    q: int = Field(30, ge=1)


PenaltyBlock = Annotated[
    Union[
        WeightDecayBlock,
        SNPenaltyBlock,
        SNProjectBlock,
        AdvBlock,
        GradNormBlock,
        LossGradBlock,
        PGDRobustBlock,
        DeformAdvBlock,
        TangentPropBlock,
    ],
    Field(discriminator="kind"),
]


def build_penalty(block, seed: int = 0) -> Penalty:
    match block:
        case WeightDecayBlock():
            return WeightDecay(block.lam)
        case SNPenaltyBlock():
            return SNPenalty(block.lam, block.method, block.iterations)
        case SNProjectBlock():
            return SNProject(block.tau0, block.kappa)
        case AdvBlock():
            return Adv(block.lam, block.attack.build(seed), block.squared)
        case GradNormBlock():
            return GradNorm(block.lam, block.geometry)
        case LossGradBlock():
            return LossGrad(block.lam, block.geometry)
        case PGDRobustBlock():
            return PGDRobust(block.attack.build(seed))
        case DeformAdvBlock():
            return DeformAdv(block.lam, block.family.build(), block.m)
        case TangentPropBlock():
            return TangentProp(block.lam, block.family.build(), block.q)
    raise TypeError(f"not a penalty block: {block!r}")


class TrainBlock(_Block):
    optimizer: Literal["sgd", "adam"] = "sgd"
    lr: float = Field(0.05, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    epochs: int = Field(10, ge=1)
    batch_size: int = Field(64, ge=1)
    halve_every: int = Field(40, ge=1)
    loss: Literal["cross-entropy", "hinge", "logistic"] = "cross-entropy"
    penalty_batch: int | None = Field(None, ge=1)
    augment: FamilyBlock | None = None
    mutation_p: float = Field(0.0, ge=0, le=1)


class EvalBlock(_Block):
    epsilons: list[NonNeg] = [0.0, 0.1]
    steps: int = Field(40, ge=1)
    geometry: Geometry = Geometry.L2
    split: Literal["train", "val", "test"] = "test"
    norm_epsilon: float = Field(1.0, gt=0)
    norm_steps: int = Field(20, ge=1)
    norm_samples: int = Field(1000, ge=1)
    margin_proxy: Literal["lower", "upper"] = "lower"
    margin_gamma: float = Field(1.0, gt=0)
    margin_epsilon: NonNeg = 0.0
    confidence: float = Field(0.05, gt=0, lt=1)
    checkpoint: str | None = None  # defaults to <output_dir>/model.ckpt


class GridBlock(_Block):
    table: Literal["image", "mnist", "sequence"] = "image"
    method: str = "sn_project"
    with_lr: bool = False
    adv_epsilon: float = Field(1.0, gt=0)
    adv_steps: int = Field(5, ge=1)
    kappa: float = Field(2.0, gt=0)
    points: list[dict[str, float]] | None = None  # explicit points replace the shipped grid


class RunConfig(_Block):
    dataset: DatasetBlock = DatasetBlock()
    model: ModelBlock = ModelBlock()
    train: TrainBlock = TrainBlock()
    penalties: list[PenaltyBlock] = []
    evaluation: EvalBlock = EvalBlock()
    grid: GridBlock = GridBlock()
    output_dir: str = "run"
    seed: int = 0

    def train_config(self, extra_penalties: tuple[Penalty, ...] = (), lr: float | None = None) -> TrainConfig:
        t = self.train
        try:
            return TrainConfig(
                optimizer=OptimizerConfig(t.optimizer, lr if lr is not None else t.lr, t.momentum),
                epochs=t.epochs,
                batch_size=t.batch_size,
                halve_every=t.halve_every,
                seed=self.seed,
                loss=t.loss,
                penalties=tuple(build_penalty(p, self.seed) for p in self.penalties) + tuple(extra_penalties),
                penalty_batch=t.penalty_batch,
                augment=t.augment.build() if t.augment else None,
                mutation_p=t.mutation_p,
            )
        except ValueError as err:
            raise ConfigError(str(err), "penalties") from None


# ---------------------------------------------------------------------------
# parsing


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(data: dict, assignment: str) -> None:
    """Set ``a.b.0.c=value`` in nested dicts/lists; the value is JSON if it parses, else a string."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value", assignment)
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError("empty key segment", key)
    node: Any = data
    for i, part in enumerate(parts[:-1]):
        nxt_is_index = parts[i + 1].isdigit()
        if isinstance(node, list):
            idx = int(part)
            if idx >= len(node):
                raise ConfigError("list index out of range", ".".join(parts[: i + 1]))
            node = node[idx]
        else:
            node = node.setdefault(part, [] if nxt_is_index else {})
    last = parts[-1]
    if isinstance(node, list):
        idx = int(last)
        if idx > len(node):
            raise ConfigError("list index out of range", key)
        if idx == len(node):
            node.append(_parse_value(raw))
        else:
            node[idx] = _parse_value(raw)
    elif isinstance(node, dict):
        node[last] = _parse_value(raw)
    else:
        raise ConfigError("cannot set a key inside a scalar", key)


def _line_of(text: str, loc: tuple) -> int | None:
    """Best-effort source line of a key path: find each key after the previous match."""
    pos, found = 0, None
    for part in loc:
        if isinstance(part, int):
            continue
        m = re.compile(r'"' + re.escape(str(part)) + r'"\s*:').search(text, pos)
        if m is None:
            break
        pos, found = m.end(), m.start()
    return None if found is None else text.count("\n", 0, found) + 1


def parse_config(text: str, overrides: list[str] = (), source: str = "<config>") -> RunConfig:
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as err:
        raise ConfigError(f"invalid JSON in {source}: {err.msg}", "", err.lineno) from None
    if not isinstance(data, dict):
        raise ConfigError(f"top level of {source} must be an object")
    for o in overrides:
        apply_override(data, o)
    try:
        return RunConfig.model_validate(data)
    except ValidationError as err:
        first = err.errors()[0]
        loc = tuple(p for p in first["loc"] if not (isinstance(p, str) and p.endswith("Block")))
        path = ".".join(str(p) for p in loc)
        raise ConfigError(first["msg"], path, _line_of(text, loc)) from None


def load_config(path: str | Path | None, overrides: list[str] = ()) -> RunConfig:
    if path is None:
        return parse_config("", overrides)
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read config file: {err.strerror}", str(p)) from None
    return parse_config(text, overrides, str(p))

"""Default hyper-parameter grids and the mapping from a method name plus grid point to penalties.

Each method's grid is a mapping of axis name to candidate values; multi-axis
methods are searched over the Cartesian product.  Axis names:

``wd``        weight decay lambda
``sn``        spectral-norm penalty lambda
``tau``       spectral projection radius
``adv``       lambda on the squared adversarial lower bound
``gradnorm``  lambda on the squared sup of input-gradient norms
``eps``       epsilon of PGD robust training
``lossgrad``  lambda on the loss-gradient penalty
``tangent``   lambda on the tangent-propagation penalty
``deform``    lambda on the squared adversarial-deformation penalty
"""

from __future__ import annotations

from typing import Mapping

from kernreg.deformation import DeformFamily, mnist_family
from kernreg.perturbation import AttackConfig, Geometry
from kernreg.training import (
    Adv,
    DeformAdv,
    GradNorm,
    LossGrad,
    Penalty,
    PGDRobust,
    SNPenalty,
    SNProject,
    TangentProp,
    WeightDecay,
    grid_points,
)

Grid = Mapping[str, list[float]]

_TAU_SMALL = [0.6, 1.0, 1.4]

IMAGE_LEARNING_RATES = [0.003, 0.01, 0.03, 0.1]

IMAGE_GRIDS: dict[str, Grid] = {
    "none": {},
    "weight_decay": {"wd": [0.0, 0.0001, 0.0002, 0.0004, 0.0008, 0.001, 0.002]},
    "sn_penalty_power": {"sn": [0.001, 0.003, 0.01, 0.03, 0.1, 0.3]},
    "sn_penalty_svd": {"sn": [0.001, 0.003, 0.01, 0.03, 0.1, 0.3]},
    "sn_project": {"tau": [0.5, 0.6, 0.8, 1.0, 1.2, 1.4]},
    "adv": {"adv": [0.001, 0.003, 0.01, 0.03, 0.1]},
    "grad_norm": {"gradnorm": [0.00003, 0.0001, 0.0003, 0.001, 0.003, 0.01, 0.03]},
    "pgd_l2": {"eps": [0.003, 0.01, 0.03, 0.1, 0.3, 1.0]},
    "pgd_linf": {"eps": [0.001, 0.003, 0.01, 0.03, 0.1, 0.3]},
    "grad_l1": {"lossgrad": [0.0001, 0.0003, 0.001, 0.003, 0.01, 0.03]},
    "grad_l2": {"lossgrad": [0.001, 0.003, 0.01, 0.03, 0.1, 0.3, 1.0, 3.0]},
    "pgd_l2+sn_project": {"eps": [0.003, 0.01, 0.03, 0.1], "tau": _TAU_SMALL},
    "grad_l2+sn_project": {"lossgrad": [0.003, 0.01, 0.03, 0.1], "tau": _TAU_SMALL},
    "adv+sn_project": {"adv": [0.003, 0.01, 0.03], "tau": _TAU_SMALL},
    "grad_norm+sn_project": {"gradnorm": [0.001, 0.01, 0.1], "tau": _TAU_SMALL},
}

MNIST_LEARNING_RATES = [0.005, 0.05, 0.5]

_TAU_MNIST = [1.2, 1.6, 2.0]

MNIST_GRIDS: dict[str, Grid] = {
    "none": {},
    "weight_decay": {"wd": [0.0, 1e-5, 3e-5, 1e-4, 3e-4, 1e-3, 3e-3, 0.01, 0.03, 0.1]},
    "sn_project": {"tau": [1.0, 1.2, 1.4, 1.6, 1.8]},
    "grad_l2": {"lossgrad": [0.1, 0.3, 1.0, 3.0, 10.0]},
    "adv": {"adv": [0.1, 0.3, 1.0, 3.0]},
    "grad_norm": {"gradnorm": [0.0003, 0.001, 0.003, 0.01, 0.03, 0.1, 0.3]},
    "tangent_prop": {"tangent": [0.003, 0.01, 0.03, 0.1, 0.3]},
    "deform_adv": {"deform": [0.03, 0.1, 0.3, 1.0, 3.0]},
    "deform_adv+grad_norm": {"deform": [0.03, 0.1, 0.3, 1.0], "gradnorm": [0.003, 0.01, 0.03, 0.1]},
    "deform_adv+adv": {"deform": [0.1, 0.3, 1.0], "adv": [0.03, 0.1]},
    "grad_l2+sn_project": {"lossgrad": [0.3, 1.0, 3.0, 10.0, 30.0], "tau": _TAU_MNIST},
    "adv+sn_project": {"adv": [0.03, 0.1], "tau": _TAU_MNIST},
    "deform_adv+grad_norm+sn_project": {"deform": [0.03, 0.1, 0.3], "gradnorm": [0.01, 0.03, 0.1], "tau": _TAU_MNIST},
    "deform_adv+adv+sn_project": {"deform": [0.1, 0.3, 1.0], "adv": [0.03, 0.1], "tau": _TAU_MNIST},
}

SEQUENCE_LEARNING_RATES = [0.01]

SEQUENCE_GRIDS: dict[str, Grid] = {
    "none": {},
    "weight_decay": {"wd": [0.0, 0.01, 0.001, 0.0001, 0.00001]},
    "sn_project": {"tau": [10.0, 1.0, 0.1]},
    "pgd_l2": {"eps": [100.0, 10.0, 1.0, 0.1]},
    "grad_l2": {"lossgrad": [100.0, 10.0, 1.0, 0.1, 0.01, 0.001]},
    "adv": {"adv": [10.0, 1.0, 0.1]},
    "grad_norm": {"gradnorm": [10.0, 1.0, 0.1, 0.01, 0.001, 0.0001]},
}

TABLES: dict[str, dict[str, Grid]] = {"image": IMAGE_GRIDS, "mnist": MNIST_GRIDS, "sequence": SEQUENCE_GRIDS}
LEARNING_RATES: dict[str, list[float]] = {
    "image": IMAGE_LEARNING_RATES,
    "mnist": MNIST_LEARNING_RATES,
    "sequence": SEQUENCE_LEARNING_RATES,
}


def method_grid(table: str, method: str, with_lr: bool = False) -> list[dict]:
    """All grid points of ``method`` in ``table``, optionally crossed with the table's learning rates."""
    try:
        grids = TABLES[table]
    except KeyError:
        raise KeyError(f"unknown grid table {table!r}; choose from {sorted(TABLES)}") from None
    if method not in grids:
        raise KeyError(f"no grid for method {method!r} in table {table!r}; choose from {sorted(grids)}")
    axes = dict(grids[method])
    if with_lr:
        axes["lr"] = LEARNING_RATES[table]
    return grid_points(axes)


def build_penalties(
    method: str,
    point: Mapping[str, float],
    *,
    adv_epsilon: float = 1.0,
    adv_steps: int = 5,
    kappa: float = 2.0,
    family: DeformFamily | None = None,
    deform_m: int = 32,
    tangent_q: int = 30,
    sn_iterations: int = 1,
) -> tuple[Penalty, ...]:
    """Penalty list for ``method`` (components joined by ``+``) at one grid point."""
    family = family or mnist_family()
    out: list[Penalty] = []
    for part in filter(None, method.split("+")):
        if part == "none":
            continue
        if part == "weight_decay":
            out.append(WeightDecay(point["wd"]))
        elif part in ("sn_penalty_power", "sn_penalty_svd"):
            out.append(SNPenalty(point["sn"], part.rsplit("_", 1)[1], sn_iterations))
        elif part == "sn_project":
            out.append(SNProject(point["tau"], kappa))
        elif part == "adv":
            out.append(Adv(point["adv"], AttackConfig(adv_epsilon, adv_steps, geometry=Geometry.L2)))
        elif part == "grad_norm":
            out.append(GradNorm(point["gradnorm"], Geometry.L2))
        elif part in ("pgd_l2", "pgd_linf"):
            geometry = Geometry.L2 if part == "pgd_l2" else Geometry.LINF
            out.append(PGDRobust(AttackConfig(point["eps"], adv_steps, geometry=geometry)))
        elif part in ("grad_l2", "grad_l1"):
            out.append(LossGrad(point["lossgrad"], Geometry.L2 if part == "grad_l2" else Geometry.LINF))
        elif part == "tangent_prop":
            out.append(TangentProp(point["tangent"], family, tangent_q))
        elif part == "deform_adv":
            out.append(DeformAdv(point["deform"], family, deform_m))
        else:
            raise KeyError(f"unknown method component {part!r}")
    return tuple(out)

"""Image deformations: displacement fields, bilinear warping, tangent vectors and the
deformation-stability penalties built on them.

Coordinates are (row, column) in pixels.  A field ``tau`` deforms an image as
``x_tau(u) = x(u - tau(u))``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.ndimage import gaussian_filter

from kernreg.autodiff import Tensor, grad, ops
from kernreg.network import Network, predict
from kernreg.perturbation import PenaltyResult, Witness, _plain, input_gradients

KINDS = ("identity", "translation", "rotation", "scaling", "elastic", "composed", "fixed")


@dataclass(frozen=True)
class DeformField:
    disp: np.ndarray  # (2, H, W)

    def __post_init__(self):
        d = np.asarray(self.disp, dtype=np.float64)
        if d.ndim != 3 or d.shape[0] != 2:
            raise ValueError(f"displacement must have shape (2, H, W), got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("displacement has non-finite entries")
        object.__setattr__(self, "disp", d)

    @classmethod
    def zeros(cls, shape: tuple[int, int]) -> "DeformField":
        return cls(np.zeros((2, *shape)))

    @classmethod
    def constant(cls, shift: tuple[float, float], shape: tuple[int, int]) -> "DeformField":
        d = np.empty((2, *shape))
        d[0], d[1] = shift
        return cls(d)

    @property
    def shape(self) -> tuple[int, int]:
        return self.disp.shape[1:]

    @property
    def sup_norm(self) -> float:
        """Largest displacement length, in pixels."""
        return float(np.sqrt((self.disp**2).sum(axis=0)).max())

    @property
    def jacobian_norm(self) -> float:
        """Largest operator norm of the displacement Jacobian (finite differences)."""
        H, W = self.shape
        J = np.zeros((H, W, 2, 2))
        for c in range(2):
            for a in range(2):
                if self.shape[a] > 1:
                    J[:, :, c, a] = np.gradient(self.disp[c], axis=a)
        return float(np.linalg.norm(J, ord=2, axis=(2, 3)).max())

    def scaled(self, alpha: float) -> "DeformField":
        return DeformField(alpha * self.disp)

    def __add__(self, other: "DeformField") -> "DeformField":
        return DeformField(self.disp + other.disp)

    def __neg__(self) -> "DeformField":
        return DeformField(-self.disp)


def _grid(shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    return np.meshgrid(np.arange(shape[0], dtype=np.float64), np.arange(shape[1], dtype=np.float64), indexing="ij")


def _centred(shape: tuple[int, int]) -> np.ndarray:
    rows, cols = _grid(shape)
    return np.stack([rows - (shape[0] - 1) / 2, cols - (shape[1] - 1) / 2])


def rotation_field(angle: float, shape: tuple[int, int]) -> DeformField:
    """Rotation by ``angle`` about the image centre: tau(u) = (I - R(-angle)) (u - c)."""
    c, s = np.cos(-angle), np.sin(-angle)
    r = _centred(shape)
    rotated = np.stack([c * r[0] - s * r[1], s * r[0] + c * r[1]])
    return DeformField(r - rotated)


def scaling_field(log_scale: float, shape: tuple[int, int]) -> DeformField:
    """Zoom by ``exp(log_scale)`` about the centre: tau(u) = (1 - 1/s) (u - c)."""
    return DeformField((1.0 - np.exp(-log_scale)) * _centred(shape))


@dataclass(frozen=True)
class DeformFamily:
    """A distribution over displacement fields with declared magnitude bounds.

    ``scale`` multiplies every sampled field, giving the family ``scale * T``.
    """

    kind: str
    max_shift: float = 0.0  # translation, pixels
    max_angle: float = 0.0  # rotation, radians
    max_log_scale: float = 0.0  # scaling
    elastic_sigma: float = 4.0  # smoothing width, pixels
    elastic_amplitude: float = 0.0  # largest elastic displacement, pixels
    components: tuple["DeformFamily", ...] = ()
    fixed: DeformField | None = None
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown deformation kind {self.kind!r}; choose from {KINDS}")
        for name in ("max_shift", "max_angle", "max_log_scale", "elastic_amplitude"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.elastic_sigma <= 0:
            raise ValueError("elastic_sigma must be positive")
        if self.kind == "fixed" and self.fixed is None:
            raise ValueError("a fixed family needs a field")
        if self.kind == "composed" and not self.components:
            raise ValueError("a composed family needs components")

    def scaled(self, alpha: float) -> "DeformFamily":
        return DeformFamily(
            self.kind, self.max_shift, self.max_angle, self.max_log_scale, self.elastic_sigma,
            self.elastic_amplitude, self.components, self.fixed, self.scale * alpha,
        )

    def sup_bound(self, shape: tuple[int, int]) -> float:
        """Declared upper bound on ``||tau||_inf`` for fields of this family on ``shape``."""
        radius = float(np.linalg.norm(_centred(shape)[:, 0, 0]))
        if self.kind == "identity":
            b = 0.0
        elif self.kind == "translation":
            b = self.max_shift
        elif self.kind == "rotation":
            b = 2 * np.sin(min(self.max_angle, np.pi) / 2) * radius
        elif self.kind == "scaling":
            b = (np.exp(self.max_log_scale) - 1.0) * radius
        elif self.kind == "elastic":
            b = self.elastic_amplitude
        elif self.kind == "fixed":
            b = self.fixed.sup_norm
        else:
            b = sum(c.sup_bound(shape) for c in self.components)
        return abs(self.scale) * b

    def sample(self, shape: tuple[int, int], rng: np.random.Generator) -> DeformField:
        f = self._sample(shape, rng)
        return f if self.scale == 1.0 else f.scaled(self.scale)

    def _sample(self, shape: tuple[int, int], rng: np.random.Generator) -> DeformField:
        if self.kind == "identity":
            return DeformField.zeros(shape)
        if self.kind == "fixed":
            if self.fixed.shape != tuple(shape):
                raise ValueError(f"fixed field is {self.fixed.shape}, image is {tuple(shape)}")
            return self.fixed
        if self.kind == "translation":
            angle = rng.uniform(0, 2 * np.pi)
            r = self.max_shift * np.sqrt(rng.random())
            return DeformField.constant((r * np.sin(angle), r * np.cos(angle)), shape)
        if self.kind == "rotation":
            return rotation_field(rng.uniform(-self.max_angle, self.max_angle), shape)
        if self.kind == "scaling":
            return scaling_field(rng.uniform(-self.max_log_scale, self.max_log_scale), shape)
        if self.kind == "elastic":
            noise = rng.normal(size=(2, *shape))
            smooth = np.stack([gaussian_filter(n, self.elastic_sigma, mode="constant") for n in noise])
            peak = np.sqrt((smooth**2).sum(axis=0)).max()
            target = self.elastic_amplitude * rng.random()
            return DeformField(smooth * (target / peak if peak > 0 else 0.0))
        total = DeformField.zeros(shape)
        for c in self.components:
            total = total + c.sample(shape, rng)
        return total


def mnist_family(scale: float = 1.0) -> DeformFamily:
    """Small affine plus elastic deformations suitable for 28x28 digits."""
    return DeformFamily(
        "composed",
        components=(
            DeformFamily("translation", max_shift=1.0),
            DeformFamily("rotation", max_angle=np.deg2rad(8.0)),
            DeformFamily("scaling", max_log_scale=0.08),
            DeformFamily("elastic", elastic_sigma=3.0, elastic_amplitude=1.0),
        ),
        scale=scale,
    )


def example_rng(seed: int, index: int) -> np.random.Generator:
    """Independent random stream per (seed, example index)."""
    return np.random.default_rng([seed, index])


def sample_field(family: DeformFamily, shape: tuple[int, int], rng: np.random.Generator) -> DeformField:
    return family.sample(shape, rng)


def sample_fields(family: DeformFamily, shape: tuple[int, int], m: int, seed: int, index: int) -> list[DeformField]:
    """``m`` fields for one example; the list for smaller ``m`` is a prefix of the one for larger ``m``."""
    rng = example_rng(seed, index)
    return [family.sample(shape, rng) for _ in range(m)]


# ---------------------------------------------------------------------------
# warping and tangents


def warp(x: np.ndarray, tau: DeformField) -> np.ndarray:
    """Bilinear resampling ``x(u - tau(u))`` with zero outside the image.

    ``x`` has shape (H, W) or (C, H, W); the field is shared by all channels.
    """
    x = np.asarray(x, dtype=np.float64)
    H, W = x.shape[-2:]
    if tau.shape != (H, W):
        raise ValueError(f"field grid {tau.shape} does not match image grid {(H, W)}")
    if not np.any(tau.disp):
        return x.copy()
    rows, cols = _grid((H, W))
    p = rows - tau.disp[0]
    q = cols - tau.disp[1]
    p0, q0 = np.floor(p).astype(int), np.floor(q).astype(int)
    a, b = p - p0, q - q0
    out = np.zeros_like(x)
    for dr, wr in ((0, 1 - a), (1, a)):
        for dc, wc in ((0, 1 - b), (1, b)):
            r, c = p0 + dr, q0 + dc
            inside = (r >= 0) & (r < H) & (c >= 0) & (c < W)
            w = np.where(inside, wr * wc, 0.0)
            out += w * x[..., np.clip(r, 0, H - 1), np.clip(c, 0, W - 1)]
    return out


def image_gradient(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central differences along rows and columns with replicated borders."""
    x = np.asarray(x, dtype=np.float64)
    pad = [(0, 0)] * (x.ndim - 2) + [(1, 1), (1, 1)]
    xp = np.pad(x, pad, mode="edge")
    d_row = (xp[..., 2:, 1:-1] - xp[..., :-2, 1:-1]) / 2
    d_col = (xp[..., 1:-1, 2:] - xp[..., 1:-1, :-2]) / 2
    return d_row, d_col


def tangent_vector(x: np.ndarray, tau: DeformField) -> np.ndarray:
    """``t_x(u) = tau(u) . grad x(u)``, same shape as ``x``."""
    d_row, d_col = image_gradient(x)
    return tau.disp[0] * d_row + tau.disp[1] * d_col


def tangent_vectors(batch: np.ndarray, family: DeformFamily, q: int, seed: int) -> np.ndarray:
    """``q`` tangent vectors per example, shape (n, q, *image_shape)."""
    batch = np.asarray(batch, dtype=np.float64)
    shape = batch.shape[-2:]
    out = np.empty((len(batch), q) + batch.shape[1:])
    for i, x in enumerate(batch):
        for j, tau in enumerate(sample_fields(family, shape, q, seed, i)):
            out[i, j] = tangent_vector(x, tau)
    return out


def augment(batch: np.ndarray, family: DeformFamily, seed: int) -> np.ndarray:
    """One random deformation per example (data augmentation)."""
    batch = np.asarray(batch, dtype=np.float64)
    shape = batch.shape[-2:]
    return np.stack([warp(x, family.sample(shape, example_rng(seed, i))) for i, x in enumerate(batch)])


# ---------------------------------------------------------------------------
# penalties


def adv_deform_penalty(
    net: Network,
    params: Mapping[str, np.ndarray],
    batch: np.ndarray,
    family: DeformFamily,
    m: int = 32,
    seed: int = 0,
) -> PenaltyResult:
    """``sum_k max_{x, tau} (f_k(x_tau) - f_k(x))**2`` over ``m`` sampled fields per example.

    Witnesses record ``delta = x_tau - x`` so the penalty expression is the
    same as for additive perturbations.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    params = _plain(params)
    batch = np.asarray(batch, dtype=np.float64)
    shape = batch.shape[-2:]
    K = net.n_outputs
    best = np.full(K, -1.0)
    witnesses: list[Witness | None] = [None] * K
    for i, x in enumerate(batch):
        deformed = np.stack([warp(x, tau) for tau in sample_fields(family, shape, m, seed, i)])
        out = predict(net, params, np.concatenate([x[None], deformed]))
        sq = (out[1:] - out[0]) ** 2  # (m, K)
        # unchanged images contribute exactly zero, whatever the rounding of batched matmuls
        sq[np.all((deformed == x).reshape(m, -1), axis=1)] = 0.0
        j = np.argmax(sq, axis=0)
        for k in range(K):
            v = sq[j[k], k]
            if v > best[k]:
                best[k] = v
                witnesses[k] = Witness(k, i, x, deformed[j[k]] - x, float(v))
    per_class = np.sqrt(np.maximum(best, 0.0))
    return PenaltyResult(float(np.sum(best)), per_class, witnesses)


@dataclass(frozen=True)
class TangentWitness:
    cls: int
    index: int
    x: np.ndarray
    tangents: np.ndarray  # (q, *input_shape)
    value: float


@dataclass
class TangentResult:
    value: float
    per_class: np.ndarray
    witnesses: list[TangentWitness] = field(default_factory=list)


def tangent_prop_penalty(
    net: Network,
    params: Mapping[str, np.ndarray],
    batch: np.ndarray,
    tangents: np.ndarray,
) -> TangentResult:
    """``sum_k max_x sum_i <grad_x f_k(x), t_{x,i}>**2`` for tangents of shape (n, q, ...)."""
    batch = np.asarray(batch, dtype=np.float64)
    tangents = np.asarray(tangents, dtype=np.float64)
    if tangents.ndim != batch.ndim + 1 or tangents.shape[0] != len(batch):
        raise ValueError(f"tangents must have shape (n, q, *input_shape), got {tangents.shape}")
    g = input_gradients(net, params, batch)  # (K, n, ...)
    n, q = tangents.shape[:2]
    dots = np.einsum("kni,nqi->knq", g.reshape(g.shape[0], n, -1), tangents.reshape(n, q, -1))
    per_example = (dots**2).sum(axis=2)  # (K, n)
    witnesses = []
    for k in range(len(g)):
        i = int(np.argmax(per_example[k]))
        witnesses.append(TangentWitness(k, i, batch[i], tangents[i], float(per_example[k, i])))
    per_class = per_example.max(axis=1)
    return TangentResult(float(per_class.sum()), per_class, witnesses)


def tangent_prop_expr(net: Network, P: Mapping[str, Tensor | np.ndarray], witnesses: list[TangentWitness]) -> Tensor:
    """Differentiable tangent penalty at frozen witnesses (double backprop)."""
    K = len(witnesses)
    xt = Tensor(np.stack([w.x for w in witnesses]), requires_grad=True)
    sel = np.eye(net.n_outputs)[[w.cls for w in witnesses]]
    (g,) = grad(ops.sum(net.forward(P, xt) * sel), xt, create_graph=True)
    flat = ops.reshape(g, (K, 1, -1))
    T = np.stack([w.tangents.reshape(len(w.tangents), -1) for w in witnesses])  # (K, q, d)
    dots = ops.sum(flat * T, axis=2)
    return ops.sum(dots * dots)

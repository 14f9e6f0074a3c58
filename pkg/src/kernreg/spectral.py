"""Spectral norms of layer filter matrices, the spectral penalty, and spectral-ball projection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np


@dataclass(frozen=True)
class SpectralEstimate:
    sigma: float
    u: np.ndarray
    v: np.ndarray
    method: str  # "svd" or "power"
    iterations: int = 0
    degenerate: bool = False  # set when the matrix is zero and u, v are arbitrary


def filter_matrix(param: np.ndarray) -> np.ndarray:
    """(out, in, kh, kw) filters as an (out, in*kh*kw) matrix; matrices pass through."""
    param = np.asarray(param)
    if param.ndim == 4:
        return param.reshape(param.shape[0], -1)
    if param.ndim == 2:
        return param
    raise ValueError(f"expected a 2-D or 4-D parameter, got rank {param.ndim}")


def unflatten(matrix: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    return np.asarray(matrix).reshape(shape)


def _unit(n: int) -> np.ndarray:
    e = np.zeros(n)
    e[0] = 1.0
    return e


def spectral_norm(
    W: np.ndarray,
    method: str = "svd",
    iterations: int = 1,
    v0: np.ndarray | None = None,
    seed: int = 0,
) -> SpectralEstimate:
    """Largest singular value with its singular vectors.

    ``method="power"`` runs ``iterations`` rounds of the power method from
    ``v0`` (a fixed random start if omitted).  The estimate ``||W v||`` never
    exceeds the exact value and does not decrease with more iterations.
    """
    W = filter_matrix(np.asarray(W, dtype=np.float64))
    m, n = W.shape
    if method == "svd":
        if not np.any(W):
            return SpectralEstimate(0.0, _unit(m), _unit(n), "svd", degenerate=True)
        U, s, Vt = np.linalg.svd(W, full_matrices=False)
        return SpectralEstimate(float(s[0]), U[:, 0].copy(), Vt[0].copy(), "svd")
    if method != "power":
        raise ValueError(f"unknown method {method!r}; expected 'svd' or 'power'")
    if v0 is None:
        v = np.random.default_rng(seed).normal(size=n)
    else:
        v = np.asarray(v0, dtype=np.float64).copy()
    nv = np.linalg.norm(v)
    if nv == 0:
        v, nv = _unit(n), 1.0
    v = v / nv
    for _ in range(iterations):
        wv = W @ v
        s = np.linalg.norm(wv)
        if s == 0:
            break
        wtu = W.T @ (wv / s)
        nt = np.linalg.norm(wtu)
        if nt == 0:
            break
        v = wtu / nt
    wv = W @ v
    sigma = float(np.linalg.norm(wv))
    if sigma == 0:
        return SpectralEstimate(0.0, _unit(m), v, "power", iterations, degenerate=True)
    return SpectralEstimate(sigma, wv / sigma, v, "power", iterations)


class PowerState:
    """Warm-start vectors for the power method, one per layer, kept across steps."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.vectors: dict[str, np.ndarray] = {}

    def estimate(self, name: str, W: np.ndarray, iterations: int) -> SpectralEstimate:
        est = spectral_norm(W, "power", iterations, v0=self.vectors.get(name), seed=self.seed)
        self.vectors[name] = est.v
        return est


def sn_penalty_term(
    params: Mapping[str, np.ndarray],
    lam: float,
    method: str = "svd",
    iterations: int = 1,
    state: PowerState | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """``lam * sum_l sigma_l**2`` and its gradient ``2 lam sigma_l u_l v_l^T`` per layer."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    value = 0.0
    grads: dict[str, np.ndarray] = {}
    for name, W in params.items():
        if lam == 0:
            grads[name] = np.zeros_like(W)
            continue
        if method == "power":
            state = state if state is not None else PowerState()
            est = state.estimate(name, W, iterations)
        else:
            est = spectral_norm(W, "svd")
        value += lam * est.sigma**2
        grads[name] = unflatten(2.0 * lam * est.sigma * np.outer(est.u, est.v), W.shape)
    return float(value), grads


def project_spectral(W: np.ndarray, tau: float) -> np.ndarray:
    """Frobenius-nearest matrix with spectral norm at most ``tau`` (singular-value clipping)."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    W = np.asarray(W, dtype=np.float64)
    M = filter_matrix(W)
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    if s.size == 0 or s[0] <= tau:
        return W
    clipped = (U * np.minimum(s, tau)) @ Vt
    return unflatten(clipped, W.shape)


@dataclass(frozen=True)
class ContinuationConfig:
    tau0: float
    kappa: float  # epochs
    steps_per_epoch: int = 1

    def __post_init__(self):
        if self.tau0 <= 0 or self.kappa <= 0:
            raise ValueError("tau0 and kappa must be positive")
        if self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be at least 1")


def continuation_tau(t: int | float, cfg: ContinuationConfig) -> float:
    """Radius ``tau0 * (1 + exp(-t / kappa))`` at step ``t`` (kappa converted to steps)."""
    if t < 0:
        raise ValueError("step index must be nonnegative")
    return cfg.tau0 * (1.0 + math.exp(-t / (cfg.kappa * cfg.steps_per_epoch)))


def layer_norms(params: Mapping[str, np.ndarray]) -> dict[str, float]:
    """Exact spectral norm of every layer's filter matrix."""
    return {name: spectral_norm(W, "svd").sigma for name, W in params.items()}


def product_of_norms(params: Mapping[str, np.ndarray]) -> float:
    return float(np.prod(list(layer_norms(params).values()))) if params else 0.0

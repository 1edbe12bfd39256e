"""Cross-entropy, the Gaussian-kernel noise-aware weight, and their product."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import ConfigError

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class NawParams:
    """Kernel centre ``mu``, isotropic width ``sigma`` and an optional weight cap.

    The normalising constant is ``1 / (2*pi*sqrt(det(sigma^2 I)))``, i.e.
    ``1 / (2*pi*sigma**K)``. This is not the K-dimensional Gaussian constant
    and grows quickly with K (about 6.2e4 for K=8, sigma=0.2); ``weight_cap``
    bounds it when needed.
    """

    mu: np.ndarray
    sigma: float = 0.2
    weight_cap: float | None = None

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        object.__setattr__(self, "mu", mu)
        if mu.ndim != 1 or len(mu) < 2:
            raise ConfigError("naw.mu must be a vector with at least two entries")
        if not np.all(np.isfinite(mu)):
            raise ConfigError("naw.mu must be finite")
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ConfigError(f"naw.sigma must be positive (singular covariance), got {self.sigma}")
        if self.weight_cap is not None and self.weight_cap < 0:
            raise ConfigError("naw.weight_cap must be non-negative")
        if not (0 < self.norm_const < math.inf):
            raise ConfigError("normalising constant overflows; increase naw.sigma")

    @classmethod
    def create(cls, classes: int, mu="uniform", sigma: float = 0.2, weight_cap=None) -> "NawParams":
        if isinstance(mu, str):
            if mu.strip().lower() == "uniform":
                mu_vec = np.full(classes, 1.0 / classes)
            else:
                mu_vec = np.array([float(t) for t in mu.split(",")])
        else:
            mu_vec = np.asarray(mu, dtype=np.float64)
        if len(mu_vec) != classes:
            raise ConfigError(f"naw.mu has {len(mu_vec)} entries, expected {classes}")
        return cls(mu_vec, float(sigma), weight_cap)

    @property
    def classes(self) -> int:
        return len(self.mu)

    @property
    def norm_const(self) -> float:
        denom = 2.0 * math.pi * math.sqrt((self.sigma ** 2) ** self.classes)
        return 1.0 / denom if denom > 0 else math.inf

    @property
    def max_weight(self) -> float:
        c = self.norm_const
        return c if self.weight_cap is None else min(c, self.weight_cap)


def cross_entropy(p: np.ndarray, y) -> np.ndarray:
    """``-log p[y]`` with ``p`` floored at 1e-12. Accepts a vector or a ``(B, K)`` batch."""
    p = np.asarray(p, dtype=np.float64)
    batch = p.reshape(-1, p.shape[-1])
    y = np.atleast_1d(np.asarray(y))
    _check_labels(y, batch.shape[-1])
    picked = batch[np.arange(len(batch)), y]
    out = -np.log(np.maximum(picked, PROB_FLOOR))
    return out[0] if p.ndim == 1 else out


def cross_entropy_grad(p: np.ndarray, y) -> np.ndarray:
    """dCE/dp; zero where the floor is active."""
    p = np.asarray(p, dtype=np.float64)
    batch = p.reshape(-1, p.shape[-1])
    y = np.atleast_1d(np.asarray(y))
    _check_labels(y, batch.shape[-1])
    g = np.zeros_like(batch)
    rows = np.arange(len(batch))
    picked = batch[rows, y]
    active = picked >= PROB_FLOOR
    g[rows[active], y[active]] = -1.0 / picked[active]
    return g.reshape(p.shape)


def _check_labels(y: np.ndarray, k: int) -> None:
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"class index out of range [0, {k})")


def naw_weight(p: np.ndarray, naw: NawParams) -> np.ndarray:
    """``C * exp(-0.5 * |p - mu|^2 / sigma^2)``, optionally capped."""
    p = np.asarray(p, dtype=np.float64)
    # sorted before summing: permuting p (with uniform mu) gives bit-identical weights
    d2 = np.sort((p - naw.mu) ** 2, axis=-1).sum(axis=-1) / naw.sigma ** 2
    w = naw.norm_const * np.exp(-0.5 * d2)
    if naw.weight_cap is not None:
        w = np.minimum(w, naw.weight_cap)
    return w


@dataclass
class LossOutput:
    value: float | np.ndarray
    weight: float | np.ndarray
    grad: np.ndarray  # w.r.t. the clip probability vector(s)


def naw_ce_loss(p: np.ndarray, y, naw: NawParams | None) -> LossOutput:
    """``(1 + w*) * CE`` with ``w*`` treated as a constant in the gradient.

    ``naw=None`` gives plain cross-entropy (weight reported as 0). Works on a
    single vector or per row of a ``(B, K)`` batch; no batch averaging here.
    """
    ce = cross_entropy(p, y)
    g = cross_entropy_grad(p, y)
    w = np.zeros_like(ce) if naw is None else naw_weight(p, naw)
    scale = 1.0 + w
    return LossOutput(scale * ce, w, g * np.asarray(scale)[..., None])


def batch_loss(p: np.ndarray, y, naw: NawParams | None) -> LossOutput:
    """Mean of per-clip losses over the batch; ``grad`` is d(mean)/dp per row."""
    out = naw_ce_loss(p, y, naw)
    n = len(out.value)
    return LossOutput(float(np.mean(out.value)), out.weight, out.grad / n)

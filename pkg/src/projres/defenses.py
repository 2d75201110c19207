"""Client-side gradient perturbation applied before upload.

Two lightweight defenses: differential-privacy style clipping plus Gaussian
noise, and gradient pruning that keeps only the largest-magnitude entries.
Both operate per trainable module and return a new GradientUpdate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict

import numpy as np

from .exceptions import ValidationError
from .model import GradientUpdate

DEFENSE_KINDS = ("none", "dp", "gp")


@dataclass(frozen=True)
class DefenseConfig:
    """Defense choice and parameters.

    ``sigma`` is an absolute per-entry noise standard deviation (not scaled by
    ``clip``); ``beta`` is the fraction of entries pruned.
    """

    kind: str = "none"
    sigma: float = 0.0
    clip: float = 1.0
    beta: float = 0.0
    noise_seed: int = 0

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise ValidationError(f"unknown defense {self.kind!r}; expected one of {DEFENSE_KINDS}")
        if self.sigma < 0:
            raise ValidationError(f"sigma must be >= 0, got {self.sigma}")
        if not self.clip > 0:
            raise ValidationError(f"clip must be positive, got {self.clip}")
        if not 0.0 <= self.beta < 1.0:
            raise ValidationError(f"beta must be in [0, 1), got {self.beta}")

    @property
    def label(self) -> str:
        if self.kind == "dp":
            return f"dp(sigma={self.sigma:g},clip={self.clip:g})"
        if self.kind == "gp":
            return f"gp(beta={self.beta:g})"
        return "none"

    def params(self) -> Dict[str, float]:
        if self.kind == "dp":
            return {"sigma": self.sigma, "clip": self.clip, "noise_seed": self.noise_seed}
        if self.kind == "gp":
            return {"beta": self.beta}
        return {}


def _module_groups(grads: Dict[str, np.ndarray]) -> Dict[str, list]:
    groups: Dict[str, list] = {}
    for name in sorted(grads):
        groups.setdefault(name.split(".", 1)[0], []).append(name)
    return groups


def dp_transform(grad: GradientUpdate, sigma: float, clip: float, seed) -> GradientUpdate:
    """Clip each module's gradient to Frobenius norm ``clip``, then add N(0, sigma^2) noise.

    A module is every parameter sharing a name prefix (``m0.weight``,
    ``m0.bias``, ...). ``seed`` may be an int or a sequence of ints; the same
    seed always yields the same noise.
    """
    if sigma < 0 or not clip > 0:
        raise ValidationError("need sigma >= 0 and clip > 0")
    out = {}
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    for _, names in _module_groups(grad.grads).items():
        norm = math.sqrt(sum(float(np.sum(grad.grads[k] ** 2)) for k in names))
        scale = 1.0 if norm <= clip else clip / norm
        for k in names:
            g = grad.grads[k] if scale == 1.0 else grad.grads[k] * scale
            if sigma > 0:
                g = g + sigma * rng.standard_normal(g.shape)
            out[k] = g
    return GradientUpdate(out, grad.round, grad.client)


def surviving_count(size: int, beta: float) -> int:
    """Number of entries kept by pruning rate ``beta``: ``ceil((1 - beta) * size)``."""
    # the epsilon guards against 1 - 0.7 = 0.30000000000000004 style round-up
    return min(size, math.ceil((1.0 - beta) * size - 1e-9))


def gp_transform(grad: GradientUpdate, beta: float) -> GradientUpdate:
    """Zero all but the ``ceil((1 - beta) * size)`` largest-magnitude entries of each array.

    Ties at the cut are broken in favour of the lower flat index.
    """
    if not 0.0 <= beta < 1.0:
        raise ValidationError(f"beta must be in [0, 1), got {beta}")
    out = {}
    for k, g in grad.grads.items():
        if beta == 0.0:
            out[k] = g
            continue
        flat = g.ravel()
        keep = np.argsort(-np.abs(flat), kind="stable")[: surviving_count(flat.size, beta)]
        pruned = np.zeros_like(flat)
        pruned[keep] = flat[keep]
        out[k] = pruned.reshape(g.shape)
    return GradientUpdate(out, grad.round, grad.client)


def apply_defense(grad: GradientUpdate, config, round: int = 0, client: int = 0) -> GradientUpdate:
    """Apply ``config`` to one client's upload; DP noise is keyed by (noise_seed, round, client)."""
    if config is None or config.kind == "none":
        return grad
    if config.kind == "dp":
        return dp_transform(grad, config.sigma, config.clip, [config.noise_seed, round, client])
    return gp_transform(grad, config.beta)

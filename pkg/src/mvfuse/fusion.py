"""Per-view, per-point fusion weights and the fused velocity.

Every weight matrix is (N views, K points) and column-stochastic: for each
latent point the weights over views sum to one.  Softmaxes are evaluated with
max subtraction so tied inputs give exactly equal weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy.special import softmax

from .errors import DegenerateRow, ShapeMismatch

STRATEGIES = ("uniform", "entropy", "visibility", "combined")


@dataclass(frozen=True)
class AttentionMap:
    """Cross-attention of K latent points over P image patches for one view."""
    weights: np.ndarray   # (K, P), non-negative
    view_id: int = 0

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2:
            raise ShapeMismatch("attention weights must be (K, P)")
        if w.shape[1] < 2:
            raise ValueError("entropy normalization needs at least two patches")
        if not np.all(np.isfinite(w)) or (w.size and w.min() < 0):
            raise ValueError("attention weights must be finite and non-negative")
        object.__setattr__(self, "weights", w)

    @property
    def n_points(self) -> int:
        return self.weights.shape[0]

    @property
    def n_patches(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class FusionWeights:
    weights: np.ndarray                       # (N, K)
    entropy: Optional[np.ndarray] = None      # optional w_ent component
    visibility: Optional[np.ndarray] = None   # optional w_vis component

    def __post_init__(self):
        w = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        if w.shape[0] < 1:
            raise ShapeMismatch("need at least one view")
        if np.any(np.abs(w.sum(axis=0) - 1.0) > 1e-6) or w.min(initial=0.0) < 0 or w.max(initial=0.0) > 1:
            raise ValueError("fusion weights must be column-stochastic with entries in [0, 1]")
        object.__setattr__(self, "weights", w)

    @property
    def n_views(self) -> int:
        return self.weights.shape[0]

    @property
    def n_points(self) -> int:
        return self.weights.shape[1]

    def view_level(self) -> np.ndarray:
        """Per-view scalar weights: the mean of the per-point weights."""
        return self.weights.mean(axis=1)


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = 30.0
    beta: float = 30.0
    gamma: float = 0.5
    strategy: str = "combined"
    stage1: bool = True
    stage2: bool = True

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")

    def stage_strategy(self, stage: int) -> str:
        """Effective strategy of a stage.

        A disabled stage averages uniformly.  Stage 1 runs before any
        structure exists, so the visibility term is unavailable there:
        ``combined`` reduces to ``entropy`` and ``visibility`` to ``uniform``.
        """
        if not (self.stage1 if stage == 1 else self.stage2):
            return "uniform"
        if stage == 1 and self.strategy == "combined":
            return "entropy"
        if stage == 1 and self.strategy == "visibility":
            return "uniform"
        return self.strategy

    def to_dict(self) -> dict:
        return dict(alpha=self.alpha, beta=self.beta, gamma=self.gamma, strategy=self.strategy,
                    stage1=self.stage1, stage2=self.stage2)


def attention_entropy(a: Union[AttentionMap, np.ndarray]) -> np.ndarray:
    """Normalized Shannon entropy of every attention row, in [0, 1]."""
    w = a.weights if isinstance(a, AttentionMap) else np.asarray(a, dtype=np.float64)
    P = w.shape[1]
    if P < 2:
        raise ValueError("entropy normalization needs at least two patches")
    total = w.sum(axis=1)
    bad = np.flatnonzero(total <= 0)
    if len(bad):
        raise DegenerateRow(f"attention row {int(bad[0])} sums to zero")
    p = w / total[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    H = -plogp.sum(axis=1) / np.log(P)
    return np.clip(H, 0.0, 1.0)


def uniform_weights(n_views: int, n_points: int) -> FusionWeights:
    return FusionWeights(np.full((n_views, n_points), 1.0 / n_views))


def entropy_weights(H, alpha: float) -> FusionWeights:
    """w_ent = softmax over views of -alpha * H."""
    H = np.atleast_2d(np.asarray(H, dtype=np.float64))
    w = softmax(-alpha * H, axis=0)
    return FusionWeights(w, entropy=w)


def visibility_weights(V, beta: float) -> FusionWeights:
    """w_vis = softmax over views of beta * V."""
    bits = V.bits if hasattr(V, "bits") else V
    bits = np.atleast_2d(np.asarray(bits, dtype=np.float64))
    w = softmax(beta * bits, axis=0)
    return FusionWeights(w, visibility=w)


def combined_weights(we: FusionWeights, wv: FusionWeights, gamma: float) -> FusionWeights:
    if we.weights.shape != wv.weights.shape:
        raise ShapeMismatch(f"entropy weights {we.weights.shape} vs visibility weights {wv.weights.shape}")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    if gamma == 0.0:
        w = we.weights.copy()
    elif gamma == 1.0:
        w = wv.weights.copy()
    else:
        w = (1.0 - gamma) * we.weights + gamma * wv.weights
    return FusionWeights(w, entropy=we.weights, visibility=wv.weights)


def fuse_velocities(velocities, weights: FusionWeights) -> np.ndarray:
    """Per-point convex combination of view velocities: (N, K[, d]) -> (K[, d])."""
    v = np.asarray(velocities, dtype=np.float64)
    w = weights.weights
    if v.shape[:2] != w.shape:
        raise ShapeMismatch(f"velocities {v.shape[:2]} vs weights {w.shape}")
    w = w.reshape(w.shape + (1,) * (v.ndim - 2))
    return (w * v).sum(axis=0)


def build_weights(strategy: str, cfg: FusionConfig, entropies=None, visibility=None,
                  n_views: int = 1, n_points: int = 0) -> FusionWeights:
    """Weights for one named strategy from whichever signals it needs."""
    if strategy == "uniform":
        return uniform_weights(n_views, n_points)
    if strategy == "entropy":
        return entropy_weights(entropies, cfg.alpha)
    if strategy == "visibility":
        return visibility_weights(visibility, cfg.beta)
    if strategy == "combined":
        return combined_weights(entropy_weights(entropies, cfg.alpha), visibility_weights(visibility, cfg.beta),
                                cfg.gamma)
    raise ValueError(f"unknown strategy {strategy!r}")


def weight_histogram(weights: FusionWeights, bins: int = 10) -> dict:
    """Histogram of every view's per-point weights over [0, 1]."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts = [np.histogram(row, bins=edges)[0].tolist() for row in weights.weights]
    return {"edges": edges.tolist(), "counts": counts}

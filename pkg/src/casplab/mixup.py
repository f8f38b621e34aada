"""Manifold Token Mixup: batch-level interpolation of token sequences at a
chosen depth, the matching soft labels, and the combined objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import Rng, sample_beta
from .tensor import Tensor

__all__ = [
    "MixupConfig",
    "MixupHook",
    "MixedBatch",
    "draw_mixup",
    "mix_tokens",
    "mix_labels",
    "soft_cross_entropy",
    "total_loss",
    "one_hot",
]


@dataclass
class MixupConfig:
    split_layer: int = 0
    beta_alpha: float = 1.0
    lambda_mix: float = 0.5
    enabled: bool = True

    def __post_init__(self):
        if self.split_layer < 0:
            raise ValueError("split_layer must be >= 0")
        if not self.beta_alpha > 0:
            raise ValueError("beta_alpha must be positive")
        if not (np.isfinite(self.lambda_mix) and self.lambda_mix >= 0):
            raise ValueError("lambda_mix must be finite and non-negative")

    def validate(self, depth: int) -> None:
        if self.split_layer > depth:
            raise ValueError(f"split_layer {self.split_layer} exceeds depth {depth}")


def _check_perm(idx, n: int) -> np.ndarray:
    idx = np.asarray(idx)
    if idx.shape != (n,) or not np.array_equal(np.sort(idx), np.arange(n)):
        raise ValueError(f"idx is not a permutation of 0..{n - 1}")
    return idx.astype(np.intp)


def mix_tokens(z: Tensor, idx, beta: float) -> Tensor:
    """beta * Z + (1 - beta) * Z[idx] over the batch axis, CLS rows included."""
    idx = _check_perm(idx, z.shape[0])
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    if beta == 1.0:
        return z
    return z * beta + T.take(z, idx, axis=0) * (1.0 - beta)


def mix_labels(targets: np.ndarray, idx, beta: float) -> np.ndarray:
    targets = np.asarray(targets)
    rows_ok = np.all((targets == 0) | (targets == 1)) and np.all(targets.sum(axis=1) == 1)
    if targets.ndim != 2 or not rows_ok:
        raise ValueError("mix_labels expects one-hot rows")
    idx = _check_perm(idx, targets.shape[0])
    return beta * targets + (1.0 - beta) * targets[idx]


@dataclass
class MixupHook:
    """A single (idx, beta) draw shared by the token and label mixing of a batch."""

    split_layer: int
    idx: np.ndarray
    beta: float

    def __call__(self, z: Tensor) -> Tensor:
        return mix_tokens(z, self.idx, self.beta)

    def labels(self, onehot: np.ndarray) -> np.ndarray:
        return mix_labels(onehot, self.idx, self.beta)


@dataclass
class MixedBatch:
    tokens: Tensor
    targets: np.ndarray
    beta: float
    idx: np.ndarray


def draw_mixup(batch_size: int, cfg: MixupConfig, rng: Rng) -> MixupHook:
    """Draw one permutation and one Beta(alpha, alpha) coefficient for a batch."""
    idx = rng.permutation(batch_size)
    beta = sample_beta(cfg.beta_alpha, rng)
    return MixupHook(cfg.split_layer, idx, beta)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def soft_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Batch mean of -sum_c t_c log softmax(y)_c."""
    targets = np.asarray(targets)
    if targets.shape != logits.shape:
        raise T.ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    if np.any(np.abs(targets.sum(axis=1) - 1.0) > 1e-4):
        raise ValueError("soft target rows must sum to 1")
    logp = T.log_softmax(logits)
    tgt = T.Tensor(targets)
    return -(logp * tgt).sum() * (1.0 / logits.shape[0])


def total_loss(l_ce: Tensor, l_mix: Tensor | None, lambda_mix: float) -> Tensor:
    if l_mix is None:
        return l_ce
    return l_ce + l_mix * float(lambda_mix)

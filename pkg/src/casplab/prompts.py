"""CLS-token prompts: per-layer additive q/k/v prompts, their train-time
dropout perturbation, and the input-stage CLS offset."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .rng import Rng, dropout_mask
from .tensor import Tensor

__all__ = [
    "PromptSet",
    "apply_cdap",
    "perturb",
    "cls_injection_for_layer",
    "trainable_param_count",
]


class PromptSet:
    """Learnable CLS prompts for a backbone of ``depth`` layers and width ``dim``.

    ``q[l]``, ``k[l]``, ``v[l]`` are added to the CLS row of layer ``l``'s
    projections; ``d`` is added once to the initial CLS embedding. All start
    at zero, so a fresh set reproduces the unprompted backbone exactly.
    ``use_cagp`` / ``use_cdap`` switch the two mechanisms off for ablations;
    perturbation is off whenever ``dropout_rate`` is 0.
    """

    def __init__(
        self,
        depth: int,
        dim: int,
        dropout_rate: float = 0.1,
        use_cagp: bool = True,
        use_cdap: bool = True,
    ):
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {dropout_rate}")
        self.depth = depth
        self.dim = dim
        self.dropout_rate = float(dropout_rate)
        self.use_cagp = use_cagp
        self.use_cdap = use_cdap
        self.training = False
        self.q = [T.zeros(dim, requires_grad=use_cagp, name=f"cagp.q.{l}") for l in range(depth)]
        self.k = [T.zeros(dim, requires_grad=use_cagp, name=f"cagp.k.{l}") for l in range(depth)]
        self.v = [T.zeros(dim, requires_grad=use_cagp, name=f"cagp.v.{l}") for l in range(depth)]
        self.d = T.zeros(dim, requires_grad=use_cdap, name="cdap.d")

    def train(self) -> PromptSet:
        self.training = True
        return self

    def eval(self) -> PromptSet:
        self.training = False
        return self

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        for l in range(self.depth):
            yield f"cagp.q.{l}", self.q[l]
            yield f"cagp.k.{l}", self.k[l]
            yield f"cagp.v.{l}", self.v[l]
        yield "cdap.d", self.d

    def trainable_tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors() if t.requires_grad]

    def zero_grad(self) -> None:
        for _, t in self.named_tensors():
            t.zero_grad()

    def load_named(self, named: dict[str, np.ndarray]) -> None:
        for name, t in self.named_tensors():
            t.data = np.asarray(named[name], dtype=t.data.dtype).copy()

    def cdap_vector(self) -> Tensor | None:
        return self.d if self.use_cdap else None

    def injection(self, layer: int, rng: Rng | None) -> tuple[Tensor, Tensor, Tensor] | None:
        if not self.use_cagp:
            return None
        return cls_injection_for_layer(self, layer, rng, self.training)


def apply_cdap(x_cls0: Tensor, p_d: Tensor) -> Tensor:
    """Domain-adapted initial CLS token ``x_cls0 + p_d``."""
    if x_cls0.shape != p_d.shape:
        raise T.ShapeError(f"CLS token {x_cls0.shape} and CDAP prompt {p_d.shape} differ in length")
    return x_cls0 + p_d


def perturb(prompts: PromptSet, layer: int, rng: Rng | None, training_mode: bool | None = None):
    """Independent inverted-dropout masks on p_q, p_k, p_v of one layer."""
    training = prompts.training if training_mode is None else training_mode
    trio = (prompts.q[layer], prompts.k[layer], prompts.v[layer])
    rate = prompts.dropout_rate
    if not training or rate == 0.0:
        return trio
    if rng is None:
        raise ValueError("prompt perturbation in training mode needs an Rng")
    return tuple(p * dropout_mask(p.shape, rate, rng) for p in trio)


def cls_injection_for_layer(prompts: PromptSet, layer: int, rng: Rng | None, training_mode: bool):
    if not 0 <= layer < prompts.depth:
        raise IndexError(f"layer {layer} outside [0, {prompts.depth})")
    return perturb(prompts, layer, rng, training_mode)


def trainable_param_count(cfg) -> tuple[int, int]:
    """(q/k/v prompt count, count including the CDAP vector) for a ViT config."""
    cagp = 3 * cfg.depth * cfg.dim
    return cagp, cagp + cfg.dim

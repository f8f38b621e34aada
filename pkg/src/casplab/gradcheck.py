"""Central finite-difference gradient checks against the tape's gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor, no_grad

__all__ = [
    "GradCheckResult",
    "TinyConfig",
    "check_gradients",
    "component_of",
    "model_gradcheck",
    "numeric_grad",
    "relative_error",
]


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    passed: bool


def numeric_grad(loss_fn: Callable[[], Tensor], t: Tensor, h: float = 1e-3) -> np.ndarray:
    """d loss / d t by central differences, perturbing ``t.data`` in place."""
    grad = np.zeros(t.data.shape, dtype=np.float64)
    flat = t.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn().data)
            flat[i] = orig - h
            down = float(loss_fn().data)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| scaled by the larger of the two gradients' max magnitudes."""
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def check_gradients(
    loss_fn: Callable[[], Tensor],
    named: Iterable[tuple[str, Tensor]],
    h: float = 1e-3,
    tol: float = 1e-3,
    corrupt: Callable[[str, np.ndarray], np.ndarray] | None = None,
) -> list[GradCheckResult]:
    """Compare backward gradients with finite differences for each named tensor.

    ``loss_fn`` must be deterministic (fixed RNG draws) and rebuild the graph
    on every call. ``corrupt`` lets tests inject a faulty analytic gradient.
    """
    named = list(named)
    for _, t in named:
        t.zero_grad()
    loss_fn().backward()
    results = []
    for name, t in named:
        analytic = t.grad.astype(np.float64)
        if corrupt is not None:
            analytic = corrupt(name, analytic)
        err = relative_error(analytic, numeric_grad(loss_fn, t, h))
        results.append(GradCheckResult(name, err, err < tol))
    return results


@dataclass(frozen=True)
class TinyConfig:
    """Smallest model that still exercises every op: 2x2 patches of 4x4 pixels, 2 layers, 2 heads."""

    image_size: int = 8
    patch_size: int = 4
    dim: int = 8
    depth: int = 2
    heads: int = 2
    mlp_ratio: int = 2
    batch: int = 3
    classes: int = 5


def model_gradcheck(
    tol: float = 1e-3,
    h: float = 1e-5,
    seed: int = 0,
    tiny: TinyConfig | None = None,
    corrupt: Callable[[str, np.ndarray], np.ndarray] | None = None,
) -> dict[str, list[GradCheckResult]]:
    """Finite-difference check of every trainable tensor of a tiny model in float64.

    Phase ``pretrain`` covers the backbone and a linear head under plain
    cross-entropy. Phase ``base`` covers prompts and head with the backbone
    frozen, perturbation on and the mixed-token term active. Prompts start
    from random values so no gradient is trivially zero.
    """
    from . import tensor as T
    from .mixup import MixupConfig, draw_mixup, one_hot, soft_cross_entropy, total_loss
    from .prompts import PromptSet
    from .rng import Rng
    from .vit import VitConfig, forward_features, init_backbone

    tiny = tiny or TinyConfig()
    cfg = VitConfig(tiny.image_size, tiny.patch_size, 1, tiny.dim, tiny.depth, tiny.heads, tiny.mlp_ratio)
    out = {}
    with T.precision(np.float64):
        rng = Rng(seed, "gradcheck")
        backbone = init_backbone(cfg, rng.stream("init"))
        images = rng.stream("images").uniform((tiny.batch, 1, tiny.image_size, tiny.image_size), -1.0, 1.0)
        labels = rng.stream("labels").integers(0, tiny.classes, size=tiny.batch)
        head_w = Tensor(rng.stream("head").normal((tiny.dim, tiny.classes), 0.5), requires_grad=True, name="head.w")
        head_b = Tensor(rng.stream("head.b").normal(tiny.classes, 0.1), requires_grad=True, name="head.b")

        def head(f):
            return T.matmul(f, head_w) + head_b

        def pretrain_loss():
            return T.cross_entropy(head(forward_features(images, backbone, cfg)), labels)

        named = list(backbone.named_tensors()) + [("head.w", head_w), ("head.b", head_b)]
        out["pretrain"] = check_gradients(pretrain_loss, named, h, tol, corrupt)

        backbone.freeze()
        prompts = PromptSet(cfg.depth, cfg.dim, dropout_rate=0.3)
        init = rng.stream("prompts")
        for name, t in prompts.named_tensors():
            t.data[...] = init.stream(name).normal(cfg.dim, 0.5)
        prompts.train()
        mix_cfg = MixupConfig(split_layer=1, lambda_mix=0.5)

        def base_loss():
            # fixed draws: every call replays the same masks and mixup pair
            r = Rng(seed, "gradcheck.base")
            hook = draw_mixup(tiny.batch, mix_cfg, r.stream("mtm"))
            clean = forward_features(images, backbone, cfg, prompts, rng=r.stream("pcap.clean"))
            mixed = forward_features(images, backbone, cfg, prompts, mixup_hook=hook, rng=r.stream("pcap.mixed"))
            l_ce = T.cross_entropy(head(clean), labels)
            l_mix = soft_cross_entropy(head(mixed), hook.labels(one_hot(labels, tiny.classes)))
            return total_loss(l_ce, l_mix, mix_cfg.lambda_mix)

        named = list(prompts.named_tensors()) + [("head.w", head_w), ("head.b", head_b)]
        out["base"] = check_gradients(base_loss, named, h, tol, corrupt)
    return out


def component_of(name: str) -> str:
    """Group a tensor name into backbone / cagp / cdap / head."""
    return name.split(".")[0]

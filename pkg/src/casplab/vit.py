"""A small pre-norm Vision Transformer with CLS-prompt and mixup hooks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterator

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Tensor

if TYPE_CHECKING:
    from .mixup import MixupHook
    from .prompts import PromptSet

__all__ = [
    "VitConfig",
    "LayerParams",
    "BackboneParams",
    "init_backbone",
    "image_to_patches",
    "patchify",
    "mhsa",
    "block",
    "forward_features",
    "count_backbone_params",
]

LN_EPS = 1e-6


@dataclass(frozen=True)
class VitConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 1
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0 or self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.heads <= 0 or self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.depth < 0 or self.channels <= 0 or self.mlp_ratio <= 0:
            raise ValueError("depth must be >= 0; channels and mlp_ratio positive")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def hidden_dim(self) -> int:
        return self.dim * self.mlp_ratio


@dataclass
class LayerParams:
    norm1_gain: Tensor
    norm1_bias: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    norm2_gain: Tensor
    norm2_bias: Tensor
    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor


@dataclass
class BackboneParams:
    patch_w: Tensor
    patch_b: Tensor
    pos_embed: Tensor
    cls_token: Tensor
    layers: list[LayerParams]
    norm_gain: Tensor
    norm_bias: Tensor
    frozen: bool = field(default=False)

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        yield "backbone.patch_w", self.patch_w
        yield "backbone.patch_b", self.patch_b
        yield "backbone.pos_embed", self.pos_embed
        yield "backbone.cls_token", self.cls_token
        for i, layer in enumerate(self.layers):
            for name in LayerParams.__dataclass_fields__:
                yield f"backbone.blocks.{i}.{name}", getattr(layer, name)
        yield "backbone.norm_gain", self.norm_gain
        yield "backbone.norm_bias", self.norm_bias

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def set_frozen(self, frozen: bool) -> None:
        """Flip requires_grad on every field together."""
        for t in self.tensors():
            t.requires_grad = not frozen
        self.frozen = frozen

    def freeze(self) -> None:
        self.set_frozen(True)

    def unfreeze(self) -> None:
        self.set_frozen(False)

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.zero_grad()

    @classmethod
    def from_named(cls, named: dict[str, np.ndarray], cfg: VitConfig) -> BackboneParams:
        def get(key):
            arr = named[key]
            return Tensor(arr, name=key)

        layers = [
            LayerParams(**{n: get(f"backbone.blocks.{i}.{n}") for n in LayerParams.__dataclass_fields__})
            for i in range(cfg.depth)
        ]
        params = cls(
            patch_w=get("backbone.patch_w"),
            patch_b=get("backbone.patch_b"),
            pos_embed=get("backbone.pos_embed"),
            cls_token=get("backbone.cls_token"),
            layers=layers,
            norm_gain=get("backbone.norm_gain"),
            norm_bias=get("backbone.norm_bias"),
        )
        params.freeze()
        return params


def _linear_init(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    # xavier-uniform
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform((fan_in, fan_out), -bound, bound)


def init_backbone(cfg: VitConfig, rng: Rng) -> BackboneParams:
    D, H = cfg.dim, cfg.hidden_dim

    def p(arr, name):
        return Tensor(arr, requires_grad=True, name=name)

    layers = []
    for i in range(cfg.depth):
        lr = rng.stream(f"layer{i}")
        layers.append(
            LayerParams(
                norm1_gain=p(np.ones(D), f"backbone.blocks.{i}.norm1_gain"),
                norm1_bias=p(np.zeros(D), f"backbone.blocks.{i}.norm1_bias"),
                wq=p(_linear_init(lr, D, D), f"backbone.blocks.{i}.wq"),
                wk=p(_linear_init(lr, D, D), f"backbone.blocks.{i}.wk"),
                wv=p(_linear_init(lr, D, D), f"backbone.blocks.{i}.wv"),
                wo=p(_linear_init(lr, D, D), f"backbone.blocks.{i}.wo"),
                norm2_gain=p(np.ones(D), f"backbone.blocks.{i}.norm2_gain"),
                norm2_bias=p(np.zeros(D), f"backbone.blocks.{i}.norm2_bias"),
                fc1_w=p(_linear_init(lr, D, H), f"backbone.blocks.{i}.fc1_w"),
                fc1_b=p(np.zeros(H), f"backbone.blocks.{i}.fc1_b"),
                fc2_w=p(_linear_init(lr, H, D), f"backbone.blocks.{i}.fc2_w"),
                fc2_b=p(np.zeros(D), f"backbone.blocks.{i}.fc2_b"),
            )
        )
    front = rng.stream("front")
    return BackboneParams(
        patch_w=p(_linear_init(front, cfg.patch_dim, D), "backbone.patch_w"),
        patch_b=p(np.zeros(D), "backbone.patch_b"),
        pos_embed=p(front.trunc_normal((cfg.seq_len, D), std=0.02), "backbone.pos_embed"),
        cls_token=p(front.trunc_normal((D,), std=0.02), "backbone.cls_token"),
        layers=layers,
        norm_gain=p(np.ones(D), "backbone.norm_gain"),
        norm_bias=p(np.zeros(D), "backbone.norm_bias"),
    )


def image_to_patches(images: np.ndarray, cfg: VitConfig) -> np.ndarray:
    """[B,C,H,W] (or [C,H,W]) pixels -> [B, N, patch*patch*C] row-major patches."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4:
        raise T.ShapeError(f"expected [B,C,H,W] images, got shape {images.shape}")
    b, c, h, w = images.shape
    if c != cfg.channels or h != cfg.image_size or w != cfg.image_size:
        raise T.ShapeError(
            f"image shape {(c, h, w)} does not match config "
            f"{(cfg.channels, cfg.image_size, cfg.image_size)}"
        )
    p = cfg.patch_size
    g = h // p
    x = images.reshape(b, c, g, p, g, p).transpose(0, 2, 4, 3, 5, 1)
    return x.reshape(b, g * g, cfg.patch_dim)


def patchify(
    images: np.ndarray,
    params: BackboneParams,
    cfg: VitConfig,
    cdap: Tensor | None = None,
) -> Tensor:
    """Embed patches, prepend the (optionally CDAP-shifted) CLS token, add positions.

    Returns tokens of shape [B, N+1, D]; row 0 is the CLS token.
    """
    patches = Tensor(image_to_patches(images, cfg))
    b = patches.shape[0]
    x = T.matmul(patches, params.patch_w) + params.patch_b
    cls = params.cls_token
    if cdap is not None:
        from .prompts import apply_cdap

        cls = apply_cdap(cls, cdap)
    cls = T.broadcast_to(cls.reshape(1, 1, cfg.dim), (b, 1, cfg.dim))
    x = T.concat([cls, x], axis=1)
    return x + params.pos_embed


def mhsa(
    x: Tensor,
    layer: LayerParams,
    cfg: VitConfig,
    cls_injection: tuple[Tensor, Tensor, Tensor] | None = None,
    record: dict | None = None,
) -> Tensor:
    """Multi-head self-attention over [B, T, D] tokens (no residual).

    ``cls_injection`` adds (dq, dk, dv) to row 0 of the full-width Q, K, V
    projections before the head split. ``record``, when given, receives the
    pre-softmax logits and attention probabilities as numpy arrays.
    """
    b, n, d = x.shape
    h, dk = cfg.heads, cfg.head_dim
    q = T.matmul(x, layer.wq)
    k = T.matmul(x, layer.wk)
    v = T.matmul(x, layer.wv)
    if cls_injection is not None:
        dq, dk_, dv = cls_injection
        for delta in (dq, dk_, dv):
            if delta.shape != (d,):
                raise T.ShapeError(f"CLS injection vectors must have length {d}, got {delta.shape}")
        q = T.row_add(q, 0, dq)
        k = T.row_add(k, 0, dk_)
        v = T.row_add(v, 0, dv)

    def heads(t):
        return t.reshape(b, n, h, dk).transpose(0, 2, 1, 3)

    qh, kh, vh = heads(q), heads(k), heads(v)
    logits = T.matmul(qh, kh.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dk))
    attn = T.softmax_rows(logits)
    if record is not None:
        record["logits"] = logits.data.copy()
        record["attn"] = attn.data.copy()
    z = T.matmul(attn, vh).transpose(0, 2, 1, 3).reshape(b, n, d)
    return T.matmul(z, layer.wo)


def mlp(x: Tensor, layer: LayerParams) -> Tensor:
    hid = T.gelu(T.matmul(x, layer.fc1_w) + layer.fc1_b)
    return T.matmul(hid, layer.fc2_w) + layer.fc2_b


def block(x: Tensor, layer: LayerParams, cfg: VitConfig, cls_injection=None, record=None) -> Tensor:
    x = x + mhsa(T.layer_norm(x, layer.norm1_gain, layer.norm1_bias, LN_EPS), layer, cfg, cls_injection, record)
    return x + mlp(T.layer_norm(x, layer.norm2_gain, layer.norm2_bias, LN_EPS), layer)


def forward_features(
    images: np.ndarray,
    params: BackboneParams,
    cfg: VitConfig,
    prompts: PromptSet | None = None,
    mixup_hook: MixupHook | None = None,
    rng: Rng | None = None,
    records: list | None = None,
) -> Tensor:
    """Post-final-norm CLS embeddings [B, D] for a batch of images.

    ``mixup_hook`` mixes the full token sequences after block ``split_layer - 1``
    (split 0 mixes right after patch embedding). ``rng`` feeds the prompt
    perturbation when the prompt set is in training mode.
    """
    if mixup_hook is not None and not 0 <= mixup_hook.split_layer <= cfg.depth:
        raise ValueError(f"mixup split layer {mixup_hook.split_layer} outside [0, {cfg.depth}]")
    cdap = prompts.cdap_vector() if prompts is not None else None
    x = patchify(images, params, cfg, cdap)
    for l, layer in enumerate(params.layers):
        if mixup_hook is not None and mixup_hook.split_layer == l:
            x = mixup_hook(x)
        inj = prompts.injection(l, rng) if prompts is not None else None
        rec = {} if records is not None else None
        x = block(x, layer, cfg, inj, rec)
        if records is not None:
            records.append(rec)
    if mixup_hook is not None and mixup_hook.split_layer == cfg.depth:
        x = mixup_hook(x)
    cls = x[:, 0, :]
    return T.layer_norm(cls, params.norm_gain, params.norm_bias, LN_EPS)


def count_backbone_params(cfg: VitConfig) -> int:
    D, H = cfg.dim, cfg.hidden_dim
    front = cfg.patch_dim * D + D + cfg.seq_len * D + D + 2 * D
    per_layer = 2 * D + 4 * D * D + 2 * D + D * H + H + H * D + D
    return front + cfg.depth * per_layer

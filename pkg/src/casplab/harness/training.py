"""Backbone pretraining, base-session prompt training and incremental sessions."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..mixup import MixupConfig, draw_mixup, one_hot, soft_cross_entropy, total_loss
from ..prompts import PromptSet
from ..prototypes import PrototypeMatrix, append_session, classify_batch, compute_prototypes
from ..rng import Rng
from ..tensor import Tensor
from ..vit import BackboneParams, VitConfig, forward_features, init_backbone
from .data import Dataset
from .errors import DivergenceError
from .sessions import SessionPlan

log = logging.getLogger(__name__)

__all__ = [
    "PretrainConfig",
    "TrainConfig",
    "Adam",
    "cosine_lr",
    "LinearHead",
    "pretrain_backbone",
    "train_base_session",
    "extract_features",
    "evaluate_pool",
    "run_incremental_session",
    "build_prompts",
]


@dataclass
class PretrainConfig:
    epochs: int = 60
    batch_size: int = 64
    learning_rate: float = 2e-3
    shift: int = 1
    seed: int = 0


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    dropout_rate: float = 0.1
    cagp: bool = True
    pcap: bool = True
    cdap: bool = True
    mtm: bool = True
    head: str = "linear"
    head_scale: float = 16.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("epochs and batch_size must be >= 1 and learning_rate > 0")


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """lr0 * (1 + cos(pi * step / total_steps)) / 2."""
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


class Adam:
    def __init__(self, params: list[Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class LinearHead:
    """Temporary classification head; discarded once training ends."""

    def __init__(self, dim: int, num_classes: int, rng: Rng):
        self.w = Tensor(rng.trunc_normal((dim, num_classes), std=0.02), requires_grad=True, name="head.w")
        self.b = T.zeros(num_classes, requires_grad=True, name="head.b")

    def __call__(self, feats: Tensor) -> Tensor:
        return T.matmul(feats, self.w) + self.b

    def tensors(self) -> list[Tensor]:
        return [self.w, self.b]


def _l2_normalize(x: Tensor, axis: int) -> Tensor:
    # d/dx of x / |x| written out so the op stays on the tape
    sq = (x * x).sum(axis=axis, keepdims=True)
    inv = _rsqrt(sq)
    return x * inv


def _rsqrt(x: Tensor, eps: float = 1e-12) -> Tensor:
    out = 1.0 / np.sqrt(x.data + eps)
    return T._make(out, (x,), lambda g: (g * -0.5 * out**3,))


class CosineHead:
    """Scaled cosine-similarity head, matching the prototype classifier used at inference."""

    def __init__(self, dim: int, num_classes: int, rng: Rng, scale: float = 16.0):
        self.w = Tensor(rng.trunc_normal((dim, num_classes), std=0.02), requires_grad=True, name="head.w")
        self.scale = float(scale)

    def __call__(self, feats: Tensor) -> Tensor:
        return T.matmul(_l2_normalize(feats, 1), _l2_normalize(self.w, 0)) * self.scale

    def tensors(self) -> list[Tensor]:
        return [self.w]


def _batches(n: int, batch_size: int, rng: Rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _check_finite(loss: Tensor, where: str) -> None:
    if not np.isfinite(loss.data).all():
        raise DivergenceError(f"non-finite loss during {where}")


def _random_shift(images: np.ndarray, max_shift: int, rng: Rng) -> np.ndarray:
    if max_shift <= 0:
        return images
    shifts = rng.integers(-max_shift, max_shift + 1, size=(len(images), 2))
    out = np.empty_like(images)
    for i, (dy, dx) in enumerate(shifts):
        out[i] = np.roll(images[i], (int(dy), int(dx)), axis=(-2, -1))
    return out


def extract_features(
    dataset: Dataset,
    idx: np.ndarray,
    backbone: BackboneParams,
    cfg: VitConfig,
    prompts: PromptSet | None = None,
    batch_size: int = 256,
) -> np.ndarray:
    """Eval-mode CLS features; no stochastic component is active."""
    was_training = prompts.training if prompts is not None else False
    if prompts is not None:
        prompts.eval()
    out = []
    with T.no_grad():
        for start in range(0, len(idx), batch_size):
            imgs = dataset.as_float(idx[start : start + batch_size])
            out.append(forward_features(imgs, backbone, cfg, prompts).data)
    if prompts is not None and was_training:
        prompts.train()
    return np.concatenate(out) if out else np.zeros((0, cfg.dim), dtype=np.float32)


@dataclass
class PretrainResult:
    backbone: BackboneParams
    losses: list[float] = field(default_factory=list)
    heldout_acc: float = float("nan")


def pretrain_backbone(dataset: Dataset, plan: SessionPlan, cfg: VitConfig, pcfg: PretrainConfig) -> PretrainResult:
    """Supervised pretraining on the pretrain classes; returns a frozen backbone.

    The temporary linear head is evaluated on the held-out pretrain split and
    then dropped.
    """
    if len(plan.pretrain_train) == 0:
        raise ValueError("empty pretrain split")
    rng = Rng(pcfg.seed, "pretrain")
    backbone = init_backbone(cfg, rng.stream("init"))
    head = LinearHead(cfg.dim, len(plan.pretrain_classes), rng.stream("head"))
    params = backbone.tensors() + head.tensors()
    opt = Adam(params)
    idx = plan.pretrain_train
    labels = plan.pretrain_labels_for(dataset, idx)
    images = dataset.as_float(idx)
    steps_per_epoch = math.ceil(len(idx) / pcfg.batch_size)
    total = pcfg.epochs * steps_per_epoch
    shuffle, aug = rng.stream("shuffle"), rng.stream("augment")
    losses = []
    step = 0
    for epoch in range(pcfg.epochs):
        epoch_loss = 0.0
        for b in _batches(len(idx), pcfg.batch_size, shuffle):
            opt.zero_grad()
            x = _random_shift(images[b], pcfg.shift, aug)
            loss = T.cross_entropy(head(forward_features(x, backbone, cfg)), labels[b])
            _check_finite(loss, "pretraining")
            loss.backward()
            opt.step(cosine_lr(step, total, pcfg.learning_rate))
            step += 1
            epoch_loss += float(loss.data) * len(b)
        losses.append(epoch_loss / len(idx))
        log.debug("pretrain epoch %d loss %.4f", epoch, losses[-1])
    backbone.freeze()
    heldout = float("nan")
    if len(plan.pretrain_test):
        feats = extract_features(dataset, plan.pretrain_test, backbone, cfg)
        with T.no_grad():
            logits = head(Tensor(feats)).data
        heldout = float(np.mean(logits.argmax(1) == plan.pretrain_labels_for(dataset, plan.pretrain_test)))
    return PretrainResult(backbone, losses, heldout)


def build_prompts(cfg: VitConfig, tcfg: TrainConfig) -> PromptSet:
    rate = tcfg.dropout_rate if (tcfg.pcap and tcfg.cagp) else 0.0
    return PromptSet(cfg.depth, cfg.dim, dropout_rate=rate, use_cagp=tcfg.cagp, use_cdap=tcfg.cdap)


@dataclass
class BaseSessionResult:
    prompts: PromptSet
    prototypes: PrototypeMatrix
    losses: list[float] = field(default_factory=list)


def train_base_session(
    dataset: Dataset,
    plan: SessionPlan,
    backbone: BackboneParams,
    cfg: VitConfig,
    prompts: PromptSet,
    mixup_cfg: MixupConfig,
    tcfg: TrainConfig,
) -> BaseSessionResult:
    """Train prompts and a temporary head on the base session, then build base prototypes.

    Dropout masks of the clean pass, those of the mixed pass and the mixup
    draws come from separate RNG streams, so switching the mixed term's
    weight to zero leaves the clean pass untouched.
    """
    if not backbone.frozen:
        raise ValueError("backbone must be frozen before base-session training")
    use_mtm = tcfg.mtm and mixup_cfg.enabled
    if use_mtm:
        mixup_cfg.validate(cfg.depth)
    rng = Rng(tcfg.seed, "base")
    base_labels = plan.session_labels(0)
    n_cls = len(base_labels)
    if tcfg.head == "cosine":
        head = CosineHead(cfg.dim, n_cls, rng.stream("head"), tcfg.head_scale)
    else:
        head = LinearHead(cfg.dim, n_cls, rng.stream("head"))
    opt = Adam(prompts.trainable_tensors() + head.tensors(), tcfg.beta1, tcfg.beta2, tcfg.adam_eps)

    idx = plan.session_train[0]
    labels = plan.labels_for(dataset, idx)
    images = dataset.as_float(idx)
    static = not prompts.trainable_tensors() and not use_mtm
    feats = extract_features(dataset, idx, backbone, cfg, prompts) if static else None

    steps_per_epoch = math.ceil(len(idx) / tcfg.batch_size)
    total = tcfg.epochs * steps_per_epoch
    shuffle = rng.stream("shuffle")
    pcap_clean, pcap_mixed, mix_rng = rng.stream("pcap.clean"), rng.stream("pcap.mixed"), rng.stream("mtm")
    prompts.train()
    losses, step = [], 0
    for epoch in range(tcfg.epochs):
        epoch_loss = 0.0
        for b in _batches(len(idx), tcfg.batch_size, shuffle):
            opt.zero_grad()
            y = labels[b]
            if static:
                f = Tensor(feats[b])
            else:
                f = forward_features(images[b], backbone, cfg, prompts, rng=pcap_clean)
            l_ce = T.cross_entropy(head(f), y)
            l_mix = None
            if use_mtm:
                hook = draw_mixup(len(b), mixup_cfg, mix_rng)
                fm = forward_features(images[b], backbone, cfg, prompts, mixup_hook=hook, rng=pcap_mixed)
                l_mix = soft_cross_entropy(head(fm), hook.labels(one_hot(y, n_cls)))
            loss = total_loss(l_ce, l_mix, mixup_cfg.lambda_mix)
            _check_finite(loss, "base-session training")
            loss.backward()
            opt.step(cosine_lr(step, total, tcfg.learning_rate))
            step += 1
            epoch_loss += float(loss.data) * len(b)
        losses.append(epoch_loss / len(idx))
        log.debug("base epoch %d loss %.4f", epoch, losses[-1])
    prompts.eval()
    for t in prompts.trainable_tensors():
        t.zero_grad()

    feats = extract_features(dataset, idx, backbone, cfg, prompts)
    rows = compute_prototypes(feats, labels, base_labels)
    W = append_session(PrototypeMatrix(), rows, base_labels, 0)
    return BaseSessionResult(prompts, W, losses)


@dataclass
class SessionRow:
    session: int
    overall_acc: float
    base_acc: float
    novel_acc: float | None
    n_classes: int
    per_class: dict[int, tuple[int, int]]


def evaluate_pool(
    dataset: Dataset,
    plan: SessionPlan,
    t: int,
    backbone: BackboneParams,
    cfg: VitConfig,
    prompts: PromptSet | None,
    W: PrototypeMatrix,
    restrict=None,
) -> SessionRow:
    """Accuracy of the prototype classifier on the session-t evaluation pool."""
    pool = plan.eval_pool(t)
    labels = plan.labels_for(dataset, pool)
    feats = extract_features(dataset, pool, backbone, cfg, prompts)
    pred, _ = classify_batch(feats, W, restrict)
    correct = pred == labels
    sess = plan.session_of_label()
    is_base = np.array([sess[l] == 0 for l in labels.tolist()], dtype=bool)
    per_class = {}
    for c in sorted(set(labels.tolist())):
        m = labels == c
        per_class[c] = (int(correct[m].sum()), int(m.sum()))
    novel = float(correct[~is_base].mean()) if (~is_base).any() else None
    return SessionRow(
        session=t,
        overall_acc=float(correct.mean()),
        base_acc=float(correct[is_base].mean()),
        novel_acc=novel,
        n_classes=len(W),
        per_class=per_class,
    )


def run_incremental_session(
    dataset: Dataset,
    plan: SessionPlan,
    t: int,
    backbone: BackboneParams,
    cfg: VitConfig,
    prompts: PromptSet | None,
    W: PrototypeMatrix,
) -> tuple[PrototypeMatrix, SessionRow]:
    """Append session t's prototypes (no parameter updates) and evaluate."""
    if not 1 <= t < plan.num_sessions:
        raise IndexError(f"session {t} outside 1..{plan.num_sessions - 1}")
    idx = plan.session_train[t]
    labels = plan.labels_for(dataset, idx)
    new_ids = plan.session_labels(t)
    feats = extract_features(dataset, idx, backbone, cfg, prompts)
    W2 = append_session(W, compute_prototypes(feats, labels, new_ids), new_ids, t)
    return W2, evaluate_pool(dataset, plan, t, backbone, cfg, prompts, W2)

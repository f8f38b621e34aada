"""Mixing hidden tokens between samples and the matching soft labels."""

import numpy as np

from casplab.mixup import MixupConfig, draw_mixup, one_hot, soft_cross_entropy
from casplab.rng import Rng
from casplab.vit import VitConfig, forward_features, init_backbone
from casplab.tensor import Tensor

cfg = VitConfig()
backbone = init_backbone(cfg, Rng(0, "init"))
images = Rng(1).uniform((6, 1, 32, 32), -1.0, 1.0)
labels = np.array([0, 1, 2, 0, 1, 2])
head = Tensor(Rng(2).normal((cfg.dim, 3)))

hook = draw_mixup(len(labels), MixupConfig(split_layer=2, beta_alpha=1.0), Rng(3))
print(f"pairing {hook.idx.tolist()}, beta {hook.beta:.3f}, split after {hook.split_layer} blocks")
soft = hook.labels(one_hot(labels, 3))
print("soft labels\n", np.round(soft, 3))
print("row sums", soft.sum(axis=1))

mixed = forward_features(images, backbone, cfg, mixup_hook=hook) @ head
print("mixed-token loss", float(soft_cross_entropy(mixed, soft).data))

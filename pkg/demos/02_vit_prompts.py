"""A micro ViT with CLS prompts: zero prompts change nothing, query prompts touch only the CLS row."""

import numpy as np

from casplab import tensor as T
from casplab.prompts import PromptSet, trainable_param_count
from casplab.rng import Rng
from casplab.tensor import Tensor
from casplab.vit import VitConfig, count_backbone_params, forward_features, init_backbone, mhsa

cfg = VitConfig()
backbone = init_backbone(cfg, Rng(0, "init"))
backbone.freeze()
print("backbone parameters", count_backbone_params(cfg))
print("prompt parameters (CLS prompts, with domain offset)", trainable_param_count(cfg))
vit_b = VitConfig(image_size=224, patch_size=16, channels=3, dim=768, depth=12, heads=12)
print("prompt parameters at ViT-B size", trainable_param_count(vit_b))

images = Rng(1).uniform((8, 1, 32, 32), -1.0, 1.0)
prompts = PromptSet(cfg.depth, cfg.dim).eval()
plain = forward_features(images, backbone, cfg).data
prompted = forward_features(images, backbone, cfg, prompts).data
print("zero prompts, max |difference|", np.abs(plain - prompted).max())

x = Tensor(Rng(2).normal((1, cfg.num_patches + 1, cfg.dim)))
zero = T.zeros(cfg.dim)
dq = Tensor(Rng(3).normal(cfg.dim))
base, injected = {}, {}
mhsa(x, backbone.layers[0], cfg, record=base)
mhsa(x, backbone.layers[0], cfg, (dq, zero, zero), record=injected)
changed = np.argwhere((injected["logits"] != base["logits"]).any(axis=(0, 1, 3))).ravel()
print("query prompt changes logit rows", changed.tolist())

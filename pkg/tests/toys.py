"""Tiny shared model builders for the attack/train/eval test suites."""

import dataclasses

import numpy as np

from afa import nn
from afa.tensor import Tensor

TINY = nn.Architecture(in_channels=1, num_classes=4, stem_width=3, stage_widths=(3, 4),
                       blocks_per_stage=1, k_branches=3, strengths=(0.0, 2.0, 8.0),
                       wg_width=3, wg_hidden=4)


def tiny_model(seed=0, **overrides):
    arch = dataclasses.replace(TINY, **overrides) if overrides else TINY
    return nn.build_model(arch, seed)


def warmed_model(seed=0, hw=8, **overrides):
    """Model whose running stats and generator have moved off initialization."""
    model = tiny_model(seed, **overrides)
    rng = np.random.default_rng(seed + 1000)
    for route in range(model.arch.k_branches):
        for _ in range(2):
            model.logits(Tensor(rng.uniform(size=(6, model.arch.in_channels, hw, hw))),
                         route=route, training=True)
    for t in model.wg_parameters():
        t.data = t.data + rng.standard_normal(t.shape) * 0.3
    return model


def rand_images(rng, n=4, arch=TINY, hw=8):
    x = rng.uniform(0.0, 1.0, size=(n, arch.in_channels, hw, hw))
    y = rng.integers(0, arch.num_classes, size=n)
    return x, y

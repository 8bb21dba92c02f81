"""Deterministic synthetic glyph datasets in the genuine binary layouts.

Ten shape classes rendered from 8x8 stencils with position jitter,
brightness variation, and pixel noise.  Several class pairs differ only by
a small offset, so trained models have genuinely small margins and
gradient attacks have something to exploit.  Files are written in the same
IDX and 3073-byte-record formats the loaders parse, so the whole pipeline
exercises the real parsing path;  generation is a pure function of the
seed.  Class labels are exactly balanced whenever the requested size is a
multiple of ten.
"""

from __future__ import annotations

import os

import numpy as np

from . import data


def _glyphs() -> np.ndarray:
    g = np.zeros((10, 8, 8))
    g[0, 3:5, 1:7] = 1.0          # mid horizontal bar
    g[1, 4:6, 1:7] = 1.0          # one-lower bar: overlaps 0 on a full row
    g[2, 1:7, 3:5] = 1.0          # mid vertical bar
    g[3, 1:7, 4:6] = 1.0          # one-right bar: overlaps 2 on a full column
    for i in range(8):
        g[4, i, i] = 1.0          # thick main diagonal
        g[5, i, 7 - i] = 1.0      # thick anti-diagonal
        if i:
            g[4, i, i - 1] = 1.0
            g[5, i, 8 - i] = 1.0
    g[6, 3:5, :] = 1.0            # cross
    g[6, :, 3:5] = 1.0
    g[7] = np.clip(g[4] + g[5], 0.0, 1.0)  # X (confusable with 6)
    g[8, 2:6, 2:6] = 1.0          # square ring
    g[8, 3:5, 3:5] = 0.0
    g[9, 2:6, 2:6] = 1.0          # filled block: the ring plus its hole
    return g


def _balanced_labels(n: int, rng) -> np.ndarray:
    return rng.permutation(np.arange(n) % 10)


def _class_textures(channels: int, side: int) -> np.ndarray:
    """Fixed per-class background micro-textures, part of the distribution.

    Each class scatters its own faint pixel pattern across the canvas: a
    highly predictive cue that is cleanly learnable (well above the pixel
    noise once integrated) but lies inside the one-sided reach of an 8/255
    attacker, which can erase it and paint any other class's pattern in its
    place.  Natural training leans on it; robust training must ignore it.
    The patterns are a constant of the dataset, not of the draw, so every
    synthesized split shares them.
    """
    rng = np.random.default_rng(0x7EC5)
    return 0.025 * rng.integers(0, 2, size=(10, channels, side, side)).astype(float)


def _render(labels: np.ndarray, rng, upscale: int, pad: int, jitter: int,
            channels: int) -> np.ndarray:
    """Placed, lit, and noised glyph images as uint8 (N, C, H, W)."""
    n = len(labels)
    side = 8 * upscale + 2 * pad
    stamps = _glyphs()[labels]
    stamps = stamps.repeat(upscale, axis=1).repeat(upscale, axis=2)
    canvas = np.zeros((n, channels, side, side))
    canvas += _class_textures(channels, side)[labels]
    offs = rng.integers(pad - jitter, pad + jitter + 1, size=(n, 2))
    # the faintest strokes sit well above the pixel noise but inside the
    # two-sided reach of an 8/255 attack, so they are cleanly learnable yet
    # robustly unlearnable: robust training has to give up clean accuracy on
    # that band, which is the tradeoff adversarial training is about
    brightness = rng.uniform(0.035, 0.40, size=n)
    # per-image channel tint is a nuisance variable, not a class cue
    tint = rng.uniform(0.6, 1.0, size=(n, channels)) if channels > 1 else np.ones((n, 1))
    for i in range(n):
        dy, dx = offs[i]
        patch = brightness[i] * stamps[i]
        canvas[i, :, dy:dy + 8 * upscale, dx:dx + 8 * upscale] += (
            tint[i][:, None, None] * patch)
    canvas += rng.normal(0.0, 0.012, size=canvas.shape)
    return (np.clip(canvas, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def synthesize_mnist_like(data_dir: str, train_n: int = 10000,
                          test_n: int = 10000, seed: int = 20240501):
    """Write 28x28 grayscale IDX files with the canonical MNIST names."""
    os.makedirs(data_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    for split, count in (("train", train_n), ("test", test_n)):
        labels = _balanced_labels(count, rng)
        images = _render(labels, rng, upscale=3, pad=2, jitter=2, channels=1)
        img_name, lbl_name = data._MNIST_FILES[split]
        data.write_idx_images(os.path.join(data_dir, img_name), images[:, 0])
        data.write_idx_labels(os.path.join(data_dir, lbl_name), labels)


def synthesize_cifar_like(data_dir: str, train_n: int = 10000,
                          test_n: int = 10000, seed: int = 20240502):
    """Write 32x32 RGB binary batch files with the canonical CIFAR-10 names."""
    os.makedirs(data_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    for fname, count in (("data_batch_1.bin", train_n), ("test_batch.bin", test_n)):
        labels = _balanced_labels(count, rng)
        images = _render(labels, rng, upscale=3, pad=4, jitter=3, channels=3)
        data.write_cifar10(os.path.join(data_dir, fname), images, labels)


def has_mnist(data_dir: str) -> bool:
    return all(os.path.exists(os.path.join(data_dir, f)) or
               os.path.exists(os.path.join(data_dir, f + ".gz"))
               for f in data._MNIST_FILES["train"] + data._MNIST_FILES["test"])


def has_cifar(data_dir: str) -> bool:
    needed = ("data_batch_1.bin", "test_batch.bin")
    return all(os.path.exists(os.path.join(data_dir, f)) or
               os.path.exists(os.path.join(data_dir, f + ".gz"))
               for f in needed)

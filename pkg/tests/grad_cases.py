"""Randomized gradient-check case catalogue shared by the unit and acceptance suites.

Each case builds a small scalar loss from freshly drawn inputs.  Inputs that
feed kinked ops (relu, margin) are drawn away from the kink so that central
differences at h=1e-5 stay valid.  Losses are weighted means against a fixed
random tensor so upstream gradients are non-uniform.
"""

import numpy as np

from afa import tensor as T


def _safe(rng, shape, margin=5e-2):
    """Uniform(-1, 1) values pushed at least ``margin`` away from zero."""
    x = rng.uniform(-1.0, 1.0, size=shape)
    x = x + np.sign(x) * margin
    x[x == 0] = margin
    return x


def _weighted_mean(out: T.Tensor, weights: np.ndarray) -> T.Tensor:
    return T.scalar_mean(T.mul(out, T.Tensor(weights)))


def _case_add_equal(rng):
    a = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    r = rng.standard_normal((3, 4))
    return lambda: _weighted_mean(T.add(a, b), r), [a, b]


def _case_add_bias(rng):
    a = T.Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    b = T.Tensor(rng.standard_normal(3), requires_grad=True)
    r = rng.standard_normal((4, 3))
    return lambda: _weighted_mean(T.add(a, b), r), [a, b]


def _case_sub_mul(rng):
    a = T.Tensor(rng.standard_normal((2, 5)), requires_grad=True)
    b = T.Tensor(rng.standard_normal((2, 5)), requires_grad=True)
    c = T.Tensor(rng.standard_normal((2, 5)), requires_grad=True)
    r = rng.standard_normal((2, 5))
    return lambda: _weighted_mean(T.mul(T.sub(a, b), c), r), [a, b, c]


def _case_mul_scalar(rng):
    a = T.Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    s = T.Tensor(rng.standard_normal(()), requires_grad=True)
    r = rng.standard_normal((3, 3))
    return lambda: _weighted_mean(T.mul(s, T.mul(a, s)), r), [a, s]


def _case_matmul(rng):
    a = T.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = T.Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    r = rng.standard_normal((3, 2))
    return lambda: _weighted_mean(T.matmul(a, b), r), [a, b]


def _case_conv_plain(rng):
    x = T.Tensor(rng.standard_normal((2, 2, 5, 4)), requires_grad=True)
    w = T.Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    r = rng.standard_normal((2, 3, 3, 2))
    return lambda: _weighted_mean(T.conv2d(x, w), r), [x, w]


def _case_conv_stride_pad(rng):
    x = T.Tensor(rng.standard_normal((2, 2, 5, 5)), requires_grad=True)
    w = T.Tensor(rng.standard_normal((2, 2, 3, 3)), requires_grad=True)
    r = rng.standard_normal((2, 2, 3, 3))
    return lambda: _weighted_mean(T.conv2d(x, w, stride=2, padding=1), r), [x, w]


def _case_conv_1x1(rng):
    x = T.Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
    w = T.Tensor(rng.standard_normal((4, 3, 1, 1)), requires_grad=True)
    r = rng.standard_normal((2, 4, 2, 2))
    return lambda: _weighted_mean(T.conv2d(x, w, stride=2), r), [x, w]


def _case_relu(rng):
    x = T.Tensor(_safe(rng, (3, 4)), requires_grad=True)
    r = rng.standard_normal((3, 4))
    return lambda: _weighted_mean(T.relu(x), r), [x]


def _case_sigmoid_bce(rng):
    x = T.Tensor(rng.standard_normal(6) * 2.0, requires_grad=True)
    t = rng.uniform(0.1, 0.9, size=6)
    return lambda: T.binary_cross_entropy(T.sigmoid(x), t), [x]


def _case_gap(rng):
    x = T.Tensor(rng.standard_normal((2, 3, 3, 4)), requires_grad=True)
    r = rng.standard_normal((2, 3))
    return lambda: _weighted_mean(T.global_avg_pool(x), r), [x]


def _case_reshape(rng):
    x = T.Tensor(rng.standard_normal((2, 6)), requires_grad=True)
    w = T.Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    r = rng.standard_normal((3, 2))
    return lambda: _weighted_mean(T.matmul(T.reshape(x, (3, 4)), w), r), [x, w]


def _case_cross_entropy(rng):
    z = T.Tensor(rng.standard_normal((5, 4)) * 2.0, requires_grad=True)
    y = rng.integers(0, 4, size=5)
    return lambda: T.softmax_cross_entropy(z, y), [z]


def _case_kl(rng):
    p = T.Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    q = T.Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    return lambda: T.softmax_kl_divergence(p, q), [p, q]


def _case_margin(rng):
    # keep runner-up gaps and the kink clear of the FD step
    while True:
        z = rng.standard_normal((5, 4)) * 2.0
        y = rng.integers(0, 4, size=5)
        srt = np.sort(z, axis=1)
        if (srt[:, -1] - srt[:, -2] > 1e-2).all():
            margins = z[np.arange(5), y] - np.where(
                np.arange(4)[None, :] == y[:, None], -np.inf, z).max(axis=1)
            if (np.abs(margins) > 1e-2).all():
                break
    zt = T.Tensor(z, requires_grad=True)
    return lambda: T.margin_loss(zt, y), [zt]


def _case_channel_affine(rng):
    x = T.Tensor(rng.standard_normal((2, 3, 2, 4)), requires_grad=True)
    s = T.Tensor(rng.standard_normal(3), requires_grad=True)
    t = T.Tensor(rng.standard_normal(3), requires_grad=True)
    r = rng.standard_normal((2, 3, 2, 4))
    return lambda: _weighted_mean(T.channel_affine(x, s, t), r), [x, s, t]


def _case_per_sample_scale(rng):
    x = T.Tensor(rng.standard_normal((3, 2, 2, 2)), requires_grad=True)
    w = T.Tensor(rng.uniform(0.1, 0.9, size=3), requires_grad=True)
    r = rng.standard_normal((3, 2, 2, 2))
    return lambda: _weighted_mean(T.per_sample_scale(x, w), r), [x, w]


def _case_batch_norm(rng):
    x = T.Tensor(rng.standard_normal((3, 2, 3, 3)) * 1.5, requires_grad=True)
    g = T.Tensor(rng.uniform(0.5, 1.5, size=2), requires_grad=True)
    b = T.Tensor(rng.standard_normal(2), requires_grad=True)
    r = rng.standard_normal((3, 2, 3, 3))

    def build():
        out, _, _ = T.batch_norm_train(x, g, b, 1e-5)
        return _weighted_mean(out, r)

    return build, [x, g, b]


def _case_composite_net(rng):
    # conv -> batchnorm -> (shifted) relu -> pool -> linear -> cross-entropy
    x = T.Tensor(rng.standard_normal((2, 1, 5, 5)), requires_grad=True)
    w1 = T.Tensor(rng.standard_normal((3, 1, 3, 3)) * 0.5, requires_grad=True)
    g = T.Tensor(rng.uniform(0.8, 1.2, size=3), requires_grad=True)
    b = T.Tensor(rng.standard_normal(3) + 0.5, requires_grad=True)
    w2 = T.Tensor(rng.standard_normal((3, 4)) * 0.7, requires_grad=True)
    bias = T.Tensor(rng.standard_normal(4) * 0.1, requires_grad=True)
    y = rng.integers(0, 4, size=2)

    def build():
        h, _, _ = T.batch_norm_train(T.conv2d(x, w1, padding=1), g, b, 1e-5)
        feats = T.global_avg_pool(T.relu(h))
        return T.softmax_cross_entropy(T.add(T.matmul(feats, w2), bias), y)

    return build, [x, w1, g, b, w2, bias]


def _case_fusion(rng):
    # two branch maps mixed by per-sample sigmoid weights: the fused-path shape
    xa = T.Tensor(rng.standard_normal((3, 2, 2, 2)), requires_grad=True)
    xb = T.Tensor(rng.standard_normal((3, 2, 2, 2)), requires_grad=True)
    v = T.Tensor(rng.standard_normal((3, 1)), requires_grad=True)
    r = rng.standard_normal((3, 2, 2, 2))

    def build():
        w0 = T.reshape(T.sigmoid(v), (3,))
        w1 = T.sub(T.Tensor(np.ones(3)), w0)
        mixed = T.add(T.per_sample_scale(xa, w0), T.per_sample_scale(xb, w1))
        return _weighted_mean(mixed, r)

    return build, [xa, xb, v]


CASES = [
    ("add_equal", _case_add_equal),
    ("add_bias", _case_add_bias),
    ("sub_mul", _case_sub_mul),
    ("mul_scalar", _case_mul_scalar),
    ("matmul", _case_matmul),
    ("conv_plain", _case_conv_plain),
    ("conv_stride_pad", _case_conv_stride_pad),
    ("conv_1x1_stride", _case_conv_1x1),
    ("relu", _case_relu),
    ("sigmoid_bce", _case_sigmoid_bce),
    ("global_avg_pool", _case_gap),
    ("reshape", _case_reshape),
    ("cross_entropy", _case_cross_entropy),
    ("softmax_kl", _case_kl),
    ("margin", _case_margin),
    ("channel_affine", _case_channel_affine),
    ("per_sample_scale", _case_per_sample_scale),
    ("batch_norm", _case_batch_norm),
    ("composite_net", _case_composite_net),
    ("fusion", _case_fusion),
]


def iter_instances(n_instances: int, seed: int = 20240817):
    """Yield (label, build, params) over the catalogue, cycling with fresh draws."""
    rng = np.random.default_rng(seed)
    for i in range(n_instances):
        label, factory = CASES[i % len(CASES)]
        build, params = factory(rng)
        yield f"{label}#{i}", build, params

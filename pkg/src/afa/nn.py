"""Network building blocks: multi-branch batchnorm and the residual classifier.

A classifier here is a pre-activation residual CNN whose every normalization
site is a ``MultiBranchNorm``: K parallel batchnorm branches (statistics plus
affine) over the same convolution outputs.  During branch-routed forwards a
single branch serves the whole pass; during fused forwards every site blends
its two outermost branches with per-sample weights (W0, W1 = 1 - W0) coming
from one ``WeightGenerator`` evaluated once per pass.

Parameter names are dot-separated paths ("stage2.block0.norm1.b3.gamma") and
all iteration is in sorted-name order, so two models built from the same seed
are bit-identical and hashes are stable.
"""

from __future__ import annotations

import dataclasses
import hashlib

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclasses.dataclass(frozen=True)
class Architecture:
    """Shape descriptor for the classifier, its branches, and its weight generator."""

    in_channels: int = 3
    num_classes: int = 10
    stem_width: int = 16
    stem_stride: int = 1
    stage_widths: tuple = (16, 32, 64)
    blocks_per_stage: int = 2
    k_branches: int = 5
    strengths: tuple = (0.0, 1.0, 2.0, 4.0, 8.0)
    wg_width: int = 16
    wg_hidden: int = 16
    wg_input: str = "stem"  # "stem" (post-norm stem features) or "image"

    def validate(self):
        if self.k_branches < 2:
            raise ValueError(f"k_branches must be >= 2, got {self.k_branches}")
        if len(self.strengths) != self.k_branches:
            raise ValueError(
                f"strengths {self.strengths} must have one entry per branch (K={self.k_branches})")
        if self.strengths[0] != 0:
            raise ValueError(f"strengths[0] must be 0 (clean branch), got {self.strengths[0]}")
        if any(nxt <= prev for prev, nxt in zip(self.strengths, self.strengths[1:])):
            raise ValueError(f"strengths must be strictly increasing, got {self.strengths}")
        if min(self.stage_widths, default=0) <= 0 or self.stem_width <= 0:
            raise ValueError("stage widths and stem width must be positive")
        if self.blocks_per_stage < 1 or self.in_channels < 1 or self.num_classes < 2:
            raise ValueError("invalid depth/channel/class configuration")
        if self.stem_stride not in (1, 2):
            raise ValueError(f"stem_stride must be 1 or 2, got {self.stem_stride}")
        if self.wg_input not in ("stem", "image"):
            raise ValueError(f"wg_input must be 'stem' or 'image', got {self.wg_input!r}")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        d["strengths"] = list(self.strengths)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["stage_widths"] = tuple(d["stage_widths"])
        d["strengths"] = tuple(float(s) for s in d["strengths"])
        arch = cls(**d)
        arch.validate()
        return arch


FUSED = "fused"


@dataclasses.dataclass
class FusionWeights:
    """Per-sample fusing weights; w1 is exactly 1 - w0."""

    w0: Tensor
    w1: Tensor


class MultiBranchNorm:
    """K parallel batchnorm branches over one convolution output.

    Exactly one branch serves a routed forward; a fused forward blends the
    two outermost branches (frozen running statistics only) with per-sample
    weights.  ``shared=True`` pins every route to branch 0, making the site
    strength-agnostic while keeping K parameter slots.
    """

    def __init__(self, channels: int, k: int, momentum: float = 0.1,
                 eps: float = 1e-5, shared: bool = False):
        if k < 2:
            raise ValueError(f"need at least 2 branches, got {k}")
        self.channels = channels
        self.k = k
        self.momentum = momentum
        self.eps = eps
        self.shared = shared
        self.gamma = [Tensor(np.ones(channels), requires_grad=True) for _ in range(k)]
        self.beta = [Tensor(np.zeros(channels), requires_grad=True) for _ in range(k)]
        self.running_mean = [np.zeros(channels) for _ in range(k)]
        self.running_var = [np.ones(channels) for _ in range(k)]

    def _resolve(self, route: int) -> int:
        if self.shared:
            return 0
        if not isinstance(route, (int, np.integer)) or not 0 <= route < self.k:
            raise ValueError(f"route {route!r} out of range for {self.k} branches")
        return int(route)

    def forward(self, x: Tensor, route: int, training: bool) -> Tensor:
        """Normalize through one branch; update its running stats when training."""
        b = self._resolve(route)
        if not training:
            return self._affine_from_running(x, b)
        out, mean, var = T.batch_norm_train(x, self.gamma[b], self.beta[b], self.eps)
        n = x.size // x.shape[1]  # samples per channel
        unbiased = var * (n / (n - 1)) if n > 1 else var
        m = self.momentum
        self.running_mean[b] = (1 - m) * self.running_mean[b] + m * mean
        self.running_var[b] = (1 - m) * self.running_var[b] + m * unbiased
        return out

    def _affine_from_running(self, x: Tensor, b: int) -> Tensor:
        # y = gamma*(x-mu)/sqrt(var+eps) + beta, folded to one channel affine
        inv = Tensor(1.0 / np.sqrt(self.running_var[b] + self.eps))
        scale = T.mul(self.gamma[b], inv)
        shift = T.sub(self.beta[b], T.mul(scale, Tensor(self.running_mean[b])))
        return T.channel_affine(x, scale, shift)

    def forward_fused(self, x: Tensor, w: FusionWeights) -> Tensor:
        """w0*BN_0(x) + w1*BN_{K-1}(x) on frozen running statistics."""
        if self.shared:
            return self._affine_from_running(x, 0)
        a = self._affine_from_running(x, 0)
        b = self._affine_from_running(x, self.k - 1)
        return T.add(T.per_sample_scale(a, w.w0), T.per_sample_scale(b, w.w1))

    def drop_to_outer(self):
        """Keep only branches 0 and K-1, re-indexed to {0, 1}. Idempotent."""
        if self.k == 2:
            return
        keep = (0, self.k - 1)
        self.gamma = [self.gamma[i] for i in keep]
        self.beta = [self.beta[i] for i in keep]
        self.running_mean = [self.running_mean[i] for i in keep]
        self.running_var = [self.running_var[i] for i in keep]
        self.k = 2

    def named_parameters(self, prefix: str):
        for b in range(self.k):
            yield f"{prefix}.b{b}.gamma", self.gamma[b]
            yield f"{prefix}.b{b}.beta", self.beta[b]

    def named_stats(self, prefix: str):
        for b in range(self.k):
            yield f"{prefix}.b{b}.running_mean", self.running_mean[b]
            yield f"{prefix}.b{b}.running_var", self.running_var[b]

    def load_stat(self, name: str, value: np.ndarray):
        branch, field = name.split(".")
        b = int(branch[1:])
        getattr(self, field)[b] = value.copy()


class Conv2d:
    """Bias-free convolution with He fan-in initialization."""

    def __init__(self, rng, in_c: int, out_c: int, ksize: int, stride: int = 1,
                 padding: int = 0):
        std = np.sqrt(2.0 / (in_c * ksize * ksize))
        self.weight = Tensor(rng.normal(0.0, std, size=(out_c, in_c, ksize, ksize)),
                             requires_grad=True)
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, stride=self.stride, padding=self.padding)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.weight", self.weight


class Linear:
    """x @ W + b with He fan-in initialization (zero_init for heads that must start neutral)."""

    def __init__(self, rng, in_f: int, out_f: int, zero_init: bool = False):
        if zero_init:
            w = np.zeros((in_f, out_f))
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / in_f), size=(in_f, out_f))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_f), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias


class PreactBlock:
    """norm-relu-conv3x3, norm-relu-conv3x3, plus identity or 1x1-projected shortcut.

    The projection, when needed, taps the activated pre-convolution features,
    following the usual pre-activation arrangement.
    """

    def __init__(self, rng, in_c: int, out_c: int, stride: int, k: int):
        self.norm1 = MultiBranchNorm(in_c, k)
        self.conv1 = Conv2d(rng, in_c, out_c, 3, stride=stride, padding=1)
        self.norm2 = MultiBranchNorm(out_c, k)
        self.conv2 = Conv2d(rng, out_c, out_c, 3, stride=1, padding=1)
        if stride != 1 or in_c != out_c:
            self.proj = Conv2d(rng, in_c, out_c, 1, stride=stride)
        else:
            self.proj = None

    def forward(self, x: Tensor, prefix: str, norm_apply) -> Tensor:
        h = T.relu(norm_apply(f"{prefix}.norm1", self.norm1, x))
        shortcut = self.proj.forward(h) if self.proj else x
        h = self.conv1.forward(h)
        h = T.relu(norm_apply(f"{prefix}.norm2", self.norm2, h))
        h = self.conv2.forward(h)
        return T.add(h, shortcut)

    def named_parameters(self, prefix: str):
        yield from self.norm1.named_parameters(f"{prefix}.norm1")
        yield f"{prefix}.conv1.weight", self.conv1.weight
        yield from self.norm2.named_parameters(f"{prefix}.norm2")
        yield f"{prefix}.conv2.weight", self.conv2.weight
        if self.proj:
            yield f"{prefix}.shortcut.weight", self.proj.weight

    def norm_sites(self, prefix: str):
        yield f"{prefix}.norm1", self.norm1
        yield f"{prefix}.norm2", self.norm2


class WeightGenerator:
    """Conv-norm-relu x2, global average pool, linear-relu-linear, sigmoid.

    The final linear layer starts at zero so W0 opens at exactly 0.5.  Its
    norm sites are strength-agnostic (shared) K-branch layers: the generator
    never knows the attack strength.
    """

    def __init__(self, rng, in_c: int, width: int, hidden: int, k: int):
        self.conv1 = Conv2d(rng, in_c, width, 3, stride=2, padding=1)
        self.norm1 = MultiBranchNorm(width, k, shared=True)
        self.conv2 = Conv2d(rng, width, width, 3, stride=2, padding=1)
        self.norm2 = MultiBranchNorm(width, k, shared=True)
        self.fc1 = Linear(rng, width, hidden)
        self.fc2 = Linear(rng, hidden, 1, zero_init=True)
        self.in_c = in_c

    def forward(self, feats: Tensor, training: bool) -> FusionWeights:
        if feats.ndim != 4 or feats.shape[1] != self.in_c:
            raise T.ShapeError(
                f"weight generator expects (N, {self.in_c}, H, W) features, got {feats.shape}")
        n = feats.shape[0]
        h = T.relu(self.norm1.forward(self.conv1.forward(feats), 0, training))
        h = T.relu(self.norm2.forward(self.conv2.forward(h), 0, training))
        h = T.relu(self.fc1.forward(T.global_avg_pool(h)))
        w0 = T.reshape(T.sigmoid(self.fc2.forward(h)), (n,))
        w1 = T.sub(Tensor(np.ones(n)), w0)
        return FusionWeights(w0=w0, w1=w1)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.conv1.weight", self.conv1.weight
        yield from self.norm1.named_parameters(f"{prefix}.norm1")
        yield f"{prefix}.conv2.weight", self.conv2.weight
        yield from self.norm2.named_parameters(f"{prefix}.norm2")
        yield from self.fc1.named_parameters(f"{prefix}.fc1")
        yield from self.fc2.named_parameters(f"{prefix}.fc2")

    def norm_sites(self, prefix: str):
        yield f"{prefix}.norm1", self.norm1
        yield f"{prefix}.norm2", self.norm2


class Model:
    """The K-branch residual classifier plus its weight generator.

    Forward entry points:
      - ``logits(x, route, training)``: branch-routed pass (stage-I training,
        attacks on a specific branch, baselines).
      - ``fused_logits(x, wg_training)``: blend of the outer branches with
        per-sample weights from the generator; backbone statistics frozen.
      - ``forward(x, mode, training)``: guarded general entry; mode is a
        branch index or "fused", and fusion during backbone training is
        rejected (fusion is an inference construct).
    """

    def __init__(self, arch: Architecture, seed: int):
        arch.validate()
        self.arch = arch
        rng = np.random.default_rng(seed)
        k = arch.k_branches
        self.stem_conv = Conv2d(rng, arch.in_channels, arch.stem_width, 3,
                                stride=arch.stem_stride, padding=1)
        self.stem_norm = MultiBranchNorm(arch.stem_width, k, shared=True)
        self.stages = []
        in_c = arch.stem_width
        for si, width in enumerate(arch.stage_widths):
            blocks = []
            for bi in range(arch.blocks_per_stage):
                stride = 2 if (si > 0 and bi == 0) else 1
                blocks.append(PreactBlock(rng, in_c, width, stride, k))
                in_c = width
            self.stages.append(blocks)
        self.head_norm = MultiBranchNorm(in_c, k)
        self.head_linear = Linear(rng, in_c, arch.num_classes)
        wg_in = arch.stem_width if arch.wg_input == "stem" else arch.in_channels
        self.wg = WeightGenerator(rng, wg_in, arch.wg_width, arch.wg_hidden, k)

    # ----- structure walks -------------------------------------------------

    def backbone_norm_sites(self):
        """Normalization sites a routed forward passes, as (path, layer)."""
        yield "stem.norm", self.stem_norm
        for si, blocks in enumerate(self.stages):
            for bi, block in enumerate(blocks):
                yield from block.norm_sites(f"stage{si + 1}.block{bi}")
        yield "head.norm", self.head_norm

    def norm_sites(self):
        """All normalization sites as (path, layer), definition order."""
        yield from self.backbone_norm_sites()
        yield from self.wg.norm_sites("wg")

    def _named_parameters_unsorted(self):
        yield "stem.conv.weight", self.stem_conv.weight
        yield from self.stem_norm.named_parameters("stem.norm")
        for si, blocks in enumerate(self.stages):
            for bi, block in enumerate(blocks):
                yield from block.named_parameters(f"stage{si + 1}.block{bi}")
        yield from self.head_norm.named_parameters("head.norm")
        yield from self.head_linear.named_parameters("head.linear")
        yield from self.wg.named_parameters("wg")

    def named_parameters(self):
        return sorted(self._named_parameters_unsorted())

    def named_stats(self):
        items = []
        for path, site in self.norm_sites():
            items.extend(site.named_stats(path))
        return sorted(items)

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def wg_parameters(self):
        return [t for n, t in self.named_parameters() if n.startswith("wg.")]

    def backbone_parameters(self):
        return [t for n, t in self.named_parameters() if not n.startswith("wg.")]

    def state_items(self):
        """Every persistent array: parameters and running statistics, sorted."""
        items = [(n, t.data) for n, t in self.named_parameters()]
        items.extend(self.named_stats())
        return sorted(items)

    def param_hash(self, prefix: str = "") -> str:
        """SHA-256 over (name, bytes) of state arrays under ``prefix``."""
        h = hashlib.sha256()
        for name, arr in self.state_items():
            if not name.startswith(prefix):
                continue
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def count_parameters(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    # ----- forwards ---------------------------------------------------------

    def _backbone(self, x: Tensor, norm_apply, capture_path=None):
        captured = []

        def apply(path, site, h):
            if path == capture_path:
                captured.append(h)
            return norm_apply(path, site, h)

        h = self.stem_conv.forward(x)
        h = T.relu(apply("stem.norm", self.stem_norm, h))
        stem_out = h
        for si, blocks in enumerate(self.stages):
            for bi, block in enumerate(blocks):
                h = block.forward(h, f"stage{si + 1}.block{bi}", apply)
        h = T.relu(apply("head.norm", self.head_norm, h))
        logits = self.head_linear.forward(T.global_avg_pool(h))
        if capture_path is not None and not captured:
            raise self._unknown_site(capture_path)
        return logits, stem_out, (captured[0] if captured else None)

    def _unknown_site(self, path):
        valid = ", ".join(p for p, _ in self.backbone_norm_sites())
        return ValueError(f"unknown normalization site {path!r}; valid sites: {valid}")

    def logits(self, x: Tensor, route: int, training: bool = False,
               capture: str = None):
        """Branch-routed forward. Returns logits, or (logits, pre-norm features)."""
        def apply(path, site, h):
            return site.forward(h, route, training)

        logits, _, captured = self._backbone(x, apply, capture_path=capture)
        return (logits, captured) if capture is not None else logits

    def fused_logits(self, x: Tensor, wg_training: bool = False):
        """Fused forward: (logits, FusionWeights). Backbone statistics frozen."""
        weights = {}

        def apply(path, site, h):
            return site.forward_fused(h, weights["w"])

        if self.arch.wg_input == "image":
            weights["w"] = self.wg.forward(x, wg_training)
            logits, _, _ = self._backbone(x, apply)
            return logits, weights["w"]

        # stem first (its norm is shared, hence route-free), then the generator
        h = self.stem_conv.forward(x)
        h = T.relu(self.stem_norm._affine_from_running(h, 0))
        weights["w"] = self.wg.forward(h, wg_training)
        for si, blocks in enumerate(self.stages):
            for bi, block in enumerate(blocks):
                h = block.forward(h, f"stage{si + 1}.block{bi}", apply)
        h = T.relu(apply("head.norm", self.head_norm, h))
        logits = self.head_linear.forward(T.global_avg_pool(h))
        return logits, weights["w"]

    def forward(self, x: Tensor, mode, training: bool = False):
        """Guarded general entry: mode is a branch index or FUSED."""
        if mode == FUSED:
            if training:
                raise ValueError(
                    "fused mode is an inference/stage-II construct; "
                    "backbone training must route a single branch")
            return self.fused_logits(x)[0]
        return self.logits(x, route=mode, training=training)

    def drop_to_outer(self):
        """Drop middle branches everywhere, keeping {0, K-1}. Idempotent."""
        for _, site in self.norm_sites():
            site.drop_to_outer()
        if self.arch.k_branches != 2:
            self.arch = dataclasses.replace(
                self.arch, k_branches=2,
                strengths=(self.arch.strengths[0], self.arch.strengths[-1]))

    def load_state(self, arrays: dict):
        """Overwrite parameters and running statistics from a named-array map."""
        sites = dict(self.norm_sites())
        params = dict(self.named_parameters())
        for name, arr in arrays.items():
            if name in params:
                t = params[name]
                if t.shape != arr.shape:
                    raise T.ShapeError(f"load_state {name}: {t.shape} vs {arr.shape}")
                t.data = np.ascontiguousarray(arr, dtype=np.float64)
            else:
                head, _, tail = name.rpartition(".b")
                if not head or head not in sites:
                    raise KeyError(f"unknown state entry {name!r}")
                sites[head].load_stat("b" + tail, np.asarray(arr, dtype=np.float64))
        missing = (set(params) | {n for n, _ in self.named_stats()}) - set(arrays)
        if missing:
            raise KeyError(f"state map missing entries: {sorted(missing)[:5]}...")


def build_model(arch: Architecture, seed: int) -> Model:
    """Deterministically initialize a model from the descriptor and seed."""
    return Model(arch, seed)


def count_parameters(arch: Architecture) -> int:
    """Closed-form parameter count for the descriptor (documented formula).

    conv: 9*in*out (3x3) or in*out (1x1 projections); norm site: 2*K*C;
    linear: in*out + out.  The generator counts its own two convs, two shared
    norm sites, and two linear layers.
    """
    arch.validate()
    k = arch.k_branches
    total = 9 * arch.in_channels * arch.stem_width  # stem conv
    total += 2 * k * arch.stem_width                # stem norm
    in_c = arch.stem_width
    for si, width in enumerate(arch.stage_widths):
        for bi in range(arch.blocks_per_stage):
            stride = 2 if (si > 0 and bi == 0) else 1
            total += 2 * k * in_c                   # norm1
            total += 9 * in_c * width               # conv1
            total += 2 * k * width                  # norm2
            total += 9 * width * width              # conv2
            if stride != 1 or in_c != width:
                total += in_c * width               # 1x1 projection
            in_c = width
    total += 2 * k * in_c                           # head norm
    total += in_c * arch.num_classes + arch.num_classes
    wg_in = arch.stem_width if arch.wg_input == "stem" else arch.in_channels
    total += 9 * wg_in * arch.wg_width + 2 * k * arch.wg_width
    total += 9 * arch.wg_width * arch.wg_width + 2 * k * arch.wg_width
    total += arch.wg_width * arch.wg_hidden + arch.wg_hidden
    total += arch.wg_hidden * 1 + 1
    return total

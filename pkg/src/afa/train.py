"""Two-stage training: the K-branch backbone first, then the weight generator.

Stage I optimizes the backbone with one clean pass through branch 0 plus one
adversarial pass per nonzero strength, each routed through its own
normalization branch, all folded into a single loss and one optimizer step
per batch.  Stage II drops the middle branches, freezes every backbone
parameter, and fits only the weight generator with plain cross-entropy on
mixed-strength batches; the strength is used to build the batch and never
shown to the model.  Both stages are deterministic functions of
(data, config), so replays reproduce parameter hashes exactly.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import math

import numpy as np

from . import attack, data, nn
from . import tensor as T

PGD_AT = "pgd_at"
TRADES = "trades"

# evaluation-grid-aligned strength schedules per branch count
STRENGTH_SCHEDULES = {
    2: (0.0, 8.0),
    3: (0.0, 2.0, 8.0),
    4: (0.0, 2.0, 4.0, 8.0),
    5: (0.0, 1.0, 2.0, 4.0, 8.0),
    9: (0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0),
}


def strength_schedule(k_branches: int) -> tuple:
    if k_branches not in STRENGTH_SCHEDULES:
        raise ValueError(f"no strength schedule for K={k_branches}; "
                         f"supported: {sorted(STRENGTH_SCHEDULES)}")
    return STRENGTH_SCHEDULES[k_branches]


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the last-good checkpoint path (or None)."""

    def __init__(self, message: str, checkpoint_path: str = None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class FreezeViolation(RuntimeError):
    """A parameter outside the weight generator moved during stage II."""


def _check_schedule(epochs: int, decay_epochs) -> tuple:
    decay = tuple(int(d) for d in decay_epochs)
    if any(b <= a for a, b in zip(decay, decay[1:])):
        raise ValueError(f"decay_epochs must be strictly increasing, got {decay}")
    if any(not 1 <= d < epochs for d in decay):
        raise ValueError(f"decay_epochs must lie in [1, epochs), got {decay} "
                         f"for {epochs} epochs")
    return decay


@dataclasses.dataclass
class StageOneConfig:
    """Hyperparameters of the backbone stage."""

    k_branches: int = 5
    strengths: tuple = STRENGTH_SCHEDULES[5]
    adv_loss: str = PGD_AT
    trades_lambda: float = 6.0
    lr: float = 0.1
    epochs: int = 20
    lr_decay_factor: float = 0.9
    decay_epochs: tuple = (15, 18)
    batch_size: int = 64
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    attack_steps: int = 10
    augment: bool = False
    val_size: int = 256

    def validate(self) -> "StageOneConfig":
        xs = tuple(float(s) for s in self.strengths)
        if self.k_branches < 2:
            raise ValueError(f"k_branches must be >= 2, got {self.k_branches}")
        if len(xs) != self.k_branches:
            raise ValueError(f"{len(xs)} strengths for K={self.k_branches}")
        if xs[0] != 0.0:
            raise ValueError(f"strengths[0] must be 0, got {xs[0]}")
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise ValueError(f"strengths must be strictly increasing, got {xs}")
        if self.adv_loss not in (PGD_AT, TRADES):
            raise ValueError(f"adv_loss must be {PGD_AT} or {TRADES}, got {self.adv_loss!r}")
        if self.trades_lambda <= 0:
            raise ValueError(f"trades_lambda must be > 0, got {self.trades_lambda}")
        if self.epochs < 1 or self.batch_size < 1 or self.attack_steps < 1:
            raise ValueError("epochs, batch_size, and attack_steps must be >= 1")
        if self.lr <= 0 or not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr must be > 0 and lr_decay_factor in (0, 1]")
        _check_schedule(self.epochs, self.decay_epochs)
        return self


@dataclasses.dataclass
class StageTwoConfig:
    """Hyperparameters of the weight-generator stage (no weight decay)."""

    lr: float = 0.1
    epochs: int = 5
    lr_decay_factor: float = 0.9
    decay_epochs: tuple = (3,)
    batch_size: int = 64
    seed: int = 0
    momentum: float = 0.9
    attack_steps: int = 10
    continuous_prob: float = 0.25
    sampler_grid: tuple = None  # None: the stage-I strength schedule of the model
    augment: bool = False
    val_size: int = 256
    val_strengths: tuple = (0.0, 8.0)

    def validate(self) -> "StageTwoConfig":
        if self.epochs < 1 or self.batch_size < 1 or self.attack_steps < 1:
            raise ValueError("epochs, batch_size, and attack_steps must be >= 1")
        if self.lr <= 0 or not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr must be > 0 and lr_decay_factor in (0, 1]")
        if not 0 <= self.continuous_prob <= 1:
            raise ValueError(f"continuous_prob must be in [0, 1], got {self.continuous_prob}")
        _check_schedule(self.epochs, self.decay_epochs)
        return self


@dataclasses.dataclass
class LossReport:
    """One epoch of accounting: per-branch mean losses and validation accuracy."""

    epoch: int
    lr: float
    branch_losses: list  # index 0 is the clean term
    total: float
    val_accuracy: dict   # strength -> accuracy

    def check(self, tol: float = 1e-9):
        if abs(self.total - sum(self.branch_losses)) > tol:
            raise AssertionError(f"loss accounting broken at epoch {self.epoch}: "
                                 f"{self.total} vs {sum(self.branch_losses)}")
        return self


class StrengthSampler:
    """Per-batch attack strength: a discrete grid plus a continuous slice.

    With probability ``continuous_prob`` the strength is uniform real over
    [0, high], otherwise uniform over the grid.  The continuous slice hands
    the generator strengths the backbone never saw.
    """

    def __init__(self, grid, continuous_prob: float = 0.25, high: float = None):
        self.grid = tuple(float(g) for g in grid)
        if not self.grid:
            raise ValueError("sampler grid is empty")
        self.continuous_prob = float(continuous_prob)
        self.high = float(high if high is not None else max(self.grid))

    def sample(self, rng) -> float:
        if self.continuous_prob > 0 and rng.random() < self.continuous_prob:
            return float(rng.uniform(0.0, self.high))
        return self.grid[int(rng.integers(len(self.grid)))]


class SGD:
    """Momentum SGD over named tensors; decay is added to the gradient."""

    def __init__(self, named_params, lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = list(named_params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data -= self.lr * v

    def moment_arrays(self) -> dict:
        return {f"velocity.{name}": v.copy() for name, v in self.velocity.items()}

    def load_moments(self, arrays: dict):
        for name, v in self.velocity.items():
            key = f"velocity.{name}"
            if key in arrays:
                if arrays[key].shape != v.shape:
                    raise ValueError(f"moment {key} has shape {arrays[key].shape}, "
                                     f"want {v.shape}")
                v[...] = arrays[key]


def lr_at(base_lr: float, factor: float, decay_epochs, epoch: int) -> float:
    """Learning rate for a 1-indexed epoch: decayed once per passed milestone."""
    return base_lr * factor ** sum(1 for d in decay_epochs if epoch > d)


def _attack_seed(seed: int, epoch: int, iteration: int, k: int = 0) -> int:
    return ((seed + 1) * 1_000_003 + epoch * 8191 + iteration * 127 + k) % (2 ** 31)


def _named_backbone(model: nn.Model):
    return [(n, p) for n, p in model.named_parameters() if not n.startswith("wg.")]


def _named_wg(model: nn.Model):
    return [(n, p) for n, p in model.named_parameters() if n.startswith("wg.")]


def _adv_term(model: nn.Model, x, y, k: int, eps: float, cfg: StageOneConfig,
              seed: int, clean_logits):
    """The branch-k adversarial loss term of the stage-I objective."""
    spec = attack.make_spec("pgd", eps, steps=cfg.attack_steps)
    adv = attack.run_attack(model, x, y, spec, mode=k, seed=seed).adversarial
    adv_logits = model.logits(adv, route=k, training=True)
    if cfg.adv_loss == PGD_AT:
        return T.softmax_cross_entropy(adv_logits, y)
    kl = T.softmax_kl_divergence(clean_logits, adv_logits)
    return T.mul(kl, T.Tensor(cfg.trades_lambda))


def stage1_loss(model: nn.Model, x, y, eps: float, cfg: StageOneConfig,
                attack_seed: int = 0):
    """Single-strength view of the stage-I objective.

    Returns (loss Tensor, parts dict).  The loss is the clean cross-entropy
    through branch 0 plus, for eps > 0, the adversarial term of the branch
    whose schedule entry equals eps.
    """
    cfg.validate()
    if eps not in cfg.strengths:
        raise ValueError(f"eps {eps} is not in the strength schedule {cfg.strengths}")
    clean_logits = model.logits(T.Tensor(np.asarray(x, dtype=np.float64)),
                                route=0, training=True)
    l_clean = T.softmax_cross_entropy(clean_logits, y)
    if eps == 0:
        return l_clean, {"clean": float(l_clean.data), "adv": 0.0}
    k = cfg.strengths.index(eps)
    l_adv = _adv_term(model, x, y, k, eps, cfg, attack_seed, clean_logits)
    total = T.add(l_clean, l_adv)
    return total, {"clean": float(l_clean.data), "adv": float(l_adv.data)}


def _routed_accuracy(model: nn.Model, x, y, eps: float, mode, steps: int,
                     seed: int) -> float:
    """Accuracy on PGD examples of strength eps along the given path."""
    if eps > 0:
        spec = attack.make_spec("pgd", eps, steps=steps)
        x = attack.run_attack(model, x, y, spec, mode=mode, seed=seed).adversarial
    return attack.accuracy(model, x, y, mode=mode)


def _validation_row(model, val_ds, strengths, mode_of, steps, seed):
    accs = {}
    for i, eps in enumerate(strengths):
        accs[float(eps)] = _routed_accuracy(model, val_ds.images, val_ds.labels,
                                            float(eps), mode_of(i, eps), steps,
                                            seed + i)
    return accs


class _MetricsWriter:
    """Incremental CSV emitter: header once, one row per epoch, LF endings."""

    def __init__(self, path: str, fieldnames):
        self.path = path
        self.fieldnames = list(fieldnames)
        with open(path, "w", newline="", encoding="utf-8") as f:
            csv.writer(f, lineterminator="\n").writerow(self.fieldnames)

    def row(self, values: dict):
        with open(self.path, "a", newline="", encoding="utf-8") as f:
            csv.writer(f, lineterminator="\n").writerow(
                [values[k] for k in self.fieldnames])


def _stage1_fields(strengths):
    k = len(strengths)
    return (["epoch", "lr"] + [f"l_{i}" for i in range(1, k + 1)] + ["sum_lk"]
            + [f"val_acc_eps{_fmt_eps(e)}" for e in strengths])


def _fmt_eps(eps: float) -> str:
    return f"{eps:g}"


def _snapshot(model: nn.Model, opt: SGD) -> dict:
    tensors = {n: a.copy() for n, a in model.state_items()}
    for name, arr in opt.moment_arrays().items():
        tensors[f"opt.{name}"] = arr
    return tensors


def train_stage1(model: nn.Model, train_ds, val_ds, cfg: StageOneConfig,
                 ckpt_path: str = None, metrics_path: str = None,
                 hook=None) -> list:
    """Optimize the backbone per the K-path schedule; returns epoch reports.

    ``hook(epoch, iteration, parts, total)`` receives every iteration's loss
    terms for instrumentation.  A non-finite loss aborts with the last
    completed epoch saved next to ``ckpt_path``.
    """
    cfg.validate()
    arch = model.arch
    if arch.k_branches != cfg.k_branches or tuple(arch.strengths) != tuple(
            float(s) for s in cfg.strengths):
        raise ValueError(f"model branches {arch.k_branches}/{arch.strengths} do not "
                         f"match config {cfg.k_branches}/{cfg.strengths}")
    strengths = tuple(float(s) for s in cfg.strengths)
    k_total = cfg.k_branches
    opt = SGD(_named_backbone(model), cfg.lr, cfg.momentum, cfg.weight_decay)
    writer = (_MetricsWriter(metrics_path, _stage1_fields(strengths))
              if metrics_path else None)
    val = val_ds.take(min(cfg.val_size, len(val_ds)))
    history = []
    last_good = None

    for epoch in range(1, cfg.epochs + 1):
        opt.lr = lr_at(cfg.lr, cfg.lr_decay_factor, cfg.decay_epochs, epoch)
        sums = np.zeros(k_total)
        total_sum = 0.0
        n_batches = 0
        for it, (xb, yb) in enumerate(
                data.batches(train_ds, cfg.batch_size, seed=cfg.seed + 9973 * epoch)):
            if cfg.augment:
                xb = data.augment(xb, np.random.default_rng((cfg.seed, epoch, it)))
            opt.zero_grad()
            clean_logits = model.logits(T.Tensor(xb), route=0, training=True)
            terms = [T.softmax_cross_entropy(clean_logits, yb)]
            for k in range(1, k_total):
                terms.append(_adv_term(model, xb, yb, k, strengths[k], cfg,
                                       _attack_seed(cfg.seed, epoch, it, k),
                                       clean_logits))
            loss = terms[0]
            for t in terms[1:]:
                loss = T.add(loss, t)
            total = float(loss.data)
            parts = [float(t.data) for t in terms]
            if not math.isfinite(total):
                path = None
                if ckpt_path and last_good is not None:
                    path = ckpt_path + ".last_good"
                    data.save_checkpoint(path, arch, last_good["tensors"],
                                         last_good["state"])
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} iteration {it}"
                    + (f"; last good state in {path}" if path else ""), path)
            T.backward(loss)
            opt.step()
            if hook:
                hook(epoch, it, parts, total)
            sums += parts
            total_sum += total
            n_batches += 1

        means = sums / n_batches
        accs = _validation_row(model, val, strengths,
                               mode_of=lambda i, e: i, steps=cfg.attack_steps,
                               seed=_attack_seed(cfg.seed, epoch, 999_999))
        report = LossReport(epoch, opt.lr, means.tolist(), float(total_sum / n_batches),
                            accs).check()
        history.append(report)
        last_good = {"tensors": _snapshot(model, opt),
                     "state": {"stage": 1, "epoch": epoch, "seed": cfg.seed}}
        if writer:
            row = {"epoch": epoch, "lr": opt.lr, "sum_lk": float(means[1:].sum())}
            for i, m in enumerate(means, start=1):
                row[f"l_{i}"] = float(m)
            for eps in strengths:
                row[f"val_acc_eps{_fmt_eps(eps)}"] = accs[eps]
            writer.row(row)
        if ckpt_path:
            data.save_checkpoint(ckpt_path, arch, last_good["tensors"],
                                 last_good["state"])
    return history


def drop_branches(model: nn.Model) -> nn.Model:
    """Keep only the outermost normalization branches, re-indexed {0, 1}."""
    model.drop_to_outer()
    return model


def _backbone_digest(model: nn.Model) -> str:
    h = hashlib.sha256()
    for name, arr in model.state_items():
        if not name.startswith("wg."):
            h.update(name.encode())
            h.update(arr.tobytes())
    return h.hexdigest()


def train_stage2(model: nn.Model, train_ds, val_ds, cfg: StageTwoConfig,
                 ckpt_path: str = None, metrics_path: str = None,
                 hook=None) -> list:
    """Fit the weight generator against the frozen two-branch backbone.

    The middle branches are dropped first (a no-op if already dropped).  The
    per-batch strength drives example generation only.  Any movement of a
    non-generator parameter aborts the run.
    """
    cfg.validate()
    sampler_grid = cfg.sampler_grid or model.arch.strengths
    sampler = StrengthSampler(sampler_grid, cfg.continuous_prob)
    drop_branches(model)
    frozen_digest = _backbone_digest(model)
    wg_params = _named_wg(model)
    opt = SGD(wg_params, cfg.lr, cfg.momentum, weight_decay=0.0)
    fields = (["epoch", "lr", "loss"]
              + [f"val_acc_eps{_fmt_eps(e)}" for e in cfg.val_strengths])
    writer = _MetricsWriter(metrics_path, fields) if metrics_path else None
    val = val_ds.take(min(cfg.val_size, len(val_ds)))
    backbone = [p for _, p in _named_backbone(model)]
    rng_eps = np.random.default_rng((cfg.seed, 0xE95))
    history = []
    flags = [p.requires_grad for p in backbone]
    for p in backbone:
        p.requires_grad = False
    try:
        for epoch in range(1, cfg.epochs + 1):
            opt.lr = lr_at(cfg.lr, cfg.lr_decay_factor, cfg.decay_epochs, epoch)
            loss_sum, n_batches = 0.0, 0
            for it, (xb, yb) in enumerate(
                    data.batches(train_ds, cfg.batch_size, seed=cfg.seed + 131 * epoch)):
                if cfg.augment:
                    xb = data.augment(xb, np.random.default_rng((cfg.seed, epoch, it)))
                eps = sampler.sample(rng_eps)
                if eps > 0:
                    spec = attack.make_spec("pgd", eps, steps=cfg.attack_steps)
                    x_in = attack.run_attack(model, xb, yb, spec, mode=nn.FUSED,
                                             seed=_attack_seed(cfg.seed, epoch, it)
                                             ).adversarial
                else:
                    x_in = T.Tensor(xb)
                opt.zero_grad()
                logits, _ = model.fused_logits(x_in, wg_training=True)
                loss = T.softmax_cross_entropy(logits, yb)
                total = float(loss.data)
                if not math.isfinite(total):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} iteration {it}")
                T.backward(loss)
                grad_norm = math.sqrt(sum(float((p.grad ** 2).sum())
                                          for _, p in wg_params if p.grad is not None))
                opt.step()
                if _backbone_digest(model) != frozen_digest:
                    raise FreezeViolation(
                        f"non-generator parameter moved at epoch {epoch} iteration {it}")
                if hook:
                    hook(epoch, it, eps, total, grad_norm)
                loss_sum += total
                n_batches += 1
            mean_loss = loss_sum / n_batches
            accs = _validation_row(model, val, cfg.val_strengths,
                                   mode_of=lambda i, e: nn.FUSED,
                                   steps=cfg.attack_steps,
                                   seed=_attack_seed(cfg.seed, epoch, 999_999))
            history.append(LossReport(epoch, opt.lr, [mean_loss], mean_loss, accs).check())
            if writer:
                row = {"epoch": epoch, "lr": opt.lr, "loss": mean_loss}
                for eps in cfg.val_strengths:
                    row[f"val_acc_eps{_fmt_eps(eps)}"] = accs[float(eps)]
                writer.row(row)
            if ckpt_path:
                data.save_checkpoint(ckpt_path, model.arch, _snapshot(model, opt),
                                     {"stage": 2, "epoch": epoch, "seed": cfg.seed})
    finally:
        for p, f in zip(backbone, flags):
            p.requires_grad = f
    return history


# ---------------------------------------------------------------------------
# reference models for comparison runs


@dataclasses.dataclass
class BaselineConfig:
    """Single-path training: plain or adversarial cross-entropy on branch 0."""

    adversarial: bool = False
    eps: float = 8.0
    attack_steps: int = 10
    lr: float = 0.1
    epochs: int = 20
    lr_decay_factor: float = 0.9
    decay_epochs: tuple = (15, 18)
    batch_size: int = 64
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    augment: bool = False
    val_size: int = 256

    def validate(self) -> "BaselineConfig":
        if self.epochs < 1 or self.batch_size < 1 or self.attack_steps < 1:
            raise ValueError("epochs, batch_size, and attack_steps must be >= 1")
        if self.adversarial and self.eps <= 0:
            raise ValueError(f"adversarial baseline needs eps > 0, got {self.eps}")
        _check_schedule(self.epochs, self.decay_epochs)
        return self


def train_baseline(model: nn.Model, train_ds, val_ds, cfg: BaselineConfig,
                   ckpt_path: str = None, metrics_path: str = None) -> list:
    """Train through branch 0 only: the no-defense reference and surrogates."""
    cfg.validate()
    opt = SGD(_named_backbone(model), cfg.lr, cfg.momentum, cfg.weight_decay)
    val = val_ds.take(min(cfg.val_size, len(val_ds)))
    val_eps = (0.0, cfg.eps) if cfg.adversarial else (0.0,)
    fields = ["epoch", "lr", "loss"] + [f"val_acc_eps{_fmt_eps(e)}" for e in val_eps]
    writer = _MetricsWriter(metrics_path, fields) if metrics_path else None
    history = []
    for epoch in range(1, cfg.epochs + 1):
        opt.lr = lr_at(cfg.lr, cfg.lr_decay_factor, cfg.decay_epochs, epoch)
        loss_sum, n_batches = 0.0, 0
        for it, (xb, yb) in enumerate(
                data.batches(train_ds, cfg.batch_size, seed=cfg.seed + 7919 * epoch)):
            if cfg.augment:
                xb = data.augment(xb, np.random.default_rng((cfg.seed, epoch, it)))
            if cfg.adversarial:
                spec = attack.make_spec("pgd", cfg.eps, steps=cfg.attack_steps)
                x_in = attack.run_attack(model, xb, yb, spec, mode=0,
                                         seed=_attack_seed(cfg.seed, epoch, it)
                                         ).adversarial
            else:
                x_in = T.Tensor(xb)
            opt.zero_grad()
            loss = T.softmax_cross_entropy(model.logits(x_in, route=0, training=True), yb)
            total = float(loss.data)
            if not math.isfinite(total):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} iteration {it}")
            T.backward(loss)
            opt.step()
            loss_sum += total
            n_batches += 1
        mean_loss = loss_sum / n_batches
        accs = _validation_row(model, val, val_eps, mode_of=lambda i, e: 0,
                               steps=cfg.attack_steps,
                               seed=_attack_seed(cfg.seed, epoch, 999_999))
        history.append(LossReport(epoch, opt.lr, [mean_loss], mean_loss, accs).check())
        if writer:
            row = {"epoch": epoch, "lr": opt.lr, "loss": mean_loss}
            for eps in val_eps:
                row[f"val_acc_eps{_fmt_eps(eps)}"] = accs[float(eps)]
            writer.row(row)
        if ckpt_path:
            data.save_checkpoint(ckpt_path, model.arch, _snapshot(model, opt),
                                 {"stage": "baseline", "epoch": epoch, "seed": cfg.seed})
    return history


# ---------------------------------------------------------------------------
# schedule presets (desk-scale by default; long-run variants kept available)


def desk_stage1(k_branches: int = 4, **overrides) -> StageOneConfig:
    base = dict(k_branches=k_branches, strengths=strength_schedule(k_branches),
                epochs=20, decay_epochs=(15, 18), attack_steps=4)
    base.update(overrides)
    return StageOneConfig(**base).validate()


def long_stage1(k_branches: int = 5, **overrides) -> StageOneConfig:
    base = dict(k_branches=k_branches, strengths=strength_schedule(k_branches),
                epochs=100, decay_epochs=(75, 90), attack_steps=10)
    base.update(overrides)
    return StageOneConfig(**base).validate()


def desk_stage2(**overrides) -> StageTwoConfig:
    base = dict(epochs=5, decay_epochs=(3,), attack_steps=4)
    base.update(overrides)
    return StageTwoConfig(**base).validate()


def long_stage2(**overrides) -> StageTwoConfig:
    base = dict(epochs=20, decay_epochs=(12,), attack_steps=10)
    base.update(overrides)
    return StageTwoConfig(**base).validate()

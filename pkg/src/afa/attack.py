"""Gradient attacks: FGSM, iterative FGSM, PGD, margin-loss CW, and the
generator-aware adaptive attack.

All methods share one projected-ascent runner: iterate x <- clip(x + a*sign(g))
inside the L-inf ball of radius eps/255 around the clean batch, intersected
with [0,1].  Budgets are in pixel units of 1/255.  Attacks always use
eval-mode normalization (running statistics) of whichever path the defense
serves at inference, freeze every model parameter for the duration, and are
deterministic given (model snapshot, spec, seed).
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor

METHODS = ("fgsm", "ifgsm", "pgd", "cw", "pgd_adaptive")

# CE:BCE weightings swept by the adaptive evaluation protocol
PAPER_RATIOS = ((10.0, 1.0), (5.0, 1.0), (2.0, 1.0), (1.0, 1.0),
                (1.0, 2.0), (1.0, 5.0), (1.0, 10.0))


@dataclasses.dataclass(frozen=True)
class AttackSpec:
    """Validated description of one attack run (budgets in 1/255 pixel units)."""

    method: str
    epsilon: float
    steps: int
    step_size: float
    random_start: bool
    adaptive_ratio: tuple = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown attack method {self.method!r}; valid: {METHODS}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.epsilon > 0 and self.step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if self.method == "fgsm" and (self.steps != 1 or self.random_start):
            raise ValueError("fgsm implies steps == 1 and no random start")
        if self.method == "pgd_adaptive":
            if self.adaptive_ratio is None:
                raise ValueError("pgd_adaptive requires an adaptive_ratio (r_ce, r_bce)")
            r_ce, r_bce = self.adaptive_ratio
            if r_ce < 0 or r_bce < 0 or (r_ce == 0 and r_bce == 0):
                raise ValueError(f"bad adaptive_ratio {self.adaptive_ratio}")
        elif self.adaptive_ratio is not None:
            raise ValueError(f"adaptive_ratio is only valid for pgd_adaptive, not {self.method}")


def make_spec(method: str, epsilon: float, steps: int = None, step_size: float = None,
              random_start: bool = None, adaptive_ratio=None) -> AttackSpec:
    """AttackSpec with per-method defaults: fgsm is one full-budget step; the
    iterative methods default to 10 steps of eps/4 (random start except ifgsm)."""
    if method == "fgsm":
        steps = 1 if steps is None else steps
        step_size = epsilon if step_size is None else step_size
        random_start = False if random_start is None else random_start
    else:
        steps = 10 if steps is None else steps
        step_size = epsilon / 4.0 if step_size is None else step_size
        random_start = (method != "ifgsm") if random_start is None else random_start
    if adaptive_ratio is not None:
        adaptive_ratio = (float(adaptive_ratio[0]), float(adaptive_ratio[1]))
    return AttackSpec(method=method, epsilon=float(epsilon), steps=int(steps),
                      step_size=float(step_size), random_start=bool(random_start),
                      adaptive_ratio=adaptive_ratio)


@dataclasses.dataclass
class AdvBatch:
    """Clean/adversarial pair with the labels and spec that produced it."""

    clean: Tensor
    adversarial: Tensor
    labels: np.ndarray
    spec: AttackSpec

    def max_deviation(self) -> float:
        return float(np.abs(self.adversarial.data - self.clean.data).max())

    def validate(self):
        eps = self.spec.epsilon / 255.0
        if self.max_deviation() > eps + 1e-9:
            raise RuntimeError(f"budget violated: {self.max_deviation()} > {eps}")
        lo, hi = self.adversarial.data.min(), self.adversarial.data.max()
        if lo < 0.0 or hi > 1.0:
            raise RuntimeError(f"box violated: [{lo}, {hi}]")


def _as_images(x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim != 4:
        raise T.ShapeError(f"attack input must be NCHW, got {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("attack input must lie in [0, 1]")
    return arr


def _ascend(objective, x0: np.ndarray, spec: AttackSpec, rng, trace=None) -> np.ndarray:
    """Shared runner: maximize ``objective`` over the budget ball around x0.

    ``trace``, when given a list, receives a copy of every iterate (the
    random start included) for instrumented soundness checks.
    """
    eps = spec.epsilon / 255.0
    if eps == 0.0:
        return x0.copy()
    alpha = spec.step_size / 255.0
    if spec.random_start:
        adv = x0 + rng.uniform(-eps, eps, size=x0.shape)
        np.clip(adv, 0.0, 1.0, out=adv)
    else:
        adv = x0.copy()
    if trace is not None:
        trace.append(adv.copy())
    lo, hi = x0 - eps, x0 + eps
    for _ in range(spec.steps):
        xt = Tensor(adv, requires_grad=True)
        T.backward(objective(xt))
        adv = adv + alpha * np.sign(xt.grad)
        np.clip(adv, lo, hi, out=adv)
        np.clip(adv, 0.0, 1.0, out=adv)
        if trace is not None:
            trace.append(adv.copy())
    return adv


def _objective_for(model: nn.Model, spec: AttackSpec, y: np.ndarray, mode):
    """Scalar the runner ascends; mode is a branch index or nn.FUSED."""
    def logits_of(xt):
        if mode == nn.FUSED:
            return model.fused_logits(xt)[0]
        return model.logits(xt, route=mode, training=False)

    if spec.method == "cw":
        # descend the true-class margin
        return lambda xt: T.mul(T.margin_loss(logits_of(xt), y, kappa=0.0), Tensor(-1.0))
    if spec.method == "pgd_adaptive":
        if mode != nn.FUSED:
            raise ValueError("pgd_adaptive targets the fused model (it needs W0)")
        r_ce, r_bce = spec.adaptive_ratio

        def joint(xt):
            logits, w = model.fused_logits(xt)
            ce = T.softmax_cross_entropy(logits, y)
            if r_bce == 0.0:  # degenerates to plain PGD, same graph
                return T.mul(ce, Tensor(r_ce)) if r_ce != 1.0 else ce
            # ascending BCE(W0, 0) drives W0 toward 1: the clean-branch extreme
            bce = T.binary_cross_entropy(w.w0, 0.0)
            return T.add(T.mul(ce, Tensor(r_ce)), T.mul(bce, Tensor(r_bce)))

        return joint
    return lambda xt: T.softmax_cross_entropy(logits_of(xt), y)


def run_attack(model: nn.Model, x, y, spec: AttackSpec, mode=nn.FUSED,
               seed: int = 0, trace=None) -> AdvBatch:
    """Generate an adversarial batch for ``model`` along ``mode``'s path."""
    x0 = _as_images(x).copy()
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    objective = _objective_for(model, spec, y, mode)
    with T.frozen(model.parameters()):
        adv = _ascend(objective, x0, spec, rng, trace=trace)
    batch = AdvBatch(clean=Tensor(x0), adversarial=Tensor(adv), labels=y, spec=spec)
    batch.validate()
    return batch


def fgsm(model, x, y, epsilon: float, mode=nn.FUSED, seed: int = 0) -> AdvBatch:
    return run_attack(model, x, y, make_spec("fgsm", epsilon), mode=mode, seed=seed)


def ifgsm(model, x, y, spec: AttackSpec, mode=nn.FUSED, seed: int = 0) -> AdvBatch:
    return run_attack(model, x, y, spec, mode=mode, seed=seed)


def pgd(model, x, y, spec: AttackSpec, mode=nn.FUSED, seed: int = 0) -> AdvBatch:
    return run_attack(model, x, y, spec, mode=mode, seed=seed)


def cw(model, x, y, spec: AttackSpec, mode=nn.FUSED, seed: int = 0) -> AdvBatch:
    return run_attack(model, x, y, spec, mode=mode, seed=seed)


def pgd_adaptive(model, x, y, spec: AttackSpec, seed: int = 0) -> AdvBatch:
    return run_attack(model, x, y, spec, mode=nn.FUSED, seed=seed)


def accuracy(model: nn.Model, x, y, mode=nn.FUSED) -> float:
    """Fraction of correct predictions along the given path (no gradients)."""
    y = np.asarray(y)
    with T.no_grad():
        if mode == nn.FUSED:
            logits = model.fused_logits(_wrap_images(x))[0]
        else:
            logits = model.logits(_wrap_images(x), route=mode, training=False)
    return float((logits.data.argmax(axis=1) == y).mean())


def _wrap_images(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def adaptive_sweep(model: nn.Model, x, y, epsilon: float, steps: int = None,
                   step_size: float = None, seed: int = 0,
                   ratios=PAPER_RATIOS):
    """Run the adaptive attack at every CE:BCE ratio; report the worst case.

    Every ratio uses the same seed, so runs are paired.  Returns
    (rows, min_accuracy, worst_ratio) where rows are (ratio, accuracy) in
    sweep order.
    """
    y = np.asarray(y)
    rows = []
    for ratio in ratios:
        spec = make_spec("pgd_adaptive", epsilon, steps=steps, step_size=step_size,
                         adaptive_ratio=ratio)
        batch = pgd_adaptive(model, x, y, spec, seed=seed)
        rows.append((ratio, accuracy(model, batch.adversarial, y)))
    min_acc = min(acc for _, acc in rows)
    worst = next(ratio for ratio, acc in rows if acc == min_acc)
    return rows, min_acc, worst

"""Measurement harness: accuracy grids, feature-statistics probes, the
fusion-weight curve, black-box transfer runs, and the branch-count ablation.

Every report here is a pure function of (model state, dataset, spec, seed);
reruns with the same inputs reproduce every number exactly.  CSV emitters
write comma-separated files with a header row, UTF-8, LF line endings.
"""

from __future__ import annotations

import csv
import dataclasses
import time

import numpy as np
from scipy import stats as sp_stats

from . import attack, nn, train
from . import tensor as T

GRID = (0.0, 1.0, 2.0, 4.0, 8.0)
GRID_METHODS = ("fgsm", "ifgsm", "pgd", "cw")
ABLATION_KS = (2, 3, 5, 9)


@dataclasses.dataclass
class EvalReport:
    """Accuracy per strength plus the arithmetic mean of the cells."""

    method: str
    model_id: str
    seed: int
    accuracies: dict       # strength -> accuracy, in grid order
    average: float
    elapsed: float = 0.0

    def check(self, tol: float = 1e-12) -> "EvalReport":
        cells = list(self.accuracies.values())
        if any(not 0.0 <= a <= 1.0 for a in cells):
            raise AssertionError(f"accuracy outside [0,1]: {self.accuracies}")
        if abs(self.average - sum(cells) / len(cells)) > tol:
            raise AssertionError(f"average {self.average} does not match cells {cells}")
        return self


@dataclasses.dataclass
class FeatureStatsProbe:
    """Per-channel first and second moments of one site's pre-norm input."""

    layer: str
    eps_list: tuple
    means: np.ndarray      # (len(eps_list), channels)
    variances: np.ndarray  # same shape, population variance
    sample_count: int

    def check(self) -> "FeatureStatsProbe":
        if self.variances.min() < 0.0:
            raise AssertionError("negative channel variance")
        return self


@dataclasses.dataclass
class FusionCurve:
    eps_list: tuple
    w1_mean: np.ndarray
    w1_std: np.ndarray

    def check(self) -> "FusionCurve":
        for arr in (self.w1_mean, self.w1_std):
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise AssertionError("fusion weight statistics outside [0,1]")
        return self


def _model_id(model: nn.Model) -> str:
    return model.param_hash()[:12]


def _iter_eval_batches(ds, batch_size: int):
    for start in range(0, len(ds), batch_size):
        yield ds.images[start:start + batch_size], ds.labels[start:start + batch_size]


def _grid_hits(attack_model, eval_model, x, y, method: str, eps: float,
               steps: int, attack_mode, eval_mode, seed: int) -> int:
    """Correct-prediction count, kept integral so ratios stay exact."""
    if eps > 0:
        spec = attack.make_spec(method, eps, steps=None if method == "fgsm" else steps)
        x = attack.run_attack(attack_model, x, y, spec, mode=attack_mode,
                              seed=seed).adversarial
    return round(attack.accuracy(eval_model, x, y, mode=eval_mode) * len(y))


def eval_grid(model: nn.Model, ds, attack_method: str = "pgd", eps_grid=GRID,
              steps: int = 20, mode=nn.FUSED, seed: int = 0,
              batch_size: int = 256) -> EvalReport:
    """White-box accuracy over the strength grid along one inference path.

    The strength shapes the attack only; the classifier sees bare images.
    The 0 row is plain clean accuracy.
    """
    if attack_method not in GRID_METHODS:
        raise ValueError(f"attack_method must be one of {GRID_METHODS}; the adaptive "
                         f"attack is swept separately over its loss ratios")
    t0 = time.perf_counter()
    accs = {}
    for i, eps in enumerate(float(e) for e in eps_grid):
        hits, total = 0, 0
        for bi, (xb, yb) in enumerate(_iter_eval_batches(ds, batch_size)):
            hits += _grid_hits(model, model, xb, yb, attack_method, eps, steps,
                               mode, mode, seed + 1009 * i + bi)
            total += len(yb)
        accs[eps] = hits / total
    cells = list(accs.values())
    return EvalReport(attack_method, _model_id(model), seed, accs,
                      sum(cells) / len(cells), time.perf_counter() - t0).check()


def default_probe_path(model: nn.Model) -> str:
    """Mid-network probe point: the site that receives stage 2's output."""
    paths = [p for p, _ in model.backbone_norm_sites()]
    preferred = "stage3.block0.norm1"
    if preferred in paths:
        return preferred
    stage_entry_norms = [p for p in paths if p.endswith("block0.norm1")]
    return stage_entry_norms[-1] if stage_entry_norms else paths[-1]


def probe_feature_stats(model: nn.Model, ds, layer: str = None, eps_list=None,
                        steps: int = 10, seed: int = 0,
                        batch_size: int = 256) -> FeatureStatsProbe:
    """Per-channel pre-norm statistics per strength, each routed to its branch.

    The observational protocol of the multi-branch backbone: strength eps is
    attacked and classified through the branch trained at eps, so the probe
    sees each branch's own input distribution.
    """
    strengths = tuple(float(s) for s in model.arch.strengths)
    eps_list = strengths if eps_list is None else tuple(float(e) for e in eps_list)
    for eps in eps_list:
        if eps not in strengths:
            raise ValueError(f"eps {eps} has no trained branch; schedule: {strengths}")
    layer = layer or default_probe_path(model)
    valid = [p for p, _ in model.backbone_norm_sites()]
    if layer not in valid:
        raise ValueError(f"unknown normalization site {layer!r}; "
                         f"valid sites: {', '.join(valid)}")
    means, variances = [], []
    count = 0
    for i, eps in enumerate(eps_list):
        route = strengths.index(eps)
        s, ss, n = 0.0, 0.0, 0
        for bi, (xb, yb) in enumerate(_iter_eval_batches(ds, batch_size)):
            if eps > 0:
                spec = attack.make_spec("pgd", eps, steps=steps)
                xb = attack.run_attack(model, xb, yb, spec, mode=route,
                                       seed=seed + 677 * i + bi).adversarial
            with T.no_grad():
                _, captured = model.logits(attack._wrap_images(xb), route=route,
                                           training=False, capture=layer)
            h = captured.data
            s = s + h.sum(axis=(0, 2, 3))
            ss = ss + (h * h).sum(axis=(0, 2, 3))
            n += h.shape[0] * h.shape[2] * h.shape[3]
        mean = s / n
        means.append(mean)
        variances.append(np.maximum(ss / n - mean ** 2, 0.0))
        count = n
    return FeatureStatsProbe(layer, eps_list, np.stack(means), np.stack(variances),
                             count).check()


def monotonicity_score(probe: FeatureStatsProbe) -> float:
    """Fraction of channels whose mean moves one way across the strengths."""
    m = probe.means
    if m.shape[0] < 2:
        return 1.0
    diffs = np.diff(m, axis=0)
    monotone = np.logical_or((diffs >= 0).all(axis=0), (diffs <= 0).all(axis=0))
    return float(monotone.mean())


def mean_jumps(probe: FeatureStatsProbe) -> list:
    """Largest per-channel mean change for each adjacent strength pair."""
    jumps = []
    for i in range(len(probe.eps_list) - 1):
        delta = np.abs(probe.means[i + 1] - probe.means[i]).max()
        jumps.append(((probe.eps_list[i], probe.eps_list[i + 1]), float(delta)))
    return jumps


def fusion_curve(model: nn.Model, ds, eps_samples=GRID, steps: int = 10,
                 seed: int = 0, batch_size: int = 256) -> FusionCurve:
    """Mean and spread of the adversarial-branch weight W1 per strength."""
    if model.arch.k_branches != 2:
        raise ValueError("fusion weights are read from the two-branch stage-II "
                         "model; drop the middle branches first")
    eps_samples = tuple(float(e) for e in eps_samples)
    w_mean, w_std = [], []
    for i, eps in enumerate(eps_samples):
        chunks = []
        for bi, (xb, yb) in enumerate(_iter_eval_batches(ds, batch_size)):
            if eps > 0:
                spec = attack.make_spec("pgd", eps, steps=steps)
                xb = attack.run_attack(model, xb, yb, spec, mode=nn.FUSED,
                                       seed=seed + 389 * i + bi).adversarial
            with T.no_grad():
                _, w = model.fused_logits(attack._wrap_images(xb))
            chunks.append(w.w1.data)
        w1 = np.concatenate(chunks)
        w_mean.append(float(w1.mean()))
        w_std.append(float(w1.std()))
    return FusionCurve(eps_samples, np.array(w_mean), np.array(w_std)).check()


def fusion_spearman(curve: FusionCurve) -> float:
    """Rank correlation between strength and the mean adversarial weight."""
    return float(sp_stats.spearmanr(curve.eps_list, curve.w1_mean)[0])


def blackbox_eval(defense: nn.Model, surrogate: nn.Model, ds,
                  attack_method: str = "pgd", eps_grid=GRID, steps: int = 20,
                  seed: int = 0, batch_size: int = 256,
                  defense_mode=nn.FUSED, surrogate_mode=0) -> EvalReport:
    """Transfer evaluation: adversarial examples come from the surrogate only."""
    if defense.param_hash() == surrogate.param_hash():
        raise ValueError("surrogate parameters equal the defense; transfer "
                         "evaluation needs an independently trained source")
    if attack_method not in GRID_METHODS:
        raise ValueError(f"attack_method must be one of {GRID_METHODS}")
    t0 = time.perf_counter()
    accs = {}
    for i, eps in enumerate(float(e) for e in eps_grid):
        hits, total = 0, 0
        for bi, (xb, yb) in enumerate(_iter_eval_batches(ds, batch_size)):
            hits += _grid_hits(surrogate, defense, xb, yb, attack_method, eps,
                               steps, surrogate_mode, defense_mode,
                               seed + 1009 * i + bi)
            total += len(yb)
        accs[eps] = hits / total
    cells = list(accs.values())
    return EvalReport(f"blackbox_{attack_method}", _model_id(defense), seed, accs,
                      sum(cells) / len(cells), time.perf_counter() - t0).check()


def k_ablation(train_ds, test_ds, k_values, arch_base: nn.Architecture,
               seed: int = 0, stage1_overrides: dict = None,
               stage2_overrides: dict = None, eval_eps=GRID,
               eval_steps: int = 20, eval_batch: int = 256) -> dict:
    """Full two-stage pipeline per branch count; same data and seed throughout."""
    ks = tuple(int(k) for k in k_values)
    if not set(ks) <= set(ABLATION_KS):
        raise ValueError(f"k_values must be a subset of {ABLATION_KS}, got {ks}")
    reports = {}
    for k in ks:
        schedule = train.strength_schedule(k)
        arch = dataclasses.replace(arch_base, k_branches=k, strengths=schedule)
        model = nn.build_model(arch, seed)
        cfg1 = train.desk_stage1(k_branches=k, seed=seed, **(stage1_overrides or {}))
        train.train_stage1(model, train_ds, test_ds, cfg1)
        cfg2 = train.desk_stage2(seed=seed, sampler_grid=schedule,
                                 **(stage2_overrides or {}))
        train.train_stage2(model, train_ds, test_ds, cfg2)
        reports[k] = eval_grid(model, test_ds, "pgd", eval_eps, steps=eval_steps,
                               seed=seed, batch_size=eval_batch)
    return reports


# ---------------------------------------------------------------------------
# CSV emitters


def _write_rows(path: str, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_eval_grid(path: str, report: EvalReport):
    rows = [[f"{eps:g}", repr(acc)] for eps, acc in report.accuracies.items()]
    rows.append(["avg", repr(report.average)])
    _write_rows(path, ["eps", "accuracy"], rows)


def write_feature_stats(path: str, probe: FeatureStatsProbe):
    rows = []
    for i, eps in enumerate(probe.eps_list):
        for c in range(probe.means.shape[1]):
            rows.append([f"{eps:g}", c, repr(float(probe.means[i, c])),
                         repr(float(probe.variances[i, c]))])
    _write_rows(path, ["eps", "channel", "mean", "var"], rows)


def write_fusion_curve(path: str, curve: FusionCurve):
    rows = [[f"{eps:g}", repr(float(m)), repr(float(s))]
            for eps, m, s in zip(curve.eps_list, curve.w1_mean, curve.w1_std)]
    _write_rows(path, ["eps", "w1_mean", "w1_std"], rows)


def write_k_ablation(path: str, reports: dict):
    rows = []
    for k in sorted(reports):
        rep = reports[k]
        for eps, acc in rep.accuracies.items():
            rows.append([k, f"{eps:g}", repr(acc)])
        rows.append([k, "avg", repr(rep.average)])
    _write_rows(path, ["k", "eps", "accuracy"], rows)
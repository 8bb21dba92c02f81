"""Command-line entry points: config-driven, replayable pipeline runs.

Every command reads an optional flat key=value config file, overlays any
command-line flags, materializes the settings it actually uses, and writes
that resolved config next to its outputs.  Re-running a command from its
resolved config reproduces the outputs (byte-level for checkpoints,
value-level for the CSVs).  Commands never modify their inputs; everything
they write goes under the output directory.

Exit codes: 0 success, 1 invalid config or arguments, 2 missing or unreadable
data, 3 training diverged (non-finite loss).
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import attack, data, evaluate, nn, train

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3

COMMANDS = ("train-stage1", "train-stage2", "attack", "eval", "probe-stats",
            "ablate-k")
CLI_METHODS = ("fgsm", "ifgsm", "pgd", "cw", "pgd-adaptive")
DATASETS = ("MNIST", "CIFAR10")

ARCH_PRESETS = {
    # smallest thing that still has two stages, three branches, and a WG;
    # meant for smoke tests and demos, not for measurements
    "tiny": nn.Architecture(
        in_channels=1, num_classes=10, stem_width=4, stem_stride=2,
        stage_widths=(4, 6), blocks_per_stage=1, k_branches=3,
        strengths=(0.0, 2.0, 8.0), wg_width=4, wg_hidden=6),
    "tiny_rgb": nn.Architecture(
        in_channels=3, num_classes=10, stem_width=4, stem_stride=2,
        stage_widths=(4, 6), blocks_per_stage=1, k_branches=3,
        strengths=(0.0, 2.0, 8.0), wg_width=4, wg_hidden=6),
    # desk-scale models: minutes per run on one CPU core
    "mnist_desk": nn.Architecture(
        in_channels=1, num_classes=10, stem_width=8, stem_stride=2,
        stage_widths=(8, 16, 32), blocks_per_stage=1, k_branches=4,
        strengths=(0.0, 2.0, 4.0, 8.0), wg_width=8, wg_hidden=16),
    "cifar_desk": nn.Architecture(
        in_channels=3, num_classes=10, stem_width=8, stem_stride=2,
        stage_widths=(8, 16, 32), blocks_per_stage=1, k_branches=3,
        strengths=(0.0, 2.0, 8.0), wg_width=8, wg_hidden=16),
    # full-scale wide-residual shape; documented for completeness, far
    # beyond desk budgets
    "cifar_wide": nn.Architecture(
        in_channels=3, num_classes=10, stem_width=16, stem_stride=1,
        stage_widths=(160, 320, 640), blocks_per_stage=4, k_branches=5,
        strengths=(0.0, 1.0, 2.0, 4.0, 8.0), wg_width=16, wg_hidden=16),
}

DEFAULT_PRESET = {"MNIST": "mnist_desk", "CIFAR10": "cifar_desk"}


class ConfigError(Exception):
    """Bad config file, flag, or checkpoint; maps to exit code 1."""


class DataMissing(Exception):
    """Dataset root or files absent or unreadable; maps to exit code 2."""


# ---------------------------------------------------------------------------
# config file handling


def parse_config_text(text: str, source: str = "config") -> dict:
    """Flat `key = value` lines; # starts a comment line; sections are just
    dotted key prefixes."""
    values = {}
    for lineno, line in enumerate(text.split("\n"), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, eq, val = stripped.partition("=")
        key = key.strip()
        if not eq or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        values[key] = val.strip()
    return values


def _fmt_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_fmt_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclasses.dataclass
class RunConfig:
    """The resolved settings of one command, as a flat string map."""

    command: str
    values: dict

    def get(self, key: str, default: str = None) -> str:
        return self.values.get(key, default)

    def require(self, key: str, hint: str) -> str:
        if key not in self.values:
            raise ConfigError(f"missing {key!r} ({hint})")
        return self.values[key]

    def put(self, key: str, value):
        if value is not None:
            self.values[key] = _fmt_value(value)

    def _typed(self, key, default, convert, kind):
        raw = self.values.get(key)
        if raw is None:
            return default
        try:
            return convert(raw)
        except (ValueError, TypeError):
            raise ConfigError(f"config key {key}: expected {kind}, got {raw!r}")

    def get_int(self, key, default=None):
        return self._typed(key, default, int, "an integer")

    def get_float(self, key, default=None):
        return self._typed(key, default, float, "a number")

    def get_bool(self, key, default=None):
        table = {"true": True, "1": True, "yes": True,
                 "false": False, "0": False, "no": False}
        return self._typed(key, default, lambda s: table[s.lower()], "a boolean")

    def get_floats(self, key, default=None):
        conv = lambda s: tuple(float(p) for p in s.split(",") if p.strip() != "")
        return self._typed(key, default, conv, "comma-separated numbers")

    def get_ints(self, key, default=None):
        conv = lambda s: tuple(int(p) for p in s.split(",") if p.strip() != "")
        return self._typed(key, default, conv, "comma-separated integers")

    def write(self, path: str):
        lines = [f"command = {self.command}"]
        lines += [f"{k} = {self.values[k]}" for k in sorted(self.values)]
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
        os.replace(tmp, path)


def resolve(command: str, args: argparse.Namespace, flag_keys: dict) -> RunConfig:
    values = {}
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as f:
                text = f.read()
        except OSError as e:
            raise ConfigError(f"cannot read config file: {e}")
        values = parse_config_text(text, source=args.config)
    values.pop("command", None)
    for flag, key in flag_keys.items():
        flag_value = getattr(args, flag, None)
        if flag_value is not None:
            values[key] = str(flag_value)
    rc = RunConfig(command, values)
    rc.put("seed", rc.get_int("seed", 0))
    rc.put("out", rc.get("out", os.path.join("afa_runs", command)))
    return rc


# ---------------------------------------------------------------------------
# shared resolution steps


def _dataset_name(rc: RunConfig) -> str:
    name = rc.get("dataset.name", "MNIST").upper()
    if name not in DATASETS:
        raise ConfigError(f"unknown dataset {name!r}; valid: {', '.join(DATASETS)}")
    rc.put("dataset.name", name)
    return name


def _data_dir(rc: RunConfig) -> str:
    path = rc.get("dataset.dir") or os.environ.get("AFA_DATA_DIR")
    if not path:
        raise DataMissing("no data directory (use --data-dir, dataset.dir, "
                          "or the AFA_DATA_DIR environment variable)")
    rc.put("dataset.dir", path)
    return path


def _load_split(rc: RunConfig, split: str):
    name = _dataset_name(rc)
    root = _data_dir(rc)
    loader = data.load_mnist if name == "MNIST" else data.load_cifar10
    try:
        ds = loader(root, split)
    except (FileNotFoundError, data.DataFormatError) as e:
        raise DataMissing(str(e))
    limit = rc.get_int(f"dataset.{split}_limit", 0)
    if limit:
        ds = ds.take(min(limit, len(ds)))
    return ds


def _arch(rc: RunConfig) -> nn.Architecture:
    preset = rc.get("arch.preset") or DEFAULT_PRESET[_dataset_name(rc)]
    if preset not in ARCH_PRESETS:
        raise ConfigError(f"unknown arch preset {preset!r}; "
                          f"valid: {', '.join(sorted(ARCH_PRESETS))}")
    rc.put("arch.preset", preset)
    arch = ARCH_PRESETS[preset]
    tweaks = {}
    for field, getter in (("stem_width", rc.get_int), ("stem_stride", rc.get_int),
                          ("blocks_per_stage", rc.get_int), ("wg_width", rc.get_int),
                          ("wg_hidden", rc.get_int), ("stage_widths", rc.get_ints)):
        value = getter(f"arch.{field}")
        if value is not None:
            tweaks[field] = value
    return dataclasses.replace(arch, **tweaks) if tweaks else arch


def _structural_match(a: nn.Architecture, b: nn.Architecture) -> bool:
    """Equality on everything except the branch plan (stage II changes that)."""
    skip = {"k_branches", "strengths"}
    return all(getattr(a, f.name) == getattr(b, f.name)
               for f in dataclasses.fields(nn.Architecture) if f.name not in skip)


def _section_overrides(rc: RunConfig, section: str, fields: dict,
                       exclude=()) -> dict:
    out = {}
    for name, getter in fields.items():
        if name in exclude:
            continue
        value = getter(f"{section}.{name}")
        if value is not None:
            out[name] = value
    return out


def _stage1_fields(rc: RunConfig) -> dict:
    return {
        "epochs": rc.get_int, "lr": rc.get_float,
        "lr_decay_factor": rc.get_float, "decay_epochs": rc.get_ints,
        "batch_size": rc.get_int, "momentum": rc.get_float,
        "weight_decay": rc.get_float, "attack_steps": rc.get_int,
        "augment": rc.get_bool, "val_size": rc.get_int,
        "adv_loss": rc.get, "trades_lambda": rc.get_float,
        "strengths": rc.get_floats,
    }


def _stage2_fields(rc: RunConfig) -> dict:
    return {
        "epochs": rc.get_int, "lr": rc.get_float,
        "lr_decay_factor": rc.get_float, "decay_epochs": rc.get_ints,
        "batch_size": rc.get_int, "momentum": rc.get_float,
        "attack_steps": rc.get_int, "continuous_prob": rc.get_float,
        "sampler_grid": rc.get_floats, "augment": rc.get_bool,
        "val_size": rc.get_int, "val_strengths": rc.get_floats,
    }


def _preset_base(rc: RunConfig, section: str, desk, long):
    name = rc.get(f"{section}.preset", "desk")
    if name not in ("desk", "long"):
        raise ConfigError(f"{section}.preset must be desk or long, got {name!r}")
    rc.put(f"{section}.preset", name)
    return desk if name == "desk" else long


def stage1_config(rc: RunConfig, exclude=()) -> train.StageOneConfig:
    base_fn = _preset_base(rc, "stage1", train.desk_stage1, train.long_stage1)
    k = rc.get_int("stage1.k_branches")
    try:
        base = base_fn() if k is None else base_fn(k_branches=k)
        overrides = _section_overrides(rc, "stage1", _stage1_fields(rc), exclude)
        cfg = dataclasses.replace(base, seed=rc.get_int("seed", 0), **overrides)
        cfg.validate()
    except ValueError as e:
        raise ConfigError(f"stage1: {e}")
    for f in dataclasses.fields(cfg):
        if f.name != "seed":
            rc.put(f"stage1.{f.name}", getattr(cfg, f.name))
    return cfg


def stage2_config(rc: RunConfig, exclude=()) -> train.StageTwoConfig:
    base_fn = _preset_base(rc, "stage2", train.desk_stage2, train.long_stage2)
    try:
        overrides = _section_overrides(rc, "stage2", _stage2_fields(rc), exclude)
        cfg = dataclasses.replace(base_fn(), seed=rc.get_int("seed", 0), **overrides)
        cfg.validate()
    except ValueError as e:
        raise ConfigError(f"stage2: {e}")
    for f in dataclasses.fields(cfg):
        if f.name != "seed" and getattr(cfg, f.name) is not None:
            rc.put(f"stage2.{f.name}", getattr(cfg, f.name))
    return cfg


def _attack_method(rc: RunConfig, key: str = "attack.method",
                   default: str = None) -> str:
    name = rc.get(key, default)
    if name is None:
        raise ConfigError(f"missing {key} (use --method)")
    if name.replace("_", "-") not in CLI_METHODS:
        raise ConfigError(f"unknown attack {name!r}; "
                          f"valid: {', '.join(CLI_METHODS)}")
    name = name.replace("-", "_")
    rc.put(key, name)
    return name


def _parse_mode(rc: RunConfig, key: str):
    raw = rc.get(key, "fused")
    rc.put(key, raw)
    if raw == "fused":
        return nn.FUSED
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"config key {key}: expected 'fused' or a branch "
                          f"index, got {raw!r}")


def _load_ckpt_model(rc: RunConfig):
    path = rc.require("ckpt", "use --ckpt")
    try:
        model, ckpt = data.load_model(path)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {path}")
    except data.CheckpointError as e:
        raise ConfigError(f"bad checkpoint {path}: {e}")
    preset = rc.get("arch.preset")
    if preset:
        if preset not in ARCH_PRESETS:
            raise ConfigError(f"unknown arch preset {preset!r}; "
                              f"valid: {', '.join(sorted(ARCH_PRESETS))}")
        if not _structural_match(ARCH_PRESETS[preset], model.arch):
            raise ConfigError(f"checkpoint/architecture mismatch: {path} does "
                              f"not have the {preset!r} shape")
    return model, ckpt


def _prepare_out(rc: RunConfig) -> str:
    out = rc.get("out")
    os.makedirs(out, exist_ok=True)
    rc.write(os.path.join(out, "resolved_config"))
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_train_stage1(rc: RunConfig) -> int:
    cfg = stage1_config(rc)
    arch = dataclasses.replace(_arch(rc), k_branches=cfg.k_branches,
                               strengths=cfg.strengths)
    train_ds = _load_split(rc, "train")
    val_ds = _load_split(rc, "test")
    if train_ds.images.shape[1] != arch.in_channels:
        raise ConfigError(f"arch expects {arch.in_channels}-channel input, "
                          f"dataset {train_ds.name} has {train_ds.images.shape[1]}")
    out = _prepare_out(rc)
    model = nn.build_model(arch, seed=cfg.seed)
    history = train.train_stage1(
        model, train_ds, val_ds, cfg,
        ckpt_path=os.path.join(out, "stage1.ckpt"),
        metrics_path=os.path.join(out, "stage1_metrics.csv"))
    for rep in history:
        accs = " ".join(f"@{eps:g} {acc:.4f}" for eps, acc in rep.val_accuracy.items())
        print(f"epoch {rep.epoch}/{cfg.epochs} lr {rep.lr:g} "
              f"loss {rep.total:.4f} val {accs}")
    print(f"wrote {os.path.join(out, 'stage1.ckpt')}")
    return EXIT_OK


def cmd_train_stage2(rc: RunConfig) -> int:
    cfg = stage2_config(rc)
    model, _ = _load_ckpt_model(rc)
    train_ds = _load_split(rc, "train")
    val_ds = _load_split(rc, "test")
    if train_ds.images.shape[1] != model.arch.in_channels:
        raise ConfigError(f"checkpoint expects {model.arch.in_channels}-channel "
                          f"input, dataset has {train_ds.images.shape[1]}")
    out = _prepare_out(rc)
    history = train.train_stage2(
        model, train_ds, val_ds, cfg,
        ckpt_path=os.path.join(out, "stage2.ckpt"),
        metrics_path=os.path.join(out, "stage2_metrics.csv"))
    for rep in history:
        accs = " ".join(f"@{eps:g} {acc:.4f}" for eps, acc in rep.val_accuracy.items())
        print(f"epoch {rep.epoch}/{cfg.epochs} lr {rep.lr:g} "
              f"loss {rep.total:.4f} val {accs}")
    print(f"wrote {os.path.join(out, 'stage2.ckpt')}")
    return EXIT_OK


def cmd_attack(rc: RunConfig) -> int:
    model, _ = _load_ckpt_model(rc)
    method = _attack_method(rc)
    mode = _parse_mode(rc, "attack.mode")
    ratio = None
    if method == "pgd_adaptive":
        raw = rc.get("attack.ratio", "1:1")
        try:
            r_ce, r_bce = (float(p) for p in raw.split(":"))
        except ValueError:
            raise ConfigError(f"attack.ratio must look like '1:1', got {raw!r}")
        ratio = (r_ce, r_bce)
        rc.put("attack.ratio", raw)
    try:
        spec = attack.make_spec(method, rc.get_float("attack.eps", 8.0),
                                steps=rc.get_int("attack.steps"),
                                step_size=rc.get_float("attack.step_size"),
                                adaptive_ratio=ratio)
    except ValueError as e:
        raise ConfigError(str(e))
    for field in ("eps", "steps", "step_size"):
        rc.put(f"attack.{field}",
               getattr(spec, field if field != "eps" else "epsilon"))
    ds = _load_split(rc, "test")
    out = _prepare_out(rc)
    seed = rc.get_int("seed", 0)

    batch = attack.run_attack(model, ds.images, ds.labels, spec, mode=mode,
                              seed=seed)
    pixels = np.rint(batch.adversarial.data * 255.0).astype(np.uint8)
    if pixels.shape[1] == 1:
        data.write_idx_images(os.path.join(out, "adv-images-idx3-ubyte"),
                              pixels[:, 0])
        data.write_idx_labels(os.path.join(out, "adv-labels-idx1-ubyte"),
                              ds.labels)
    else:
        data.write_cifar10(os.path.join(out, "adv_batch.bin"), pixels, ds.labels)
    acc = attack.accuracy(model, batch.adversarial, ds.labels, mode=mode)
    report = evaluate.EvalReport(method, model.param_hash()[:12], seed,
                                 {spec.epsilon: acc}, acc)
    evaluate.write_eval_grid(os.path.join(out, "eval_grid.csv"), report)
    print(f"{method} eps {spec.epsilon:g}: accuracy {acc:.4f} "
          f"({len(ds)} images attacked)")
    return EXIT_OK


def cmd_eval(rc: RunConfig) -> int:
    model, _ = _load_ckpt_model(rc)
    method = _attack_method(rc, default="pgd")
    ds = _load_split(rc, "test")
    seed = rc.get_int("seed", 0)
    batch_size = rc.get_int("eval.batch_size", 256)
    rc.put("eval.batch_size", batch_size)

    if method == "pgd_adaptive":
        eps = rc.get_float("attack.eps")
        if eps is None:
            grid = rc.get_floats("eval.eps", ())
            eps = grid[0] if len(grid) == 1 else 8.0
        steps = rc.get_int("attack.steps", 10)
        rc.put("attack.eps", eps)
        rc.put("attack.steps", steps)
        out = _prepare_out(rc)
        rows, min_acc, worst = attack.adaptive_sweep(
            model, ds.images, ds.labels, eps, steps=steps, seed=seed)
        csv_rows = [(r_ce, r_bce, acc) for (r_ce, r_bce), acc in rows]
        evaluate._write_rows(os.path.join(out, "adaptive_sweep.csv"),
                             ("r_ce", "r_bce", "accuracy"), csv_rows)
        print(f"adaptive sweep at eps {eps:g}: min accuracy {min_acc:.4f} "
              f"at ratio {worst[0]:g}:{worst[1]:g}")
        return EXIT_OK

    eps_grid = rc.get_floats("eval.eps", evaluate.GRID)
    steps = rc.get_int("attack.steps", 20)
    mode = _parse_mode(rc, "eval.mode")
    rc.put("eval.eps", eps_grid)
    rc.put("attack.steps", steps)
    out = _prepare_out(rc)
    try:
        report = evaluate.eval_grid(model, ds, method, eps_grid, steps=steps,
                                    mode=mode, seed=seed, batch_size=batch_size)
    except ValueError as e:
        raise ConfigError(str(e))
    evaluate.write_eval_grid(os.path.join(out, "eval_grid.csv"), report)
    for eps, acc in report.accuracies.items():
        print(f"eps {eps:g}: accuracy {acc:.4f}")
    print(f"grid average {report.average:.4f}")
    return EXIT_OK


def cmd_probe_stats(rc: RunConfig) -> int:
    model, _ = _load_ckpt_model(rc)
    ds = _load_split(rc, "test")
    seed = rc.get_int("seed", 0)
    steps = rc.get_int("attack.steps", 10)
    batch_size = rc.get_int("eval.batch_size", 256)
    layer = rc.get("probe.layer") or evaluate.default_probe_path(model)
    eps_list = rc.get_floats("probe.eps", model.arch.strengths)
    rc.put("attack.steps", steps)
    rc.put("eval.batch_size", batch_size)
    rc.put("probe.layer", layer)
    rc.put("probe.eps", eps_list)
    out = _prepare_out(rc)
    try:
        probe = evaluate.probe_feature_stats(model, ds, layer=layer,
                                             eps_list=eps_list, steps=steps,
                                             seed=seed, batch_size=batch_size)
    except ValueError as e:
        raise ConfigError(str(e))
    evaluate.write_feature_stats(os.path.join(out, "feature_stats.csv"), probe)
    print(f"feature statistics at {layer}: monotonicity "
          f"{evaluate.monotonicity_score(probe):.3f} over {probe.means.shape[1]} "
          f"channels")
    if model.arch.k_branches == 2:
        curve = evaluate.fusion_curve(model, ds,
                                      eps_samples=rc.get_floats("eval.eps",
                                                                evaluate.GRID),
                                      steps=steps, seed=seed,
                                      batch_size=batch_size)
        evaluate.write_fusion_curve(os.path.join(out, "fusion_curve.csv"), curve)
        print(f"fusion curve: spearman {evaluate.fusion_spearman(curve):.3f}")
    return EXIT_OK


def cmd_ablate_k(rc: RunConfig) -> int:
    k_values = rc.get_ints("ablate.k", evaluate.ABLATION_KS)
    rc.put("ablate.k", k_values)
    arch = _arch(rc)
    train_ds = _load_split(rc, "train")
    test_ds = _load_split(rc, "test")
    seed = rc.get_int("seed", 0)
    eval_eps = rc.get_floats("eval.eps", evaluate.GRID)
    steps = rc.get_int("attack.steps", 20)
    batch_size = rc.get_int("eval.batch_size", 256)
    rc.put("eval.eps", eval_eps)
    rc.put("attack.steps", steps)
    rc.put("eval.batch_size", batch_size)
    # the branch plan is swept per K, so those two keys stay out of the bases
    s1 = _section_overrides(rc, "stage1", _stage1_fields(rc),
                            exclude=("strengths",))
    s2 = _section_overrides(rc, "stage2", _stage2_fields(rc),
                            exclude=("sampler_grid", "val_strengths"))
    out = _prepare_out(rc)
    try:
        reports = evaluate.k_ablation(train_ds, test_ds, k_values, arch,
                                      seed=seed, stage1_overrides=s1,
                                      stage2_overrides=s2, eval_eps=eval_eps,
                                      eval_steps=steps, eval_batch=batch_size)
    except ValueError as e:
        raise ConfigError(str(e))
    evaluate.write_k_ablation(os.path.join(out, "k_ablation.csv"), reports)
    for k in sorted(reports):
        print(f"K={k}: grid average {reports[k].average:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _add_common(p: _Parser):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--seed", type=int, help="master seed (overrides config)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--data-dir", help="dataset root (else AFA_DATA_DIR)")
    p.add_argument("--ckpt", help="checkpoint to load")


def _add_attack_flags(p: _Parser, eps_help: str):
    p.add_argument("--steps", type=int, help="attack iterations")
    p.add_argument("--step-size", type=float, help="per-step budget, 1/255 units")
    p.add_argument("--eps", help=eps_help)


COMMON_KEYS = {"seed": "seed", "out": "out", "data_dir": "dataset.dir",
               "ckpt": "ckpt"}


def build_parser() -> _Parser:
    parser = _Parser(prog="afa", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        _add_common(p)
        if name == "attack":
            p.add_argument("--method", help="fgsm | ifgsm | pgd | cw | pgd-adaptive")
            _add_attack_flags(p, "perturbation budget, 1/255 units")
        elif name == "eval":
            p.add_argument("--attack", help="attack method for the grid")
            _add_attack_flags(p, "comma-separated budgets, e.g. 0,1,2,4,8")
        elif name == "probe-stats":
            p.add_argument("--eps", help="comma-separated probe strengths")
            p.add_argument("--layer", help="normalization site to tap")
        elif name == "ablate-k":
            p.add_argument("--k", help="comma-separated branch counts")
    return parser


FLAG_KEYS = {
    "train-stage1": dict(COMMON_KEYS),
    "train-stage2": dict(COMMON_KEYS),
    "attack": dict(COMMON_KEYS, method="attack.method", eps="attack.eps",
                   steps="attack.steps", step_size="attack.step_size"),
    "eval": dict(COMMON_KEYS, attack="attack.method", eps="eval.eps",
                 steps="attack.steps", step_size="attack.step_size"),
    "probe-stats": dict(COMMON_KEYS, eps="probe.eps", layer="probe.layer"),
    "ablate-k": dict(COMMON_KEYS, k="ablate.k"),
}

DISPATCH = {
    "train-stage1": cmd_train_stage1,
    "train-stage2": cmd_train_stage2,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "probe-stats": cmd_probe_stats,
    "ablate-k": cmd_ablate_k,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        rc = resolve(args.command, args, FLAG_KEYS[args.command])
        return DISPATCH[args.command](rc)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataMissing as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except train.TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())

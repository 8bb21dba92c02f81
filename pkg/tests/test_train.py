"""Two-stage training loop tests: losses, schedules, freezing, divergence."""

import math
import os

import numpy as np
import pytest

import afa.attack as attack
import afa.data as D
import afa.nn as nn
import afa.tensor as T
import afa.train as tr

from toys import TINY, tiny_model, warmed_model


def tiny_ds(n=24, seed=0, hw=8, arch=TINY):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, size=(n, arch.in_channels, hw, hw))
    y = rng.integers(0, arch.num_classes, size=n).astype(np.int64)
    return D.Dataset(x, y, "train", "MNIST")


def tiny_cfg(**overrides):
    base = dict(k_branches=3, strengths=(0.0, 2.0, 8.0), epochs=2, decay_epochs=(),
                lr=0.05, batch_size=8, attack_steps=2, val_size=8, seed=5)
    base.update(overrides)
    return tr.StageOneConfig(**base).validate()


# ---------------------------------------------------------------------------
# configuration and schedule


@pytest.mark.parametrize("bad", [
    dict(strengths=(1.0, 2.0, 8.0)),                      # does not start at 0
    dict(strengths=(0.0, 8.0, 2.0)),                      # not increasing
    dict(strengths=(0.0, 2.0)),                           # length != K
    dict(adv_loss="free_at"),
    dict(adv_loss=tr.TRADES, trades_lambda=0.0),
    dict(decay_epochs=(1, 1)),
    dict(decay_epochs=(2,)),                              # not < epochs
    dict(k_branches=1, strengths=(0.0,)),
    dict(lr=0.0),
    dict(lr_decay_factor=1.5),
])
def test_stage1_config_rejections(bad):
    with pytest.raises(ValueError):
        tiny_cfg(**bad)


def test_stage2_config_rejections():
    with pytest.raises(ValueError):
        tr.StageTwoConfig(continuous_prob=1.5).validate()
    with pytest.raises(ValueError):
        tr.StageTwoConfig(epochs=3, decay_epochs=(3,)).validate()
    with pytest.raises(ValueError):
        tr.StageTwoConfig(lr=-1.0).validate()


def test_learning_rate_schedule_values():
    assert tr.lr_at(0.1, 0.9, (75, 90), 91) == pytest.approx(0.081, abs=1e-15)
    assert tr.lr_at(0.1, 0.9, (75, 90), 75) == 0.1
    assert tr.lr_at(0.1, 0.9, (75, 90), 76) == pytest.approx(0.09)
    assert tr.lr_at(0.1, 0.9, (), 50) == 0.1


def test_strength_schedules_cover_supported_branch_counts():
    assert tr.strength_schedule(2) == (0.0, 8.0)
    assert tr.strength_schedule(3) == (0.0, 2.0, 8.0)
    assert tr.strength_schedule(4) == (0.0, 2.0, 4.0, 8.0)
    assert tr.strength_schedule(5) == (0.0, 1.0, 2.0, 4.0, 8.0)
    assert len(tr.strength_schedule(9)) == 9
    with pytest.raises(ValueError, match="supported"):
        tr.strength_schedule(7)


# ---------------------------------------------------------------------------
# the stage-I objective


def test_stage1_loss_eps_zero_is_exactly_clean_ce():
    a, b = tiny_model(seed=4), tiny_model(seed=4)
    ds = tiny_ds()
    cfg = tiny_cfg()
    loss, parts = tr.stage1_loss(a, ds.images[:8], ds.labels[:8], 0.0, cfg)
    manual = T.softmax_cross_entropy(
        b.logits(T.Tensor(ds.images[:8]), route=0, training=True), ds.labels[:8])
    assert float(loss.data) == float(manual.data)
    assert parts["adv"] == 0.0 and parts["clean"] == float(loss.data)


def test_stage1_loss_rejects_strength_outside_schedule():
    with pytest.raises(ValueError, match="schedule"):
        tr.stage1_loss(tiny_model(seed=4), tiny_ds().images[:4],
                       tiny_ds().labels[:4], 3.0, tiny_cfg())


def test_stage1_loss_pgd_at_decomposes_into_clean_plus_adversarial():
    a, b = warmed_model(seed=9), warmed_model(seed=9)
    ds = tiny_ds(seed=2)
    x, y = ds.images[:8], ds.labels[:8]
    cfg = tiny_cfg()
    loss, parts = tr.stage1_loss(a, x, y, 2.0, cfg, attack_seed=77)

    clean_logits = b.logits(T.Tensor(x), route=0, training=True)
    l_clean = T.softmax_cross_entropy(clean_logits, y)
    spec = attack.make_spec("pgd", 2.0, steps=cfg.attack_steps)
    adv = attack.run_attack(b, x, y, spec, mode=1, seed=77).adversarial
    l_adv = T.softmax_cross_entropy(b.logits(adv, route=1, training=True), y)
    assert float(loss.data) == float(l_clean.data) + float(l_adv.data)
    assert parts["clean"] == float(l_clean.data)
    assert parts["adv"] == float(l_adv.data)


def test_stage1_loss_trades_decomposition_and_small_lambda_limit():
    a, b = warmed_model(seed=9), warmed_model(seed=9)
    ds = tiny_ds(seed=2)
    x, y = ds.images[:8], ds.labels[:8]
    cfg = tiny_cfg(adv_loss=tr.TRADES, trades_lambda=3.0)
    loss, parts = tr.stage1_loss(a, x, y, 8.0, cfg, attack_seed=3)

    clean_logits = b.logits(T.Tensor(x), route=0, training=True)
    l_clean = T.softmax_cross_entropy(clean_logits, y)
    spec = attack.make_spec("pgd", 8.0, steps=cfg.attack_steps)
    adv = attack.run_attack(b, x, y, spec, mode=2, seed=3).adversarial
    kl = T.softmax_kl_divergence(clean_logits, b.logits(adv, route=2, training=True))
    assert float(loss.data) == pytest.approx(float(l_clean.data) + 3.0 * float(kl.data),
                                             rel=1e-12)
    assert parts["adv"] == pytest.approx(3.0 * float(kl.data), rel=1e-12)

    c = warmed_model(seed=9)
    tiny_lam = tiny_cfg(adv_loss=tr.TRADES, trades_lambda=1e-8)
    near, _ = tr.stage1_loss(c, x, y, 8.0, tiny_lam, attack_seed=3)
    d = warmed_model(seed=9)
    ce_only = T.softmax_cross_entropy(d.logits(T.Tensor(x), route=0, training=True), y)
    assert abs(float(near.data) - float(ce_only.data)) <= 1e-6


def test_stage1_loss_touches_only_the_routed_branches():
    model = warmed_model(seed=13)
    before = {n: a.copy() for n, a in model.state_items() if "running" in n}
    ds = tiny_ds(seed=4)
    tr.stage1_loss(model, ds.images[:8], ds.labels[:8], 2.0, tiny_cfg(), attack_seed=1)
    after = dict(model.state_items())
    for name, old in before.items():
        changed = not np.array_equal(old, after[name])
        if name.startswith("wg."):
            assert not changed, name      # the generator plays no part here
        elif ".b2." in name:
            assert not changed, name      # strength-8 branch never routed
        elif ".b1." in name and name.startswith("stem."):
            assert not changed, name      # the stem site pins to slot 0
        else:
            assert changed, name          # b0 via clean pass, b1 via strength 2


# ---------------------------------------------------------------------------
# stage-I training loop


def test_train_stage1_end_to_end_reports_metrics_and_checkpoint(tmp_path):
    model = tiny_model(seed=1)
    cfg = tiny_cfg(decay_epochs=(1,))
    ds, val = tiny_ds(n=24, seed=0), tiny_ds(n=8, seed=1)
    ckpt = str(tmp_path / "stage1.ckpt")
    metrics = str(tmp_path / "stage1_metrics.csv")
    seen = []
    history = tr.train_stage1(model, ds, val, cfg, ckpt_path=ckpt,
                              metrics_path=metrics,
                              hook=lambda e, i, p, t: seen.append((e, i, p, t)))
    assert len(history) == 2
    for rep in history:
        rep.check()
        assert set(rep.val_accuracy) == {0.0, 2.0, 8.0}
    assert history[0].lr == 0.05 and history[1].lr == pytest.approx(0.045)
    # every iteration satisfies the loss-accounting identity
    assert seen and all(abs(t - sum(p)) <= 1e-9 for _, _, p, t in seen)
    assert all(len(p) == 3 for _, _, p, t in seen)
    with open(metrics, encoding="utf-8") as f:
        lines = f.read().split("\n")
    assert lines[0] == ("epoch,lr,l_1,l_2,l_3,sum_lk,"
                        "val_acc_eps0,val_acc_eps2,val_acc_eps8")
    assert len([l for l in lines if l]) == 3  # header + one row per epoch
    ck = D.load_checkpoint(ckpt)
    assert ck.training_state == {"stage": 1, "epoch": 2, "seed": 5}
    assert ck.arch == model.arch
    assert any(n.startswith("opt.velocity.") for n in ck.tensors)


def test_train_stage1_two_path_loop_for_two_branches():
    model = tiny_model(seed=2, k_branches=2, strengths=(0, 8))
    cfg = tiny_cfg(k_branches=2, strengths=(0.0, 8.0), epochs=1)
    counts = []
    tr.train_stage1(model, tiny_ds(n=16), tiny_ds(n=8, seed=1), cfg,
                    hook=lambda e, i, p, t: counts.append(len(p)))
    assert counts and all(c == 2 for c in counts)  # one clean + one adversarial


def test_train_stage1_is_deterministic_in_seed():
    runs = []
    for seed_model in (3, 3, 3):
        m = tiny_model(seed=seed_model)
        tr.train_stage1(m, tiny_ds(n=16, seed=0), tiny_ds(n=8, seed=1),
                        tiny_cfg(epochs=1))
        runs.append(m.param_hash())
    assert runs[0] == runs[1] == runs[2]
    other = tiny_model(seed=3)
    tr.train_stage1(other, tiny_ds(n=16, seed=0), tiny_ds(n=8, seed=1),
                    tiny_cfg(epochs=1, seed=6))
    assert other.param_hash() != runs[0]


def test_train_stage1_rejects_model_config_mismatch():
    model = tiny_model(seed=1)  # K=3
    cfg = tr.StageOneConfig(k_branches=2, strengths=(0.0, 8.0), epochs=1,
                            decay_epochs=()).validate()
    with pytest.raises(ValueError, match="match"):
        tr.train_stage1(model, tiny_ds(), tiny_ds(n=8, seed=1), cfg)


def test_train_stage1_aborts_on_divergence_with_last_good_checkpoint(tmp_path):
    model = tiny_model(seed=1)
    ckpt = str(tmp_path / "stage1.ckpt")

    def poison(epoch, it, parts, total):
        if epoch == 2 and it == 0:
            model.parameters()[0].data[...] = np.nan

    with pytest.raises(tr.TrainingDiverged) as err:
        tr.train_stage1(model, tiny_ds(n=24), tiny_ds(n=8, seed=1),
                        tiny_cfg(epochs=3), ckpt_path=ckpt, hook=poison)
    path = err.value.checkpoint_path
    assert path == ckpt + ".last_good" and os.path.exists(path)
    saved = D.load_checkpoint(path)
    assert saved.training_state["epoch"] == 1  # last finished epoch
    assert all(np.isfinite(a).all() for a in saved.tensors.values())


# ---------------------------------------------------------------------------
# strength sampler


def test_discrete_sampler_frequencies_within_three_sigma():
    sampler = tr.StrengthSampler((0, 1, 2, 4, 8), continuous_prob=0.0)
    rng = np.random.default_rng(77)
    n = 2000
    draws = [sampler.sample(rng) for _ in range(n)]
    assert set(draws) <= {0.0, 1.0, 2.0, 4.0, 8.0}
    sigma = math.sqrt(n * 0.2 * 0.8)
    for v in (0.0, 1.0, 2.0, 4.0, 8.0):
        assert abs(draws.count(v) - n * 0.2) <= 3 * sigma


def test_mixed_sampler_hits_off_grid_strengths_in_range():
    sampler = tr.StrengthSampler((0, 2, 8), continuous_prob=0.25)
    rng = np.random.default_rng(3)
    draws = [sampler.sample(rng) for _ in range(800)]
    off_grid = [d for d in draws if d not in (0.0, 2.0, 8.0)]
    assert all(0.0 <= d <= 8.0 for d in draws)
    sigma = math.sqrt(800 * 0.25 * 0.75)
    assert abs(len(off_grid) - 200) <= 3 * sigma
    with pytest.raises(ValueError):
        tr.StrengthSampler(())


# ---------------------------------------------------------------------------
# stage II


def stage2_cfg(**overrides):
    base = dict(epochs=2, decay_epochs=(1,), lr=0.05, batch_size=8,
                attack_steps=2, val_size=8, seed=4, val_strengths=(0.0, 8.0))
    base.update(overrides)
    return tr.StageTwoConfig(**base).validate()


def test_train_stage2_freezes_backbone_and_moves_generator(tmp_path):
    model = warmed_model(seed=21)
    grid_before_drop = model.arch.strengths
    tr.drop_branches(model)  # the frozen reference is the post-drop state
    backbone_before = tr._backbone_digest(model)
    wg_before = model.param_hash("wg.")
    ckpt = str(tmp_path / "stage2.ckpt")
    metrics = str(tmp_path / "stage2_metrics.csv")
    seen = []
    history = tr.train_stage2(model, tiny_ds(n=24, seed=6), tiny_ds(n=8, seed=7),
                              stage2_cfg(), ckpt_path=ckpt, metrics_path=metrics,
                              hook=lambda e, i, eps, t, g: seen.append((e, i, eps, g)))
    assert model.arch.k_branches == 2  # middle branch dropped
    assert tr._backbone_digest(model) == backbone_before
    assert model.param_hash("wg.") != wg_before
    assert len(history) == 2 and all(r.check() for r in history)
    assert seen[0][3] > 0.0  # generator gradient norm on the first batch
    grid = set(float(g) for g in grid_before_drop)
    assert all(eps in grid or 0.0 <= eps <= 8.0 for _, _, eps, _ in seen)
    with open(metrics, encoding="utf-8") as f:
        lines = [l for l in f.read().split("\n") if l]
    assert lines[0] == "epoch,lr,loss,val_acc_eps0,val_acc_eps8"
    assert len(lines) == 3
    ck = D.load_checkpoint(ckpt)
    assert ck.arch.k_branches == 2
    assert ck.training_state["stage"] == 2
    # backbone gradients stay enabled for later use
    assert all(p.requires_grad for p in model.parameters())


def test_train_stage2_aborts_on_freeze_violation():
    model = warmed_model(seed=22)
    stem = model.stem_conv.weight

    def poison(epoch, it, eps, total, gnorm):
        stem.data[0, 0, 0, 0] += 1.0

    with pytest.raises(tr.FreezeViolation):
        tr.train_stage2(model, tiny_ds(n=16, seed=6), tiny_ds(n=8, seed=7),
                        stage2_cfg(epochs=1, decay_epochs=()), hook=poison)


def test_train_stage2_accepts_already_dropped_model():
    model = warmed_model(seed=23)
    tr.drop_branches(model)
    h = tr.train_stage2(model, tiny_ds(n=16, seed=6), tiny_ds(n=8, seed=7),
                        stage2_cfg(epochs=1, decay_epochs=(), sampler_grid=(0.0, 2.0, 8.0)))
    assert len(h) == 1


def test_drop_branches_wrapper_is_idempotent():
    model = warmed_model(seed=24)
    tr.drop_branches(model)
    h1 = model.param_hash()
    tr.drop_branches(model)
    assert model.param_hash() == h1 and model.arch.k_branches == 2


# ---------------------------------------------------------------------------
# single-path reference training


def test_train_baseline_plain_and_adversarial(tmp_path):
    plain = tiny_model(seed=31)
    cfg = tr.BaselineConfig(epochs=1, decay_epochs=(), batch_size=8,
                            attack_steps=2, val_size=8, lr=0.05)
    h = tr.train_baseline(plain, tiny_ds(n=16, seed=8), tiny_ds(n=8, seed=9), cfg)
    assert len(h) == 1 and set(h[0].val_accuracy) == {0.0}

    robust = tiny_model(seed=32)
    cfg_at = tr.BaselineConfig(adversarial=True, eps=8.0, epochs=1, decay_epochs=(),
                               batch_size=8, attack_steps=2, val_size=8, lr=0.05)
    metrics = str(tmp_path / "baseline.csv")
    h = tr.train_baseline(robust, tiny_ds(n=16, seed=8), tiny_ds(n=8, seed=9),
                          cfg_at, metrics_path=metrics)
    assert set(h[0].val_accuracy) == {0.0, 8.0}
    with open(metrics, encoding="utf-8") as f:
        assert f.readline().strip() == "epoch,lr,loss,val_acc_eps0,val_acc_eps8"
    with pytest.raises(ValueError):
        tr.BaselineConfig(adversarial=True, eps=0.0).validate()
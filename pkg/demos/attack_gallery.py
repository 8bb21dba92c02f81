"""Tour of the attack suite against a small freshly trained model.

Trains a two-branch backbone for one epoch on synthesized digits, then runs
every attack method at eps=8/255 and prints the constraint check (max
perturbation, range) next to the accuracy it leaves behind.  Ends with the
seven-ratio adaptive sweep against the fused model.
"""

import argparse
import os
import shutil
import tempfile

import numpy as np

from afa import attack, cli, data, nn, synthdata, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--eps", type=float, default=8.0, help="budget in 1/255 units")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    root = tempfile.mkdtemp(prefix="afa_gallery_")
    synthdata.synthesize_mnist_like(root, train_n=1000, test_n=512, seed=args.seed)
    train_ds = data.load_mnist(root, "train")
    test_ds = data.load_mnist(root, "test").take(256)

    arch = cli.ARCH_PRESETS["mnist_desk"]
    model = nn.build_model(arch, seed=args.seed)
    cfg = train.desk_stage1(arch.k_branches, epochs=2, decay_epochs=(),
                            attack_steps=4, val_size=128, seed=args.seed)
    train.train_stage1(model, train_ds, test_ds, cfg)

    x, y = test_ds.images, test_ds.labels
    mode = arch.k_branches - 1    # the strongest branch sees the attacks
    print(f"clean accuracy (branch {mode}): "
          f"{attack.accuracy(model, x, y, mode=mode):.3f}")
    print(f"{'method':<14}{'steps':>6}{'max|d|*255':>12}{'range':>16}{'acc':>8}")
    for method in attack.METHODS:
        if method == "pgd_adaptive":
            spec = attack.make_spec(method, args.eps, adaptive_ratio=(1.0, 1.0))
        else:
            spec = attack.make_spec(method, args.eps)
        adv = attack.run_attack(model, x, y, spec, mode=mode,
                                seed=args.seed).adversarial.data
        dmax = np.abs(adv - x).max() * 255.0
        acc = attack.accuracy(model, adv, y, mode=mode)
        print(f"{method:<14}{spec.steps:>6}{dmax:>12.4f}"
              f"{f'[{adv.min():.3f},{adv.max():.3f}]':>16}{acc:>8.3f}")

    # the adaptive sweep needs a routing head: run a short stage 2 first
    cfg2 = train.desk_stage2(epochs=1, decay_epochs=(), attack_steps=4,
                             val_size=128, seed=args.seed)
    train.train_stage2(model, train_ds, test_ds, cfg2)
    rows, min_acc, worst = attack.adaptive_sweep(model, x, y, epsilon=args.eps,
                                                 steps=10, step_size=args.eps / 4,
                                                 seed=args.seed)
    print("\nadaptive ratio sweep (r_ce:r_bce -> fused accuracy):")
    for (r_ce, r_bce), acc in rows:
        flag = "  <- min" if (r_ce, r_bce) == worst else ""
        print(f"  {r_ce:g}:{r_bce:g}   {acc:.3f}{flag}")
    print(f"worst ratio {worst[0]:g}:{worst[1]:g}, accuracy {min_acc:.3f}")
    if os.environ.get("AFA_KEEP_TMP"):
        print(f"dataset left in {root}")
    else:
        shutil.rmtree(root, ignore_errors=True)


if __name__ == "__main__":
    main()

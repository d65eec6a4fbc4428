"""Desk-scale training calibration: 500-step overfit + held-out evaluation.

Reports stitched train/val/test macro Dice for the shipped desk
configuration so step counts and learning rate can be pinned with margin.
"""

import argparse
import json
import time

from mednet import losses
from mednet import synth
from mednet import train as tr
from mednet.data import AugmentationConfig
from mednet.network import MedNetConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--data", default="/tmp/calib/data")
    ap.add_argument("--lr", type=float, default=0.01)
    ap.add_argument("--momentum", type=float, default=0.0)
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--ppe", type=int, default=40)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--frac", type=float, default=0.1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--base", type=int, default=7)
    ap.add_argument("--noaug", action="store_true")
    ap.add_argument("--regions", type=int, default=28)
    ap.add_argument("--band", type=float, default=6.0)
    args = ap.parse_args()

    t0 = time.perf_counter()
    spec = synth.SyntheticSpec(regions=args.regions, boundary_band_px=args.band)
    manifest = synth.generate_dataset(args.data, spec, seed=1)
    data = tr.load_dataset(manifest, classes=6, downsample_factor=4)
    print(f"data ready in {time.perf_counter()-t0:.0f}s")

    net_cfg = MedNetConfig(levels=3, classes=6, encoder_depth=5,
                           base_channels=args.base, input_patch=128)
    tcfg = tr.TrainConfig(epochs=args.epochs, base_lr=args.lr, batch_size=args.batch,
                          patches_per_epoch=args.ppe, val_interval=10,
                          seed=args.seed, momentum=args.momentum,
                          final_lr_fraction=args.frac)
    aug = AugmentationConfig(max_rotation_deg=0.0, flips=False,
                             intensity_range=(0.0, 0.0), zoom_range=0.0,
                             shear_theta=0.0, speckle_alpha_max=0.0) \
        if args.noaug else AugmentationConfig()
    t0 = time.perf_counter()
    res = tr.fit(data, net_cfg, tcfg, aug, losses.LossConfig())
    fit_s = time.perf_counter() - t0
    t0 = time.perf_counter()
    train_rep = tr.evaluate_split(res.net, data.train, stride=32)
    test_rep = tr.evaluate_split(res.net, data.test, stride=32)
    eval_s = time.perf_counter() - t0
    out = {
        "lr": args.lr, "momentum": args.momentum,
        "steps": args.epochs * -(-args.ppe // args.batch),
        "fit_seconds": round(fit_s, 1), "eval_seconds": round(eval_s, 1),
        "best_val_dice": round(float(res.best_val_dice), 4),
        "train_macro_dice": round(float(train_rep.macro_dice), 4),
        "test_macro_dice": round(float(test_rep.macro_dice), 4),
        "train_per_class": {k: round(v, 3) for k, v in train_rep.dice.items()},
        "test_per_class": {k: round(v, 3) for k, v in test_rep.dice.items()},
        "loss_first_last": (round(res.log_rows[0][2], 3), round(res.log_rows[-1][2], 3)),
        "loss_curve": [(r[0], round(r[2], 3), round(r[3], 4) if r[3] != "" else None)
                       for r in res.log_rows if r[0] % 10 == 0 or r[0] == args.epochs - 1],
    }
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()

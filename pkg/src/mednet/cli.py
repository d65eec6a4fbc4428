"""Command-line front end: synth, train, segment, eval, ablate.

Exit codes: 0 success, 1 domain error, 2 I/O failure, 3 config schema error.
The MEDNET_LOG environment variable sets log verbosity (debug/info/warning).
numpy is imported lazily so --threads can pin BLAS thread pools first.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .errors import ConfigError, IOFailure, MednetError


def _setup_logging() -> None:
    level = os.environ.get("MEDNET_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _set_threads(n: int | None) -> None:
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def _load(config_path: str | None, seed: int | None):
    from . import config as cf

    cfg = cf.load_config(config_path)
    if seed is not None:
        cfg["train.seed"] = seed
    return cfg


def cmd_synth(args) -> int:
    from . import config as cf
    from .synth import generate_dataset

    cfg = _load(args.config, args.seed)
    counts = (cfg["synth.train_mosaics"], cfg["synth.val_mosaics"],
              cfg["synth.test_mosaics"])
    manifest = generate_dataset(args.out, cf.synth_spec(cfg), cfg["train.seed"],
                                counts=counts)
    print(manifest)
    return 0


def cmd_train(args) -> int:
    from . import config as cf
    from . import train as tr

    cfg = _load(args.config, args.seed)
    if args.manifest:
        cfg["data.manifest"] = args.manifest
    if not cfg["data.manifest"]:
        raise ConfigError("data.manifest is required (config key or --manifest)")
    os.makedirs(args.out, exist_ok=True)
    data = tr.load_dataset(cfg["data.manifest"], cfg["network.classes"],
                           cfg["data.downsample_factor"])
    window = min(cfg["data.window"], min(min(m.image.shape) for m in data.train))
    result = tr.fit(data, cf.net_config(cfg), cf.train_config(cfg),
                    cf.aug_config(cfg), cf.loss_config(cfg),
                    out_stem=os.path.join(args.out, "model_best"), window=window)
    tr.write_training_log(os.path.join(args.out, "training_log.csv"), result.log_rows)
    with open(os.path.join(args.out, "effective_config.cfg"), "w") as fh:
        fh.write(cf.dump_config(cfg))
    print(os.path.join(args.out, "model_best.ckpt"))
    return 0


def cmd_segment(args) -> int:
    import numpy as np

    from . import config as cf
    from .data import Mosaic, _read_plane, downsample_mosaic, load_mosaic, save_labelmap
    from .network import load_checkpoint
    from .stitch import save_probability_planes, stitch

    cfg = _load(args.config, None)
    net, _, _ = load_checkpoint(args.checkpoint)
    if args.labels:
        m = load_mosaic(args.image, args.labels, classes=net.cfg.classes)
    else:
        image = _read_plane(args.image)
        m = Mosaic(image=image, labels=np.full_like(image, 255),
                   microns_per_pixel=0.5,
                   id=os.path.splitext(os.path.basename(args.image))[0])
    m = downsample_mosaic(m, cfg["data.downsample_factor"])
    result = stitch(m, net, patch=net.cfg.input_patch, stride=cfg["stitch.stride"],
                    sigma=cf.stitch_sigma(cfg))
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.join(args.out, f"{m.id}-pred")
    save_labelmap(result.labels, stem + ".pgm")
    if args.probs:
        save_probability_planes(stem, result.probabilities)
    print(stem + ".pgm")
    return 0


def cmd_eval(args) -> int:
    from . import config as cf
    from .data import downsample_mosaic, load_mosaic, read_manifest, _read_plane
    from .metrics import confusion, rates, report_csv, report_text

    cfg = _load(args.config, None)
    classes = cfg["network.classes"]
    triples = [t for t in read_manifest(args.manifest) if t[2] == args.split]
    if not triples:
        raise MednetError(f"no mosaics with split {args.split!r} in {args.manifest}")
    os.makedirs(args.out, exist_ok=True)
    pooled = None
    per_rows = []
    for img, lab, _ in triples:
        m = downsample_mosaic(load_mosaic(img, lab, classes),
                              cfg["data.downsample_factor"])
        pred = _read_plane(os.path.join(args.pred, f"{m.id}-pred.pgm"))
        c = confusion(pred, m.labels, classes=classes)
        per_rows.append((m.id, rates(c)))
        pooled = c if pooled is None else pooled.merge(c)
    report = rates(pooled)
    with open(os.path.join(args.out, "metrics_pooled.csv"), "w") as fh:
        fh.write(report_csv(report))
    with open(os.path.join(args.out, "metrics_per_mosaic.csv"), "w") as fh:
        fh.write("mosaic,macro_sensitivity,macro_specificity,macro_dice\n")
        for mid, r in per_rows:
            fh.write(f"{mid},{r.macro_sensitivity:.6f},{r.macro_specificity:.6f},"
                     f"{r.macro_dice:.6f}\n")
    text = report_text(report)
    with open(os.path.join(args.out, "metrics_pooled.txt"), "w") as fh:
        fh.write(text)
    print(text, end="")
    return 0


def cmd_ablate(args) -> int:
    from . import config as cf
    from . import train as tr

    cfg = _load(args.config, args.seed)
    if not cfg["data.manifest"]:
        raise ConfigError("data.manifest is required for ablate")
    data = tr.load_dataset(cfg["data.manifest"], cfg["network.classes"],
                           cfg["data.downsample_factor"])
    res = tr.ablate(data, cf.net_config(cfg), cf.train_config(cfg),
                    cf.aug_config(cfg), cf.loss_config(cfg),
                    num_seeds=cfg["ablate.num_seeds"],
                    eval_stride=cfg["ablate.eval_stride"])
    os.makedirs(args.out, exist_ok=True)
    table = tr.ablation_table(res)
    with open(os.path.join(args.out, "ablation.txt"), "w") as fh:
        fh.write(table)
    with open(os.path.join(args.out, "ablation.csv"), "w") as fh:
        fh.write(tr.ablation_csv(res))
    print(table, end="")
    return 0


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mednet",
                                 description="multiscale texture segmentation")
    ap.add_argument("--threads", type=int, default=None,
                    help="BLAS thread count (default: all cores)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic mosaic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model from a manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--manifest", help="overrides data.manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("segment", help="stitched whole-mosaic inference")
    p.add_argument("--checkpoint", required=True, help="checkpoint stem (no .ckpt)")
    p.add_argument("--image", required=True)
    p.add_argument("--labels", help="optional ground-truth plane (validated only)")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--probs", action="store_true", help="also save probability planes")
    p.set_defaults(fn=cmd_segment)

    p = sub.add_parser("eval", help="score predictions against a manifest split")
    p.add_argument("--pred", required=True, help="directory with <id>-pred.pgm maps")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="level and loss ablation sweeps")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_ablate)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    _set_threads(args.threads)
    _setup_logging()
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 3
    except (IOFailure, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 2
    except MednetError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Training loop with deep supervision, plus the two ablation protocols.

Optimization is plain gradient descent, theta <- theta - lr*(grad + wd*theta),
with an exponential per-epoch learning-rate decay and optional momentum
(default off).  Every patch is drawn from a stream keyed by (master seed,
mosaic id, window index, epoch), so runs are reproducible and ablation
variants consume identical data.
"""

from __future__ import annotations

import logging
import statistics
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import losses as ls
from .autodiff import Graph, Tensor
from .data import (AugmentationConfig, Mosaic, augment, downsample_mosaic,
                   extract_windows, label_pyramid, load_mosaic, patch_rng,
                   random_crop, read_manifest)
from .errors import DomainError, NonFiniteError, TrainingDiverged
from .metrics import confusion, rates
from .network import MedNetConfig, Network, build, param_count, save_checkpoint, scaled_config
from .stitch import stitch

log = logging.getLogger("mednet.train")

LOSS_VARIANTS = ("mdsc_tv", "dice", "cross_entropy")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    base_lr: float = 0.01
    final_lr_fraction: float = 0.1
    batch_size: int = 8
    weight_decay: float = 1e-8
    loss_variant: str = "mdsc_tv"
    seed: int = 0
    momentum: float = 0.0
    patches_per_epoch: int = 40
    val_interval: int = 10
    val_stride_divisor: int = 2   # validation stitching stride = patch/this

    def __post_init__(self):
        if self.base_lr <= 0:
            raise DomainError("base_lr must be positive")
        if not 0 < self.final_lr_fraction <= 1:
            raise DomainError("final_lr_fraction must be in (0,1]")
        if self.loss_variant not in LOSS_VARIANTS:
            raise DomainError(f"loss_variant must be one of {LOSS_VARIANTS}")
        if self.batch_size < 1 or self.patches_per_epoch < self.batch_size:
            raise DomainError("need at least one full batch per epoch")


@dataclass
class SplitData:
    """Mosaics at training resolution, grouped by manifest split."""

    train: list[Mosaic] = field(default_factory=list)
    val: list[Mosaic] = field(default_factory=list)
    test: list[Mosaic] = field(default_factory=list)


def load_dataset(manifest_path: str, classes: int, downsample_factor: int = 4) -> SplitData:
    data = SplitData()
    for img, lab, split in read_manifest(manifest_path):
        if split not in ("train", "val", "test"):
            raise DomainError(f"unknown split {split!r} in {manifest_path}")
        m = downsample_mosaic(load_mosaic(img, lab, classes), downsample_factor)
        getattr(data, split).append(m)
    return data


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """lr(e) = base_lr * final_lr_fraction^(e/epochs)."""
    return cfg.base_lr * cfg.final_lr_fraction ** (epoch / cfg.epochs)


def batch_loss(net: Network, images: np.ndarray, labels: np.ndarray,
               variant: str, loss_cfg: ls.LossConfig):
    """Forward plus deep-supervised loss; caller owns the surrounding Graph."""
    x = Tensor(images.astype(np.float64)[:, None] / 255.0)
    targets = label_pyramid(labels, net.cfg.levels, net.cfg.classes)
    outs = net.forward(x, "train")
    if variant == "mdsc_tv":
        return ls.total_loss(targets, outs.probs, loss_cfg)
    terms = [ls.dice_loss(t, p, loss_cfg.epsilon) if variant == "dice"
             else ls.cross_entropy(t, p)
             for t, p in zip(targets, outs.probs)]
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def _apply_update(net: Network, lr: float, cfg: TrainConfig,
                  velocity: dict[str, np.ndarray] | None = None) -> None:
    """Gradient step with weight decay and optional heavy-ball momentum;
    consumes and clears the accumulated gradients."""
    for name, p in net.params.items():
        step = p.grad + cfg.weight_decay * p.values
        if cfg.momentum:
            v = velocity[name]
            v *= cfg.momentum
            v += step
            step = v
        p.values -= lr * step
        p.zero_grad()


def train_step(net: Network, images: np.ndarray, labels: np.ndarray, lr: float,
               cfg: TrainConfig, loss_cfg: ls.LossConfig,
               velocity: dict[str, np.ndarray] | None = None) -> float:
    """One optimization step; returns the scalar loss before the update."""
    try:
        with Graph() as g:
            loss = batch_loss(net, images, labels, cfg.loss_variant, loss_cfg)
            value = loss.item()
            g.backward(loss)
    except NonFiniteError as exc:
        raise TrainingDiverged(f"non-finite values during step: {exc}") from exc
    _apply_update(net, lr, cfg, velocity)
    return value


def evaluate_split(net: Network, mosaics: list[Mosaic], stride: int,
                   sigma: float | None = None):
    """Pooled metrics over stitched predictions for a list of mosaics."""
    counts = None
    for m in mosaics:
        result = stitch(m, net, patch=net.cfg.input_patch, stride=stride, sigma=sigma)
        c = confusion(result.labels, m.labels, classes=net.cfg.classes)
        counts = c if counts is None else counts.merge(c)
    return rates(counts)


@dataclass
class FitResult:
    net: Network
    log_rows: list[tuple]        # (epoch, lr, train_loss, val_dice_macro, seconds)
    best_val_dice: float
    checkpoint_stem: str | None


def fit(data: SplitData, net_cfg: MedNetConfig, cfg: TrainConfig,
        aug_cfg: AugmentationConfig, loss_cfg: ls.LossConfig,
        out_stem: str | None = None, window: int | None = None) -> FitResult:
    """Train with per-epoch re-cropping/re-augmentation; keep the best-val net."""
    if not data.train:
        raise DomainError("training split is empty")
    net = build(net_cfg, seed=cfg.seed)
    velocity = ({n: np.zeros_like(p.values) for n, p in net.params.items()}
                if cfg.momentum else None)
    S = net_cfg.input_patch
    window = window or min(min(m.image.shape) for m in data.train)
    windows = []
    for m in data.train:
        windows.extend(extract_windows(m, window=window))
    log.info("fit: %d train mosaics, %d windows, %d params",
             len(data.train), len(windows), param_count(net_cfg))

    rows: list[tuple] = []
    best = (-1.0, -1)
    val_stride = max(1, S // cfg.val_stride_divisor)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_schedule(cfg, epoch)
        streams: dict[int, np.random.Generator] = {}
        images = np.empty((cfg.patches_per_epoch, S, S), dtype=np.uint8)
        labels = np.empty((cfg.patches_per_epoch, S, S), dtype=np.uint8)
        for i in range(cfg.patches_per_epoch):
            w = windows[i % len(windows)]
            rng = streams.get(i % len(windows))
            if rng is None:
                rng = patch_rng(cfg.seed, w.mosaic_id, w.index, epoch)
                streams[i % len(windows)] = rng
            p = augment(random_crop(w, S, rng), aug_cfg, rng)
            images[i], labels[i] = p.image, p.labels
        losses = []
        for b in range(cfg.patches_per_epoch // cfg.batch_size):
            sl = slice(b * cfg.batch_size, (b + 1) * cfg.batch_size)
            losses.append(train_step(net, images[sl], labels[sl], lr, cfg,
                                     loss_cfg, velocity))
        train_loss = float(np.mean(losses))

        val_dice = ""
        is_val_epoch = data.val and (
            (epoch + 1) % cfg.val_interval == 0 or epoch == cfg.epochs - 1)
        if is_val_epoch:
            report = evaluate_split(net, data.val, stride=val_stride)
            val_dice = report.macro_dice
            if val_dice >= best[0]:
                best = (val_dice, epoch)
                if out_stem:
                    _save(out_stem, net, cfg, velocity, epoch)
        rows.append((epoch, lr, train_loss, val_dice, time.perf_counter() - t0))
        log.info("epoch %d lr %.5f loss %.4f val %s", epoch, lr, train_loss, val_dice)
    if best[1] < 0 and out_stem:   # no validation ran; keep the final state
        _save(out_stem, net, cfg, velocity, cfg.epochs - 1)
    return FitResult(net=net, log_rows=rows, best_val_dice=best[0],
                     checkpoint_stem=out_stem)


def _save(stem: str, net: Network, cfg: TrainConfig,
          velocity: dict[str, np.ndarray] | None, epoch: int) -> None:
    extra = {}
    if velocity is not None:
        extra = {f"velocity.{n}": v for n, v in velocity.items()}
    save_checkpoint(stem, net, epoch=epoch, extra=extra)


def write_training_log(path: str, rows: list[tuple]) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,lr,train_loss,val_dice_macro,seconds\n")
        for epoch, lr, loss, val, secs in rows:
            val_s = f"{val:.6f}" if val != "" else ""
            fh.write(f"{epoch},{lr:.8g},{loss:.8g},{val_s},{secs:.3f}\n")


@dataclass
class AblationResult:
    """Per-variant per-seed held-out macro Dice plus per-class medians."""

    variants: list[str]
    macro_dice: dict[str, list[float]]            # variant -> per-seed values
    class_dice: dict[str, dict[int, float]]       # variant -> class -> median
    param_counts: dict[str, int]

    def median(self, variant: str) -> float:
        return statistics.median(self.macro_dice[variant])


def ablate(data: SplitData, net_cfg: MedNetConfig, cfg: TrainConfig,
           aug_cfg: AugmentationConfig, loss_cfg: ls.LossConfig,
           num_seeds: int = 3, eval_stride: int = 32) -> AblationResult:
    """Level ablation (M=1,2,3 at matched parameter budgets) + loss ablation.

    All fits for one seed consume byte-identical patch streams, so the
    comparisons isolate architecture level count and loss choice.
    """
    if not data.test:
        raise DomainError("ablation needs a test split")
    budget = param_count(net_cfg)
    configs: dict[str, MedNetConfig] = {}
    for m in range(1, net_cfg.levels + 1):
        c = replace(net_cfg, levels=m)
        configs[f"levels_{m}"] = scaled_config(c, budget) if m != net_cfg.levels else c
    variants: list[tuple[str, MedNetConfig, str]] = [
        (name, c, cfg.loss_variant) for name, c in configs.items()]
    for lv in LOSS_VARIANTS:
        if lv != cfg.loss_variant:
            variants.append((f"loss_{lv}", net_cfg, lv))

    macro: dict[str, list[float]] = {name: [] for name, _, _ in variants}
    per_class: dict[str, dict[int, list[float]]] = {name: {} for name, _, _ in variants}
    params: dict[str, int] = {name: param_count(c) for name, c, _ in variants}
    for name, c, lv in variants:
        for s in range(num_seeds):
            run_cfg = replace(cfg, seed=cfg.seed + s, loss_variant=lv)
            result = fit(data, c, run_cfg, aug_cfg, loss_cfg)
            report = evaluate_split(result.net, data.test, stride=eval_stride)
            macro[name].append(report.macro_dice)
            for k, v in report.dice.items():
                per_class[name].setdefault(k, []).append(v)
            log.info("ablate %s seed %d: macro dice %.4f", name, s, report.macro_dice)
    class_dice = {name: {k: statistics.median(v) for k, v in d.items()}
                  for name, d in per_class.items()}
    return AblationResult(variants=[n for n, _, _ in variants], macro_dice=macro,
                          class_dice=class_dice, param_counts=params)


def ablation_table(res: AblationResult, class_names: tuple[str, ...] | None = None) -> str:
    """Rows = classes + Average, columns = variants; cells are seed medians."""
    classes = sorted({k for d in res.class_dice.values() for k in d})
    header = ["class"] + res.variants
    rows = [header]
    for k in classes:
        name = class_names[k] if class_names and k < len(class_names) else str(k)
        rows.append([name] + [f"{res.class_dice[v][k]:.4f}" if k in res.class_dice[v]
                              else "" for v in res.variants])
    rows.append(["Average"] + [f"{res.median(v):.4f}" for v in res.variants])
    rows.append(["params"] + [str(res.param_counts[v]) for v in res.variants])
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    return "\n".join(" ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows) + "\n"


def ablation_csv(res: AblationResult) -> str:
    lines = ["variant,seed,macro_dice,params"]
    for v in res.variants:
        for s, d in enumerate(res.macro_dice[v]):
            lines.append(f"{v},{s},{d:.6f},{res.param_counts[v]}")
    return "\n".join(lines) + "\n"

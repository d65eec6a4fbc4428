"""Flat plain-text run configuration: one `section.key = value` per line.

Every key has a default carrying the reference training recipe; unknown keys
are rejected.  `dump` emits the effective configuration in schema order, and
parsing that dump reproduces the configuration exactly.
"""

from __future__ import annotations

from .errors import ConfigError

# key -> default; declaration order is the canonical dump order
DEFAULTS: dict[str, object] = {
    # architecture
    "network.levels": 3,
    "network.classes": 6,
    "network.encoder_depth": 5,
    "network.base_channels": 25,
    "network.channel_growth": 2.0,
    "network.input_patch": 256,
    "network.blocks_per_stage": 1,
    "network.width_scale": 1.0,
    # optimization
    "train.epochs": 200,
    "train.base_lr": 0.01,
    "train.final_lr_fraction": 0.1,
    "train.batch_size": 48,
    "train.weight_decay": 1e-8,
    "train.loss_variant": "mdsc_tv",
    "train.seed": 0,
    "train.momentum": 0.0,
    "train.patches_per_epoch": 96,
    "train.val_interval": 10,
    "train.val_stride_divisor": 2,
    # loss
    "loss.gamma": 1e-6,
    "loss.epsilon": 1e-7,
    # augmentation magnitudes
    "augment.max_rotation_deg": 180.0,
    "augment.flips": True,
    "augment.intensity_min": -20.0,
    "augment.intensity_max": 20.0,
    "augment.zoom_range": 0.10,
    "augment.shear_theta": 0.2,
    "augment.speckle_alpha_max": 0.2,
    # data pipeline
    "data.manifest": "",
    "data.downsample_factor": 4,
    "data.window": 512,
    # stitched inference (sigma 0 means patch/2)
    "stitch.stride": 32,
    "stitch.sigma": 0.0,
    # synthetic dataset generation
    "synth.size": 1024,
    "synth.classes": 6,
    "synth.regions": 28,
    "synth.labeled_fraction": 0.6,
    "synth.boundary_band_px": 6.0,
    "synth.core_radius_px": 14.0,
    "synth.microns_per_pixel": 0.5,
    "synth.train_mosaics": 8,
    "synth.val_mosaics": 2,
    "synth.test_mosaics": 2,
    # ablation protocol
    "ablate.num_seeds": 3,
    "ablate.eval_stride": 32,
}


def _coerce(key: str, raw: str, default: object) -> object:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(
            f"key {key!r}: cannot parse {raw!r} as {type(default).__name__}") from e


def parse_config(text: str) -> dict[str, object]:
    """Merge `key = value` lines over the defaults; unknown keys are errors."""
    cfg = dict(DEFAULTS)
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {ln}: expected 'key = value', got {line!r}")
        if key not in DEFAULTS:
            raise ConfigError(f"line {ln}: unknown key {key!r}")
        cfg[key] = _coerce(key, raw, DEFAULTS[key])
    return cfg


def load_config(path: str | None) -> dict[str, object]:
    if path is None:
        return dict(DEFAULTS)
    try:
        text = open(path).read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text)


def dump_config(cfg: dict[str, object]) -> str:
    """Canonical text form; parse(dump(cfg)) == cfg."""
    lines = []
    for key, default in DEFAULTS.items():
        v = cfg.get(key, default)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def net_config(cfg: dict[str, object]):
    from .network import MedNetConfig

    return MedNetConfig(
        levels=cfg["network.levels"], classes=cfg["network.classes"],
        encoder_depth=cfg["network.encoder_depth"],
        base_channels=cfg["network.base_channels"],
        channel_growth=cfg["network.channel_growth"],
        input_patch=cfg["network.input_patch"],
        blocks_per_stage=cfg["network.blocks_per_stage"],
        width_scale=cfg["network.width_scale"])


def train_config(cfg: dict[str, object]):
    from .train import TrainConfig

    return TrainConfig(
        epochs=cfg["train.epochs"], base_lr=cfg["train.base_lr"],
        final_lr_fraction=cfg["train.final_lr_fraction"],
        batch_size=cfg["train.batch_size"], weight_decay=cfg["train.weight_decay"],
        loss_variant=cfg["train.loss_variant"], seed=cfg["train.seed"],
        momentum=cfg["train.momentum"],
        patches_per_epoch=cfg["train.patches_per_epoch"],
        val_interval=cfg["train.val_interval"],
        val_stride_divisor=cfg["train.val_stride_divisor"])


def aug_config(cfg: dict[str, object]):
    from .data import AugmentationConfig

    return AugmentationConfig(
        max_rotation_deg=cfg["augment.max_rotation_deg"], flips=cfg["augment.flips"],
        intensity_range=(cfg["augment.intensity_min"], cfg["augment.intensity_max"]),
        zoom_range=cfg["augment.zoom_range"], shear_theta=cfg["augment.shear_theta"],
        speckle_alpha_max=cfg["augment.speckle_alpha_max"], seed=cfg["train.seed"])


def loss_config(cfg: dict[str, object]):
    from .losses import LossConfig

    return LossConfig(gamma=cfg["loss.gamma"], epsilon=cfg["loss.epsilon"])


def synth_spec(cfg: dict[str, object]):
    from .synth import SyntheticSpec

    return SyntheticSpec(
        size=cfg["synth.size"], classes=cfg["synth.classes"],
        regions=cfg["synth.regions"], labeled_fraction=cfg["synth.labeled_fraction"],
        boundary_band_px=cfg["synth.boundary_band_px"],
        core_radius_px=cfg["synth.core_radius_px"],
        microns_per_pixel=cfg["synth.microns_per_pixel"])


def stitch_sigma(cfg: dict[str, object]) -> float | None:
    """0 selects the default sigma = patch/2."""
    return cfg["stitch.sigma"] or None

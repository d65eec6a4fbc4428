"""Nested multiscale encoder-decoder segmentation network.

The model is a stack of M encoder-decoder subnetworks.  Subnetwork m (0 is
the finest) consumes the input image downsampled 2^m times, so coarser
subnetworks are shallower: m has E-m stride-2 encoder stages and every
subnetwork bottlenecks at the same absolute resolution input_patch/2^E.
Information flows coarse to fine through two couplings:

* label priors: subnetwork m (m < M-1) consumes the upsampled class
  probabilities of subnetwork m+1 concatenated onto its image channel;
* bottleneck gating: the coarser subnetwork's bottleneck (pre-gating) is
  projected by a 1x1 convolution to the finer bottleneck's width and
  multiplied in elementwise.

Every subnetwork ends in a 1x1 conv head and a channel softmax, giving one
probability map per scale for deep supervision.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import RunningStats, Tensor
from .errors import DomainError

CHECKPOINT_FORMAT = "mednet-checkpoint v1"


@dataclass(frozen=True)
class MedNetConfig:
    """Architecture hyperparameters; all sizes in pixels or channels."""

    levels: int = 3
    classes: int = 6
    encoder_depth: int = 5
    base_channels: int = 25
    channel_growth: float = 2.0
    input_patch: int = 256
    blocks_per_stage: int = 1
    width_scale: float = 1.0

    def __post_init__(self):
        if not 1 <= self.levels <= 3:
            raise DomainError(f"levels must be 1..3, got {self.levels}")
        if self.classes < 2:
            raise DomainError(f"classes must be >= 2, got {self.classes}")
        if self.encoder_depth < self.levels + 1:
            raise DomainError(
                f"encoder_depth {self.encoder_depth} must exceed levels {self.levels}")
        if self.input_patch % (1 << self.encoder_depth):
            raise DomainError(
                f"input_patch {self.input_patch} not divisible by 2^{self.encoder_depth}")
        if self.base_channels < 1 or self.channel_growth <= 0 or self.width_scale <= 0:
            raise DomainError("channel widths must be positive")
        if self.blocks_per_stage < 1:
            raise DomainError("blocks_per_stage must be >= 1")


def stage_widths(cfg: MedNetConfig) -> list[int]:
    """Channel width of encoder stage s, shared by all subnetworks."""
    return [
        max(1, int(math.floor(cfg.base_channels * cfg.channel_growth ** s
                              * cfg.width_scale + 0.5)))
        for s in range(cfg.encoder_depth)
    ]


def _conv_spec(name, cin, cout, k):
    return (name, (cout, cin, k, k), ("he", cin * k * k))


def _tconv_spec(name, cin, cout, k=2):
    return (name, (cin, cout, k, k), ("he", cin * k * k))


def _bn_specs(prefix, c):
    return [(f"{prefix}.gamma", (c,), ("ones", 0)), (f"{prefix}.beta", (c,), ("zeros", 0))]


def _block_specs(prefix, cin, cout, stride):
    specs = [_conv_spec(f"{prefix}.conv1.w", cin, cout, 3)]
    specs += _bn_specs(f"{prefix}.bn1", cout)
    specs.append(_conv_spec(f"{prefix}.conv2.w", cout, cout, 3))
    specs += _bn_specs(f"{prefix}.bn2", cout)
    if stride != 1 or cin != cout:
        specs.append(_conv_spec(f"{prefix}.sc.w", cin, cout, 1))
        specs += _bn_specs(f"{prefix}.sc_bn", cout)
    return specs


def _parameter_specs(cfg: MedNetConfig):
    """Ordered (name, shape, init) triples; single source for build and count."""
    widths = stage_widths(cfg)
    M, E, K = cfg.levels, cfg.encoder_depth, cfg.classes
    specs = []
    for m in range(M):
        stages = E - m
        in_ch = 1 if m == M - 1 else 1 + K
        for s in range(stages):
            cin, cout = (in_ch if s == 0 else widths[s - 1]), widths[s]
            for b in range(cfg.blocks_per_stage):
                stride = 2 if b == 0 else 1
                bc = cin if b == 0 else cout
                specs += _block_specs(f"s{m}.enc{s}.b{b}", bc, cout, stride)
        if m < M - 1:
            # 1x1 projection of the coarser bottleneck onto this bottleneck's width
            gw = widths[stages - 2]
            specs.append(_conv_spec(f"s{m}.gate.w", gw, widths[stages - 1], 1))
            specs.append((f"s{m}.gate.b", (widths[stages - 1],), ("zeros", 0)))
        for t in range(stages):
            cin = widths[stages - 1 - t]
            cout = widths[max(stages - 2 - t, 0)]
            specs.append(_tconv_spec(f"s{m}.dec{t}.up.w", cin, cout))
            specs += _bn_specs(f"s{m}.dec{t}.up_bn", cout)
            for b in range(cfg.blocks_per_stage):
                specs += _block_specs(f"s{m}.dec{t}.b{b}", cout, cout, 1)
        specs.append(_conv_spec(f"s{m}.head.w", widths[0], K, 1))
        specs.append((f"s{m}.head.b", (K,), ("zeros", 0)))
    return specs


def param_count(cfg: MedNetConfig) -> int:
    """Exact number of trainable scalars (conv weights/biases, BN gamma/beta)."""
    return sum(int(np.prod(shape)) for _, shape, _ in _parameter_specs(cfg))


@dataclass
class ForwardOutputs:
    """Per-level class probabilities plus bottleneck taps for inspection."""

    probs: list[Tensor]             # probs[m]: (B, K, S/2^m, S/2^m)
    bottlenecks: list[Tensor]       # post-gating, what each decoder consumed
    raw_bottlenecks: list[Tensor]   # encoder output before gating


class Network:
    """Parameter store plus the forward wiring; built via :func:`build`."""

    def __init__(self, cfg: MedNetConfig, params: dict[str, Tensor],
                 stats: dict[str, RunningStats]):
        self.cfg = cfg
        self.params = params
        self.stats = stats

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params

    def _block(self, x, prefix, mode, stride):
        p, st = self.params, self.stats
        y = ad.conv2d(x, p[f"{prefix}.conv1.w"], stride=stride)
        y = ad.batch_norm(y, p[f"{prefix}.bn1.gamma"], p[f"{prefix}.bn1.beta"],
                          st[f"{prefix}.bn1"], mode)
        y = ad.relu(y)
        y = ad.conv2d(y, p[f"{prefix}.conv2.w"])
        y = ad.batch_norm(y, p[f"{prefix}.bn2.gamma"], p[f"{prefix}.bn2.beta"],
                          st[f"{prefix}.bn2"], mode)
        if f"{prefix}.sc.w" in p:
            s = ad.conv2d(x, p[f"{prefix}.sc.w"], stride=stride)
            s = ad.batch_norm(s, p[f"{prefix}.sc_bn.gamma"], p[f"{prefix}.sc_bn.beta"],
                              st[f"{prefix}.sc_bn"], mode)
        else:
            s = x
        return ad.relu(ad.add(y, s))

    def forward(self, image: Tensor, mode: str) -> ForwardOutputs:
        """Run all subnetworks coarse to fine; image values expected in [0,1]."""
        cfg = self.cfg
        S = cfg.input_patch
        if image.ndim != 4 or image.shape[1] != 1 or image.shape[2:] != (S, S):
            raise DomainError(
                f"expected input (B,1,{S},{S}), got {image.shape}")
        M, E = cfg.levels, cfg.encoder_depth
        p, st = self.params, self.stats
        pyramid = [image]
        for _ in range(1, M):
            pyramid.append(ad.downsample2x_avg(pyramid[-1]))
        probs: list = [None] * M
        raw_bn: list = [None] * M
        gated_bn: list = [None] * M
        for m in range(M - 1, -1, -1):
            stages = E - m
            if m == M - 1:
                x = pyramid[m]
            else:
                prior = ad.upsample2x_bilinear(probs[m + 1])
                x = ad.concat_channels([pyramid[m], prior])
            for s in range(stages):
                for b in range(cfg.blocks_per_stage):
                    x = self._block(x, f"s{m}.enc{s}.b{b}", mode, 2 if b == 0 else 1)
            raw_bn[m] = x
            if m < M - 1:
                gate = ad.conv2d(raw_bn[m + 1], p[f"s{m}.gate.w"], p[f"s{m}.gate.b"])
                x = ad.elementwise_mul(x, gate)
            gated_bn[m] = x
            for t in range(stages):
                x = ad.transposed_conv2d(x, p[f"s{m}.dec{t}.up.w"], stride=2)
                x = ad.batch_norm(x, p[f"s{m}.dec{t}.up_bn.gamma"],
                                  p[f"s{m}.dec{t}.up_bn.beta"],
                                  st[f"s{m}.dec{t}.up_bn"], mode)
                x = ad.relu(x)
                for b in range(cfg.blocks_per_stage):
                    x = self._block(x, f"s{m}.dec{t}.b{b}", mode, 1)
            logits = ad.conv2d(x, p[f"s{m}.head.w"], p[f"s{m}.head.b"])
            probs[m] = ad.channel_softmax(logits)
        return ForwardOutputs(probs=probs, bottlenecks=gated_bn, raw_bottlenecks=raw_bn)

    def predict_batch(self, images: np.ndarray, batch: int = 8) -> np.ndarray:
        """Eval-mode probabilities for (N,S,S) images; uint8 input is scaled by 255."""
        if images.ndim != 3:
            raise DomainError(f"expected (N,S,S) images, got {images.shape}")
        x = images.astype(np.float64)
        if images.dtype == np.uint8:
            x = x / 255.0
        out = np.empty((x.shape[0], self.cfg.classes, x.shape[1], x.shape[2]))
        for i in range(0, x.shape[0], batch):
            chunk = Tensor(x[i:i + batch, None, :, :])
            out[i:i + batch] = self.forward(chunk, "eval").probs[0].values
        return out

    def predict_patch(self, image: np.ndarray) -> np.ndarray:
        """Finest-level probability map (K,S,S) for one image patch."""
        return self.predict_batch(np.asarray(image)[None, :, :])[0]


def build(cfg: MedNetConfig, seed: int) -> Network:
    """He-initialized network; parameter draws are fixed by declaration order."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    stats: dict[str, RunningStats] = {}
    for name, shape, (kind, fan_in) in _parameter_specs(cfg):
        if kind == "he":
            arr = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        elif kind == "ones":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr, requires_grad=True)
        if name.endswith(".gamma"):
            stats[name[:-6]] = RunningStats(shape[0])
    return Network(cfg, params, stats)


def describe(cfg: MedNetConfig) -> str:
    """Stage-structure summary, one line per subnetwork."""
    widths = stage_widths(cfg)
    lines = [f"levels={cfg.levels} classes={cfg.classes} patch={cfg.input_patch} "
             f"params={param_count(cfg)}"]
    for m in range(cfg.levels):
        stages = cfg.encoder_depth - m
        res = cfg.input_patch >> m
        lines.append(
            f"  subnet {m}: input {res}px, {stages} stages, widths "
            f"{'-'.join(str(w) for w in widths[:stages])}, bottleneck "
            f"{cfg.input_patch >> cfg.encoder_depth}px")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# checkpoint I/O: <stem>.ckpt plain-text manifest + <stem>.ckpt.bin raw float64


def _config_lines(cfg: MedNetConfig) -> list[str]:
    return [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(MedNetConfig)]


def config_hash(cfg: MedNetConfig) -> str:
    return hashlib.sha256("\n".join(_config_lines(cfg)).encode()).hexdigest()[:16]


def save_checkpoint(stem: str, net: Network, epoch: int = 0,
                    extra: dict[str, np.ndarray] | None = None) -> None:
    """Write manifest + little-endian float64 blob; extra arrays ride along."""
    arrays: list[tuple[str, np.ndarray]] = [(n, t.values) for n, t in net.params.items()]
    for name, st in net.stats.items():
        arrays.append((f"stats.{name}.mean", st.mean))
        arrays.append((f"stats.{name}.var", st.var))
    for name, arr in (extra or {}).items():
        arrays.append((f"extra.{name}", arr))
    lines = [CHECKPOINT_FORMAT, f"epoch = {epoch}", f"config_hash = {config_hash(net.cfg)}"]
    lines += [f"config.{ln}" for ln in _config_lines(net.cfg)]
    offset = 0
    blobs = []
    for name, arr in arrays:
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        shape = "x".join(str(d) for d in arr.shape) or "scalar"
        lines.append(f"tensor {name} {shape} {offset}")
        blobs.append(data)
        offset += len(data)
    with open(f"{stem}.ckpt", "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(f"{stem}.ckpt.bin", "wb") as fh:
        fh.write(b"".join(blobs))


def load_checkpoint(stem: str) -> tuple[Network, int, dict[str, np.ndarray]]:
    """Rebuild a network bit-identically from :func:`save_checkpoint` output."""
    with open(f"{stem}.ckpt") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_FORMAT:
        raise DomainError(f"not a {CHECKPOINT_FORMAT} manifest: {stem}.ckpt")
    epoch = 0
    cfg_kwargs: dict = {}
    tensors: list[tuple[str, tuple[int, ...], int]] = []
    for line in lines[1:]:
        if line.startswith("epoch = "):
            epoch = int(line.split("=")[1])
        elif line.startswith("config."):
            key, _, val = line[len("config."):].partition(" = ")
            field_types = {f.name: f.type for f in fields(MedNetConfig)}
            if key not in field_types:
                raise DomainError(f"unknown checkpoint config key {key!r}")
            cfg_kwargs[key] = float(val) if "." in val else int(val)
        elif line.startswith("tensor "):
            _, name, shape_s, off = line.split(" ")
            shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split("x"))
            tensors.append((name, shape, int(off)))
    cfg = MedNetConfig(**cfg_kwargs)
    blob = open(f"{stem}.ckpt.bin", "rb").read()
    net = build(cfg, seed=0)
    extra: dict[str, np.ndarray] = {}
    for name, shape, off in tensors:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        if name.startswith("stats."):
            bn, kind = name[len("stats."):].rsplit(".", 1)
            setattr(net.stats[bn], kind, arr)
        elif name.startswith("extra."):
            extra[name[len("extra."):]] = arr
        else:
            if name not in net.params or net.params[name].shape != shape:
                raise DomainError(f"checkpoint tensor {name} does not fit the config")
            net.params[name].values[...] = arr
    return net, epoch, extra


def scaled_config(cfg: MedNetConfig, target_params: int, tol: float = 0.05) -> MedNetConfig:
    """Adjust width_scale so param_count lands within tol of target_params."""
    lo, hi = 0.05, 20.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        c = replace(cfg, width_scale=mid)
        if param_count(c) < target_params:
            lo = mid
        else:
            hi = mid
    best = None
    for scale in (lo, hi, 0.5 * (lo + hi)):
        c = replace(cfg, width_scale=scale)
        err = abs(param_count(c) - target_params)
        if best is None or err < best[0]:
            best = (err, c)
    err, c = best
    if err > tol * target_params:
        raise DomainError(
            f"cannot match {target_params} params within {tol:.0%}; best off by {err}")
    return c

"""Miniature encoder-decoder segmentation networks.

Three decoder topologies share one plain conv-ReLU encoder with channel
doubling per level:

* ``unet``     — symmetric decoder, one skip connection per level.
* ``unetpp``   — nested dense skip nodes; node (i, j) consumes all
  (i, 0..j-1) outputs plus the upsampled (i+1, j-1) output. Deep
  supervision is off: only the final top node feeds the output conv.
* ``fpn``      — per-level 1x1 lateral projections, top-down additions,
  per-level two-channel prediction heads upsampled to full resolution,
  concatenated and fused by a 3x3 conv.

All three end in a pixelwise two-class softmax, so ``forward`` returns a
probability map the same spatial size as its input.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .tensor import Tensor

ARCHS = ("unet", "unetpp", "fpn")


@dataclass(frozen=True)
class ModelConfig:
    arch: str
    depth: int
    base_channels: int
    in_channels: int = 1
    out_classes: int = 2

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigurationError(f"unknown architecture {self.arch!r}; expected one of {ARCHS}")
        if not 2 <= self.depth <= 4:
            raise ConfigurationError(f"depth must be in [2, 4], got {self.depth}")
        if self.base_channels < 4:
            raise ConfigurationError(f"base_channels must be >= 4, got {self.base_channels}")
        if self.in_channels < 1:
            raise ConfigurationError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.out_classes != 2:
            raise ConfigurationError("out_classes is fixed to 2 (background vs foreground)")

    @property
    def divisor(self) -> int:
        """Spatial dims must be divisible by this (one pool per level)."""
        return 2 ** (self.depth - 1)


@dataclass(frozen=True)
class ConvSpec:
    """One convolution layer: weight Cout x Cin x k x k plus bias Cout."""

    name: str
    cin: int
    cout: int
    k: int

    @property
    def param_count(self) -> int:
        return self.k * self.k * self.cin * self.cout + self.cout


@dataclass
class SegModel:
    config: ModelConfig
    params: Dict[str, Tensor]
    layers: Tuple[ConvSpec, ...] = field(repr=False)

    def forward(self, batch: Tensor) -> Tensor:
        return forward(self, batch)

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())


def _layer_specs(config: ModelConfig) -> Tuple[ConvSpec, ...]:
    d, b, cin0 = config.depth, config.base_channels, config.in_channels
    width = lambda i: b * (2 ** i)
    specs: list[ConvSpec] = []

    def double_conv(prefix: str, cin: int, cout: int) -> None:
        specs.append(ConvSpec(f"{prefix}a", cin, cout, 3))
        specs.append(ConvSpec(f"{prefix}b", cout, cout, 3))

    for i in range(d):
        double_conv(f"enc{i}", cin0 if i == 0 else width(i - 1), width(i))

    if config.arch == "unet":
        for i in range(d - 2, -1, -1):
            double_conv(f"dec{i}", width(i) + width(i + 1), width(i))
        specs.append(ConvSpec("out", b, 2, 1))
    elif config.arch == "unetpp":
        # Node (i, j) sees j same-level predecessors plus one upsampled input.
        for j in range(1, d):
            for i in range(d - j):
                double_conv(f"x{i}_{j}", j * width(i) + width(i + 1), width(i))
        specs.append(ConvSpec("out", b, 2, 1))
    else:
        for i in range(d):
            specs.append(ConvSpec(f"lat{i}", width(i), b, 1))
        for i in range(d):
            specs.append(ConvSpec(f"head{i}", b, 2, 3))
        specs.append(ConvSpec("fuse", 2 * d, 2, 3))

    return tuple(specs)


def build_model(config: ModelConfig, seed: int) -> SegModel:
    """Create a model with deterministic, seed-controlled parameters.

    Weights draw from uniform(+-sqrt(6 / (fan_in + fan_out))); biases
    start at zero.
    """
    specs = _layer_specs(config)
    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}
    for spec in specs:
        fan_in = spec.cin * spec.k * spec.k
        fan_out = spec.cout * spec.k * spec.k
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(spec.cout, spec.cin, spec.k, spec.k))
        params[f"{spec.name}.w"] = Tensor(w, requires_grad=True)
        params[f"{spec.name}.b"] = Tensor(np.zeros(spec.cout), requires_grad=True)
    return SegModel(config=config, params=params, layers=specs)


def _conv(params: Dict[str, Tensor], name: str, x: Tensor, padding: int) -> Tensor:
    return T.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], stride=1, padding=padding)


def _block(params: Dict[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    x = T.relu(_conv(params, f"{prefix}a", x, padding=1))
    return T.relu(_conv(params, f"{prefix}b", x, padding=1))


def _encode(model: SegModel, x: Tensor) -> list[Tensor]:
    feats = []
    h = x
    for i in range(model.config.depth):
        if i > 0:
            h = T.max_pool2x2(h)
        h = _block(model.params, f"enc{i}", h)
        feats.append(h)
    return feats


def forward(model: SegModel, batch: Tensor) -> Tensor:
    """Run the network; returns an N x 2 x H x W probability map.

    Channel 1 is the foreground class (lung or lesion).
    """
    cfg = model.config
    if batch.ndim != 4:
        raise DimensionError(f"forward expects NxCxHxW input, got shape {batch.shape}")
    if batch.shape[1] != cfg.in_channels:
        raise DimensionError(
            f"model expects {cfg.in_channels} input channel(s), got {batch.shape[1]}"
        )
    h, w = batch.shape[2], batch.shape[3]
    if h % cfg.divisor or w % cfg.divisor:
        raise DimensionError(
            f"spatial dims {h}x{w} must be divisible by {cfg.divisor} for depth {cfg.depth}"
        )

    params = model.params
    feats = _encode(model, batch)

    if cfg.arch == "unet":
        h_cur = feats[-1]
        for i in range(cfg.depth - 2, -1, -1):
            h_cur = _block(params, f"dec{i}", T.concat_channels(feats[i], T.upsample2x(h_cur)))
        logits = _conv(params, "out", h_cur, padding=0)
    elif cfg.arch == "unetpp":
        grid: dict[tuple[int, int], Tensor] = {(i, 0): feats[i] for i in range(cfg.depth)}
        for j in range(1, cfg.depth):
            for i in range(cfg.depth - j):
                merged = grid[(i, 0)]
                for jj in range(1, j):
                    merged = T.concat_channels(merged, grid[(i, jj)])
                merged = T.concat_channels(merged, T.upsample2x(grid[(i + 1, j - 1)]))
                grid[(i, j)] = _block(params, f"x{i}_{j}", merged)
        logits = _conv(params, "out", grid[(0, cfg.depth - 1)], padding=0)
    else:
        merged = _conv(params, f"lat{cfg.depth - 1}", feats[-1], padding=0)
        pyramid = [merged]
        for i in range(cfg.depth - 2, -1, -1):
            merged = T.add(_conv(params, f"lat{i}", feats[i], padding=0), T.upsample2x(merged))
            pyramid.append(merged)
        pyramid.reverse()  # pyramid[i] is now level i (full resolution at i=0)
        heads = []
        for i in range(cfg.depth):
            head = _conv(params, f"head{i}", pyramid[i], padding=1)
            for _ in range(i):
                head = T.upsample2x(head)
            heads.append(head)
        stacked = heads[0]
        for head in heads[1:]:
            stacked = T.concat_channels(stacked, head)
        logits = _conv(params, "fuse", stacked, padding=1)

    return T.softmax2(logits)


@dataclass(frozen=True)
class SummaryRecord:
    param_count: int
    inference_ms: float


def model_summary(model: SegModel, timing_input: Tensor, runs: int = 11) -> SummaryRecord:
    """Exact trainable-parameter count plus median forward time in ms."""
    if runs < 10:
        raise ConfigurationError(f"summary timing needs >= 10 runs, got {runs}")
    times = []
    for _ in range(runs):
        start = time.perf_counter()
        forward(model, timing_input)
        times.append((time.perf_counter() - start) * 1000.0)
    return SummaryRecord(param_count=model.param_count(), inference_ms=float(np.median(times)))

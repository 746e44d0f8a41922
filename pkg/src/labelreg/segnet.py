"""Hypercolumn segmentation networks.

A network is a list of stages; the final activation of every tapped stage is
bilinearly upsampled to the input resolution, concatenated into a per-pixel
hypercolumn, and classified by a 1x1 conv. The last stage's activation is the
"penultimate" layer (the classifier being the last conv), which is what the
auxiliary decoder branch reads.

Presets:

``hyper_tiny``      desk-scale plain CNN (one 3x3 conv per stage, 2x2 max-pool between)
``mini_densenet``   desk-scale DenseNet with transitions and 4 dense blocks
``vgg16_hc``        VGG-16 blocks + an fc6-style conv on the pool5 grid
``densenet67_hc``   3-conv stem, blocks (6, 8, 8, 8), growth 48
``densenet121_hc``  7x7/2 stem, blocks (6, 12, 24, 16), growth 32
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .core import ParamStore, Tensor, add, concat_channels, conv2d, pool2d, relu, upsample_bilinear
from .core.ops import conv_output_size
from .core.tensor import active_tape
from .errors import ConfigError, UsageError

BACKBONE_PREFIX = "backbone."
CLASSIFIER_PREFIX = "classifier."

PRESET_NAMES = ("hyper_tiny", "mini_densenet", "vgg16_hc", "densenet67_hc", "densenet121_hc")


# ---------------------------------------------------------------------------
# layer specs
# ---------------------------------------------------------------------------


@dataclass
class ConvSpec:
    name: str
    in_c: int
    out_c: int
    k: int
    stride: int = 1
    padding: int | None = None
    activation: bool = True

    def __post_init__(self):
        if self.padding is None:
            self.padding = self.k // 2

    def register(self, params: ParamStore, rng) -> None:
        params.add_conv(self.name, self.out_c, self.in_c, self.k, rng)

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        return (conv_output_size(h, self.k, self.stride, self.padding),
                conv_output_size(w, self.k, self.stride, self.padding))

    def __call__(self, params: Mapping[str, Tensor], x: Tensor) -> Tensor:
        y = conv2d(x, params[f"{self.name}.weight"], params[f"{self.name}.bias"],
                   self.stride, self.padding, name=self.name)
        return relu(y) if self.activation else y

    @property
    def channels(self) -> int:
        return self.out_c


@dataclass
class PoolSpec:
    name: str
    kind: str
    k: int
    stride: int
    padding: int = 0
    in_c: int = 0

    def register(self, params, rng) -> None:
        pass

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        return (conv_output_size(h, self.k, self.stride, self.padding),
                conv_output_size(w, self.k, self.stride, self.padding))

    def __call__(self, params, x: Tensor) -> Tensor:
        return pool2d(x, self.kind, self.k, self.stride, self.padding, name=self.name)

    @property
    def channels(self) -> int:
        return self.in_c


@dataclass
class DenseBlockSpec:
    """Units of (1x1 conv to 4*growth, 3x3 conv to growth), each concatenated on."""

    name: str
    in_c: int
    num_units: int
    growth_rate: int
    bottleneck_factor: int = 4

    def units(self) -> list[tuple[ConvSpec, ConvSpec]]:
        out = []
        c = self.in_c
        width = self.bottleneck_factor * self.growth_rate
        for u in range(1, self.num_units + 1):
            out.append((ConvSpec(f"{self.name}.unit{u}.conv1", c, width, 1),
                        ConvSpec(f"{self.name}.unit{u}.conv2", width, self.growth_rate, 3)))
            c += self.growth_rate
        return out

    @property
    def channels(self) -> int:
        return self.in_c + self.num_units * self.growth_rate

    def register(self, params: ParamStore, rng) -> None:
        for a, b in self.units():
            a.register(params, rng)
            b.register(params, rng)

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        return h, w

    def __call__(self, params, x: Tensor) -> Tensor:
        for a, b in self.units():
            x = concat_channels([x, b(params, a(params, x))], name=self.name)
        return x


@dataclass
class StageSpec:
    name: str
    layers: list
    tap: bool = True

    @property
    def channels(self) -> int:
        return self.layers[-1].channels

    def __call__(self, params, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(params, x)
        return x


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class SegNetConfig:
    preset: str = "hyper_tiny"
    num_classes: int = 6
    input_resolution: tuple[int, int] = (64, 64)
    # hyper_tiny / vgg overrides
    channels: list[int] | None = None
    # densenet overrides
    blocks: list[int] | None = None
    growth_rate: int | None = None
    stem_channels: int | None = None
    compression: float = 0.5

    def __post_init__(self):
        self.input_resolution = tuple(int(v) for v in self.input_resolution)
        if self.preset not in PRESET_NAMES:
            raise ConfigError(f"unknown segnet preset {self.preset!r}; choose from {PRESET_NAMES}")
        defaults = {
            "hyper_tiny": dict(channels=[16, 32, 64, 64]),
            "mini_densenet": dict(blocks=[2, 3, 3, 3], growth_rate=12, stem_channels=16),
            "vgg16_hc": dict(channels=[64, 128, 256, 512, 512, 1024]),
            "densenet67_hc": dict(blocks=[6, 8, 8, 8], growth_rate=48, stem_channels=96),
            "densenet121_hc": dict(blocks=[6, 12, 24, 16], growth_rate=32, stem_channels=64),
        }[self.preset]
        for key, value in defaults.items():
            if getattr(self, key) is None:
                setattr(self, key, value)
        if self.channels is not None:
            self.channels = [int(c) for c in self.channels]
        if self.blocks is not None:
            self.blocks = [int(b) for b in self.blocks]
        if self.num_classes < 2:
            raise ConfigError("segnet needs at least 2 classes")
        if not 0 < self.compression <= 1:
            raise ConfigError("transition compression must be in (0, 1]")


def _hyper_tiny(cfg: SegNetConfig) -> list[StageSpec]:
    stages = []
    in_c = 3
    for i, c in enumerate(cfg.channels, start=1):
        name = f"{BACKBONE_PREFIX}stage{i}"
        layers = [] if i == 1 else [PoolSpec(f"{name}.pool", "max", 2, 2, in_c=in_c)]
        layers.append(ConvSpec(f"{name}.conv", in_c, c, 3))
        stages.append(StageSpec(name, layers))
        in_c = c
    return stages


def _vgg16(cfg: SegNetConfig) -> list[StageSpec]:
    if len(cfg.channels) != 6:
        raise ConfigError("vgg16_hc expects 6 widths (5 VGG blocks + fc6 conv)")
    depths = [2, 2, 3, 3, 3, 1]
    stages = []
    in_c = 3
    for i, (c, depth) in enumerate(zip(cfg.channels, depths), start=1):
        name = f"{BACKBONE_PREFIX}stage{i}"
        layers = [] if i == 1 else [PoolSpec(f"{name}.pool", "max", 2, 2, in_c=in_c)]
        for j in range(1, depth + 1):
            layers.append(ConvSpec(f"{name}.conv{j}", in_c, c, 3))
            in_c = c
        stages.append(StageSpec(name, layers))
    return stages


def _densenet(cfg: SegNetConfig) -> list[StageSpec]:
    g = cfg.growth_rate
    stem = cfg.stem_channels
    name = f"{BACKBONE_PREFIX}stage1"
    if cfg.preset == "densenet121_hc":
        layers = [ConvSpec(f"{name}.stem.conv1", 3, stem, 7, stride=2, padding=3),
                  PoolSpec(f"{name}.stem.pool", "max", 3, 2, padding=1, in_c=stem)]
    elif cfg.preset == "densenet67_hc":
        layers = [ConvSpec(f"{name}.stem.conv1", 3, stem, 3, stride=2),
                  ConvSpec(f"{name}.stem.conv2", stem, stem, 3),
                  ConvSpec(f"{name}.stem.conv3", stem, stem, 3),
                  PoolSpec(f"{name}.stem.pool", "max", 3, 2, padding=1, in_c=stem)]
    else:
        layers = [ConvSpec(f"{name}.stem.conv1", 3, stem, 3)]
    c = stem
    stages = []
    for i, units in enumerate(cfg.blocks, start=1):
        name = f"{BACKBONE_PREFIX}stage{i}"
        if i > 1:
            out_c = max(1, int(c * cfg.compression))
            layers = [ConvSpec(f"{name}.transition.conv", c, out_c, 1),
                      PoolSpec(f"{name}.transition.pool", "avg", 2, 2, in_c=out_c)]
            c = out_c
        block = DenseBlockSpec(f"{name}.block", c, units, g)
        layers.append(block)
        c = block.channels
        stages.append(StageSpec(name, layers))
    return stages


_BUILDERS = {
    "hyper_tiny": _hyper_tiny,
    "mini_densenet": _densenet,
    "vgg16_hc": _vgg16,
    "densenet67_hc": _densenet,
    "densenet121_hc": _densenet,
}


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


class SegOutput(NamedTuple):
    logits: Tensor
    penultimate: Tensor
    hypercolumn: Tensor | None
    taps: list[Tensor]


class SegModel:
    def __init__(self, config: SegNetConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.stages = _BUILDERS[config.preset](config)
        self.stage_shapes = self._trace_shapes()
        self.params = ParamStore(dtype)
        for stage in self.stages:
            for layer in stage.layers:
                layer.register(self.params, rng)
        self.params.add_conv(CLASSIFIER_PREFIX.rstrip("."), config.num_classes, self.hypercolumn_channels, 1, rng)

    def _trace_shapes(self) -> list[tuple[int, int, int]]:
        h, w = self.config.input_resolution
        shapes = []
        for stage in self.stages:
            for layer in stage.layers:
                h, w = layer.out_size(h, w)
                if h < 1 or w < 1:
                    raise ConfigError(
                        f"input resolution {self.config.input_resolution} too small for {self.config.preset} at {layer.name}")
            shapes.append((stage.channels, h, w))
        return shapes

    @property
    def tap_channels(self) -> list[int]:
        return [s.channels for s in self.stages if s.tap]

    @property
    def hypercolumn_channels(self) -> int:
        return sum(self.tap_channels)

    @property
    def penultimate_shape(self) -> tuple[int, int, int]:
        return self.stage_shapes[-1]

    def dense_blocks(self) -> list[DenseBlockSpec]:
        return [layer for s in self.stages for layer in s.layers if isinstance(layer, DenseBlockSpec)]

    def forward(self, image: Tensor, params: Mapping[str, Tensor] | None = None,
                materialize: bool = True) -> SegOutput:
        """Run the backbone and the hypercolumn classifier.

        ``materialize=False`` never builds the full-resolution hypercolumn: the
        1x1 classifier is applied per tap before upsampling, which is the same
        linear map but fits full-scale presets in memory.
        """
        params = self.params if params is None else params
        if not materialize and active_tape() is not None:
            raise UsageError("the factored classifier path is inference-only; use materialize=True under a tape")
        h, w = self.config.input_resolution
        if image.data.ndim != 4 or tuple(image.shape[1:]) != (3, h, w):
            raise ConfigError(f"segnet expects (n, 3, {h}, {w}) images, got {image.shape}")
        taps = []
        x = image
        for stage in self.stages:
            x = stage(params, x)
            if stage.tap:
                taps.append(x)
        weight = params[f"{CLASSIFIER_PREFIX}weight"]
        bias = params[f"{CLASSIFIER_PREFIX}bias"]
        if materialize:
            hyper = hypercolumn(taps, (h, w))
            logits = conv2d(hyper, weight, bias, name=CLASSIFIER_PREFIX.rstrip("."))
            return SegOutput(logits, x, hyper, taps)
        logits = None
        start = 0
        for t in taps:
            c = t.shape[1]
            w_t = Tensor(weight.data[:, start:start + c])
            part = upsample_bilinear(conv2d(t, w_t, None), (h, w))
            logits = part if logits is None else add(logits, part)
            start += c
        logits = Tensor(logits.data + bias.data.reshape(1, -1, 1, 1))
        return SegOutput(logits, x, None, taps)

    def export_names(self) -> list[str]:
        return self.params.names(BACKBONE_PREFIX) + self.params.names(CLASSIFIER_PREFIX)


def hypercolumn(taps: Sequence[Tensor], size: tuple[int, int]) -> Tensor:
    return concat_channels([upsample_bilinear(t, size) for t in taps], name="hypercolumn")


def build_segnet(config: SegNetConfig, rng: np.random.Generator | int = 0, dtype=np.float32) -> SegModel:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return SegModel(config, rng, dtype)


def forward_hypercolumn(model: SegModel, image: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    out = model.forward(image)
    return out.logits, out.penultimate, out.hypercolumn


@dataclass
class HypercolumnStats:
    mean: np.ndarray
    std: np.ndarray


def hypercolumn_stats(features: np.ndarray) -> HypercolumnStats:
    """Per-channel moments of an (n, c, h, w) calibration batch."""
    f = np.asarray(features, dtype=np.float64)
    return HypercolumnStats(f.mean(axis=(0, 2, 3)), f.std(axis=(0, 2, 3)))


def standardize_hypercolumn(features: np.ndarray, stats: HypercolumnStats, eps: float = 1e-5) -> np.ndarray:
    """Zero-mean, unit-variance per channel; near-constant channels use an eps-floored divisor."""
    f = np.asarray(features)
    std = np.maximum(stats.std, eps)
    out = (f - stats.mean.reshape(1, -1, 1, 1)) / std.reshape(1, -1, 1, 1)
    return out.astype(f.dtype)


def predict(model: SegModel, image: Tensor | np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Per-pixel argmax; exact ties resolve to the lowest class id."""
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    if data.ndim == 3:
        data = data[None]
    out = []
    for start in range(0, len(data), batch_size):
        logits = model.forward(Tensor(data[start:start + batch_size].astype(model.params.dtype))).logits
        out.append(logits.data.argmax(axis=1))
    return np.concatenate(out)

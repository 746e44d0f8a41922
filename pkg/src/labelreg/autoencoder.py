"""Convolutional autoencoder over one-hot label maps (phase 1).

Encoder: ``pool_stages`` x (3x3 conv + ReLU, 2x2 max-pool). Decoder mirrors it:
nearest 2x upsample then 3x3 conv, ReLU everywhere except the final conv which
emits K logits. There are no skip connections, so the decoder sees only the
bottleneck.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import AdamState, ParamStore, Tape, Tensor, adam_step, conv2d, pool2d, relu, softmax_ce_loss
from .core.ops import check_label_ids, upsample_nearest2x
from .errors import ConfigError, DataError, TrainingError

VOID_ID = 255

PRESETS: dict[str, list[int]] = {
    "32": [32, 32, 32, 32, 32],
    "128": [32, 128, 128, 128, 128],
    "256": [32, 128, 128, 128, 256],
}

ENCODER_PREFIX = "encoder."
DECODER_PREFIX = "decoder."


def expand_preset(preset: str, pool_stages: int) -> list[int]:
    """Channel list for a named preset truncated to ``pool_stages`` convs.

    Shallower variants keep conv1 and the deepest widths, so the bottleneck
    width still matches the preset's name.
    """
    if preset not in PRESETS:
        raise ConfigError(f"unknown autoencoder preset {preset!r}; choose from {sorted(PRESETS)}")
    full = PRESETS[preset]
    if not 1 <= pool_stages <= len(full):
        raise ConfigError(f"preset {preset!r} supports 1..{len(full)} pool stages, got {pool_stages}")
    if pool_stages == 1:
        return full[-1:]
    return full[:1] + full[len(full) - (pool_stages - 1):]


@dataclass
class AutoencoderConfig:
    num_classes: int = 6
    pool_stages: int = 5
    preset: str | None = "32"
    encoder_channels: list[int] | None = None
    input_resolution: tuple[int, int] = (256, 256)

    def __post_init__(self):
        self.input_resolution = tuple(int(v) for v in self.input_resolution)
        if self.encoder_channels is None:
            if self.preset is None:
                raise ConfigError("autoencoder needs either a preset or explicit encoder_channels")
            self.encoder_channels = expand_preset(self.preset, self.pool_stages)
        else:
            self.encoder_channels = [int(c) for c in self.encoder_channels]
        self.validate()

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError("autoencoder needs at least 2 classes")
        if len(self.encoder_channels) != self.pool_stages:
            raise ConfigError(
                f"encoder_channels has {len(self.encoder_channels)} entries but pool_stages={self.pool_stages}")
        if any(c <= 0 for c in self.encoder_channels):
            raise ConfigError("encoder channel widths must be positive")
        h, w = self.input_resolution
        div = 2 ** self.pool_stages
        if h % div or w % div:
            raise ConfigError(f"input resolution {h}x{w} not divisible by 2^{self.pool_stages}={div}")

    @property
    def decoder_channels(self) -> list[int]:
        """Output widths of decoder convs, the final one being the K logits."""
        rev = self.encoder_channels[::-1]
        return rev[1:] + [self.num_classes]

    @property
    def bottleneck_shape(self) -> tuple[int, int, int]:
        h, w = self.input_resolution
        div = 2 ** self.pool_stages
        return self.encoder_channels[-1], h // div, w // div


class LabelAutoencoder:
    """Encoder/decoder parameter sets plus their config."""

    def __init__(self, config: AutoencoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.params = ParamStore(dtype)
        in_c = config.num_classes
        for i, c in enumerate(config.encoder_channels, start=1):
            self.params.add_conv(f"{ENCODER_PREFIX}conv{i}", c, in_c, 3, rng)
            in_c = c
        for i, c in enumerate(config.decoder_channels, start=1):
            self.params.add_conv(f"{DECODER_PREFIX}conv{i}", c, in_c, 3, rng)
            in_c = c

    @property
    def bottleneck_shape(self) -> tuple[int, int, int]:
        return self.config.bottleneck_shape

    def encoder_params(self) -> dict[str, Tensor]:
        return {n: self.params[n] for n in self.params.names(ENCODER_PREFIX)}

    def decoder_params(self) -> dict[str, Tensor]:
        return {n: self.params[n] for n in self.params.names(DECODER_PREFIX)}

    def encode(self, onehot: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
        return run_encoder(self.params, self.config, onehot)

    def decode(self, bottleneck: Tensor) -> Tensor:
        return run_decoder(self.params, self.config, bottleneck)

    def reconstruct(self, labels: np.ndarray) -> np.ndarray:
        """Argmax label map of decode(encode(one_hot(labels)))."""
        x = Tensor(one_hot_labels(labels, self.config.num_classes).astype(self.params.dtype))
        z, _ = self.encode(x)
        return self.decode(z).data.argmax(axis=1)


def build_autoencoder(config: AutoencoderConfig, rng: np.random.Generator | int = 0,
                      dtype=np.float32) -> LabelAutoencoder:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return LabelAutoencoder(config, rng, dtype)


def one_hot_labels(label: np.ndarray, num_classes: int, void_id: int = VOID_ID) -> np.ndarray:
    """(n, h, w) ids -> (n, K, h, w) float32; void pixels become all-zero vectors."""
    label = np.asarray(label)
    if label.ndim == 2:
        label = label[None]
    valid = check_label_ids(label, num_classes, void_id)
    out = np.zeros((label.shape[0], num_classes) + label.shape[1:], dtype=np.float32)
    safe = np.where(valid, label, 0)
    np.put_along_axis(out, safe[:, None], valid[:, None].astype(np.float32), axis=1)
    return out


def _check_input(x: Tensor, expected: tuple[int, ...], what: str) -> None:
    if x.data.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise ConfigError(f"{what} expects (n, {', '.join(map(str, expected))}) input, got {x.shape}")


def run_encoder(params: Mapping[str, Tensor], config: AutoencoderConfig, onehot: Tensor,
                prefix: str = ENCODER_PREFIX) -> tuple[Tensor, dict[str, Tensor]]:
    """Returns the bottleneck and every conv activation (pre-pool) keyed conv1..convS."""
    _check_input(onehot, (config.num_classes,) + config.input_resolution, "encoder")
    taps: dict[str, Tensor] = {}
    x = onehot
    for i in range(1, config.pool_stages + 1):
        name = f"{prefix}conv{i}"
        x = relu(conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], 1, 1, name=name))
        taps[f"conv{i}"] = x
        x = pool2d(x, "max", 2, 2, name=f"{prefix}pool{i}")
    return x, taps


def run_decoder(params: Mapping[str, Tensor], config: AutoencoderConfig, bottleneck: Tensor,
                prefix: str = DECODER_PREFIX) -> Tensor:
    _check_input(bottleneck, config.bottleneck_shape, "decoder")
    x = bottleneck
    last = config.pool_stages
    for i in range(1, last + 1):
        name = f"{prefix}conv{i}"
        x = upsample_nearest2x(x, name=name)
        x = conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], 1, 1, name=name)
        if i < last:
            x = relu(x)
    return x


def encode(model: LabelAutoencoder, onehot: Tensor):
    return model.encode(onehot)


def decode(model: LabelAutoencoder, bottleneck: Tensor) -> Tensor:
    return model.decode(bottleneck)


def reconstruction_accuracy(model: LabelAutoencoder, labels: np.ndarray, batch_size: int = 32,
                            void_id: int = VOID_ID) -> float:
    """Fraction of non-void pixels whose reconstructed argmax equals the input."""
    hit = 0
    count = 0
    for start in range(0, len(labels), batch_size):
        y = np.asarray(labels[start:start + batch_size])
        pred = model.reconstruct(y)
        valid = y != void_id
        hit += int(((pred == y) & valid).sum())
        count += int(valid.sum())
    return hit / max(count, 1)


@dataclass
class AutoencoderSchedule:
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 12
    # stop as soon as a full-pass reconstruction accuracy reaches this value
    target_accuracy: float | None = None


@dataclass
class AutoencoderEpoch:
    epoch: int
    loss: float
    accuracy: float


@dataclass
class AutoencoderRun:
    model: LabelAutoencoder
    history: list[AutoencoderEpoch] = field(default_factory=list)


def train_autoencoder(model: LabelAutoencoder, labels: Sequence[np.ndarray] | np.ndarray,
                      schedule: AutoencoderSchedule, rng: np.random.Generator | int = 0,
                      void_id: int = VOID_ID) -> AutoencoderRun:
    """Minimise per-pixel CE between decode(encode(one_hot(y))) and y.

    Only label maps are consumed; images never enter phase 1.
    """
    labels = np.asarray(labels)
    if labels.ndim != 3 or len(labels) == 0:
        raise DataError("train_autoencoder needs a non-empty (n, h, w) stack of label maps")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    K = model.config.num_classes
    onehot = one_hot_labels(labels, K, void_id).astype(model.params.dtype)
    state = AdamState()
    run = AutoencoderRun(model)
    n = len(labels)
    for epoch in range(schedule.epochs):
        order = rng.permutation(n)
        loss_sum = 0.0
        hit = 0
        count = 0
        for start in range(0, n, schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            y = labels[idx]
            with Tape() as tape:
                z, _ = model.encode(Tensor(onehot[idx]))
                logits = model.decode(z)
                loss = softmax_ce_loss(logits, y, void_id)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite autoencoder loss at epoch {epoch}, batch starting {start}")
            grads = tape.backward(loss)
            adam_step(model.params, grads, state, schedule.lr)
            valid = y != void_id
            hit += int(((logits.data.argmax(axis=1) == y) & valid).sum())
            count += int(valid.sum())
            loss_sum += value * len(idx)
        record = AutoencoderEpoch(epoch, loss_sum / n, hit / max(count, 1))
        run.history.append(record)
        if schedule.target_accuracy is not None and record.accuracy >= schedule.target_accuracy:
            if reconstruction_accuracy(model, labels, void_id=void_id) >= schedule.target_accuracy:
                break
    return run

"""Auxiliary label-structure regularizers and the phase-2 training loop.

Two ways of attaching a trained label autoencoder to a segmentation network:

``decoder_aux``   penultimate CNN activation -> new 1x1 conv -> autoencoder
                  decoder -> K logits, supervised with the same labels.
``encoder_pred``  CNN hypercolumn -> new 1x1 conv regressing the (frozen)
                  encoder's conv1/conv3 activations of the ground-truth labels.

Both add ``lam * aux_loss`` to the usual per-pixel cross-entropy. The
auxiliary head and decoder are dropped by :func:`export_model`.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autoencoder import (
    DECODER_PREFIX,
    AutoencoderConfig,
    LabelAutoencoder,
    one_hot_labels,
    run_decoder,
    run_encoder,
)
from .core import (
    AdamState,
    ParamStore,
    Tape,
    Tensor,
    add,
    adam_step,
    concat_channels,
    conv2d,
    mse_loss,
    scale,
    softmax_ce_loss,
    upsample_bilinear,
)
from .data import AugmentConfig, SegDataset, random_resized_crop_flip
from .errors import ConfigError, DataError, TrainingError
from .harness.metrics import ConfusionMatrix, miou
from .segnet import SegModel

log = logging.getLogger(__name__)

AUX_PREFIX = "aux_head."
VOID_ID = 255

VARIANTS = ("none", "decoder_aux", "encoder_pred")
AUX_LOSSES = ("cross_entropy", "mse")
DECODER_MODES = ("frozen", "unfrozen", "random_init")


@dataclass
class RegScheme:
    variant: str = "none"
    aux_loss: str = "cross_entropy"
    lam: float | None = None
    decoder_mode: str = "frozen"
    encoder_taps: tuple[str, ...] = ("conv1", "conv3")

    def __post_init__(self):
        self.encoder_taps = tuple(self.encoder_taps)
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown regularizer variant {self.variant!r}; choose from {VARIANTS}")
        if self.aux_loss not in AUX_LOSSES:
            raise ConfigError(f"unknown aux loss {self.aux_loss!r}; choose from {AUX_LOSSES}")
        if self.decoder_mode not in DECODER_MODES:
            raise ConfigError(f"unknown decoder mode {self.decoder_mode!r}; choose from {DECODER_MODES}")
        if self.variant == "encoder_pred" and self.aux_loss != "mse":
            raise ConfigError("encoder_pred regresses encoder activations and only supports aux_loss='mse'")
        if self.lam is None:
            self.lam = 0.5 if self.aux_loss == "cross_entropy" else 1.0
        self.lam = float(self.lam)
        if self.lam < 0 or not np.isfinite(self.lam):
            raise ConfigError(f"lambda must be a finite non-negative number, got {self.lam}")

    @property
    def active(self) -> bool:
        return self.variant != "none"


@dataclass
class CombinedLossRecord:
    primary_loss: float
    aux_loss: float
    total: float
    tensor: Tensor | None = field(default=None, repr=False, compare=False)


# ---------------------------------------------------------------------------
# augmented models
# ---------------------------------------------------------------------------


class RegularizedModel:
    """A segmentation network plus an optional auxiliary branch.

    ``params`` shares the segmentation network's tensors and adds the
    auxiliary head (and, for ``decoder_aux``, a private copy of the decoder).
    """

    def __init__(self, seg: SegModel, scheme: RegScheme, ae_config: AutoencoderConfig | None = None):
        self.seg = seg
        self.scheme = scheme
        self.ae_config = ae_config
        self.params = ParamStore(seg.params.dtype)
        for name, t in seg.params.items():
            self.params._params[name] = t
        self.encoder: dict[str, Tensor] = {}

    def aux_names(self) -> list[str]:
        return self.params.names(AUX_PREFIX)

    def decoder_names(self) -> list[str]:
        return self.params.names(DECODER_PREFIX)

    def forward(self, images: Tensor):
        out = self.seg.forward(images, self.params)
        aux = None
        if self.scheme.variant == "decoder_aux":
            code = conv2d(out.penultimate, self.params[f"{AUX_PREFIX}weight"], self.params[f"{AUX_PREFIX}bias"],
                          name=AUX_PREFIX.rstrip("."))
            aux = run_decoder(self.params, self.ae_config, code)
        elif self.scheme.variant == "encoder_pred":
            aux = conv2d(out.hypercolumn, self.params[f"{AUX_PREFIX}weight"], self.params[f"{AUX_PREFIX}bias"],
                         name=AUX_PREFIX.rstrip("."))
        return out, aux

    def encoder_target(self, labels: np.ndarray) -> np.ndarray:
        """Concatenated encoder taps of the ground truth, resampled to label resolution."""
        onehot = Tensor(one_hot_labels(labels, self.ae_config.num_classes).astype(self.params.dtype))
        _, taps = run_encoder(self.encoder, self.ae_config, onehot)
        size = tuple(labels.shape[1:])
        parts = [upsample_bilinear(taps[name], size) for name in self.scheme.encoder_taps]
        return concat_channels(parts).data


def _check_contract(seg: SegModel, ae: LabelAutoencoder) -> None:
    if seg.config.num_classes != ae.config.num_classes:
        raise ConfigError(
            f"segnet has {seg.config.num_classes} classes but the autoencoder models {ae.config.num_classes}")
    if tuple(seg.config.input_resolution) != tuple(ae.config.input_resolution):
        raise ConfigError(
            f"segnet input {seg.config.input_resolution} differs from autoencoder input {ae.config.input_resolution}")


def attach_decoder_aux(seg: SegModel, ae: LabelAutoencoder, mode: str = "frozen",
                       rng: np.random.Generator | int = 0, scheme: RegScheme | None = None) -> RegularizedModel:
    """Route the penultimate activation through a 1x1 head into the label decoder."""
    _check_contract(seg, ae)
    pen_c, pen_h, pen_w = seg.penultimate_shape
    bot_c, bot_h, bot_w = ae.bottleneck_shape
    if (pen_h, pen_w) != (bot_h, bot_w):
        raise ConfigError(
            f"penultimate-resolution contract violated: segnet penultimate is {pen_h}x{pen_w} "
            f"but the decoder expects a {bot_h}x{bot_w} bottleneck")
    if scheme is None:
        scheme = RegScheme("decoder_aux", decoder_mode=mode)
    if scheme.variant != "decoder_aux" or scheme.decoder_mode != mode:
        raise ConfigError("scheme does not describe this decoder_aux attachment")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    model = RegularizedModel(seg, scheme, ae.config)
    model.params.add_conv(AUX_PREFIX.rstrip("."), bot_c, pen_c, 1, rng)
    if mode == "random_init":
        in_c = bot_c
        for i, c in enumerate(ae.config.decoder_channels, start=1):
            model.params.add_conv(f"{DECODER_PREFIX}conv{i}", c, in_c, 3, rng)
            in_c = c
    else:
        for name, t in ae.decoder_params().items():
            model.params.add(name, t.data.copy())
    if mode == "frozen":
        model.params.freeze(model.decoder_names())
    return model


def attach_encoder_pred(seg: SegModel, ae: LabelAutoencoder, rng: np.random.Generator | int = 0,
                        scheme: RegScheme | None = None) -> RegularizedModel:
    """Regress the frozen encoder's hidden activations from the CNN hypercolumn."""
    _check_contract(seg, ae)
    scheme = scheme or RegScheme("encoder_pred", aux_loss="mse")
    if scheme.variant != "encoder_pred":
        raise ConfigError("scheme does not describe an encoder_pred attachment")
    taps = [int(t.removeprefix("conv")) for t in scheme.encoder_taps]
    if max(taps) > ae.config.pool_stages:
        raise ConfigError(
            f"encoder tap conv{max(taps)} requested but the autoencoder has {ae.config.pool_stages} convs")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    model = RegularizedModel(seg, scheme, ae.config)
    target_c = sum(ae.config.encoder_channels[t - 1] for t in taps)
    model.params.add_conv(AUX_PREFIX.rstrip("."), target_c, seg.hypercolumn_channels, 1, rng)
    model.encoder = {name: Tensor(t.data.copy(), name=name) for name, t in ae.encoder_params().items()}
    return model


def attach(seg: SegModel, ae: LabelAutoencoder | None, scheme: RegScheme,
           rng: np.random.Generator | int = 0) -> RegularizedModel:
    if not scheme.active:
        return RegularizedModel(seg, scheme)
    if ae is None:
        raise ConfigError(f"scheme {scheme.variant!r} needs a trained phase-1 autoencoder")
    if scheme.variant == "decoder_aux":
        return attach_decoder_aux(seg, ae, scheme.decoder_mode, rng, scheme)
    return attach_encoder_pred(seg, ae, rng, scheme)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def combined_loss(primary_logits: Tensor, aux_output: Tensor | None, label: np.ndarray, scheme: RegScheme,
                  aux_target: np.ndarray | None = None, void_id: int = VOID_ID) -> CombinedLossRecord:
    """primary CE + lam * aux; the record's ``tensor`` is the differentiable total."""
    primary = softmax_ce_loss(primary_logits, label, void_id)
    if not scheme.active:
        if aux_output is not None:
            raise ConfigError("scheme 'none' was given an auxiliary output")
        p = primary.item()
        return CombinedLossRecord(p, 0.0, p, primary)
    if aux_output is None:
        raise ConfigError(f"scheme {scheme.variant!r} needs an auxiliary output")
    valid = np.asarray(label) != void_id
    if scheme.variant == "decoder_aux":
        if aux_output.shape != primary_logits.shape:
            raise ConfigError(f"decoder output {aux_output.shape} does not match primary logits {primary_logits.shape}")
        if scheme.aux_loss == "cross_entropy":
            aux = softmax_ce_loss(aux_output, label, void_id)
        else:
            onehot = one_hot_labels(label, primary_logits.shape[1], void_id).astype(aux_output.dtype)
            aux = mse_loss(aux_output, Tensor(onehot), valid)
    else:
        if aux_target is None:
            raise ConfigError("encoder_pred needs the encoder activation target")
        aux = mse_loss(aux_output, Tensor(aux_target.astype(aux_output.dtype)), valid)
    total = add(primary, scale(aux, scheme.lam))
    return CombinedLossRecord(primary.item(), aux.item(), total.item(), total)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class Schedule:
    epochs_hi: int = 40
    epochs_lo: int = 10
    lr_hi: float = 1e-3
    lr_lo: float = 1e-4
    batch_size: int = 12

    def __post_init__(self):
        if self.epochs_hi < 0 or self.epochs_lo < 0 or self.epochs_hi + self.epochs_lo == 0:
            raise ConfigError("schedule needs a positive number of epochs")
        if self.lr_hi <= 0 or self.lr_lo <= 0:
            raise ConfigError("learning rates must be positive")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")

    @property
    def epochs(self) -> int:
        return self.epochs_hi + self.epochs_lo

    def lr(self, epoch: int) -> float:
        return self.lr_hi if epoch < self.epochs_hi else self.lr_lo


@dataclass
class EpochMetrics:
    epoch: int
    split: str
    primary_loss: float
    aux_loss: float | None
    miou: float


@dataclass
class TrainResult:
    model: RegularizedModel
    history: list[EpochMetrics] = field(default_factory=list)
    # sha256 of the shared (backbone + classifier) parameters after each epoch
    digests: list[str] = field(default_factory=list)

    def export(self) -> SegModel:
        return export_model(self.model)

    def final(self, split: str) -> EpochMetrics | None:
        rows = [m for m in self.history if m.split == split]
        return rows[-1] if rows else None


def shared_digest(model: RegularizedModel) -> str:
    h = hashlib.sha256()
    for name in model.seg.export_names():
        h.update(name.encode())
        h.update(model.params[name].data.tobytes())
    return h.hexdigest()


def export_model(model: RegularizedModel) -> SegModel:
    """Copy of the bare segmentation network: no auxiliary head, no decoder."""
    seg = model.seg
    out = SegModel.__new__(SegModel)
    out.config = seg.config
    out.stages = seg.stages
    out.stage_shapes = seg.stage_shapes
    out.params = ParamStore(seg.params.dtype)
    for name in seg.export_names():
        out.params.add(name, model.params[name].data.copy())
    return out


def evaluate(seg: SegModel, dataset: SegDataset, batch_size: int = 32, void_id: int = VOID_ID) -> tuple[float, float]:
    """(mean primary CE, mIoU) of a bare segmentation network on ``dataset``."""
    conf = ConfusionMatrix(seg.config.num_classes)
    loss_sum = 0.0
    weight = 0
    for start in range(0, len(dataset), batch_size):
        x = Tensor(dataset.images[start:start + batch_size].astype(seg.params.dtype))
        y = dataset.labels[start:start + batch_size]
        logits = seg.forward(x).logits
        n_valid = int((y != void_id).sum())
        if n_valid:
            loss_sum += softmax_ce_loss(logits, y, void_id).item() * n_valid
            weight += n_valid
        conf.update(y, logits.data.argmax(axis=1), void_id)
    return loss_sum / max(weight, 1), miou(conf)[1]


def train_segmenter(model: RegularizedModel, dataset: SegDataset, schedule: Schedule,
                    order_rng: np.random.Generator, augment: AugmentConfig | None = None,
                    augment_rng: np.random.Generator | None = None, val: SegDataset | None = None,
                    eval_every: int = 0, on_epoch: Callable[[int, RegularizedModel], None] | None = None,
                    void_id: int = VOID_ID) -> TrainResult:
    """Optimise primary CE + lam * aux with Adam under a two-level lr schedule.

    Validation metrics are logged every ``eval_every`` epochs (0 = final epoch
    only) when ``val`` is given.
    """
    if len(dataset) == 0:
        raise DataError("train_segmenter needs a non-empty dataset")
    if augment is not None and augment_rng is None:
        raise ConfigError("augmentation needs its own rng stream")
    scheme = model.scheme
    state = AdamState()
    result = TrainResult(model)
    n = len(dataset)
    dtype = model.params.dtype
    K = model.seg.config.num_classes
    trainable = [name for name in model.params if name not in model.params.frozen]
    step = 0
    for epoch in range(schedule.epochs):
        lr = schedule.lr(epoch)
        order = order_rng.permutation(n)
        conf = ConfusionMatrix(K)
        sums = np.zeros(2)
        for start in range(0, n, schedule.batch_size):
            idx = order[start:start + schedule.batch_size]
            images = dataset.images[idx]
            labels = dataset.labels[idx]
            if augment is not None:
                samples = [random_resized_crop_flip(dataset[i], augment_rng, augment) for i in idx]
                images = np.stack([s.image for s in samples])
                labels = np.stack([s.label for s in samples])
            if not (labels != void_id).any():
                continue
            target = model.encoder_target(labels) if scheme.variant == "encoder_pred" else None
            with Tape() as tape:
                out, aux = model.forward(Tensor(images.astype(dtype)))
                rec = combined_loss(out.logits, aux, labels, scheme, target, void_id)
            if not np.isfinite(rec.total):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            grads = tape.backward(rec.tensor)
            for name in trainable:
                if name not in grads:
                    grads[name] = np.zeros_like(model.params[name].data)
            adam_step(model.params, grads, state, lr)
            conf.update(labels, out.logits.data.argmax(axis=1), void_id)
            sums += (rec.primary_loss * len(idx), rec.aux_loss * len(idx))
            step += 1
        result.history.append(EpochMetrics(epoch, "train", sums[0] / n, sums[1] / n if scheme.active else None,
                                           miou(conf)[1] if conf.total else float("nan")))
        result.digests.append(shared_digest(model))
        last = epoch == schedule.epochs - 1
        if val is not None and (last or (eval_every and (epoch + 1) % eval_every == 0)):
            val_loss, val_miou = evaluate(export_model(model), val, void_id=void_id)
            result.history.append(EpochMetrics(epoch, "val", val_loss, None, val_miou))
        log.debug("epoch %d: %s", epoch, result.history[-1])
        if on_epoch is not None:
            on_epoch(epoch, model)
    return result

"""ExperimentConfig: one JSON document describing a full two-phase run."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from ..autoencoder import AutoencoderConfig, AutoencoderSchedule
from ..data import AugmentConfig, SyntheticSpec
from ..errors import ConfigError
from ..regularizer import RegScheme, Schedule
from ..segnet import SegNetConfig

TOP_LEVEL = ("seed", "dataset", "augment", "autoencoder", "autoencoder_schedule", "segnet", "scheme",
             "schedule", "eval_every", "out_dir")


def _build(cls, raw: Any, where: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**raw)
    except ConfigError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass
class DatasetPaths:
    """Pre-rendered PPM/PGM dataset directories."""
    train: str
    val: str


@dataclass
class ExperimentConfig:
    seed: int = 0
    dataset: SyntheticSpec | DatasetPaths = field(default_factory=SyntheticSpec)
    augment: AugmentConfig | None = None
    autoencoder: AutoencoderConfig = field(default_factory=lambda: AutoencoderConfig(pool_stages=3,
                                                                                     input_resolution=(64, 64)))
    autoencoder_schedule: AutoencoderSchedule = field(default_factory=AutoencoderSchedule)
    segnet: SegNetConfig = field(default_factory=SegNetConfig)
    scheme: RegScheme = field(default_factory=RegScheme)
    schedule: Schedule = field(default_factory=Schedule)
    # validation mIoU every N epochs (0 = only after the last epoch)
    eval_every: int = 0
    out_dir: str | None = None

    def __post_init__(self):
        self.check()

    @property
    def num_classes(self) -> int:
        return self.segnet.num_classes

    def check(self) -> None:
        if not isinstance(self.seed, int) or self.seed < 0 or self.seed >= 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be >= 0")
        seg, ae = self.segnet, self.autoencoder
        if seg.num_classes != ae.num_classes:
            raise ConfigError(f"segnet.num_classes={seg.num_classes} but autoencoder.num_classes={ae.num_classes}")
        if tuple(seg.input_resolution) != tuple(ae.input_resolution):
            raise ConfigError(
                f"segnet.input_resolution={list(seg.input_resolution)} differs from "
                f"autoencoder.input_resolution={list(ae.input_resolution)}")
        if isinstance(self.dataset, SyntheticSpec):
            if self.dataset.num_classes != seg.num_classes:
                raise ConfigError(f"dataset.num_classes={self.dataset.num_classes} but segnet.num_classes={seg.num_classes}")
            if tuple(self.dataset.resolution) != tuple(seg.input_resolution) and \
                    (self.augment is None or self.augment.output != tuple(seg.input_resolution)):
                raise ConfigError(
                    f"dataset.resolution={list(self.dataset.resolution)} does not match "
                    f"segnet.input_resolution={list(seg.input_resolution)}")

    # --- JSON ----------------------------------------------------------------

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("experiment config must be a JSON object")
        unknown = sorted(set(raw) - set(TOP_LEVEL))
        if unknown:
            raise ConfigError(f"unknown key(s) in config: {', '.join(unknown)}")
        kw: dict[str, Any] = {}
        if "seed" in raw:
            kw["seed"] = raw["seed"]
        if "eval_every" in raw:
            kw["eval_every"] = raw["eval_every"]
        if "out_dir" in raw:
            kw["out_dir"] = raw["out_dir"]
        if "dataset" in raw:
            ds = raw["dataset"]
            if isinstance(ds, dict) and ("train" in ds or "val" in ds):
                kw["dataset"] = _build(DatasetPaths, ds, "dataset")
            else:
                kw["dataset"] = _build(SyntheticSpec, ds, "dataset")
        if raw.get("augment") is not None:
            kw["augment"] = _build(AugmentConfig, raw["augment"], "augment")
        for key, cls_ in (("autoencoder", AutoencoderConfig), ("autoencoder_schedule", AutoencoderSchedule),
                          ("segnet", SegNetConfig), ("scheme", RegScheme), ("schedule", Schedule)):
            if key in raw:
                kw[key] = _build(cls_, raw[key], key)
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(self.dataset, SyntheticSpec):
            d["dataset"] = self.dataset.to_dict()
        d["scheme"]["encoder_taps"] = list(self.scheme.encoder_taps)
        return _jsonable(d)

    def replace(self, **changes) -> "ExperimentConfig":
        raw = self.to_dict()
        for key, value in changes.items():
            if "." in key:
                section, sub = key.split(".", 1)
                raw[section] = dict(raw[section] or {})
                raw[section][sub] = value
            else:
                raw[key] = value
        return ExperimentConfig.from_dict(raw)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x

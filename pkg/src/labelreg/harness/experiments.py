"""Two-phase runs, lambda sweeps and decoder ablations.

Every run is a pure function of (config, seed): phase 1 trains the label
autoencoder from the config seed, phase 2 draws segnet init, aux-head init,
data order and augmentation from separate named streams of the run seed.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..autoencoder import LabelAutoencoder, build_autoencoder, train_autoencoder
from ..data import SegDataset, load_dataset_dir, synthetic_dataset
from ..errors import ConfigError, DataError
from ..regularizer import RegScheme, TrainResult, attach, train_segmenter
from ..segnet import SegModel, build_segnet
from .checkpoint import load_checkpoint
from .config import DatasetPaths, ExperimentConfig
from .rng import stream

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "split", "primary_loss", "aux_loss", "miou")
SWEEP_HEADER = ("lambda", "seed", "miou")
ABLATION_HEADER = ("mode", "seed", "miou", "delta")
DEFAULT_LAMBDAS = (0.0, 0.25, 0.5, 1.0, 2.0, 4.0, 6.0)
ABLATION_MODES = ("none", "frozen", "unfrozen", "random_init")


# ---------------------------------------------------------------------------
# data and phases
# ---------------------------------------------------------------------------


def load_data(cfg: ExperimentConfig) -> tuple[SegDataset, SegDataset]:
    if isinstance(cfg.dataset, DatasetPaths):
        train = load_dataset_dir(cfg.dataset.train)
        val = load_dataset_dir(cfg.dataset.val)
        for name, ds in (("train", train), ("val", val)):
            if ds.num_classes != cfg.num_classes:
                raise ConfigError(f"{name} dataset has {ds.num_classes} classes, config expects {cfg.num_classes}")
            if ds.resolution != tuple(cfg.segnet.input_resolution) and cfg.augment is None:
                raise ConfigError(f"{name} dataset resolution {ds.resolution} differs from segnet input")
        return train, val
    return synthetic_dataset(cfg.dataset, "train"), synthetic_dataset(cfg.dataset, "val")


def train_phase1(cfg: ExperimentConfig, train: SegDataset) -> tuple[LabelAutoencoder, list]:
    """Label autoencoder trained on the training label maps only."""
    ae = build_autoencoder(cfg.autoencoder, stream(cfg.seed, "ae_init"))
    run = train_autoencoder(ae, train.labels, cfg.autoencoder_schedule, stream(cfg.seed, "ae_order"))
    return ae, run.history


def load_autoencoder(cfg: ExperimentConfig, path: str | Path) -> LabelAutoencoder:
    ae = build_autoencoder(cfg.autoencoder, 0)
    ae.params.load_state_dict(load_checkpoint(path))
    return ae


def train_phase2(cfg: ExperimentConfig, train: SegDataset, val: SegDataset | None, ae: LabelAutoencoder | None,
                 seed: int, scheme: RegScheme | None = None, on_epoch=None) -> TrainResult:
    scheme = scheme or cfg.scheme
    seg = build_segnet(cfg.segnet, stream(seed, "init"))
    model = attach(seg, ae, scheme, stream(seed, "aux_init"))
    return train_segmenter(model, train, cfg.schedule, stream(seed, "order"), augment=cfg.augment,
                           augment_rng=stream(seed, "augment") if cfg.augment else None, val=val,
                           eval_every=cfg.eval_every, on_epoch=on_epoch)


def load_segnet(cfg: ExperimentConfig, path: str | Path) -> SegModel:
    seg = build_segnet(cfg.segnet, 0)
    seg.params.load_state_dict(load_checkpoint(path))
    return seg


# ---------------------------------------------------------------------------
# output files
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return "nan" if np.isnan(x) else f"{float(x):.6f}"
    return str(x)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path: str | Path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(csv_text(header, rows))
    return path


def metrics_rows(result: TrainResult):
    return [(m.epoch, m.split, m.primary_loss, m.aux_loss, m.miou) for m in result.history]


def write_config(cfg: ExperimentConfig, out_dir: str | Path) -> Path:
    path = Path(out_dir) / "config.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    return path


def final_val_miou(result: TrainResult) -> float:
    row = result.final("val")
    if row is None:
        raise DataError("run finished without a validation measurement")
    return row.miou


# ---------------------------------------------------------------------------
# batteries
# ---------------------------------------------------------------------------


@dataclass
class BatteryResult:
    rows: list[tuple] = field(default_factory=list)
    summary: list[tuple] = field(default_factory=list)
    runs: dict = field(default_factory=dict)
    # wall-clock seconds per run, same keys as ``runs``
    seconds: dict = field(default_factory=dict)


def _mean_std(values):
    values = list(values)
    mean = statistics.fmean(values)
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return mean, std


def sweep_lambda(cfg: ExperimentConfig, lambdas=DEFAULT_LAMBDAS, seeds=(0, 1, 2), ae: LabelAutoencoder | None = None,
                 data=None, out_dir: str | Path | None = None, reuse: dict | None = None) -> BatteryResult:
    """One phase-2 run per (lambda, seed); rows sorted by (lambda, seed).

    ``reuse`` maps (lambda, seed) to a TrainResult of an identical run made
    elsewhere (e.g. the frozen arm of an ablation), which is taken as is.
    """
    if not cfg.scheme.active:
        raise ConfigError("sweep-lambda needs a regularizing scheme (variant != 'none')")
    train, val = data or load_data(cfg)
    if ae is None:
        ae, _ = train_phase1(cfg, train)
    out = BatteryResult()
    for lam in sorted(float(v) for v in lambdas):
        scheme = RegScheme(cfg.scheme.variant, cfg.scheme.aux_loss, lam, cfg.scheme.decoder_mode,
                           cfg.scheme.encoder_taps)
        for seed in sorted(seeds):
            if reuse and (lam, seed) in reuse:
                result = reuse[(lam, seed)]
            else:
                start = time.perf_counter()
                result = train_phase2(cfg, train, val, ae, seed, scheme)
                out.seconds[(lam, seed)] = time.perf_counter() - start
            m = final_val_miou(result)
            log.info("lambda=%g seed=%d miou=%.4f", lam, seed, m)
            out.rows.append((lam, seed, m))
            out.runs[(lam, seed)] = result
            if out_dir is not None:
                write_csv(Path(out_dir) / "runs" / f"lambda{lam:g}_seed{seed}" / "metrics.csv",
                          METRICS_HEADER, metrics_rows(result))
    for lam in sorted({r[0] for r in out.rows}):
        mean, std = _mean_std(r[2] for r in out.rows if r[0] == lam)
        out.summary.append((lam, mean, std, sum(1 for r in out.rows if r[0] == lam)))
    if out_dir is not None:
        write_csv(Path(out_dir) / "sweep.csv", SWEEP_HEADER, out.rows)
        write_csv(Path(out_dir) / "sweep_summary.csv", ("lambda", "mean_miou", "std_miou", "n"), out.summary)
    return out


def scheme_for_mode(cfg: ExperimentConfig, mode: str) -> RegScheme:
    if mode == "none":
        return RegScheme("none")
    lam = cfg.scheme.lam if cfg.scheme.variant == "decoder_aux" else None
    return RegScheme("decoder_aux", cfg.scheme.aux_loss if cfg.scheme.variant == "decoder_aux" else "cross_entropy",
                     lam, mode)


def run_ablation(cfg: ExperimentConfig, seeds=(0, 1, 2, 3, 4), modes=ABLATION_MODES,
                 ae: LabelAutoencoder | None = None, data=None, out_dir: str | Path | None = None) -> BatteryResult:
    """Baseline vs decoder_aux with frozen / unfrozen / random_init decoders.

    All modes of one seed share segnet init and data order. ``delta`` is the
    per-seed difference to the baseline run.
    """
    if "none" not in modes:
        modes = ("none",) + tuple(modes)
    train, val = data or load_data(cfg)
    if ae is None:
        ae, _ = train_phase1(cfg, train)
    out = BatteryResult()
    scores: dict[tuple[str, int], float] = {}
    for seed in sorted(seeds):
        for mode in modes:
            start = time.perf_counter()
            result = train_phase2(cfg, train, val, ae, seed, scheme_for_mode(cfg, mode))
            out.seconds[(mode, seed)] = time.perf_counter() - start
            scores[(mode, seed)] = final_val_miou(result)
            out.runs[(mode, seed)] = result
            log.info("mode=%s seed=%d miou=%.4f", mode, seed, scores[(mode, seed)])
            if out_dir is not None:
                write_csv(Path(out_dir) / "runs" / f"{mode}_seed{seed}" / "metrics.csv",
                          METRICS_HEADER, metrics_rows(result))
    for mode in modes:
        for seed in sorted(seeds):
            out.rows.append((mode, seed, scores[(mode, seed)], scores[(mode, seed)] - scores[("none", seed)]))
    for mode in modes:
        vals = [r for r in out.rows if r[0] == mode]
        mean, std = _mean_std(r[2] for r in vals)
        dmean, dstd = _mean_std(r[3] for r in vals)
        wins = sum(1 for r in vals if r[3] > 0)
        out.summary.append((mode, mean, std, dmean, dstd, wins, len(vals)))
    if out_dir is not None:
        write_csv(Path(out_dir) / "ablation.csv", ABLATION_HEADER, out.rows)
        write_csv(Path(out_dir) / "ablation_summary.csv",
                  ("mode", "mean_miou", "std_miou", "mean_delta", "std_delta", "wins", "n"), out.summary)
    return out


def pooled_std(summary) -> float:
    """sqrt of the n-weighted mean of per-group variances (sweep summary rows)."""
    num = sum((n - 1) * std ** 2 for _, _, std, n in summary)
    den = sum(n - 1 for *_, n in summary)
    return float(np.sqrt(num / den)) if den > 0 else 0.0


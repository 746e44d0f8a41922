"""Command line entry point: ``labelreg <command> --config cfg.json --out DIR``.

Exit status: 0 success, 1 configuration or usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .data import SyntheticSpec, synthetic_dataset, write_dataset_dir
from .errors import ConfigError, LabelRegError, UsageError
from .harness import experiments as ex
from .harness import plotting
from .harness.checkpoint import save_checkpoint
from .harness.config import ExperimentConfig
from .harness.introspect import extract_region_features, match_rate
from .harness.metrics import ConfusionMatrix, miou
from .harness.rng import stream
from .regularizer import evaluate, export_model
from .segnet import predict

log = logging.getLogger("labelreg")

AE_CKPT = "ae.ckpt"
SEG_CKPT = "segnet.ckpt"
FULL_CKPT = "train_state.ckpt"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="labelreg", description="Label-structure regularization for hypercolumn segmentation.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, help="ExperimentConfig JSON")
        s.add_argument("--seed", type=_seed, help="override the config seed")
        s.add_argument("--out", help="output directory (default: config out_dir)")
        s.add_argument("-v", "--verbose", action="store_true")
        return s

    common("gen-data", "render the synthetic train/val splits as PPM/PGM directories")
    common("train-ae", "phase 1: train the label autoencoder")
    s = common("train-seg", "phase 2: train the segmentation network")
    s.add_argument("--ae", help=f"phase-1 checkpoint (default: <out>/{AE_CKPT})")
    s = common("eval", "evaluate an exported segmentation model on the val split")
    s.add_argument("--checkpoint", help=f"exported model (default: <out>/{SEG_CKPT})")
    for name, help_ in (("sweep-lambda", "aux loss weight sweep"), ("ablate", "decoder-mode ablation")):
        s = common(name, help_)
        s.add_argument("--seeds", type=int, nargs="+", help="phase-2 seeds (default 0..4)")
        s.add_argument("--ae", help="reuse a phase-1 checkpoint instead of training one")
        if name == "sweep-lambda":
            s.add_argument("--lambdas", type=float, nargs="+", default=list(ex.DEFAULT_LAMBDAS))
    s = common("query-nn", "nearest-neighbour search over bottleneck regions of the val split")
    s.add_argument("--ae", help=f"phase-1 checkpoint (default: <out>/{AE_CKPT})")
    s.add_argument("--queries", type=int, default=100)
    return p


def _setup(args) -> tuple[ExperimentConfig, Path]:
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    out = args.out or cfg.out_dir
    if not out:
        raise ConfigError("no output directory: pass --out or set out_dir in the config")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ex.write_config(cfg, out)
    handler = logging.FileHandler(out / f"{args.command}.log", mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("labelreg")
    root.addHandler(handler)
    root.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    return cfg, out


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise ConfigError(f"missing {what}: {path} does not exist")
    return path


def cmd_gen_data(cfg, out, args):
    if not isinstance(cfg.dataset, SyntheticSpec):
        raise ConfigError("gen-data needs a synthetic dataset spec in the config")
    for split in ("train", "val"):
        ds = synthetic_dataset(cfg.dataset, split)
        write_dataset_dir(ds, out / split)
        log.info("wrote %d %s samples", len(ds), split)
    ex.write_csv(out / "metrics.csv", ex.METRICS_HEADER, [])


def cmd_train_ae(cfg, out, args):
    train, _ = ex.load_data(cfg)
    ae, history = ex.train_phase1(cfg, train)
    save_checkpoint(ae.params, out / AE_CKPT)
    rows = [(h.epoch, "train", h.loss, None, h.accuracy) for h in history]
    ex.write_csv(out / "metrics.csv", ex.METRICS_HEADER, rows)
    log.info("autoencoder reconstruction accuracy %.4f after %d epochs", history[-1].accuracy, len(history))
    print(f"reconstruction accuracy {history[-1].accuracy:.4f}")


def cmd_train_seg(cfg, out, args):
    ae = None
    if cfg.scheme.active:
        path = Path(args.ae) if args.ae else out / AE_CKPT
        _require(path, "phase-1 autoencoder checkpoint (run train-ae first)")
        ae = ex.load_autoencoder(cfg, path)
    train, val = ex.load_data(cfg)

    def on_epoch(epoch, model):
        log.info("epoch %d done", epoch)

    result = ex.train_phase2(cfg, train, val, ae, cfg.seed, on_epoch=on_epoch)
    save_checkpoint(export_model(result.model).params, out / SEG_CKPT)
    save_checkpoint(result.model.params, out / FULL_CKPT)
    ex.write_csv(out / "metrics.csv", ex.METRICS_HEADER, ex.metrics_rows(result))
    plotting.plot_training_curves(result.history, out / "training.png")
    print(f"val mIoU {ex.final_val_miou(result):.4f}")


def cmd_eval(cfg, out, args):
    path = _require(Path(args.checkpoint) if args.checkpoint else out / SEG_CKPT, "exported segmentation model")
    seg = ex.load_segnet(cfg, path)
    _, val = ex.load_data(cfg)
    loss, _ = evaluate(seg, val)
    conf = ConfusionMatrix(cfg.num_classes).update(val.labels, predict(seg, val.images))
    per_class, mean = miou(conf)
    ex.write_csv(out / "metrics.csv", ex.METRICS_HEADER, [("eval", "val", loss, None, mean)])
    ex.write_csv(out / "per_class.csv", ("class", "iou"), list(enumerate(per_class)))
    print(f"val mIoU {mean:.4f}")


def _battery_ae(cfg, out, args, train):
    if args.ae:
        return ex.load_autoencoder(cfg, _require(Path(args.ae), "phase-1 autoencoder checkpoint"))
    ae, _ = ex.train_phase1(cfg, train)
    save_checkpoint(ae.params, out / AE_CKPT)
    return ae


def cmd_sweep(cfg, out, args):
    if not cfg.scheme.active:
        raise ConfigError("sweep-lambda needs scheme.variant decoder_aux or encoder_pred")
    data = ex.load_data(cfg)
    ae = _battery_ae(cfg, out, args, data[0])
    res = ex.sweep_lambda(cfg, args.lambdas, args.seeds or range(5), ae=ae, data=data, out_dir=out)
    ex.write_csv(out / "metrics.csv", ex.METRICS_HEADER,
                 [row for key in sorted(res.runs) for row in ex.metrics_rows(res.runs[key])])
    plotting.plot_lambda_sweep(res.summary, out / "sweep.png")
    for lam, mean, std, n in res.summary:
        print(f"lambda={lam:g} mIoU {mean:.4f} +/- {std:.4f} (n={n})")


def cmd_ablate(cfg, out, args):
    data = ex.load_data(cfg)
    ae = _battery_ae(cfg, out, args, data[0])
    res = ex.run_ablation(cfg, args.seeds or range(5), ae=ae, data=data, out_dir=out)
    ex.write_csv(out / "metrics.csv", ex.METRICS_HEADER,
                 [row for key in res.runs for row in ex.metrics_rows(res.runs[key])])
    plotting.plot_ablation(res.summary, res.rows, out / "ablation.png")
    for mode, mean, std, dmean, _, wins, n in res.summary:
        print(f"{mode:12s} mIoU {mean:.4f} +/- {std:.4f}  delta {dmean:+.4f}  better on {wins}/{n} seeds")


def cmd_query_nn(cfg, out, args):
    path = _require(Path(args.ae) if args.ae else out / AE_CKPT, "phase-1 autoencoder checkpoint (run train-ae first)")
    ae = ex.load_autoencoder(cfg, path)
    _, val = ex.load_data(cfg)
    feats = extract_region_features(ae, val, "encoder_gt")
    rate, pairs = match_rate(feats, args.queries, stream(cfg.seed, "introspect"))
    rows = [(q.sample, f"{q.cell[0]}:{q.cell[1]}", q.dominant, m.feature.sample,
             f"{m.feature.cell[0]}:{m.feature.cell[1]}", m.feature.dominant, m.distance) for q, m in pairs]
    ex.write_csv(out / "neighbors.csv", ("query_sample", "query_cell", "query_class", "match_sample",
                                         "match_cell", "match_class", "distance"), rows)
    ex.write_csv(out / "metrics.csv", ex.METRICS_HEADER, [("nn", "val", None, None, rate)])
    grid = ae.bottleneck_shape[1:]
    plotting.plot_neighbors(pairs, val.labels, val.labels, grid, out / "neighbors.png")
    print(f"top-1 dominant-class agreement {rate:.3f} over {len(pairs)} queries")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-ae": cmd_train_ae,
    "train-seg": cmd_train_seg,
    "eval": cmd_eval,
    "sweep-lambda": cmd_sweep,
    "ablate": cmd_ablate,
    "query-nn": cmd_query_nn,
}


def main(argv=None) -> int:
    handler = None
    try:
        args = build_parser().parse_args(argv)
        cfg, out = _setup(args)
        handler = logging.getLogger("labelreg").handlers[-1]
        np.seterr(over="ignore", under="ignore")
        COMMANDS[args.command](cfg, out, args)
        return 0
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (LabelRegError, OSError, FloatingPointError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    finally:
        if handler is not None:
            logging.getLogger("labelreg").removeHandler(handler)
            handler.close()


if __name__ == "__main__":
    sys.exit(main())

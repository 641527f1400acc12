"""Command-line entry point: ``riconv <command> [--config FILE] [--seed N] [--out DIR] [--deterministic]``."""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

from .config import COMMANDS, ExperimentConfig, load_config
from .geometry import load_point_cloud
from .model import ConfigError
from .nncore import load_checkpoint, save_checkpoint
from .training import evaluate

log = logging.getLogger("riconv")

METRICS_HEADER = ("epoch", "split", "mode", "metric", "value")


def _metric_name(task):
    return "miou" if task == "segment" else "accuracy"


def cmd_extract(cfg: ExperimentConfig, out: Path):
    from .experiments import EXTRACT_HEADER, extract_irif, write_rows

    if not cfg.extract.input:
        raise ConfigError("[extract] input is required")
    cloud = load_point_cloud(cfg.extract.input)
    rows = extract_irif(cloud, cfg.extract.reps, cfg.extract.neighbors_k, cfg.network.support_k)
    return [write_rows(out / "irif.csv", EXTRACT_HEADER, rows)]


def cmd_train(cfg: ExperimentConfig, out: Path):
    from .experiments import build_datasets, fit, write_rows

    data = build_datasets(cfg)
    t = cfg.train
    net, history, te = fit(cfg, data)
    name = _metric_name(net.cfg.task)
    rows = []
    for h in history:
        rows.append((h["epoch"], "train", t.train_mode, "loss", repr(h["train_loss"])))
        rows.append((h["epoch"], "train", t.train_mode, name, repr(h["train_acc"])))
    ev = evaluate(net, te, t.test_mode, t.trials, cfg.seed + 1)
    rows.append((t.epochs, "test", t.test_mode, name, repr(ev.metric)))
    save_checkpoint(net, out / "model.ckpt")
    return [write_rows(out / "metrics.csv", METRICS_HEADER, rows), out / "model.ckpt"]


def cmd_eval(cfg: ExperimentConfig, out: Path):
    from .experiments import build_datasets, write_rows
    from .model import build_network

    if not cfg.train.checkpoint:
        raise ConfigError("[train] checkpoint is required for eval")
    _, te = build_datasets(cfg)
    net = build_network(cfg.network_config(num_classes=te.num_classes))
    load_checkpoint(net, cfg.train.checkpoint)
    name = _metric_name(net.cfg.task)
    rows = []
    for mode in cfg.train.test_modes:
        ev = evaluate(net, te, mode, cfg.train.trials, cfg.seed + 1)
        rows.append(("", "test", mode, name, repr(ev.metric)))
        rows.append(("", "test", mode, "unstable_samples", int(ev.unstable.sum())))
    return [write_rows(out / "metrics.csv", METRICS_HEADER, rows)]


def cmd_grid(cfg, out):
    from .experiments import run_rotation_grid
    return [run_rotation_grid(cfg).write_csv(out / "grid.csv")]


def cmd_noise(cfg, out):
    from .experiments import run_noise_sweep
    table = run_noise_sweep(cfg, csv_path=out / "noise_curve.csv")
    return [table.write_csv(out / "noise.csv"), out / "noise_curve.csv"]


def cmd_ablate(cfg, out):
    from .experiments import run_ablation
    return [run_ablation(cfg).write_csv(out / "ablation.csv")]


def cmd_repeat(cfg, out):
    from .experiments import run_repeatability, write_rows
    res = run_repeatability(cfg)
    return [
        res.table.write_csv(out / "repeat.csv"),
        write_rows(out / "repeat_errors.csv", ("model_id", "point_id", "method", "error_deg"), res.errors),
        write_rows(out / "repeat_hist.csv", ("model_id", "method", "bin_lo", "bin_hi", "count", "fraction"),
                   res.histogram),
    ]


HANDLERS = {
    "extract": cmd_extract, "train": cmd_train, "eval": cmd_eval, "grid": cmd_grid,
    "noise": cmd_noise, "ablate": cmd_ablate, "repeat": cmd_repeat,
}


@contextlib.contextmanager
def deterministic_mode(enabled: bool):
    """Pin BLAS/OpenMP pools to one thread so reductions run in a fixed order."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="riconv", description="Rotation-invariant point-cloud experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="sectioned key=value experiment file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path)
    p.add_argument("--deterministic", action="store_true", help="single-threaded numerics")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, command=args.command, seed=args.seed,
                          out=str(args.out) if args.out else None)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        with deterministic_mode(args.deterministic):
            written = HANDLERS[cfg.command](cfg, out)
    except (ConfigError, ValueError, FileNotFoundError) as err:
        print(f"riconv: error: {err}", file=sys.stderr)
        return 2
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())

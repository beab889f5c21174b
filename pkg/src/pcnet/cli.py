"""``pcnet`` command-line interface.

Exit codes: 0 success, 1 configuration or plan error, 2 data or checkpoint
I/O error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from pcnet.data import data_dir, fetch_mnist, load_dataset
from pcnet.exceptions import CheckpointError, ConfigError, DataError, NumericalError, PCNError, PlanError
from pcnet.nn import ARCHITECTURES, build_network, count_params, load_checkpoint, save_checkpoint
from pcnet.pipeline import RunConfig, analyze_dims, report, run, write_dim_csv
from pcnet.transform import apply_plan, load_plan, planned_param_count, touched_layers

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _run_flags(p: argparse.ArgumentParser) -> None:
    """Flags that override RunConfig fields; ``None`` means "not given"."""
    p.add_argument("--config", type=Path, help="JSON run config (flags override its values)")
    p.add_argument("--arch", choices=sorted(ARCHITECTURES))
    p.add_argument("--dataset", choices=["mnist", "cifar10"])
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=["sgd", "sgd-momentum", "adam"])
    p.add_argument("--momentum", type=float)
    p.add_argument("--l2", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--milestones", type=lambda s: [int(v) for v in s.split(",") if v])
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--train-subset", dest="train_subset", type=int)
    p.add_argument("--augment", choices=["none", "pad4-crop32-hflip"])
    p.add_argument("--hidden", type=int, help="hidden width of the MLP")
    p.add_argument("--trace", dest="trace_layers", action="append", metavar="LAYER",
                   help="record the effective dimensionality of this layer's input every epoch")
    p.add_argument("--trace-samples", dest="trace_samples", type=int,
                   help="training images used to measure effective dimensionality")
    p.add_argument("--prefetch", type=int, help="batches prepared ahead by the loader thread (0: inline)")
    p.add_argument("--early-stopping", dest="early_stopping", action="store_true", default=None)
    p.add_argument("--out", type=Path, default=Path("runs"))
    p.add_argument("--print-config", action="store_true", help="print the merged config and exit")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pcnet", description="Train networks, measure activation dimensionality, and compress layers into their PCA basis.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a baseline network")
    _run_flags(p)

    p = sub.add_parser("train-pcn", help="train, transform after epoch K, keep training")
    _run_flags(p)
    p.add_argument("--plan", type=Path, help="JSON transform plan")

    p = sub.add_parser("analyze-dim", help="effective dimensionality per epoch or per width")
    _run_flags(p)
    p.add_argument("--layer", action="append", required=True, help="layer whose input is analyzed")
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--widths", type=lambda s: [int(v) for v in s.split(",") if v],
                   help="comma-separated hidden widths to sweep (MLP)")
    p.add_argument("--csv", type=Path, help="output CSV (default: <out>/dims.csv)")
    p.add_argument("--plot", type=Path, help="also write an SVG plot")

    p = sub.add_parser("count-params", help="print trainable/total parameter counts")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--arch", choices=sorted(ARCHITECTURES))
    src.add_argument("--checkpoint", type=Path)
    p.add_argument("--plan", type=Path, help="count the network this plan would produce (fixed sizes only)")

    p = sub.add_parser("transform", help="apply a plan to a checkpoint offline")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--plan", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--dataset", choices=["mnist", "cifar10"])
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--samples", type=int, default=5000, help="training samples used for PCA")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("report", help="merge run records into a comparison table")
    p.add_argument("--runs", type=Path, nargs="+", required=True)
    p.add_argument("--csv", type=Path, help="also write the table as CSV")

    p = sub.add_parser("fetch", help="download MNIST (checksum-verified)")
    p.add_argument("--base-url", required=True, help="mirror serving the four .gz IDX files")
    p.add_argument("--dest", type=Path, default=None)
    return parser


def merged_config(args) -> RunConfig:
    raw: dict = {}
    if args.config is not None:
        if not args.config.is_file():
            raise ConfigError(f"config file not found: {args.config}")
        try:
            raw = json.loads(args.config.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
    for key in ("arch", "dataset", "data_dir", "epochs", "seed", "lr", "optimizer", "momentum", "l2",
                "batch_size", "milestones", "val_fraction", "train_subset", "augment", "trace_layers",
                "early_stopping", "prefetch", "trace_samples"):
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = value
    if getattr(args, "hidden", None) is not None:
        raw["arch_kwargs"] = {**raw.get("arch_kwargs", {}), "hidden": args.hidden}
    plan_path = getattr(args, "plan", None)
    if plan_path is not None:
        raw["plan"] = load_plan(plan_path).to_dict()
    config = RunConfig.from_dict(raw)
    if args.command == "train":
        config.plan = None
    if args.command == "train-pcn" and config.plan is None:
        raise PlanError("train-pcn needs a plan (--plan FILE or a 'plan' entry in --config)")
    return config


def cmd_train(args) -> int:
    config = merged_config(args)
    if args.print_config:
        print(json.dumps(config.to_dict(), indent=2, sort_keys=True))
        return 0
    config.validate()
    record = run(config, out_dir=args.out)
    print(f"{record.run_id}: test accuracy {record.final['test_acc']:.4f}, "
          f"{record.final['trainable_params']:,} trainable / {record.final['total_params']:,} total parameters")
    if record.transform_epoch is not None:
        print(f"transformed after epoch {record.transform_epoch}; record: {args.out / (record.run_id + '.csv')}")
    return 0


def cmd_analyze_dim(args) -> int:
    config = merged_config(args)
    if config.epochs is None:
        config.epochs = 0
    if args.print_config:
        print(json.dumps(config.to_dict(), indent=2, sort_keys=True))
        return 0
    rows = analyze_dims(config, args.layer, args.tau, args.widths)
    path = write_dim_csv(rows, args.csv or args.out / "dims.csv")
    print(f"wrote {len(rows)} rows to {path}")
    if args.plot:
        plot_dims(rows, args.plot, by_width=bool(args.widths))
    return 0


def plot_dims(rows: list[dict], path: Path, by_width: bool) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    if by_width:
        last = max(r["epoch"] for r in rows)
        pts = sorted((r["width"], r["effective_dim"]) for r in rows if r["epoch"] == last)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], "o-", label="effective")
        ax.plot([p[0] for p in pts], [p[0] for p in pts], "--", color="gray", label="full")
        ax.set_xlabel("width")
    else:
        for layer in sorted({r["layer"] for r in rows}):
            pts = [(r["epoch"], r["effective_dim"]) for r in rows if r["layer"] == layer]
            ax.plot([p[0] for p in pts], [p[1] for p in pts], "o-", label=layer)
        ax.set_xlabel("epoch")
    ax.set_ylabel("effective dimensions")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def cmd_count_params(args) -> int:
    if args.arch:
        net = build_network(args.arch, seed=None)
    else:
        net = load_checkpoint(args.checkpoint).network
    counts = count_params(net)
    if args.plan is not None:
        counts = planned_param_count(net, load_plan(args.plan))
    print(f"trainable {counts.trainable}")
    print(f"total {counts.total}")
    return 0


def cmd_transform(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    plan = load_plan(args.plan)
    dataset = args.dataset or ckpt.metadata.get("dataset") or ckpt.metadata.get("config", {}).get("dataset")
    if dataset is None:
        raise ConfigError("cannot tell which dataset the checkpoint was trained on; pass --dataset")
    ds = load_dataset(dataset, args.data_dir)
    idx = np.random.default_rng([args.seed, 1]).permutation(len(ds.x_train))[: args.samples]
    result = apply_plan(ckpt.network, plan, ds.x_train[idx], max_samples=args.samples, seed=args.seed)
    if ckpt.optimizer is not None:
        ckpt.optimizer.reset(touched_layers(ckpt.network, plan))
    save_checkpoint(result.network, args.out, ckpt.optimizer, ckpt.epoch, ckpt.rng_state,
                    {**ckpt.metadata, "transformed": True})
    counts = count_params(result.network)
    print(f"trainable {counts.trainable}")
    print(f"total {counts.total}")
    return 0


def cmd_report(args) -> int:
    rows = report(args.runs)
    if not rows:
        return 0
    cols = list(rows[0])
    widths = [max(len(c), *(len(_fmt(r[c])) for r in rows)) for c in cols]
    print("  ".join(c.ljust(w) for c, w in zip(cols, widths)))
    for r in rows:
        print("  ".join(_fmt(r[c]).ljust(w) for c, w in zip(cols, widths)))
    if args.csv:
        with args.csv.open("w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=cols)
            writer.writeheader()
            writer.writerows(rows)
    return 0


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def cmd_fetch(args) -> int:
    dest = args.dest or data_dir() / "mnist"
    for path in fetch_mnist(dest, args.base_url):
        print(path)
    return 0


COMMANDS = {
    "train": cmd_train, "train-pcn": cmd_train, "analyze-dim": cmd_analyze_dim,
    "count-params": cmd_count_params, "transform": cmd_transform, "report": cmd_report, "fetch": cmd_fetch,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except PCNError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

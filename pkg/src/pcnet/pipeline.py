"""Training runs: baseline training, and train -> transform -> keep training.

A run is fully described by a :class:`RunConfig`. With a transform plan, the
network trains for ``plan.transform_epoch`` epochs, is transformed once from
PCA statistics of random training samples, and continues training on the
same global epoch clock. Every epoch appends one row to the
:class:`RunRecord`.
"""
from __future__ import annotations

import csv
import json
import logging
import queue
import threading
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from pcnet.data import AUGMENT_POLICIES, Dataset, augment, batches, load_dataset, subsample
from pcnet.exceptions import ConfigError, DataError, PCNError
from pcnet.nn import (
    ARCHITECTURES,
    StepSchedule,
    build_network,
    count_params,
    evaluate,
    make_optimizer,
    save_checkpoint,
    train_step,
)
from pcnet.transform import TransformPlan, apply_plan, effective_dims, touched_layers, validate_plan

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
RUN_COLUMNS = ["schema", "run_id", "epoch", "train_loss", "train_acc", "val_acc", "test_acc",
               "trainable_params", "total_params", "transformed"]
SUMMARY_COLUMNS = ["schema", "label", "runs", "test_acc_mean", "test_acc_min", "test_acc_max",
                   "trainable_params_mean", "trainable_params_min", "trainable_params_max", "failures"]
DIM_COLUMNS = ["epoch", "layer", "width", "effective_dim", "train_acc", "val_acc"]


@dataclass
class RunConfig:
    """Everything that determines a run.

    ``epochs`` is the total epoch count; with a plan it defaults to
    ``transform_epoch + post_epochs``. ``split_seed`` seeds the validation
    split and defaults to ``seed``. ``trace_layers`` lists layers whose
    input effective dimensionality is measured after every epoch.
    """

    arch: str = "mlp"
    dataset: str = "mnist"
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    l2: float = 0.0
    milestones: list[int] = field(default_factory=list)
    gamma: float = 0.1
    warmup_lr: float | None = None
    warmup_epochs: int = 0
    batch_size: int = 128
    epochs: int | None = None
    seed: int = 0
    plan: TransformPlan | None = None
    val_fraction: float = 0.0
    split_seed: int | None = None
    early_stopping: bool = False
    pca_samples: int = 5000
    pca_vectors: int = 200_000
    train_subset: int | None = None
    augment: str = "none"
    arch_kwargs: dict[str, Any] = field(default_factory=dict)
    trace_layers: list[str] = field(default_factory=list)
    trace_threshold: float = 0.1
    trace_samples: int = 1000
    data_dir: str | None = None
    label: str | None = None
    prefetch: int = 2

    @property
    def total_epochs(self) -> int:
        if self.epochs is not None:
            return self.epochs
        if self.plan is not None:
            return self.plan.transform_epoch + self.plan.post_epochs
        raise ConfigError("epochs is required when there is no transform plan")

    @property
    def run_id(self) -> str:
        kind = self.label or ("pcn" if self.plan is not None else "baseline")
        return f"{self.arch}-{self.dataset}-{kind}-s{self.seed}"

    def validate(self) -> None:
        if self.arch not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.arch!r}; available: {', '.join(sorted(ARCHITECTURES))}")
        if self.optimizer not in ("sgd", "sgd-momentum", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.augment not in AUGMENT_POLICIES:
            raise ConfigError(f"unknown augmentation {self.augment!r}")
        total = self.total_epochs
        if total < 1:
            raise ConfigError("a run needs at least one epoch")
        if self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("batch_size and lr must be positive")
        if any(not 0 < m < total for m in self.milestones) or self.warmup_epochs > total:
            raise ConfigError(f"schedule epochs must lie within the {total} training epochs")
        if self.prefetch < 0:
            raise ConfigError("prefetch must be >= 0")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must be in [0, 1)")
        if self.plan is not None:
            K, T = self.plan.transform_epoch, self.plan.post_epochs
            if not 1 <= K <= total:
                raise ConfigError(f"transform epoch {K} must lie in [1, {total}]")
            if self.epochs is not None and T and K + T != self.epochs:
                raise ConfigError(f"plan trains {K} + {T} epochs but the config asks for {self.epochs}")

    def optimizer_kwargs(self) -> dict:
        if self.optimizer == "adam":
            return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2}
        return {"lr": self.lr, "momentum": self.momentum if self.optimizer == "sgd-momentum" else 0.0}

    def to_dict(self) -> dict:
        out = asdict(self)
        out["plan"] = None if self.plan is None else self.plan.to_dict()
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        raw = dict(raw)
        if raw.get("plan") is not None and not isinstance(raw["plan"], TransformPlan):
            raw["plan"] = TransformPlan.from_dict(raw["plan"])
        return cls(**raw)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    test_acc: float
    trainable_params: int
    total_params: int
    transformed: bool
    wall_time: float
    effective_dims: dict[str, int] = field(default_factory=dict)


@dataclass
class RunRecord:
    run_id: str
    config: dict
    epochs: list[EpochRecord] = field(default_factory=list)
    transform_epoch: int | None = None
    transform: dict = field(default_factory=dict)
    final: dict = field(default_factory=dict)
    checkpoints: list[str] = field(default_factory=list)
    network: Any = field(default=None, repr=False, compare=False)

    @property
    def best_epoch(self) -> int:
        """Epoch with the highest validation accuracy (the last one without a validation split)."""
        vals = [e.val_acc for e in self.epochs]
        if all(np.isnan(v) for v in vals):
            return self.epochs[-1].epoch
        return self.epochs[int(np.nanargmax(vals))].epoch

    def reported_test_acc(self, early_stopping: bool = False) -> float:
        if early_stopping:
            return self.epochs[self.best_epoch - 1].test_acc
        return self.final["test_acc"]

    def dim_trace(self, layer: str) -> list[int]:
        return [e.effective_dims[layer] for e in self.epochs]

    def csv_rows(self) -> list[list]:
        dims = sorted({k for e in self.epochs for k in e.effective_dims})
        header = RUN_COLUMNS + [f"dim:{name}" for name in dims]
        rows = [header]
        for e in self.epochs:
            rows.append([SCHEMA_VERSION, self.run_id, e.epoch, repr(e.train_loss), repr(e.train_acc),
                         repr(e.val_acc), repr(e.test_acc), e.trainable_params, e.total_params,
                         int(e.transformed)] + [e.effective_dims.get(name, "") for name in dims])
        return rows

    def write(self, directory: str | Path) -> Path:
        """``<run_id>.csv`` (deterministic columns) plus a ``<run_id>.json`` sidecar."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / f"{self.run_id}.csv"
        with path.open("w", newline="") as f:
            csv.writer(f).writerows(self.csv_rows())
        meta = {
            "schema": SCHEMA_VERSION, "run_id": self.run_id, "config": self.config,
            "transform_epoch": self.transform_epoch, "transform": self.transform, "final": self.final,
            "checkpoints": self.checkpoints, "wall_time": [e.wall_time for e in self.epochs],
        }
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=_jsonable) + "\n")
        return path


def _jsonable(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, float) and np.isnan(value):
        return None
    raise TypeError(f"cannot serialize {type(value).__name__}")


def prepare_data(config: RunConfig, dataset: Dataset | None = None) -> Dataset:
    ds = dataset if dataset is not None else load_dataset(config.dataset, config.data_dir)
    if config.train_subset is not None:
        ds = subsample(ds, config.train_subset, seed=config.seed if config.split_seed is None else config.split_seed)
    if config.val_fraction and ds.x_val is None:
        ds = ds.with_validation(config.val_fraction, config.seed if config.split_seed is None else config.split_seed)
    return ds


def _draw_batches(ds: Dataset, config: RunConfig, rng: np.random.Generator):
    for idx in batches(len(ds.x_train), config.batch_size, rng):
        yield augment(ds.x_train[idx], config.augment, rng), ds.y_train[idx]


def epoch_batches(ds: Dataset, config: RunConfig, rng: np.random.Generator):
    """One epoch of shuffled, augmented minibatches.

    With ``config.prefetch > 0`` a loader thread prepares batches ahead of the
    training loop through a queue of that size. Only the loader touches
    ``rng``, so the batch sequence is the same as without prefetching.
    """
    if config.prefetch == 0:
        yield from _draw_batches(ds, config, rng)
        return
    slots: queue.Queue = queue.Queue(maxsize=config.prefetch)
    stop = threading.Event()
    done = object()

    def put(item) -> bool:
        while not stop.is_set():
            try:
                slots.put(item, timeout=0.1)
                return True
            except queue.Full:
                pass
        return False

    def load():
        try:
            for item in _draw_batches(ds, config, rng):
                if not put(item):
                    return
        except BaseException as exc:  # handed to the training thread
            put(exc)
            return
        put(done)

    loader = threading.Thread(target=load, name="pcnet-loader", daemon=True)
    loader.start()
    try:
        while (item := slots.get()) is not done:
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        loader.join()


def run(config: RunConfig, dataset: Dataset | None = None, out_dir: str | Path | None = None) -> RunRecord:
    """Train one network (and transform it if the config has a plan).

    Checkpoints go to ``out_dir/<run_id>/`` right after the transformation
    and at the end; the record is written to ``out_dir`` as well.
    """
    config.validate()
    total = config.total_epochs
    ds = prepare_data(config, dataset)
    net = build_network(config.arch, seed=config.seed, input_shape=ds.image_shape, classes=ds.classes,
                        **config.arch_kwargs)
    plan = config.plan
    if plan is not None:
        validate_plan(net, plan)
    missing = [name for name in config.trace_layers if name not in net.layer_names]
    if missing:
        raise ConfigError(f"unknown trace layers {missing}; available: {', '.join(net.layer_names)}")

    optimizer = make_optimizer(config.optimizer, **config.optimizer_kwargs())
    schedule = StepSchedule(config.lr, list(config.milestones), config.gamma, config.warmup_lr,
                            config.warmup_epochs)
    rng = np.random.default_rng(config.seed)
    # Compression samples: random, un-augmented training images.
    pca_idx = np.random.default_rng([config.seed, 1]).permutation(len(ds.x_train))
    pca_x = ds.x_train[pca_idx[: max(config.pca_samples, config.trace_samples)]]
    ckpt_dir = None if out_dir is None else Path(out_dir) / config.run_id
    record = RunRecord(config.run_id, config.to_dict())
    has_val = ds.x_val is not None and len(ds.x_val) > 0
    transformed = False

    for epoch in range(total):
        started = time.perf_counter()
        optimizer.lr = schedule(epoch)
        loss_sum, correct, seen = 0.0, 0, 0
        for xb, yb in epoch_batches(ds, config, rng):
            loss, hits = train_step(net, xb, yb, optimizer, config.l2)
            loss_sum += loss * len(yb)
            correct += hits
            seen += len(yb)
        params = count_params(net)
        row = EpochRecord(
            epoch=epoch + 1,
            train_loss=loss_sum / seen,
            train_acc=correct / seen,
            val_acc=evaluate(net, ds.x_val, ds.y_val) if has_val else float("nan"),
            test_acc=evaluate(net, ds.x_test, ds.y_test),
            trainable_params=params.trainable,
            total_params=params.total,
            transformed=transformed,
            wall_time=0.0,
        )
        if config.trace_layers:
            row.effective_dims = effective_dims(net, pca_x[: config.trace_samples], config.trace_layers,
                                                config.trace_threshold, max_samples=config.trace_samples,
                                                max_vectors=config.pca_vectors, seed=config.seed)
        if plan is not None and epoch + 1 == plan.transform_epoch:
            touched = touched_layers(net, plan)
            result = apply_plan(net, plan, pca_x[: config.pca_samples], max_samples=config.pca_samples,
                                max_vectors=config.pca_vectors, seed=config.seed)
            net = result.network
            optimizer.reset(touched)
            transformed = True
            after = count_params(net)
            record.transform_epoch = epoch + 1
            record.transform = {"dims": result.dims, "kept": result.kept,
                                "trainable_params": after.trainable, "total_params": after.total}
            log.info("transformed after epoch %d: %d -> %d trainable parameters",
                     epoch + 1, params.trainable, after.trainable)
            if ckpt_dir is not None:
                record.checkpoints.append(str(save_checkpoint(
                    net, ckpt_dir / "transform.pcnc", optimizer, epoch + 1, _rng_state(rng),
                    {"run_id": config.run_id, "dataset": config.dataset})))
        row.wall_time = time.perf_counter() - started
        record.epochs.append(row)
        log.info("epoch %d: loss %.4f train %.4f val %.4f test %.4f params %d", row.epoch, row.train_loss,
                 row.train_acc, row.val_acc, row.test_acc, row.trainable_params)

    final = count_params(net)
    record.final = {
        "test_acc": evaluate(net, ds.x_test, ds.y_test),
        "val_acc": evaluate(net, ds.x_val, ds.y_val) if has_val else float("nan"),
        "trainable_params": final.trainable,
        "total_params": final.total,
    }
    if ckpt_dir is not None:
        record.checkpoints.append(str(save_checkpoint(net, ckpt_dir / "final.pcnc", optimizer, total,
                                                      _rng_state(rng), {"run_id": config.run_id, "dataset": config.dataset})))
        record.write(out_dir)
    record.network = net
    return record


def _rng_state(rng: np.random.Generator) -> dict:
    return json.loads(json.dumps(rng.bit_generator.state, default=_jsonable))


@dataclass
class RunFailure:
    run_id: str
    label: str
    error: str


def run_matrix(configs: list[RunConfig], dataset: Dataset | None = None, out_dir: str | Path | None = None):
    """Run every config; failures are recorded, not raised.

    Returns ``(records, failures, summary)`` where ``summary`` has one row per
    label with mean/min/max of the reported test accuracy and trainable
    parameter count over that label's runs.
    """
    records, failures = [], []
    datasets: dict[str, Dataset] = {}
    for cfg in configs:
        label = cfg.label or ("pcn" if cfg.plan is not None else "baseline")
        try:
            ds = dataset
            if ds is None:
                if cfg.dataset not in datasets:
                    datasets[cfg.dataset] = load_dataset(cfg.dataset, cfg.data_dir)
                ds = datasets[cfg.dataset]
            records.append((label, cfg, run(cfg, ds, out_dir)))
        except PCNError as exc:
            log.error("run %s failed: %s", cfg.run_id, exc)
            failures.append(RunFailure(cfg.run_id, label, str(exc)))
    summary = summarize(records, failures)
    if out_dir is not None:
        write_summary(summary, Path(out_dir) / "summary.csv")
    return [r for _, _, r in records], failures, summary


def summarize(records, failures=()) -> list[dict]:
    groups: dict[str, list] = {}
    for label, cfg, rec in records:
        groups.setdefault(label, []).append((cfg, rec))
    failed: dict[str, int] = {}
    for f in failures:
        failed[f.label] = failed.get(f.label, 0) + 1
    rows = []
    for label in sorted(set(groups) | set(failed)):
        runs = groups.get(label, [])
        acc = np.array([rec.reported_test_acc(cfg.early_stopping) for cfg, rec in runs], dtype=np.float64)
        params = np.array([rec.final["trainable_params"] for _, rec in runs], dtype=np.float64)
        stat = (lambda a, f: float(f(a)) if a.size else float("nan"))
        rows.append({
            "schema": SCHEMA_VERSION, "label": label, "runs": len(runs),
            "test_acc_mean": stat(acc, np.mean), "test_acc_min": stat(acc, np.min),
            "test_acc_max": stat(acc, np.max),
            "trainable_params_mean": stat(params, np.mean), "trainable_params_min": stat(params, np.min),
            "trainable_params_max": stat(params, np.max), "failures": failed.get(label, 0),
        })
    return rows


def write_summary(rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return path


def read_run_csv(path: str | Path) -> list[dict]:
    path = Path(path)
    try:
        with path.open(newline="") as f:
            rows = list(csv.DictReader(f))
    except OSError as exc:
        raise DataError(f"cannot read run record {path}: {exc}") from None
    if not rows or "schema" not in rows[0]:
        raise DataError(f"{path} is not a run record")
    return rows


def report(paths: list[str | Path]) -> list[dict]:
    """One comparison row per run record: final accuracy and parameter counts.

    Records written with different schema versions are refused.
    """
    out, versions = [], set()
    for path in paths:
        rows = read_run_csv(path)
        versions |= {r["schema"] for r in rows}
        if len(versions) > 1:
            raise DataError(f"refusing to merge run records with schema versions {sorted(versions)}")
        last = rows[-1]
        first = rows[0]
        marked = [r["epoch"] for r in rows if r["transformed"] == "1"]
        out.append({
            "run_id": last["run_id"], "epochs": len(rows),
            "transform_after": int(marked[0]) - 1 if marked else "",
            "test_acc": float(last["test_acc"]), "val_acc": float(last["val_acc"]),
            "trainable_params_start": int(first["trainable_params"]),
            "trainable_params_end": int(last["trainable_params"]),
            "total_params_end": int(last["total_params"]),
        })
    return out


def analyze_dims(config: RunConfig, layers: list[str], threshold: float = 0.1, widths: list[int] | None = None,
                 dataset: Dataset | None = None) -> list[dict]:
    """Effective-dimensionality table with columns ``epoch, layer, width, effective_dim, train_acc, val_acc``.

    Without ``widths`` the config is trained once and ``layers`` are traced
    every epoch (epoch 0 is the untrained network). With ``widths`` the
    architecture's hidden width (``hidden`` for the MLP) is swept and one
    network is trained per width.
    """
    ds = prepare_data(config, dataset)
    rows = []
    for width in widths or [None]:
        cfg = RunConfig.from_dict({**config.to_dict(), "plan": None, "trace_layers": list(layers),
                                   "trace_threshold": threshold})
        if width is not None:
            cfg.arch_kwargs = {**cfg.arch_kwargs, "hidden": width}
        if cfg.epochs != 0:
            cfg.validate()
        net = build_network(cfg.arch, seed=cfg.seed, input_shape=ds.image_shape, classes=ds.classes,
                            **cfg.arch_kwargs)
        missing = [name for name in layers if name not in net.layer_names]
        if missing:
            raise ConfigError(f"unknown layers {missing}; available: {', '.join(net.layer_names)}")
        pca_idx = np.random.default_rng([cfg.seed, 1]).permutation(len(ds.x_train))[: cfg.trace_samples]
        start = effective_dims(net, ds.x_train[pca_idx], layers, threshold, max_samples=cfg.trace_samples,
                               max_vectors=cfg.pca_vectors, seed=cfg.seed)
        for name in layers:
            rows.append(_dim_row(net, 0, name, start[name], float("nan"), float("nan")))
        if cfg.epochs != 0:
            record = run(cfg, ds)
            for e in record.epochs:
                for name in layers:
                    rows.append(_dim_row(record.network, e.epoch, name, e.effective_dims[name], e.train_acc,
                                         e.val_acc))
    return rows


def _dim_row(net, epoch, layer, dim, train_acc, val_acc) -> dict:
    width = net.shapes[net.layer(layer).inputs[0]][-1]
    return {"epoch": epoch, "layer": layer, "width": width, "effective_dim": dim,
            "train_acc": train_acc, "val_acc": val_acc}


def write_dim_csv(rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=DIM_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return path


__all__ = [
    "DIM_COLUMNS", "EpochRecord", "RunConfig", "RunFailure", "RunRecord", "SCHEMA_VERSION", "analyze_dims",
    "prepare_data", "report", "run", "run_matrix", "summarize", "write_dim_csv", "write_summary",
]

"""Training loop, alpha sweep and objective comparison."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import GenConfig, GroupedDataset, batch_iter, generate, load, num_batches
from .metrics import MetricsReport, evaluate, predict, report_from_predictions, predict_dataset
from .model import ModelConfig, ModelParams, forward, init_params, save_checkpoint
from .optim import AdamW, EarlyStopping, ScheduleConfig, lr_at
from .robust import (DroConfig, GroupWeights, focal_loss, group_losses, inverse_frequency_weights,
                     kl_divergence, total_loss, update_weights)

log = logging.getLogger(__name__)

OBJECTIVES = ("gdro", "wce", "focal")
DEFAULT_ALPHAS = [0.0, 0.1, 0.3, 0.5, 1.0]
COMPARE_ALPHAS = [0.0, 0.1, 0.5]


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending key."""


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    dro: DroConfig = field(default_factory=DroConfig)
    objective: str = "gdro"
    gamma: float | None = None
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    batch_size: int = 8
    max_epochs: int = 100
    patience: int = 10
    weight_decay: float = 1e-4
    seeds: list = field(default_factory=lambda: [0])
    data: GenConfig | None = None
    train_path: str | None = None
    val_path: str | None = None
    grouping: str | None = None
    alphas: list = field(default_factory=lambda: list(DEFAULT_ALPHAS))
    workers: int = 1
    notes: list | None = None  # free text carried through to the config echo

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = copy.deepcopy(d)
        known = set(cls.__dataclass_fields__)
        for key in d:
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
        kwargs = {}
        for key, value in d.items():
            try:
                if key == "model":
                    value = ModelConfig.from_dict(value)
                elif key == "data":
                    value = None if value is None else GenConfig.from_dict(value)
                elif key == "dro":
                    value = _section(DroConfig, "dro", value)
                elif key == "schedule":
                    value = _section(ScheduleConfig, "schedule", value)
            except KeyError as exc:
                raise ConfigError(f"unknown config key {exc.args[0]!r}") from None
            except TypeError as exc:
                raise ConfigError(f"{key}: {exc}") from None
            kwargs[key] = value
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def validate(self) -> "RunConfig":
        try:
            if self.objective not in OBJECTIVES:
                raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
            if self.objective == "focal" and self.gamma is None:
                raise ConfigError("gamma is required when objective is focal")
            if self.gamma is not None and self.gamma < 0:
                raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
            for key in ("batch_size", "max_epochs", "patience", "workers"):
                v = getattr(self, key)
                if not isinstance(v, int) or v < 1:
                    raise ConfigError(f"{key} must be a positive int, got {v!r}")
            if not isinstance(self.seeds, list) or not self.seeds:
                raise ConfigError("seeds must be a non-empty list")
            if not isinstance(self.alphas, list) or not self.alphas:
                raise ConfigError("alphas must be a non-empty list")
            if self.data is None and not self.train_path:
                raise ConfigError("data: either a data section or train_path/val_path is required")
            if self.data is not None:
                self.data.validate()
            self.model.validate()
            self.dro.validate()
            self.schedule.validate()
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "RunConfig":
        new = copy.deepcopy(self)
        for k, v in changes.items():
            setattr(new, k, v)
        return new


def _section(cls, name: str, value: dict):
    unknown = set(value) - set(cls.__dataclass_fields__)
    if unknown:
        raise KeyError(f"{name}.{sorted(unknown)[0]}")
    return cls(**value)


@dataclass
class RunHistory:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    stopped_early: bool = False
    num_groups: int = 0
    dro: dict | None = None


# datasets -------------------------------------------------------------------

def load_datasets(config: RunConfig) -> tuple[GroupedDataset, GroupedDataset]:
    if config.data is not None:
        return generate(config.data)
    return load(config.train_path, "train"), load(config.val_path, "val")


def num_groups_for(config: RunConfig, train: GroupedDataset) -> int:
    if config.data is not None:
        return config.data.num_groups
    return int(train.groups.max()) + 1 if len(train) else 1


def fit_model_config(model: ModelConfig, train: GroupedDataset, num_classes: int | None = None) -> ModelConfig:
    """Copy of ``model`` with input/slice/class extents taken from the data."""
    m = copy.deepcopy(model)
    if len(train):
        s, d = train.samples[0].features.shape
        m.slices, m.input_dim = s, d
    if num_classes is not None:
        m.num_classes = num_classes
    return m


def _streams(seed: int) -> tuple[np.random.Generator, int, np.random.Generator]:
    init_ss, order_ss, drop_ss = np.random.SeedSequence(seed).spawn(3)
    order_seed = int(np.random.default_rng(order_ss).integers(2 ** 62))
    return np.random.default_rng(init_ss), order_seed, np.random.default_rng(drop_ss)


def _per_sample_loss(config: RunConfig, logits, labels, class_weights):
    if config.objective == "focal":
        return focal_loss(logits, labels, config.gamma)
    if config.objective == "wce":
        return ad.cross_entropy(logits, labels, class_weights)
    return ad.cross_entropy(logits, labels)


def validation_loss(params: ModelParams, logits: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return math.nan
    return float(ad.cross_entropy(logits, labels).data.mean())


# training -------------------------------------------------------------------

def train(config: RunConfig, seed: int, datasets=None) -> tuple[ModelParams, RunHistory]:
    """Train one model; returns the parameters of the best validation epoch."""
    config.validate()
    train_ds, val_ds = datasets if datasets is not None else load_datasets(config)
    if len(train_ds) == 0:
        raise ConfigError("data: training split is empty")
    num_classes = config.data.classes if config.data is not None else int(
        max(train_ds.labels.max(), val_ds.labels.max() if len(val_ds) else 0)) + 1
    model_cfg = fit_model_config(config.model, train_ds, num_classes)
    init_rng, order_seed, drop_rng = _streams(seed)
    params = init_params(model_cfg, init_rng)
    G = num_groups_for(config, train_ds)

    steps_per_epoch = num_batches(len(train_ds), config.batch_size)
    schedule = ScheduleConfig(config.schedule.base_lr, config.schedule.warmup_steps,
                              config.max_epochs * steps_per_epoch).validate()
    opt = AdamW(params.values(), weight_decay=config.weight_decay)
    stopper = EarlyStopping(config.patience)
    class_counts = np.bincount(train_ds.labels, minlength=num_classes)
    class_weights = inverse_frequency_weights(class_counts) if config.objective == "wce" else None
    weights = GroupWeights.uniform(G)
    history = RunHistory(num_groups=G, dro=asdict(config.dro) if config.objective == "gdro" else None)
    val_labels = val_ds.labels
    grouping = config.grouping or val_ds.attribute_name()

    step = 0
    for epoch in range(config.max_epochs):
        for batch in batch_iter(train_ds, config.batch_size, order_seed, epoch):
            params.zero_grad()
            logits = forward(params, batch, train_mode=True, rng=drop_rng)
            per_sample = _per_sample_loss(config, logits, batch.labels, class_weights)
            report = group_losses(per_sample, batch.groups, G)
            if config.objective == "gdro":
                weights = update_weights(weights, report, config.dro)
                loss = total_loss(report, weights, config.dro.alpha)
            else:
                loss = per_sample.mean()
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(step, value)
            ad.backward(loss)
            lr = lr_at(step, schedule)
            opt.step(lr)
            rec = {"step": step, "epoch": epoch, "loss": value, "lr": lr,
                   "group_losses": report.losses.tolist(), "counts": report.counts.tolist()}
            if config.objective == "gdro":
                rec["w"] = weights.w.tolist()
                rec["kl"] = kl_divergence(weights)
            history.steps.append(rec)
            step += 1

        val_logits = predict_dataset(params, val_ds)
        vloss = validation_loss(params, val_logits, val_labels)
        metrics = report_from_predictions(val_labels, predict(val_logits), val_ds.attr(grouping),
                                          num_classes, grouping)
        stop = stopper.update(vloss, params.snapshot)
        history.epochs.append({"epoch": epoch, "val_loss": vloss, "steps": step,
                               "challenge_p": metrics.challenge_p,
                               "worst_group_macro_f1": metrics.worst_group_macro_f1})
        if stop:
            history.stopped_early = True
            break

    if stopper.best_snapshot is not None:
        params.load_snapshot(stopper.best_snapshot)
    history.best_epoch = stopper.best_epoch
    history.best_val_loss = stopper.best_val_loss
    return params, history


def replay_weights(history: RunHistory | list, num_groups: int, dro: DroConfig) -> list[np.ndarray]:
    """Re-run the weight dynamics from logged group losses alone."""
    steps = history.steps if isinstance(history, RunHistory) else history
    w = GroupWeights.uniform(num_groups)
    out = []
    for rec in steps:
        w = update_weights(w, np.asarray(rec["group_losses"], dtype=np.float64), dro)
        out.append(w.w)
    return out


def minority_cell(train: GroupedDataset) -> tuple[int, int]:
    """(evaluation group, class) with the fewest training samples."""
    counts = {k: v for k, v in train.cell_counts().items() if v > 0}
    return min(counts, key=lambda k: (counts[k], k))


# outputs --------------------------------------------------------------------

def run_id(config: RunConfig, seed: int) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return f"{hashlib.sha256(blob).hexdigest()[:10]}-s{seed}"


def write_run(outdir, params: ModelParams, history: RunHistory, metrics: MetricsReport,
              seed: int, extra: dict | None = None) -> None:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "trajectory.jsonl", "w") as fh:
        for rec in history.steps:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    summary = {"best_epoch": history.best_epoch, "best_val_loss": history.best_val_loss,
               "stopped_early": history.stopped_early, "num_groups": history.num_groups,
               "dro": history.dro, "epochs": history.epochs,
               "weight_update_order": "before_gradient_step"}
    (out / "epochs.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    payload = metrics.to_dict()
    payload.update(extra or {})
    (out / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    (out / "metrics.csv").write_text(metrics.to_csv())
    save_checkpoint(params, out / "checkpoint.bin", seed=seed)


def run_single(config: RunConfig, seed: int, datasets=None, outdir=None) -> dict:
    """Train, evaluate on val, optionally persist; returns the summary row."""
    datasets = datasets if datasets is not None else load_datasets(config)
    params, history = train(config, seed, datasets)
    train_ds, val_ds = datasets
    grouping = config.grouping or val_ds.attribute_name()
    metrics = evaluate(params, val_ds, grouping)
    mg, mc = minority_cell(train_ds)
    minority = metrics.cell_f1(mg, mc) if mg in metrics.confusion else 0.0
    row = {"seed": seed, "challenge_p": metrics.challenge_p,
           "worst_group_macro_f1": metrics.worst_group_macro_f1,
           "minority_cell": [mg, mc], "minority_cell_f1": minority,
           "max_gap": metrics.max_gap, "best_epoch": history.best_epoch,
           "group_macro_f1": {str(g): v for g, v in metrics.macro().items()}}
    if outdir is not None:
        write_run(outdir, params, history, metrics, seed,
                  extra={"seed": seed, "minority_cell": [mg, mc], "minority_cell_f1": minority})
    return row


# sweeps ----------------------------------------------------------------------

def failure_message(config: RunConfig, seed: int, exc: Exception) -> str:
    step = exc.step if isinstance(exc, TrainingDiverged) else "n/a"
    return f"run {run_id(config, seed)} failed at step {step}: {type(exc).__name__}: {exc}"


def _cell(args):
    config, seed, datasets, label, outdir = args
    try:
        return label, run_single(config, seed, datasets, outdir), None
    except Exception as exc:  # one failed cell must not abort the sweep
        msg = failure_message(config, seed, exc)
        log.error("%s", msg)
        return label, None, msg


def _run_cells(cells, workers: int):
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_cell, cells))
    return [_cell(c) for c in cells]


def _mean_std(values) -> tuple[float, float]:
    if not values:
        return math.nan, math.nan
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def _cell_dir(outdir, name: str):
    return None if outdir is None else Path(outdir) / name


def sweep_alpha(config: RunConfig, alphas=None, seeds=None, datasets=None, outdir=None) -> dict:
    """Train every (alpha, seed) cell with the gdro objective."""
    alphas = list(alphas if alphas is not None else config.alphas)
    seeds = list(seeds if seeds is not None else config.seeds)
    if not alphas or not seeds:
        raise ValueError("sweep needs at least one alpha and one seed")
    datasets = datasets if datasets is not None else load_datasets(config)
    cells = []
    for a in alphas:
        cfg = config.replace(objective="gdro", dro=DroConfig(config.dro.eta_dro, a, config.dro.update_mode))
        cells += [(cfg, s, datasets, a, _cell_dir(outdir, f"alpha{a}_seed{s}")) for s in seeds]
    results = _run_cells(cells, config.workers)
    rows, errors = [], []
    for (cfg, seed, _, a, _), (_, row, err) in zip(cells, results):
        if err is not None:
            errors.append({"alpha": a, "seed": seed, "error": err})
            continue
        for g, v in row["group_macro_f1"].items():
            rows.append({"alpha": a, "seed": seed, "group": int(g), "group_macro_f1": v,
                         "challenge_p": row["challenge_p"],
                         "worst_group_macro_f1": row["worst_group_macro_f1"],
                         "minority_cell_f1": row["minority_cell_f1"], "max_gap": row["max_gap"]})
    return {"rows": rows, "summary": summarize_sweep(rows), "errors": errors}


SWEEP_FIELDS = ["alpha", "seed", "group", "group_macro_f1", "challenge_p",
                "worst_group_macro_f1", "minority_cell_f1", "max_gap"]


def summarize_sweep(rows: list[dict]) -> list[dict]:
    """Seed-averaged summary, one row per alpha."""
    out = []
    for a in sorted({r["alpha"] for r in rows}):
        per_seed = {}
        for r in rows:
            if r["alpha"] == a:
                per_seed.setdefault(r["seed"], r)
        groups = sorted({r["group"] for r in rows if r["alpha"] == a})
        summary = {"alpha": a, "n_seeds": len(per_seed)}
        for key in ("challenge_p", "worst_group_macro_f1", "minority_cell_f1", "max_gap"):
            summary[f"{key}_mean"], summary[f"{key}_std"] = _mean_std(
                [r[key] for r in per_seed.values()])
        for g in groups:
            summary[f"group{g}_macro_f1_mean"], _ = _mean_std(
                [r["group_macro_f1"] for r in rows if r["alpha"] == a and r["group"] == g])
        out.append(summary)
    return out


def write_csv(path, rows: list[dict], fields: list[str] | None = None) -> None:
    fields = fields or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def compare_objectives(config: RunConfig, seeds=None, alphas=None, gamma: float = 2.0,
                       datasets=None, outdir=None) -> dict:
    """Rows wce, focal, gdro@alpha; seed mean and std of P, worst group, minority cell."""
    seeds = list(seeds if seeds is not None else config.seeds)
    alphas = list(alphas if alphas is not None else COMPARE_ALPHAS)
    datasets = datasets if datasets is not None else load_datasets(config)
    variants = [("wce", None, config.replace(objective="wce")),
                ("focal", None, config.replace(objective="focal", gamma=config.gamma or gamma))]
    for a in alphas:
        variants.append(("gdro", a, config.replace(
            objective="gdro", dro=DroConfig(config.dro.eta_dro, a, config.dro.update_mode))))
    cells = [(cfg, s, datasets, (name, a),
              _cell_dir(outdir, f"{name}{'' if a is None else a}_seed{s}"))
             for name, a, cfg in variants for s in seeds]
    results = _run_cells(cells, config.workers)
    errors = [err for (_, _, err) in results if err is not None]
    table = []
    for name, a, cfg in variants:
        got = [row for (label, row, err) in results if label == (name, a) and row is not None]
        entry = {"objective": name, "alpha": a,
                 "gamma": cfg.gamma if name == "focal" else None, "n_seeds": len(got)}
        for key in ("challenge_p", "worst_group_macro_f1", "minority_cell_f1"):
            entry[f"{key}_mean"], entry[f"{key}_std"] = _mean_std([r[key] for r in got])
        entry["failed"] = len(seeds) - len(got)
        table.append(entry)
    return {"rows": table, "errors": errors}


COMPARE_FIELDS = ["objective", "alpha", "gamma", "n_seeds", "challenge_p_mean", "challenge_p_std",
                  "worst_group_macro_f1_mean", "worst_group_macro_f1_std",
                  "minority_cell_f1_mean", "minority_cell_f1_std", "failed"]

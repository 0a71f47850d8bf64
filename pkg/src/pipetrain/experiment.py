"""Experiment configuration, presets and the epoch loop shared by the CLI and the estimator."""

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

from . import analyzer
from .data import BatchPlan, batches, load_idx, synth_blobs, train_val_split
from .optim import OptimizerConfig
from .partition import PRESETS as MODEL_PRESETS, build_model, partition
from .runtime.engine import MODES as RUN_MODES, PipelineEngine, measure_throughput
from .runtime.schedule import SCHEDULES

log = logging.getLogger(__name__)

MODES = RUN_MODES + ("analyze",)
CSV_HEADER = ["epoch", "train_loss", "val_loss", "val_top1", "steady_img_per_sec", "wall_s"]

PRESETS = {
    "paper-cifar-momentum": dict(optimizer="momentum", lr=1e-2, momentum=0.9, weight_decay=5e-4,
                                 lr_decay_every=30, lr_decay_factor=0.1, batch_size=128, epochs=90,
                                 stages=4),
    "paper-tiny-momentum": dict(optimizer="momentum", lr=1e-2, momentum=0.9, weight_decay=5e-4,
                                lr_milestones=[40, 60], lr_decay_factor=0.1, batch_size=100,
                                epochs=70, stages=4),
    "paper-robust-rmsprop": dict(optimizer="rmsprop", lr=1e-4, momentum=0.9, batch_size=128,
                                 epochs=50, stages=4),
    "paper-robust-adam": dict(optimizer="adam", lr=1e-4, betas=(0.9, 0.999), batch_size=128,
                              epochs=50, stages=4),
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    schedule: str = "xpipe"
    stages: int = 4
    micro_batches: int = 1
    batch_size: int = 128
    optimizer: str = "momentum"
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    lr_decay_every: int = 0
    lr_decay_factor: float = 0.1
    lr_milestones: list = field(default_factory=list)
    epochs: int = 1
    seed: int = 1
    dataset: str = "blobs"
    model: str = "mlp_small"
    num_samples: int = 2048
    num_features: int = 20
    num_classes: int = 4
    separation: float = 6.0
    val_fraction: float = 0.2
    mode: str = "lockstep"
    fwd_cost_us: float = 1000.0
    bwd_cost_us: float = 2000.0
    prediction: bool = True
    analyze_minibatches: int = 50
    out: str = ""
    preset: str = ""

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.lr_milestones = list(self.lr_milestones)

    @classmethod
    def from_preset(cls, name, **overrides):
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], "preset": name, **overrides})

    def validate(self):
        """Check every field against the modules' preconditions; returns self."""
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.stages < 1:
            raise ConfigError("stages must be >= 1")
        if self.micro_batches < 1:
            raise ConfigError("micro-batches must be >= 1")
        if self.schedule == "naive" and self.micro_batches != 1:
            log.warning("naive schedule does not split mini-batches; using T=1")
            self.micro_batches = 1
        if self.batch_size < 1 or self.batch_size % self.micro_batches:
            raise ConfigError(f"batch size {self.batch_size} must be a positive multiple of T={self.micro_batches}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.model not in MODEL_PRESETS:
            raise ConfigError(f"model must be one of {MODEL_PRESETS}")
        if not (self.dataset == "blobs" or self.dataset.startswith("idx:")):
            raise ConfigError("dataset must be 'blobs' or 'idx:<images>,<labels>[;<val images>,<val labels>]'")
        if self.fwd_cost_us < 0 or self.bwd_cost_us < 0:
            raise ConfigError("costs must be >= 0")
        if self.mode == "lockstep" and (self.fwd_cost_us <= 0 or self.bwd_cost_us <= 0):
            raise ConfigError("lockstep mode needs positive --fwd-cost-us/--bwd-cost-us")
        if self.lr_decay_every < 0 or not 0 < self.lr_decay_factor <= 1:
            raise ConfigError("lr decay needs every >= 0 and 0 < factor <= 1")
        try:
            self.optimizer_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.mode != "analyze" and self.schedule == "spectrain" and self.optimizer == "adam":
            raise ConfigError("spectrain needs a momentum buffer; use --optimizer momentum or rmsprop")
        return self

    def optimizer_config(self):
        return OptimizerConfig(kind=self.optimizer, lr=self.lr, momentum=self.momentum,
                               weight_decay=self.weight_decay, betas=self.betas)

    def lr_at(self, epoch):
        """Learning rate for a 0-based epoch under the step-decay schedule."""
        drops = sum(1 for e in self.lr_milestones if epoch >= e)
        if self.lr_decay_every:
            drops += epoch // self.lr_decay_every
        return self.lr * self.lr_decay_factor ** drops

    def costs(self, K=None):
        K = K or self.stages
        return analyzer.CostModel.uniform(K, self.fwd_cost_us * 1e-6, self.bwd_cost_us * 1e-6)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, path):
        payload = json.loads(Path(path).read_text())
        return cls.from_dict(payload.get("config", payload))


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_top1: float
    steady_img_per_sec: float
    wall_s: float
    stage_utilization: list = field(default_factory=list)

    def row(self):
        return [self.epoch] + [repr(float(getattr(self, k))) for k in CSV_HEADER[1:]]


def load_datasets(config):
    """(train, val) datasets described by ``config.dataset``."""
    if config.dataset == "blobs":
        full = synth_blobs(config.num_samples, config.num_features, config.num_classes,
                           seed=config.seed, separation=config.separation)
        return train_val_split(full, config.val_fraction, seed=config.seed)
    spec = config.dataset[len("idx:"):]
    parts = spec.split(";")
    img, lbl = parts[0].split(",")
    train = load_idx(img, lbl)
    if len(parts) > 1:
        vimg, vlbl = parts[1].split(",")
        val = load_idx(vimg, vlbl, num_classes=train.num_classes, split="val")
        return train, val
    return train_val_split(train, config.val_fraction, seed=config.seed)


def build_engine(config, sample_shape, num_classes, trace=False):
    model = build_model(config.model, sample_shape, num_classes)
    plan = partition(model, config.stages)
    costs = config.costs() if (config.mode == "lockstep" or config.fwd_cost_us or config.bwd_cost_us) else None
    return PipelineEngine(model, plan, config.schedule, config.micro_batches, config.optimizer_config(),
                          seed=config.seed, prediction=config.prediction, mode=config.mode,
                          costs=costs, trace=trace)


def _steady(run):
    try:
        return measure_throughput(run)
    except ValueError:
        return float("nan")


def train(config, train_set, val_set=None, engine=None, on_epoch=None):
    """Run ``config.epochs`` epochs; returns (engine, list of MetricsRecord, list of EpochRun)."""
    config.validate()
    if config.mode == "analyze":
        raise ConfigError("analyze mode does not train; use analyze_config()")
    engine = engine or build_engine(config, train_set.sample_shape, train_set.num_classes)
    plan = BatchPlan(config.batch_size, config.micro_batches, config.seed)
    records, runs = [], []
    for epoch in range(config.epochs):
        run = engine.run_epoch(batches(train_set, plan, epoch), lr=config.lr_at(epoch))
        if val_set is not None and len(val_set):
            val_loss, val_top1 = engine.evaluate(val_set.inputs, val_set.labels)
        else:
            val_loss = val_top1 = float("nan")
        try:
            util = analyzer.utilization(run.timeline, steady_only=True)
        except ValueError:
            util = []
        rec = MetricsRecord(epoch + 1, run.train_loss, val_loss, val_top1, _steady(run), run.wall_s, util)
        records.append(rec)
        runs.append(run)
        if on_epoch:
            on_epoch(rec, run)
    return engine, records, runs


def analyze_config(config):
    config.validate()
    micro = config.batch_size // config.micro_batches
    return analyzer.analyze(config.schedule, config.stages, config.micro_batches,
                            M=config.analyze_minibatches, costs=config.costs(), micro_size=micro)


def _sidecar_path(out):
    return Path(out).with_suffix(".json")


def write_metrics(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for rec in records:
            w.writerow(rec.row())


def write_sidecar(path, config, records=(), extra=None):
    payload = {"config": config.to_dict(),
               "stage_utilization": [rec.stage_utilization for rec in records]}
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))


def run(config, stream=None):
    """Execute one experiment; writes the metrics CSV and JSON sidecar when ``config.out`` is set.

    Returns (exit code, records). Partial metrics are flushed if training fails.
    """
    config.validate()
    if config.mode == "analyze":
        res = analyze_config(config)
        if stream is not None:
            print(f"schedule={res['schedule']} K={res['K']} T={res['T']} M={res['M']}", file=stream)
            print(f"steady utilization {res['steady_utilization']:.3f}", file=stream)
            print("per-stage " + " ".join(f"{u:.3f}" for u in res["stage_utilization"]), file=stream)
            print(f"throughput {res['throughput']:.1f} img/s", file=stream)
            print(res["timeline"].gantt(), file=stream)
        if config.out:
            Path(config.out).write_text(res["timeline"].to_csv())
            summary = {k: v for k, v in res.items() if k != "timeline"}
            write_sidecar(_sidecar_path(config.out), config, extra={"analysis": summary})
        return 0, []

    train_set, val_set = load_datasets(config)
    try:
        engine = build_engine(config, train_set.sample_shape, train_set.num_classes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    records = []

    def emit(rec, _run):
        records.append(rec)
        if stream is not None:
            print(",".join(str(v) for v in rec.row()), file=stream)

    if stream is not None:
        print(",".join(CSV_HEADER), file=stream)
    code = 0
    try:
        train(config, train_set, val_set, engine=engine, on_epoch=emit)
    except Exception:
        log.exception("training failed after %d epochs", len(records))
        code = 2
    if config.out:
        write_metrics(config.out, records)
        write_sidecar(_sidecar_path(config.out), config, records)
    return code, records


@dataclass
class CompareRow:
    schedule: str
    K: int
    T: int
    final_loss: float
    min_val_loss: float
    best_top1: float
    throughput: float
    delta_top1: float = float("nan")
    throughput_ratio: float = float("nan")


def compare(base, schedules, stream=None):
    """Run each schedule with identical data, partition and hyperparameters.

    The gpipe row (or the first row when gpipe is absent) is the synchronous
    reference for the delta columns.
    """
    if len(schedules) < 2:
        raise ConfigError("compare needs at least two schedules")
    train_set, val_set = load_datasets(base)
    rows = []
    out = Path(base.out) if base.out else None
    try:
        for kind in schedules:
            cfg = dataclasses.replace(base, schedule=kind, out="")
            if kind == "naive":
                cfg.micro_batches = 1
            cfg.validate()
            _, records, _ = train(cfg, train_set, val_set)
            rows.append(CompareRow(kind, cfg.stages, cfg.micro_batches,
                                   final_loss=records[-1].train_loss,
                                   min_val_loss=min(r.val_loss for r in records),
                                   best_top1=max(r.val_top1 for r in records),
                                   throughput=records[-1].steady_img_per_sec))
    finally:
        _fill_deltas(rows)
        if out is not None and rows:
            write_compare(out, rows)
    if stream is not None:
        print(format_compare(rows), file=stream)
    return rows


def _fill_deltas(rows):
    ref = next((r for r in rows if r.schedule == "gpipe"), rows[0] if rows else None)
    for r in rows:
        r.delta_top1 = r.best_top1 - ref.best_top1
        r.throughput_ratio = r.throughput / ref.throughput if ref.throughput else float("nan")


def write_compare(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        names = [f.name for f in dataclasses.fields(CompareRow)]
        w.writerow(names)
        for r in rows:
            w.writerow([getattr(r, n) for n in names])


def format_compare(rows):
    ref = next((r.schedule for r in rows if r.schedule == "gpipe"), rows[0].schedule)
    lines = [f"{'schedule':<10} {'K':>2} {'T':>2} {'min val loss':>12} {'best top-1':>20} "
             f"{'img/s':>10} {'vs ' + ref:>8}"]
    for r in rows:
        delta = "(~)" if r.schedule == ref else f"({100 * r.delta_top1:+.2f}%)"
        ratio = "" if math.isnan(r.throughput_ratio) else f"{r.throughput_ratio:.3f}x"
        lines.append(f"{r.schedule:<10} {r.K:>2} {r.T:>2} {r.min_val_loss:>12.4f} "
                     f"{100 * r.best_top1:>10.2f}% {delta:>9} {r.throughput:>10.1f} {ratio:>8}")
    return "\n".join(lines)


def evaluate_loss(engine, dataset):
    """Full-dataset cross-entropy under committed weights."""
    return engine.evaluate(dataset.inputs, dataset.labels)[0]


__all__ = ["ExperimentConfig", "MetricsRecord", "PRESETS", "ConfigError", "train", "run", "compare",
           "analyze_config", "load_datasets", "build_engine", "evaluate_loss"]

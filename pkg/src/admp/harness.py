"""Experiment configuration, per-seed runs, metrics files and the ablation grid."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .domdata import DatasetSpec, generate
from .errors import ConfigError
from .masking import magnitude_plan
from .micronet import NetworkSpec, convnet_spec, mlp_spec
from .trainer import (
    METRIC_FIELDS,
    MetricsRecord,
    TrainConfig,
    admp_prune,
    finetune,
    make_evaluator,
    pretrain_uda,
)

log = logging.getLogger(__name__)

VARIANTS = ("full_admp", "no_clustering", "one_mask", "kd_only", "prune_then_adapt")
GRID_VARIANTS = ("full_admp", "no_clustering", "one_mask", "kd_only")
_MODE = {"full_admp": "double", "no_clustering": "double", "one_mask": "one_mask", "kd_only": "kd_only"}


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    hidden: tuple[int, ...] = (32, 32)
    conv_channels: tuple[int, ...] = (6, 8)
    variant: str = "full_admp"
    variants: tuple[str, ...] = GRID_VARIANTS
    sparsities: tuple[float, ...] = (0.5,)
    seeds: tuple[int, ...] = (0,)
    out_dir: str = "runs"

    def __post_init__(self):
        for name in ("hidden", "conv_channels", "variants", "sparsities", "seeds"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        for v in (self.variant, *self.variants):
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}; choose from {VARIANTS}")
        for s in self.sparsities:
            if not (0.0 <= s <= 0.9):
                raise ConfigError(f"sparsity {s} outside [0, 0.9]")
        if not self.sparsities or not self.seeds:
            raise ConfigError("need at least one sparsity and one seed")

    def network_spec(self) -> NetworkSpec:
        kind = self.dataset.kind
        if kind == "moons":
            return mlp_spec([2, *self.hidden, 2])
        if kind == "blobs":
            return mlp_spec([self.dataset.dim, *self.hidden, self.dataset.n_classes])
        return convnet_spec(channels=self.conv_channels)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset.to_dict(),
            "train": self.train.to_dict(),
            "hidden": list(self.hidden),
            "conv_channels": list(self.conv_channels),
            "variant": self.variant,
            "variants": list(self.variants),
            "sparsities": list(self.sparsities),
            "seeds": list(self.seeds),
            "out_dir": self.out_dir,
        }

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# -- config files ------------------------------------------------------------

def _parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text.strip("'\"")


def _sections():
    return {
        "dataset": {f.name for f in fields(DatasetSpec)},
        "train": TrainConfig.field_names(),
        "experiment": {"hidden", "conv_channels", "variant", "variants", "sparsities", "seeds", "out_dir"},
    }


def parse_config(text: str, overrides: dict | None = None) -> ExperimentConfig:
    """Parse ``section.key = value`` lines (values are JSON or bare strings).

    Sections are ``dataset``, ``train`` and ``experiment``; unknown keys are errors.
    """
    known = _sections()
    values: dict[str, dict] = {name: {} for name in known}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, val = (part.strip() for part in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in known or name not in known[section]:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[section][name] = _parse_value(val)
    for key, val in (overrides or {}).items():
        section, _, name = key.partition(".")
        if section not in known or name not in known[section]:
            raise ConfigError(f"unknown override {key!r}")
        values[section][name] = val
    try:
        dataset = DatasetSpec(**values["dataset"])
        train = TrainConfig(**values["train"])
        return ExperimentConfig(dataset=dataset, train=train, **values["experiment"])
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, overrides)


def dump_config(config: ExperimentConfig) -> str:
    lines = []
    d = config.to_dict()
    for section in ("dataset", "train"):
        for k, v in d[section].items():
            lines.append(f"{section}.{k} = {json.dumps(v)}")
    for k in ("hidden", "conv_channels", "variant", "variants", "sparsities", "seeds", "out_dir"):
        lines.append(f"experiment.{k} = {json.dumps(d[k])}")
    return "\n".join(lines) + "\n"


# -- metrics files -----------------------------------------------------------

def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def emit_metrics(records: Iterable[MetricsRecord], path, fmt: str = "csv", append: bool = False) -> Path:
    """Write records as CSV (fixed header) or JSON lines, flushing after each record."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not (append and path.exists())
    with path.open("a" if append else "w", newline="", encoding="utf-8") as fh:
        if fmt == "csv":
            writer = csv.writer(fh, lineterminator="\n")
            if fresh:
                writer.writerow(METRIC_FIELDS)
                fh.flush()
            for r in records:
                writer.writerow([_fmt(getattr(r, f)) for f in METRIC_FIELDS])
                fh.flush()
        elif fmt == "jsonl":
            for r in records:
                fh.write(json.dumps(asdict(r)) + "\n")
                fh.flush()
        else:
            raise ConfigError(f"unknown metrics format {fmt!r}")
    return path


def _coerce(row: dict) -> MetricsRecord:
    return MetricsRecord(
        phase=row["phase"], iteration=int(row["iteration"]),
        **{f: float(row[f]) for f in METRIC_FIELDS[2:]},
    )


def read_metrics(path) -> list[MetricsRecord]:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        if path.suffix == ".jsonl":
            return [_coerce(json.loads(line)) for line in fh if line.strip()]
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_FIELDS:
            raise ConfigError(f"{path}: unexpected metrics header {reader.fieldnames}")
        return [_coerce(row) for row in reader]


# -- runs --------------------------------------------------------------------

@dataclass(frozen=True)
class SeedResult:
    variant: str
    sparsity: float
    seed: int
    teacher_target_acc: float
    final: MetricsRecord


# "ratio" is the requested pruning ratio; the metric "sparsity" is the achieved channel fraction
RESULT_FIELDS = ("variant", "ratio", "seed", "teacher_target_acc") + METRIC_FIELDS


@dataclass
class RunResult:
    config_hash: str
    rows: list[SeedResult]
    directory: Path | None = None

    def aggregate(self) -> dict[tuple[str, float], dict[str, float]]:
        """Mean and population std of final target accuracy per (variant, sparsity)."""
        groups: dict[tuple[str, float], list[SeedResult]] = {}
        for r in self.rows:
            groups.setdefault((r.variant, r.sparsity), []).append(r)
        out = {}
        for key, rs in groups.items():
            acc = np.array([r.final.target_acc for r in rs])
            teach = np.array([r.teacher_target_acc for r in rs])
            out[key] = {"mean_target_acc": float(acc.mean()), "std_target_acc": float(acc.std()),
                        "mean_teacher_target_acc": float(teach.mean()), "n_seeds": len(rs)}
        return out


def _prepare_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {path} is not writable: {exc}") from exc
    return path


class TeacherCache:
    """Pretrained networks keyed by everything that influences pretraining."""

    def __init__(self):
        self._store: dict[str, tuple] = {}

    def get(self, config: ExperimentConfig, seed: int, pair, view, mmd_weight: float):
        train = replace(config.train, seed=seed, ratio=0.0)
        key = json.dumps([config.dataset.to_dict(), seed, train.to_dict(), list(config.hidden),
                          list(config.conv_channels), config.dataset.kind, mmd_weight], sort_keys=True)
        if key not in self._store:
            ev = make_evaluator(pair, train.margin)
            self._store[key] = pretrain_uda(train, view, config.network_spec(), ev, mmd_weight=mmd_weight)
        return self._store[key]


def run_seed(config: ExperimentConfig, variant: str, sparsity: float, seed: int,
             cache: TeacherCache | None = None) -> tuple[SeedResult, list[MetricsRecord]]:
    """Pretrain, prune with ``variant`` and fine-tune for one seed and sparsity."""
    cache = cache or TeacherCache()
    dataset = replace(config.dataset, seed=seed)
    pair = generate(dataset)
    view = pair.training_view()
    train = replace(config.train, seed=seed, ratio=sparsity)
    if variant == "no_clustering":
        train = replace(train, lambda_clu=0.0)
    ev = make_evaluator(pair, train.margin)
    teacher, teacher_metrics = cache.get(config, seed, pair, view, train.mmd_weight)
    offset = train.pretrain_steps
    if variant == "prune_then_adapt":
        source_model, records = cache.get(config, seed, pair, view, 0.0)
        source_model = source_model.copy()
        for p in source_model.parameters():
            p.requires_grad = True
        plan = magnitude_plan(source_model, sparsity)
        _, _, ft = finetune(source_model, None, train, view, teacher, ev, plan=plan,
                            iteration_offset=offset, objective="uda")
        records = list(records) + ft
    else:
        student, masks, pr, _ = admp_prune(teacher, train, view, ev, mode=_MODE[variant], iteration_offset=offset)
        _, _, ft = finetune(student, masks, train, view, teacher, ev, iteration_offset=offset + train.admp_steps)
        records = list(teacher_metrics) + pr + ft
    result = SeedResult(variant, sparsity, seed, teacher_metrics[-1].target_acc, records[-1])
    return result, records


def metrics_path(directory: Path, config_hash: str, variant: str, sparsity: float, seed: int) -> Path:
    return directory / f"{variant}_sp{sparsity:g}_seed{seed}_{config_hash}.csv"


def _write_results(rows: Sequence[SeedResult], path: Path) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_FIELDS)
        for r in rows:
            w.writerow([r.variant, _fmt(r.sparsity), r.seed, _fmt(r.teacher_target_acc)]
                       + [_fmt(getattr(r.final, f)) for f in METRIC_FIELDS])


def read_results(path) -> list[SeedResult]:
    with Path(path).open(encoding="utf-8") as fh:
        return [SeedResult(row["variant"], float(row["ratio"]), int(row["seed"]),
                           float(row["teacher_target_acc"]), _coerce(row))
                for row in csv.DictReader(fh)]


def load_run(directory) -> RunResult:
    """Rebuild a :class:`RunResult` from the files a run wrote."""
    directory = Path(directory)
    meta = json.loads((directory / "config.json").read_text())
    return RunResult(meta["config_hash"], read_results(directory / "results.csv"), directory)


def _run(config: ExperimentConfig, variants: Sequence[str], cache: TeacherCache | None) -> RunResult:
    h = config.config_hash()
    directory = _prepare_dir(Path(config.out_dir) / h)
    (directory / "config.json").write_text(json.dumps({"config_hash": h, "config": config.to_dict()}, indent=2))
    cache = cache or TeacherCache()
    rows = []
    for seed in config.seeds:
        for variant in variants:
            for sparsity in config.sparsities:
                result, records = run_seed(config, variant, sparsity, seed, cache)
                emit_metrics(records, metrics_path(directory, h, variant, sparsity, seed))
                rows.append(result)
                log.info("%s sp=%g seed=%d target_acc=%.4f", variant, sparsity, seed, result.final.target_acc)
    _write_results(rows, directory / "results.csv")
    return RunResult(h, rows, directory)


def run_experiment(config: ExperimentConfig, cache: TeacherCache | None = None) -> RunResult:
    """Run ``config.variant`` over every sparsity and seed."""
    return _run(config, [config.variant], cache)


def run_ablation_grid(config: ExperimentConfig, cache: TeacherCache | None = None):
    """Run ``config.variants`` x sparsities x seeds; write the table and plot data.

    Returns ``(table, result)`` where ``table[(variant, sparsity)]`` holds the
    mean target accuracy over seeds.
    """
    result = _run(config, list(config.variants), cache)
    agg = result.aggregate()
    table = {k: v["mean_target_acc"] for k, v in agg.items()}
    with (result.directory / "ablation.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "sparsity", "mean_target_acc", "std_target_acc", "mean_teacher_target_acc", "n_seeds"])
        for (variant, sp), v in agg.items():
            w.writerow([variant, _fmt(sp), _fmt(v["mean_target_acc"]), _fmt(v["std_target_acc"]),
                        _fmt(v["mean_teacher_target_acc"]), v["n_seeds"]])
    with (result.directory / "ablation_plot.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sparsity", *config.variants])
        for sp in config.sparsities:
            w.writerow([_fmt(sp)] + [_fmt(table[(v, sp)]) for v in config.variants])
    return table, result

"""Experiment runner and report generation.

A run directory looks like::

    <out>/<name>/
        config.json          resolved RunConfig
        manifest.json        fingerprint, format versions, data digest
        runs.csv             one row per (method, seed)
        aggregate.csv        mean and half-range per (method, metric)
        polar.csv            per-stage per-task accuracy rings
        <method>/seed-<s>/
            epochs.jsonl plasticity.jsonl events.jsonl norms.parquet
            accuracy.csv accuracy.json metrics.json stages.json model.npz

Directories are written under a temporary name and renamed only once every sub-run
has finished, so a failed run leaves nothing behind.
"""

from __future__ import annotations

import hashlib
import logging
import shutil
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import polars as pl
from rich.table import Table as RichTable

from . import __version__
from .common import (
    CHECKPOINT_FORMAT_VERSION,
    DATASET_FORMAT_VERSION,
    DEFAULT_IDLE_TIMEOUT,
    RUN_FORMAT_VERSION,
    JsonlWriter,
    Table,
    format_mean_range,
    read_json,
    to_jsonable,
    write_json,
    write_tables,
)
from .config import RunConfig, config_from_dict
from .errors import ConfigError, DegenerateMatrixError, LabelConflictError, PreconditionError, ScenarioMismatchError
from .features import Dataset, Normalizers, extract_features
from .incremental import (
    EpochLog,
    PlasticityCheck,
    StageReport,
    derive_seed,
    evaluate_accuracy,
    ewc_train_task,
    lwf_train_task,
    naive_train_task,
    prime_controller,
    train_base,
)
from .metrics import METRIC_NAMES, AccuracyMatrix, aggregate, compute, forgetting, polar_frame
from .model import PartitionedModel, save_checkpoint
from .pcap import FlowRecord, read_capture
from .plasticity import evaluate
from .synth import TaskStream, make_profiles, sample_dataset, stage_stream

log = logging.getLogger(__name__)

CAPTURE_SUFFIXES = (".pcap", ".cap", ".pcap.gz", ".cap.gz")


# ─── Scenario ────────────────────────────────────────────────────────────────


def load_dataset(config: RunConfig) -> tuple[Dataset, str]:
    """Build or read the scenario's dataset.

    Returns:
        (dataset, data digest). The digest is the sha256 of the dataset file, or
        "synthetic" when the data is generated from the scenario parameters.
    """
    sc = config.scenario
    if sc.source == "synthetic":
        profiles = make_profiles(sc.num_classes, sc.similarity, sc.data_seed)
        dataset = sample_dataset(profiles, sc.samples_per_class, sc.n_b, sc.n_p, seed=sc.data_seed)
        return dataset, "synthetic"

    path = Path(sc.source)
    if not path.exists():
        raise FileNotFoundError(f"Dataset file not found: `{path}`")
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    return Dataset.read(path), digest


def build_stream(config: RunConfig, dataset: Dataset) -> TaskStream:
    sc = config.scenario
    stream = stage_stream(dataset, sc.plan, tuple(sc.split), seed=sc.data_seed)
    if len(stream) < 2:
        raise PreconditionError(f"A scenario needs at least 2 stages, the plan yields {len(stream)}")
    for stage in stream.stages:
        if not len(stage.train) or not len(stage.test):
            raise PreconditionError(
                f"Stage {stage.index} has {len(stage.train)} training and {len(stage.test)} test samples; both must be non-empty"
            )
    return stream


# ─── One (method, seed) sub-run ──────────────────────────────────────────────


@dataclass
class RunSummary:
    method: str
    seed: int
    metrics: dict[str, float]
    forgetting: float
    params_base: int
    params_final: int
    expansions: int
    widths: list[int] = field(default_factory=list)

    def to_row(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            **self.metrics,
            "forgetting": self.forgetting,
            "params_base": self.params_base,
            "params_final": self.params_final,
            "expansions": self.expansions,
        }


def _fresh_head_accuracy(model: PartitionedModel, stage, seed: int) -> float:
    """Accuracy on a task that has not been trained yet, through a freshly initialized head."""
    scratch = model.copy()
    head = scratch.add_head(stage.n_classes, seed=derive_seed(seed, stage.index, 2), task=stage.index)
    return evaluate_accuracy(scratch, head, stage.test.x, stage.test.y)


def _norm_rows(check: PlasticityCheck, kind: str) -> list[dict]:
    norms = check.report.norms
    if norms is None:
        return []
    return [
        {"stage": check.stage, "epoch": check.epoch, "kind": kind, "layer": check.report.layer, "neuron": k, "norm": float(v)}
        for k, v in enumerate(norms)
    ]


def run_method(config: RunConfig, stream: TaskStream, method: str, seed: int, out_dir: Path) -> RunSummary:
    """Train `method` through every stage of `stream` and write the sub-run artifacts."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lwf_cfg = config.lwf_config()
    plasticity_cfg = config.plasticity_config()
    T = len(stream)
    matrix = AccuracyMatrix(T)
    model = PartitionedModel.build(config.model_spec(stream.input_dim), seed=derive_seed(seed, 0, 0))

    for stage in stream.stages:
        matrix.record(0, stage.index, _fresh_head_accuracy(model, stage, seed))

    reports: list[StageReport] = []
    norm_rows: list[dict] = []
    params_base = 0
    with (
        JsonlWriter(out_dir / "epochs.jsonl") as epochs_log,
        JsonlWriter(out_dir / "plasticity.jsonl") as plasticity_log,
        JsonlWriter(out_dir / "events.jsonl") as events_log,
    ):
        for stage in stream.stages:
            i = stage.index
            if i > 1:
                matrix.record(i - 1, i, _fresh_head_accuracy(model, stage, seed))

            params_before = model.parameter_count()
            if i == 1:
                model, result = train_base(model, stage, lwf_cfg, seed, method=method, on_epoch=epochs_log.write)
                report = StageReport(i, method, "base", result.epochs, params_before=params_before, optimizer=result.optimizer)
            elif method == "prime":
                model, report = prime_controller(model, stage, config.prime_config(), seed, on_epoch=epochs_log.write)
            else:
                if method == "lwf":
                    model, result = lwf_train_task(model, stage, lwf_cfg, seed, on_epoch=epochs_log.write)
                elif method == "ewc":
                    model, result = ewc_train_task(model, stage, lwf_cfg, config.ewc_config(), seed, on_epoch=epochs_log.write)
                else:
                    model, result = naive_train_task(model, stage, lwf_cfg, seed, on_epoch=epochs_log.write)
                report = StageReport(i, method, "short", result.epochs, params_before=params_before, optimizer=result.optimizer)
            report.params_after = model.parameter_count()
            if i == 1:
                params_base = report.params_after

            for j in range(1, i + 1):
                past = stream.stages[j - 1]
                accuracy = evaluate_accuracy(model, j - 1, past.test.x, past.test.y)
                matrix.record(i, j, accuracy)
                report.accuracies[j] = accuracy

            reference = stage.val.x if len(stage.val) else stage.train.x
            try:
                report.checks.append(PlasticityCheck(i, None, evaluate(model, reference, plasticity_cfg)))
            except DegenerateMatrixError as e:
                log.warning(f"{method}/seed-{seed} stage {i}: plasticity check skipped, {e}")

            for check in report.checks:
                plasticity_log.write({"method": method, "seed": seed, **check.to_record()})
                norm_rows += _norm_rows(check, "stall" if check.epoch is not None else "stage-end")
            for event in report.expansions:
                events_log.write({"method": method, "seed": seed, **to_jsonable(event)})

            reports.append(report)
            log.info(
                f"{method}/seed-{seed} stage {i}/{T} ({report.path}): "
                + ", ".join(f"R[{i},{j}]={a:.3f}" for j, a in report.accuracies.items())
            )

    metrics = compute(matrix)
    summary = RunSummary(
        method=method,
        seed=seed,
        metrics=metrics.as_dict(),
        forgetting=forgetting(matrix),
        params_base=params_base,
        params_final=model.parameter_count(),
        expansions=sum(len({e.generation for e in r.expansions}) for r in reports),
        widths=model.widths,
    )

    matrix.to_frame().write_csv(out_dir / "accuracy.csv")
    write_json(out_dir / "accuracy.json", matrix.to_dict())
    write_json(out_dir / "metrics.json", {**summary.to_row(), "widths": summary.widths})
    write_json(
        out_dir / "stages.json",
        [
            {
                "stage": r.stage,
                "method": r.method,
                "path": r.path,
                "epochs": len(r.epochs),
                "params_before": r.params_before,
                "params_after": r.params_after,
                "accuracies": r.accuracies,
                "checks": [c.to_record() for c in r.checks],
                "expansions": r.expansions,
            }
            for r in reports
        ],
    )
    norms = pl.DataFrame(
        norm_rows,
        schema={"stage": pl.Int64, "epoch": pl.Int64, "kind": pl.String, "layer": pl.Int64, "neuron": pl.Int64, "norm": pl.Float64},
    )
    norms.write_parquet(out_dir / "norms.parquet")
    save_checkpoint(model, out_dir / "model.npz", reports[-1].optimizer)
    polar_frame(matrix, method, seed).write_csv(out_dir / "polar.csv")
    return summary


def _run_job(job: tuple[RunConfig, TaskStream, str, int, Path]) -> RunSummary:
    return run_method(*job)


# ─── Whole scenario ──────────────────────────────────────────────────────────


def run_scenario(config: RunConfig, out_root: str | Path, name: str | None = None) -> Path:
    """Run every (method, seed) pair of `config` and write a run directory.

    Sub-runs execute in a process pool when `config.workers > 1`.

    Returns:
        The run directory.
    """
    dataset, digest = load_dataset(config)
    stream = build_stream(config, dataset)
    fingerprint = config.fingerprint(digest)

    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    name = name or f"{datetime.now().strftime('%Y%m%d-%H%M%S')}-{fingerprint[:8]}"
    final = out_root / name
    if final.exists():
        raise PreconditionError(f"Run directory `{final}` already exists")

    staging = Path(tempfile.mkdtemp(prefix=f".{name}.", dir=out_root))
    try:
        jobs = [(config, stream, m, s, staging / m / f"seed-{s}") for m in config.methods for s in config.seeds]
        log.info(f"Running {len(jobs)} sub-runs ({len(config.methods)} methods x {len(config.seeds)} seeds)")
        if config.workers > 1:
            with ProcessPoolExecutor(max_workers=config.workers) as pool:
                summaries = list(pool.map(_run_job, jobs))
        else:
            summaries = [_run_job(job) for job in jobs]

        write_json(staging / "config.json", config.to_dict())
        write_json(
            staging / "manifest.json",
            {
                "fingerprint": fingerprint,
                "data_digest": digest,
                "run_format_version": RUN_FORMAT_VERSION,
                "dataset_format_version": DATASET_FORMAT_VERSION,
                "checkpoint_format_version": CHECKPOINT_FORMAT_VERSION,
                "package_version": __version__,
                "created": datetime.now(timezone.utc).isoformat(),
                "input_dim": stream.input_dim,
                "stages": stream.meta["plan"],
                "normalizers": dataset.normalizers,
                "methods": config.methods,
                "seeds": config.seeds,
            },
        )
        runs = pl.DataFrame([s.to_row() for s in summaries])
        runs.write_csv(staging / "runs.csv")
        aggregate_runs(summaries).write_csv(staging / "aggregate.csv")
        pl.concat([pl.read_csv(staging / s.method / f"seed-{s.seed}" / "polar.csv") for s in summaries]).write_csv(
            staging / "polar.csv"
        )
        staging.rename(final)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise

    log.info(f"Run written to {final}")
    return final


def aggregate_runs(summaries: list[RunSummary]) -> pl.DataFrame:
    """Mean and half-range of every metric, per method."""
    frames = []
    for method in dict.fromkeys(s.method for s in summaries):
        rows = [{**s.metrics, "forgetting": s.forgetting} for s in summaries if s.method == method]
        frames.append(aggregate(rows).insert_column(0, pl.Series("method", [method] * (len(METRIC_NAMES) + 1))))
    return pl.concat(frames)


# ─── Comparison ──────────────────────────────────────────────────────────────


def read_run(run_dir: str | Path) -> tuple[RunConfig, dict]:
    """Load a run directory's config and manifest, checking the recorded fingerprint.

    Raises:
        ScenarioMismatchError: If the manifest fingerprint does not match the config.
    """
    run_dir = Path(run_dir)
    if not (run_dir / "manifest.json").exists():
        raise FileNotFoundError(f"Not a run directory (no manifest.json): `{run_dir}`")
    manifest = read_json(run_dir / "manifest.json")
    config = config_from_dict(read_json(run_dir / "config.json"))
    expected = config.fingerprint(manifest.get("data_digest", ""))
    if manifest.get("fingerprint") != expected:
        raise ScenarioMismatchError(
            f"Fingerprint of `{run_dir}` does not match its config (recorded {manifest.get('fingerprint')}, "
            f"computed {expected}); refusing to compare a modified run"
        )
    return config, manifest


def compare(run_dirs: list[str | Path]) -> pl.DataFrame:
    """One row per (run directory, method) with AA, BWT, FWT and FA as mean and half-range.

    Metrics are recomputed from the per-seed `metrics.json` files, not read from the
    aggregate table.

    Raises:
        ScenarioMismatchError: If the directories do not share one scenario fingerprint.
    """
    if not run_dirs:
        raise PreconditionError("compare needs at least one run directory")
    fingerprints = {}
    rows = []
    for run_dir in map(Path, run_dirs):
        config, manifest = read_run(run_dir)
        fingerprints[str(run_dir)] = manifest["fingerprint"]
        for method in config.methods:
            per_seed = [read_json(run_dir / method / f"seed-{s}" / "metrics.json") for s in config.seeds]
            agg = aggregate([{m: r[m] for m in METRIC_NAMES} for r in per_seed])
            row = {"run": run_dir.name, "method": method, "seeds": len(per_seed)}
            for metric, mean, half_range in agg.select("metric", "mean", "half_range").iter_rows():
                row[metric] = mean
                row[f"{metric}_half_range"] = half_range
            row["expansions"] = float(np.mean([r["expansions"] for r in per_seed]))
            row["params_base"] = float(np.mean([r["params_base"] for r in per_seed]))
            row["params_final"] = float(np.mean([r["params_final"] for r in per_seed]))
            rows.append(row)

    if len(set(fingerprints.values())) > 1:
        listing = ", ".join(f"{d}={fp[:12]}" for d, fp in fingerprints.items())
        raise ScenarioMismatchError(f"Run directories describe different scenarios: {listing}")
    return pl.DataFrame(rows)


def write_comparison(df: pl.DataFrame, filename: str | Path) -> list[Path]:
    return write_tables([Table(df, "comparison")], filename)


def comparison_table(df: pl.DataFrame) -> RichTable:
    """Aligned console rendering of a comparison frame."""
    table = RichTable(title="Method comparison")
    for col in ("run", "method", "seeds", *METRIC_NAMES, "expansions", "params_base", "params_final"):
        table.add_column(col, justify="left" if col in ("run", "method") else "right")
    for row in df.iter_rows(named=True):
        table.add_row(
            row["run"],
            row["method"],
            str(row["seeds"]),
            *(format_mean_range(row[m], row[f"{m}_half_range"]) for m in METRIC_NAMES),
            f"{row['expansions']:.1f}",
            f"{row['params_base']:,.0f}",
            f"{row['params_final']:,.0f}",
        )
    return table


# ─── External data ───────────────────────────────────────────────────────────


@dataclass
class LabelRule:
    """Five-tuple rule; unset fields match anything, either orientation of the flow."""

    label: str
    src: str | None = None
    dst: str | None = None
    sport: int | None = None
    dport: int | None = None
    proto: int | None = None

    def matches(self, flow: FlowRecord) -> bool:
        (a, pa), (b, pb) = flow.initiator, flow.responder
        if self.proto is not None and self.proto != flow.key.proto:
            return False
        return self._oriented(a, pa, b, pb) or self._oriented(b, pb, a, pa)

    def _oriented(self, src: str, sport: int, dst: str, dport: int) -> bool:
        return (
            (self.src is None or self.src == src)
            and (self.dst is None or self.dst == dst)
            and (self.sport is None or self.sport == sport)
            and (self.dport is None or self.dport == dport)
        )


@dataclass
class LabelManifest:
    """Mapping from captures (by file name) and five-tuple rules to class names."""

    files: dict[str, str] = field(default_factory=dict)
    rules: list[LabelRule] = field(default_factory=list)
    classes: list[str] = field(default_factory=list)

    @classmethod
    def read(cls, path: str | Path) -> "LabelManifest":
        data = read_json(path)
        problems = [f"{key}: unknown key" for key in sorted(set(data) - {"files", "rules", "classes"})]
        allowed = {"label", "src", "dst", "sport", "dport", "proto"}
        rules = []
        for idx, rule in enumerate(data.get("rules", [])):
            if not isinstance(rule, dict) or "label" not in rule or set(rule) - allowed:
                problems.append(f"rules[{idx}]: expected an object with `label` and any of {sorted(allowed - {'label'})}")
                continue
            rules.append(LabelRule(**{**rule, "label": str(rule["label"])}))
        if problems:
            raise ConfigError([f"{path}: {p}" for p in problems])
        files = {str(k): str(v) for k, v in data.get("files", {}).items()}
        classes = list(data.get("classes", []))
        for label in [*files.values(), *(r.label for r in rules)]:
            if label not in classes:
                classes.append(label)
        return cls(files=files, rules=rules, classes=classes)

    def label(self, flow: FlowRecord, capture: str) -> str | None:
        """Class name of one flow, from the matching rules or else the capture's label.

        Raises:
            LabelConflictError: If matching rules disagree with each other or with the
                capture's label.
        """
        labels = {rule.label for rule in self.rules if rule.matches(flow)}
        if len(labels) > 1:
            raise LabelConflictError(f"Flow {flow.key} in `{capture}` matches rules with labels {sorted(labels)}")
        file_label = self.files.get(capture)
        if not labels:
            return file_label
        label = labels.pop()
        if file_label is not None and label != file_label:
            raise LabelConflictError(
                f"Flow {flow.key} in `{capture}` matches a rule labeled `{label}` but the capture is labeled `{file_label}`"
            )
        return label


@dataclass
class IngestReport:
    captures: int = 0
    flows: int = 0
    labeled: int = 0
    unlabeled: int = 0
    skipped_frames: int = 0
    per_class: dict[str, int] = field(default_factory=dict)


def _capture_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.is_file() and p.name.lower().endswith(CAPTURE_SUFFIXES))


def ingest_external(
    source: str | Path,
    manifest: LabelManifest | None = None,
    n_b: int = 784,
    n_p: int = 32,
    idle_timeout: float = DEFAULT_IDLE_TIMEOUT,
) -> tuple[Dataset, IngestReport]:
    """Turn a capture directory (or an existing dataset file) into a labeled dataset.

    Flows without a label are counted and excluded.
    """
    source = Path(source)
    manifest = manifest or LabelManifest()
    report = IngestReport()

    if source.is_file():
        dataset = Dataset.read(source)
        keep = dataset.labels >= 0
        report.flows = len(dataset)
        report.unlabeled = int((~keep).sum())
        dataset = dataset.subset(np.flatnonzero(keep))
        report.labeled = len(dataset)
        report.per_class = {(dataset.class_names[c] if c < len(dataset.class_names) else f"class-{c}"): n for c, n in dataset.class_counts().items()}
        if report.unlabeled:
            log.warning(f"Excluded {report.unlabeled} unlabeled vectors from `{source}`")
        return dataset, report

    if not source.is_dir():
        raise FileNotFoundError(f"Capture directory not found: `{source}`")

    captures = _capture_files(source)
    if missing := sorted(set(manifest.files) - {p.name for p in captures}):
        log.warning(f"Manifest names captures that are not in `{source}`: {missing}")

    class_index = {name: i for i, name in enumerate(manifest.classes)}
    vectors = []
    for path in captures:
        flows, skipped = read_capture(path, idle_timeout=idle_timeout, n_b=n_b)
        report.captures += 1
        report.flows += len(flows)
        report.skipped_frames += skipped
        for flow in flows:
            label = manifest.label(flow, path.name)
            if label is None:
                report.unlabeled += 1
                continue
            report.labeled += 1
            report.per_class[label] = report.per_class.get(label, 0) + 1
            vectors.append(extract_features(flow, n_b, n_p, Normalizers(), label=class_index[label]))

    if report.unlabeled:
        log.warning(f"Excluded {report.unlabeled} of {report.flows} flows without a label")
    if not vectors:
        log.warning(f"No labeled flows in `{source}`; the dataset is empty")

    dataset = Dataset.from_vectors(
        vectors,
        n_b,
        n_p,
        class_names=list(manifest.classes),
        meta={"source": "pcap", "captures": [p.name for p in captures], "idle_timeout": idle_timeout},
    )
    return dataset, report


# ─── Width sweep ─────────────────────────────────────────────────────────────


def sweep(config: RunConfig, widths: list[int], seeds: list[int] | None = None) -> pl.DataFrame:
    """Train a fresh model per first-hidden-layer width on the scenario's first stage.

    Returns:
        One row per (width, seed): pr1, pr2, indicator, effective rank and test accuracy
        at the end of training.
    """
    dataset, _ = load_dataset(config)
    stage = build_stream(config, dataset).stages[0]
    reference = stage.val.x if len(stage.val) else stage.train.x
    rows = []
    for width in widths:
        spec = config.model_spec(dataset.width)
        spec.hidden = [width, *spec.hidden[1:]]
        for seed in seeds or config.seeds:
            model = PartitionedModel.build(spec, seed=derive_seed(seed, 0, 0))
            model, _ = train_base(model, stage, config.lwf_config(), seed, method="sweep")
            report = evaluate(model, reference, config.plasticity_config())
            rows.append(
                {
                    "width": width,
                    "seed": seed,
                    "layer": report.layer,
                    "pr1": report.pr1,
                    "pr2": report.pr2,
                    "indicator": report.indicator,
                    "effective_rank": report.effective_rank,
                    "test_acc": evaluate_accuracy(model, 0, stage.test.x, stage.test.y),
                }
            )
            log.info(f"Width {width} seed {seed}: pr1={report.pr1:.4f} pr2={report.pr2:.4f}")
    return pl.DataFrame(rows)


def stage_epochs(run_dir: str | Path, method: str, seed: int) -> list[EpochLog]:
    """Read back the epoch log of one sub-run."""
    path = Path(run_dir) / method / f"seed-{seed}" / "epochs.jsonl"
    return [EpochLog(**row) for row in pl.read_ndjson(path).iter_rows(named=True)]

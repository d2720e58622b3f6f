"""Leave-one-subject-out evaluation, fold persistence and accuracy summaries."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import EpochedDataset, SubjectRecord, channel_stats, apply_standardization
from .models import ModelSpec, build_model, Model
from .tensor import DimensionError, NonFiniteError
from .training import EpochTrace, TrainConfig, TrainingAborted, fit

log = logging.getLogger(__name__)

THRESHOLD = 0.70
_EPS = 1e-12


class ProtocolError(ValueError):
    """Inputs violate the evaluation protocol (too few subjects, misalignment)."""


@dataclass(frozen=True)
class FoldPlan:
    held_out_subject: str
    train_subjects: tuple[str, ...]


@dataclass
class FoldResult:
    subject_id: str
    n_test_trials: int
    n_correct: int
    trace: EpochTrace | None = None
    status: str = "ok"
    error: str | None = None

    @property
    def accuracy(self) -> float:
        return self.n_correct / self.n_test_trials if self.n_test_trials else float("nan")

    @property
    def epochs_run(self) -> int:
        return len(self.trace) if self.trace is not None else 0

    @property
    def stopped_early(self) -> bool:
        return bool(self.trace.stopped_early) if self.trace is not None else False

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def loso_split(subject_ids: Sequence[str]) -> list[FoldPlan]:
    """One fold per subject, in input order, training on all the others."""
    ids = list(subject_ids)
    if len(ids) < 2:
        raise ProtocolError(f"leave-one-subject-out needs at least 2 subjects, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ProtocolError("subject ids must be unique")
    return [FoldPlan(s, tuple(i for i in ids if i != s)) for s in ids]


def evaluate_fold(model: Model, record: SubjectRecord, trials: np.ndarray | None = None) -> FoldResult:
    """Score a trained model on a held-out subject.

    ``trials`` optionally replaces ``record.trials`` (e.g. standardized
    copies); labels always come from ``record``.
    """
    X = record.trials if trials is None else trials
    expected = (model.spec.n_channels, model.spec.n_samples)
    if X.shape[1:] != expected:
        raise DimensionError(f"subject {record.subject_id}: trials {X.shape[1:]} do not match model input {expected}")
    predictions = model.predict(X)
    n_correct = int(np.sum(predictions == record.labels))
    return FoldResult(record.subject_id, int(record.n_trials), n_correct)


# ----------------------------------------------------------------------
# fold persistence


def config_hash(spec: ModelSpec, cfg: TrainConfig, standardize: bool) -> str:
    payload = json.dumps(
        {"model": spec.to_dict(), "train": cfg.to_dict(), "standardize": standardize}, sort_keys=True
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _fold_stem(subject: str, kind: str, digest: str) -> str:
    return f"fold_{subject}_{kind}_{digest}"


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_fold(result: FoldResult, folder: Path, kind: str, digest: str) -> None:
    stem = _fold_stem(result.subject_id, kind, digest)
    if result.trace is not None:
        _atomic_write(folder / f"{stem}.trace.csv", result.trace.to_csv())
    record = {
        "subject_id": result.subject_id,
        "model": kind,
        "config_hash": digest,
        "status": result.status,
        "error": result.error,
        "n_test": result.n_test_trials,
        "n_correct": result.n_correct,
        "epochs_run": result.epochs_run,
        "stopped_early": result.stopped_early,
        "best_epoch": result.trace.best_epoch if result.trace is not None else 0,
    }
    _atomic_write(folder / f"{stem}.json", json.dumps(record, indent=2, sort_keys=True) + "\n")


def read_fold(folder: Path, subject: str, kind: str, digest: str) -> FoldResult | None:
    stem = _fold_stem(subject, kind, digest)
    path = folder / f"{stem}.json"
    if not path.exists():
        return None
    record = json.loads(path.read_text())
    trace = None
    trace_path = folder / f"{stem}.trace.csv"
    if trace_path.exists():
        trace = EpochTrace.from_csv(trace_path.read_text())
        trace.stopped_early = record["stopped_early"]
        trace.best_epoch = record["best_epoch"]
    return FoldResult(record["subject_id"], record["n_test"], record["n_correct"], trace, record["status"], record["error"])


def folds_csv(results: Sequence[FoldResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["subject_id", "n_test", "n_correct", "accuracy", "epochs_run", "stopped_early"])
    for r in results:
        if r.ok:
            writer.writerow([r.subject_id, r.n_test_trials, r.n_correct, repr(r.accuracy), r.epochs_run, int(r.stopped_early)])
    return buf.getvalue()


def read_folds_csv(path) -> list[FoldResult]:
    results = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"subject_id", "n_test", "n_correct"} - set(reader.fieldnames or [])
        if missing:
            raise ProtocolError(f"{path}: missing columns {sorted(missing)}")
        for line, row in enumerate(reader, start=2):
            try:
                results.append(FoldResult(row["subject_id"], int(row["n_test"]), int(row["n_correct"])))
            except ValueError as exc:
                raise ProtocolError(f"{path}:{line}: {exc}") from None
    return results


# ----------------------------------------------------------------------
# the LOSO campaign


def _train_and_test(dataset: EpochedDataset, plan: FoldPlan, spec: ModelSpec, cfg: TrainConfig, standardize: bool) -> FoldResult:
    X, y, groups = dataset.stack(plan.train_subjects)
    test = dataset.subject(plan.held_out_subject)
    X_test = test.trials
    if standardize:
        # statistics come from training subjects only
        mean, std = channel_stats(X)
        X = apply_standardization(X, mean, std)
        X_test = apply_standardization(X_test, mean, std)
    model = build_model(spec)
    try:
        model, trace = fit(model, X, y, cfg, groups)
    except (TrainingAborted, NonFiniteError, FloatingPointError) as exc:
        log.warning("fold %s failed: %s", plan.held_out_subject, exc)
        return FoldResult(plan.held_out_subject, test.n_trials, 0, None, "failed", str(exc))
    result = evaluate_fold(model, test, X_test)
    result.trace = trace
    return result


def _fold_job(args):
    dataset, plan, spec, cfg, standardize, folder, digest = args
    result = _train_and_test(dataset, plan, spec, cfg, standardize)
    write_fold(result, folder, spec.kind, digest)
    return result


def run_loso(
    dataset: EpochedDataset,
    spec: ModelSpec,
    cfg: TrainConfig,
    out_dir,
    standardize: bool | None = None,
    jobs: int = 1,
) -> list[FoldResult]:
    """Train and test one model per held-out subject, persisting each fold.

    Folds whose result file (keyed by subject, model and config hash)
    already exists with status ``ok`` are loaded instead of recomputed.
    Failed folds are recorded and the campaign continues.  After all folds,
    ``folds.csv`` and ``summary.json`` are written to ``out_dir``.
    """
    if (spec.n_channels, spec.n_samples) != (dataset.n_channels, dataset.n_samples):
        raise DimensionError(
            f"model expects ({spec.n_channels}, {spec.n_samples}) but dataset is "
            f"({dataset.n_channels}, {dataset.n_samples})"
        )
    if standardize is None:
        standardize = spec.kind == "min2net"
    out = Path(out_dir)
    folder = out / "folds"
    folder.mkdir(parents=True, exist_ok=True)
    digest = config_hash(spec, cfg, standardize)

    plans = loso_split(dataset.subject_ids)
    results: dict[str, FoldResult] = {}
    pending = []
    for plan in plans:
        cached = read_fold(folder, plan.held_out_subject, spec.kind, digest)
        if cached is not None and cached.ok:
            log.info("fold %s: reusing stored result", plan.held_out_subject)
            results[plan.held_out_subject] = cached
        else:
            pending.append((dataset, plan, spec, cfg, standardize, folder, digest))

    if jobs > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for result in pool.map(_fold_job, pending):
                results[result.subject_id] = result
    else:
        for job in pending:
            result = _fold_job(job)
            log.info("fold %s: accuracy %.3f", result.subject_id, result.accuracy)
            results[result.subject_id] = result

    ordered = [results[p.held_out_subject] for p in plans]
    _atomic_write(out / "folds.csv", folds_csv(ordered))
    ok = [r for r in ordered if r.ok]
    if ok:
        summary = summarize(ok, model=spec.kind, config_hash=digest)
        _atomic_write(out / "summary.json", summary.to_json())
    return ordered


# ----------------------------------------------------------------------
# summaries


def histogram(accuracies: Sequence[float]) -> list[int]:
    """Counts over the ten bins [0,10), [10,20), ..., [90,100] (percent)."""
    counts = [0] * 10
    for a in accuracies:
        pct = round(float(a) * 100.0, 9)
        if not 0.0 <= pct <= 100.0:
            raise ProtocolError(f"accuracy {a} outside [0, 1]")
        counts[min(int(pct // 10), 9)] += 1
    return counts


def lower_median(values: Sequence[float]) -> float:
    ordered = sorted(values)
    return ordered[(len(ordered) - 1) // 2]


@dataclass
class EvalSummary:
    model: str
    accuracies: list[float]
    median: float
    max: float
    count_above_threshold: int
    histogram: list[int]
    threshold: float = THRESHOLD
    config_hash: str = ""
    subjects: list[str] = field(default_factory=list)

    @property
    def n_subjects(self) -> int:
        return len(self.accuracies)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "median": self.median,
            "max": self.max,
            "count_ge_70": self.count_above_threshold,
            "threshold": self.threshold,
            "histogram": list(self.histogram),
            "config_hash": self.config_hash,
            "subjects": list(self.subjects),
            "accuracies": list(self.accuracies),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalSummary":
        return cls(
            model=d["model"],
            accuracies=list(d["accuracies"]),
            median=d["median"],
            max=d["max"],
            count_above_threshold=d["count_ge_70"],
            histogram=list(d["histogram"]),
            threshold=d["threshold"],
            config_hash=d["config_hash"],
            subjects=list(d["subjects"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "EvalSummary":
        return cls.from_dict(json.loads(text))


def summarize(results, threshold: float = THRESHOLD, model: str = "", config_hash: str = "") -> EvalSummary:
    """Median (lower middle for even n), max, count >= threshold, histogram.

    ``results`` may be FoldResults or plain accuracies.
    """
    results = list(results)
    if not results:
        raise ProtocolError("cannot summarize an empty result set")
    if isinstance(results[0], FoldResult):
        subjects = [r.subject_id for r in results]
        accs = [r.accuracy for r in results]
    else:
        subjects = []
        accs = [float(a) for a in results]
    return EvalSummary(
        model=model,
        accuracies=accs,
        median=lower_median(accs),
        max=max(accs),
        count_above_threshold=sum(a >= threshold - _EPS for a in accs),
        histogram=histogram(accs),
        threshold=threshold,
        config_hash=config_hash,
        subjects=subjects,
    )

"""Command-line front end.

Commands::

    mitransfer synth  --out DIR [--subjects N ...]
    mitransfer train  --model KIND --data DIR --out DIR [--holdout ID]
    mitransfer loso   --model KIND --data DIR --out DIR
    mitransfer stats  FOLDS.csv FOLDS.csv [...] [--out FILE]
    mitransfer report RUN_DIR [RUN_DIR ...] --out DIR

Global flags: ``--config FILE`` (flat ``key = value`` lines, ``#``
comments), ``--seed``, ``--jobs``.  A command-line flag beats a config-file
line, which beats the built-in defaults (per-model training defaults come
from the hyperparameter table).

Exit status: 0 on success, 1 if any fold failed, 2 on usage or protocol
errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data as eeg
from .evaluation import (
    EvalSummary,
    FoldResult,
    ProtocolError,
    config_hash,
    evaluate_fold,
    folds_csv,
    read_folds_csv,
    run_loso,
    summarize,
)
from .models import KINDS, ModelSpec, SpecError, build_model, save_checkpoint
from .report import emit_report
from .stats import ProtocolError as StatsProtocolError, StatTestError, compare_models
from .training import ConfigError, TrainConfig, TrainingAborted, fit

log = logging.getLogger("mitransfer")

COMMANDS = ("synth", "train", "loso", "stats", "report")


class UsageError(Exception):
    pass


def _bool(text: str) -> bool:
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# name -> (type, group, target field)
OPTIONS: dict[str, tuple[type, str, str]] = {
    # training
    "epochs": (int, "train", "epochs"),
    "lr": (float, "train", "learning_rate"),
    "min_lr": (float, "train", "min_lr"),
    "factor": (float, "train", "factor"),
    "patience": (int, "train", "patience"),
    "es_patience": (int, "train", "es_patience"),
    "batch_size": (int, "train", "batch_size"),
    "validation_fraction": (float, "train", "validation_fraction"),
    "monitor": (str, "train", "monitor"),
    # model
    "dropout": (float, "model", "dropout_rate"),
    "bn_momentum": (float, "model", "bn_momentum"),
    "latent_dim": (int, "model", "latent_dim"),
    "temporal_kernel": (int, "model", "temporal_kernel"),
    "triplet_margin": (float, "model", "triplet_margin"),
    "precision": (str, "model", "precision"),
    # synthetic data
    "subjects": (int, "synth", "n_subjects"),
    "trials": (int, "synth", "trials_per_subject"),
    "samples": (int, "synth", "n_samples"),
    "sample_rate": (float, "synth", "sample_rate"),
    "erd_depth": (float, "synth", "erd_depth"),
    "noise_scale": (float, "synth", "noise_scale"),
    # run
    "model": (str, "run", "model"),
    "data": (str, "run", "data"),
    "out": (str, "run", "out"),
    "seed": (int, "run", "seed"),
    "jobs": (int, "run", "jobs"),
    "standardize": (_bool, "run", "standardize"),
    "holdout": (str, "run", "holdout"),
    "alpha": (float, "run", "alpha"),
    "posthoc": (str, "run", "posthoc"),
}


@dataclass
class RunConfig:
    command: str
    model: str | None = None
    data: Path | None = None
    out: Path | None = None
    seed: int = 0
    jobs: int = 1
    standardize: bool | None = None
    holdout: str | None = None
    alpha: float = 0.05
    posthoc: str = "wilcoxon"
    inputs: list[Path] = field(default_factory=list)
    overrides: dict[str, object] = field(default_factory=dict)

    def _group(self, group: str) -> dict:
        return {OPTIONS[k][2]: v for k, v in self.overrides.items() if OPTIONS[k][1] == group}

    def train_config(self) -> TrainConfig:
        return TrainConfig.for_model(self.model, seed=self.seed, **self._group("train"))

    def model_spec(self, n_channels: int, n_samples: int, sample_rate: float) -> ModelSpec:
        return ModelSpec(
            self.model, n_channels=n_channels, n_samples=n_samples, sample_rate=sample_rate,
            seed=self.seed, **self._group("model"),
        )

    def synth_config(self) -> eeg.SynthConfig:
        return eeg.SynthConfig(seed=self.seed, **self._group("synth"))


def read_config_file(path) -> dict[str, object]:
    """Parse flat ``key = value`` lines; unknown keys are rejected."""
    values: dict[str, object] = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in OPTIONS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = OPTIONS[key][0](value)
        except ValueError:
            raise UsageError(f"{path}:{lineno}: cannot parse {value!r} for {key!r}") from None
    return values


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="flat key = value configuration file")
    for name, (typ, group, _) in OPTIONS.items():
        flag = "--" + name.replace("_", "-")
        if typ is _bool:
            common.add_argument(flag, dest=name, type=_bool, default=argparse.SUPPRESS, metavar="BOOL")
        else:
            common.add_argument(flag, dest=name, type=typ, default=argparse.SUPPRESS)

    parser = _Parser(prog="mitransfer", description="Subject-independent motor-imagery EEG decoding.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    # global flags may also precede the command
    parser.add_argument("--config", default=argparse.SUPPRESS)
    parser.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    parser.add_argument("--jobs", type=int, default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for cmd in COMMANDS:
        p = sub.add_parser(cmd, parents=[common])
        if cmd in ("stats", "report"):
            p.add_argument("inputs", nargs="+", help="per-fold CSVs (stats) or run directories (report)")
    return parser


def parse_config(argv: Sequence[str], config_file=None) -> RunConfig:
    """Merge built-in defaults, the config file and command-line flags."""
    parser = build_parser()
    ns = parser.parse_args(list(argv))
    cli = {k: v for k, v in vars(ns).items() if k in OPTIONS}
    file_path = config_file or getattr(ns, "config", None)
    merged = read_config_file(file_path) if file_path else {}
    merged.update(cli)

    cfg = RunConfig(command=ns.command, inputs=[Path(p) for p in getattr(ns, "inputs", [])])
    for key, value in merged.items():
        if OPTIONS[key][1] == "run":
            setattr(cfg, key, Path(value) if key in ("data", "out") else value)
        else:
            cfg.overrides[key] = value
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    if cfg.command in ("train", "loso"):
        if cfg.model is None:
            raise UsageError(f"{cfg.command}: --model is required")
        if cfg.model not in KINDS:
            raise UsageError(f"unknown model {cfg.model!r}; choose from {', '.join(KINDS)}")
        if cfg.model == "min2net" and "dropout" in cfg.overrides:
            raise UsageError("MIN2Net has no dropout rate hyperparameter; remove --dropout")
        if cfg.data is None:
            raise UsageError(f"{cfg.command}: --data is required")
        if not cfg.data.is_dir():
            raise UsageError(f"{cfg.command}: data directory {cfg.data} does not exist")
    if cfg.command in ("synth", "train", "loso", "report") and cfg.out is None:
        raise UsageError(f"{cfg.command}: --out is required")
    if cfg.command == "stats" and len(cfg.inputs) < 2:
        raise UsageError("stats: need at least two per-fold CSV files")
    for p in cfg.inputs:
        if not p.exists():
            raise UsageError(f"{cfg.command}: input {p} does not exist")
    if cfg.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    if cfg.command == "synth":
        stray = [k for k in cfg.overrides if OPTIONS[k][1] in ("train", "model")]
        if stray:
            raise UsageError(f"synth does not accept {', '.join(sorted(stray))}")
    elif cfg.command in ("train", "loso"):
        stray = [k for k in cfg.overrides if OPTIONS[k][1] == "synth"]
        if stray:
            raise UsageError(f"{cfg.command} does not accept {', '.join(sorted(stray))}")


# ----------------------------------------------------------------------
# commands


def _cmd_synth(cfg: RunConfig) -> int:
    dataset = eeg.synthesize_dataset(cfg.synth_config())
    eeg.save_dataset(dataset, cfg.out)
    print(f"wrote {len(dataset.subjects)} subjects ({dataset.total_trials} trials) to {cfg.out}")
    return 0


def _specs(cfg: RunConfig, dataset: eeg.EpochedDataset):
    spec = cfg.model_spec(dataset.n_channels, dataset.n_samples, dataset.sample_rate_hz)
    return spec, cfg.train_config()


def _cmd_train(cfg: RunConfig) -> int:
    dataset = eeg.load_dataset(cfg.data)
    spec, train_cfg = _specs(cfg, dataset)
    holdout = cfg.holdout or dataset.subject_ids[-1]
    if holdout not in dataset.subject_ids:
        raise UsageError(f"train: unknown holdout subject {holdout!r}")
    train_ids = [s for s in dataset.subject_ids if s != holdout]
    if not train_ids:
        raise ProtocolError("train: no training subjects left after holdout")
    standardize = spec.kind == "min2net" if cfg.standardize is None else cfg.standardize
    X, y, groups = dataset.stack(train_ids)
    test = dataset.subject(holdout)
    X_test = test.trials
    if standardize:
        mean, std = eeg.channel_stats(X)
        X, X_test = eeg.apply_standardization(X, mean, std), eeg.apply_standardization(X_test, mean, std)
    model = build_model(spec)
    try:
        model, trace = fit(model, X, y, train_cfg, groups)
    except TrainingAborted as exc:
        log.error("training failed: %s", exc)
        return 1
    result = evaluate_fold(model, test, X_test)
    result.trace = trace
    cfg.out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, cfg.out / "model.ckpt")
    (cfg.out / "trace.csv").write_text(trace.to_csv())
    (cfg.out / "folds.csv").write_text(folds_csv([result]))
    print(f"{spec.kind}: held-out {holdout} accuracy {result.accuracy:.4f} after {len(trace)} epochs")
    return 0


def _cmd_loso(cfg: RunConfig) -> int:
    dataset = eeg.load_dataset(cfg.data)
    spec, train_cfg = _specs(cfg, dataset)
    results = run_loso(dataset, spec, train_cfg, cfg.out, standardize=cfg.standardize, jobs=cfg.jobs)
    failed = [r.subject_id for r in results if not r.ok]
    ok = [r for r in results if r.ok]
    if ok:
        s = summarize(ok)
        print(
            f"{spec.kind}: {len(ok)} folds, median {s.median:.4f}, max {s.max:.4f}, "
            f">= 0.70: {s.count_above_threshold}"
        )
    if failed:
        print(f"failed folds: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def _model_name(path: Path) -> str:
    if "=" in path.name:
        return path.name.split("=", 1)[0]
    summary = path.parent / "summary.json"
    if path.name == "folds.csv" and summary.exists():
        return json.loads(summary.read_text()).get("model") or path.parent.name
    return path.parent.name if path.name == "folds.csv" else path.stem


def _aligned_accuracies(paths: Sequence[Path]) -> dict[str, list[float]]:
    vectors: dict[str, dict[str, float]] = {}
    for p in paths:
        name = _model_name(p)
        if name in vectors:
            raise ProtocolError(f"duplicate model name {name!r} ({p})")
        vectors[name] = {r.subject_id: r.accuracy for r in read_folds_csv(p)}
    subject_sets = {frozenset(v) for v in vectors.values()}
    if len(subject_sets) != 1:
        raise ProtocolError("per-fold files cover different subject sets; cannot align")
    subjects = sorted(next(iter(subject_sets)))
    return {name: [v[s] for s in subjects] for name, v in vectors.items()}


def _cmd_stats(cfg: RunConfig) -> int:
    vectors = _aligned_accuracies(cfg.inputs)
    report = compare_models(vectors, alpha=cfg.alpha, posthoc=cfg.posthoc)
    text = report.to_json()
    if cfg.out:
        cfg.out.parent.mkdir(parents=True, exist_ok=True)
        cfg.out.write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_report(cfg: RunConfig) -> int:
    results: dict[str, list[FoldResult]] = {}
    hashes: dict[str, str] = {}
    for run_dir in cfg.inputs:
        folds = run_dir / "folds.csv" if run_dir.is_dir() else run_dir
        summary = folds.parent / "summary.json"
        meta = json.loads(summary.read_text()) if summary.exists() else {}
        name = meta.get("model") or folds.parent.name
        results[name] = read_folds_csv(folds)
        hashes[name] = meta.get("config_hash", "")
    bundle = emit_report(results, cfg.out, hashes)
    print(f"wrote report to {bundle.summary_json.parent}")
    return 0


_DISPATCH = {"synth": _cmd_synth, "train": _cmd_train, "loso": _cmd_loso, "stats": _cmd_stats, "report": _cmd_report}


def dispatch(cfg: RunConfig) -> int:
    try:
        return _DISPATCH[cfg.command](cfg)
    except (UsageError, ProtocolError, StatsProtocolError, StatTestError, SpecError, ConfigError,
            eeg.FormatError, eeg.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main(argv: Sequence[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        cfg = parse_config(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    verbose = sum(a.count("v") for a in argv if a.startswith("-v") and set(a[1:]) == {"v"})
    verbose += argv.count("--verbose")
    level = logging.DEBUG if verbose >= 2 else logging.INFO if verbose else logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return dispatch(cfg)


if __name__ == "__main__":
    sys.exit(main())

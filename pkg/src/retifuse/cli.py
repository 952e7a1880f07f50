"""Command line entry point: ``retifuse {synth,run,compare,gradcheck}``.

Every command but ``gradcheck`` reads one experiment config and writes under
its output directory::

    <output_dir>/data/manifest.jsonl    synthesized dataset (synth)
    <output_dir>/split.json             patient split used by run and compare
    <output_dir>/checkpoints/<run>.ckpt best weights of each run
    <output_dir>/histories/<run>.jsonl  per-epoch loss and validation AUC
    <output_dir>/scores/<run>.json      validation and test scores
    <output_dir>/report.csv             comparison table (also report.txt)
    <output_dir>/roc.svg                overlaid test ROC curves

Exit codes: 0 success, 2 invalid config or usage, 3 a run diverged or a
gradient check failed, 4 missing input (dataset, split, checkpoint, scores).
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .config import ConfigError, ExperimentConfig, RunSpec, load_config
from .data import DataError, DatasetSplit, load_manifest, preprocess, split_by_patient, write_dataset
from .fusion import build_model, load_model, method_label, save_model
from .metrics import (
    MetricsReport, ReportRow, ScoredSet, auc, build_report, operating_point, roc_curve, roc_svg, sens_spec,
)
from .synthetic import synth_generate
from .training import DivergenceError, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUN_FAILED = 3
EXIT_MISSING = 4
SCORES_VERSION = 1

log = logging.getLogger("retifuse")


class MissingInputError(DataError):
    pass


class OutputExistsError(RuntimeError):
    pass


class JsonLineFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        entry = {"time": round(record.created, 3), "level": record.levelname.lower(),
                 "logger": record.name, "message": record.getMessage()}
        entry.update(getattr(record, "fields", {}))
        return json.dumps(entry, sort_keys=True)


def _event(level: int, message: str, **fields) -> None:
    log.log(level, message, extra={"fields": fields})


class Layout:
    """Paths inside one experiment directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.data = self.root / "data"
        self.manifest = self.data / "manifest.jsonl"
        self.split = self.root / "split.json"
        self.report_csv = self.root / "report.csv"
        self.report_txt = self.root / "report.txt"
        self.roc = self.root / "roc.svg"

    def checkpoint(self, run: str) -> Path:
        return self.root / "checkpoints" / f"{run}.ckpt"

    def history(self, run: str) -> Path:
        return self.root / "histories" / f"{run}.jsonl"

    def scores(self, run: str) -> Path:
        return self.root / "scores" / f"{run}.json"


# ---------------------------------------------------------------------------
# commands

def cmd_synth(cfg: ExperimentConfig, force: bool = False) -> Path:
    """Generate the configured synthetic dataset into ``<output_dir>/data``."""
    if cfg.synthetic is None:
        raise ConfigError("synth needs a config whose data section is 'synthetic'")
    layout = Layout(cfg.output_dir)
    if layout.data.exists():
        if not force:
            raise OutputExistsError(f"{layout.data} already exists; pass --force to overwrite")
        shutil.rmtree(layout.data)
    acquisitions = synth_generate(cfg.synthetic)
    manifest = write_dataset(layout.data, acquisitions)
    truth = {"version": 1, "config": cfg.synthetic.to_json(),
             "planted": {a.acquisition_id: list(a.planted) for a in acquisitions}}
    (layout.data / "synth.json").write_text(json.dumps(truth, indent=1, sort_keys=True) + "\n")
    _event(logging.INFO, "synthesized dataset", acquisitions=len(acquisitions), manifest=str(manifest))
    return manifest


def load_acquisitions(cfg: ExperimentConfig):
    path = cfg.manifest if cfg.manifest is not None else Layout(cfg.output_dir).manifest
    if not path.is_file():
        hint = "" if cfg.manifest is not None else " (run the synth command first)"
        raise MissingInputError(f"dataset manifest not found: {path}{hint}")
    manifest = load_manifest(path)
    return [preprocess(a, cfg.volume_grid, cfg.lso_grid) for a in manifest.acquisitions()]


def resolve_split(cfg: ExperimentConfig, acquisitions, reuse: bool = False) -> DatasetSplit:
    """The configured split; with ``reuse`` the one already stored by ``run`` is preferred."""
    stored = Layout(cfg.output_dir).split
    if cfg.split_file is not None:
        if not cfg.split_file.is_file():
            raise MissingInputError(f"split file not found: {cfg.split_file}")
        split = DatasetSplit.load(cfg.split_file)
    elif reuse and stored.is_file():
        split = DatasetSplit.load(stored)
    else:
        split = split_by_patient(acquisitions, cfg.split_fractions, cfg.split_seed)
    split.validate(acquisitions)
    return split


def _train_one(cfg: ExperimentConfig, run: RunSpec, train_set, val_set) -> dict:
    layout = Layout(cfg.output_dir)
    for p in (layout.checkpoint(run.name), layout.history(run.name)):
        p.parent.mkdir(parents=True, exist_ok=True)
    model = build_model(run.method, run.backbone, run.model_seed)
    started = time.perf_counter()
    _event(logging.INFO, "run started", run=run.name, method=run.method, backbone=run.backbone,
           parameters=model.num_parameters())
    try:
        model, history = train(model, train_set, val_set, run.train)
        status = "ok"
    except DivergenceError as exc:
        history, status = exc.history, "diverged"
        _event(logging.ERROR, "run diverged", run=run.name, error=str(exc))
    history.save(layout.history(run.name))
    if status == "ok":
        save_model(layout.checkpoint(run.name), model,
                   {"run": run.name, "best_epoch": history.best_epoch, "train": run.train.to_json()})
    _event(logging.INFO, "run finished", run=run.name, status=status, epochs=len(history.records),
           best_epoch=history.best_epoch, stopping_reason=history.stopping_reason,
           seconds=round(time.perf_counter() - started, 1))
    return {"run": run.name, "status": status, "best_epoch": history.best_epoch}


def _train_worker(cfg: ExperimentConfig, run_name: str) -> dict:
    acquisitions = load_acquisitions(cfg)
    split = resolve_split(cfg, acquisitions, reuse=True)
    return _train_one(cfg, cfg.run(run_name), split.select(acquisitions, "train"), split.select(acquisitions, "val"))


def cmd_run(cfg: ExperimentConfig, jobs: int = 1) -> list[dict]:
    """Train every configured run; a diverging run is recorded and the rest continue."""
    acquisitions = load_acquisitions(cfg)
    split = resolve_split(cfg, acquisitions)
    Layout(cfg.output_dir).root.mkdir(parents=True, exist_ok=True)
    split.save(Layout(cfg.output_dir).split)
    train_set, val_set = split.select(acquisitions, "train"), split.select(acquisitions, "val")
    _event(logging.INFO, "split ready", train=len(train_set), val=len(val_set), test=len(split.test))
    if jobs > 1 and len(cfg.runs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_train_worker, cfg, r.name) for r in cfg.runs]
            return [f.result() for f in futures]
    return [_train_one(cfg, r, train_set, val_set) for r in cfg.runs]


def score_runs(cfg: ExperimentConfig) -> None:
    """Write ``scores/<run>.json`` (validation and test) from each run's checkpoint."""
    layout = Layout(cfg.output_dir)
    missing = [r.name for r in cfg.runs if not layout.checkpoint(r.name).is_file()]
    if missing:
        raise MissingInputError(f"no checkpoint for run(s) {', '.join(missing)} under {layout.root / 'checkpoints'}")
    acquisitions = load_acquisitions(cfg)
    split = resolve_split(cfg, acquisitions, reuse=True)
    for run in cfg.runs:
        model, _ = load_model(layout.checkpoint(run.name))
        sets = {}
        for name in ("val", "test"):
            samples = split.select(acquisitions, name)
            sets[name] = ScoredSet([a.acquisition_id for a in samples], model.predict_proba(samples),
                                   [a.label for a in samples]).to_json()
        write_scores(layout.scores(run.name), run, sets["val"], sets["test"])


def write_scores(path: Path, run: RunSpec, val: dict | None, test: dict | None, metadata: dict | None = None) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"version": SCORES_VERSION, "run": run.name, "method": run.method, "backbone": run.backbone,
           "val": val, "test": test, "metadata": metadata or {}}
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _report_row(doc: dict) -> tuple[ReportRow, list | None]:
    """Metrics for one run: AUC on test, sensitivity/specificity at the validation Youden threshold.

    ``metadata`` entries ``auc``, ``sensitivity``, ``specificity`` and ``label``
    override computed values (used to tabulate externally reported numbers).
    """
    meta = doc.get("metadata") or {}
    test = ScoredSet.from_json(doc["test"]) if doc.get("test") else None
    val = ScoredSet.from_json(doc["val"]) if doc.get("val") else None
    computed: dict = {}
    curve = None
    if test is not None:
        computed["auc"] = auc(test)
        curve = roc_curve(test)
        threshold = operating_point(val) if val is not None else 0.5
        computed["sensitivity"], computed["specificity"] = sens_spec(test, threshold)
    values = {k: float(meta.get(k, computed.get(k, float("nan")))) for k in ("auc", "sensitivity", "specificity")}
    if any(v != v for v in values.values()):
        raise DataError(f"scores for run {doc.get('run')!r} have neither a test set nor stored metrics")
    label = meta.get("label", method_label(doc["method"]))
    row = ReportRow(label, meta.get("backbone", doc["backbone"]), values["auc"], values["sensitivity"],
                    values["specificity"], run=doc["run"])
    return row, curve


def cmd_compare(cfg: ExperimentConfig, from_scores: str | Path | None = None) -> MetricsReport:
    """Build the comparison report; scores come from checkpoints or, if given, a stored scores directory."""
    layout = Layout(cfg.output_dir)
    if from_scores is None:
        score_runs(cfg)
        score_dir = layout.root / "scores"
    else:
        # either an experiment directory or the scores directory itself
        score_dir = Path(from_scores)
        if (score_dir / "scores").is_dir():
            score_dir = score_dir / "scores"
    rows, curves = [], {}
    for run in cfg.runs:
        path = score_dir / f"{run.name}.json"
        if not path.is_file():
            raise MissingInputError(f"no scores for run {run.name}: {path}")
        doc = json.loads(path.read_text())
        if doc.get("version") != SCORES_VERSION:
            raise DataError(f"{path}: unsupported scores version {doc.get('version')!r}")
        row, curve = _report_row(doc)
        rows.append(row)
        if curve is not None:
            curves[f"{row.method} ({row.auc:.3f})"] = curve
    report = build_report(rows, cfg.baseline)
    layout.root.mkdir(parents=True, exist_ok=True)
    layout.report_csv.write_text(report.to_csv())
    layout.report_txt.write_text(report.to_text())
    layout.roc.write_text(roc_svg(curves))
    _event(logging.INFO, "report written", report=str(layout.report_csv), roc=str(layout.roc))
    return report


def cmd_gradcheck(seeds: int = 20) -> bool:
    from .gradsuite import run_suite

    cases = run_suite(seeds)
    for c in cases:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.family:8s} {c.spatial_rank}-D seed {c.seed:2d}: "
              f"{c.n_params} parameters, {c.n_mismatched} mismatched, max |error| {c.max_abs_error:.2e}")
    failed = sum(not c.passed for c in cases)
    print(f"{len(cases) - failed}/{len(cases)} cases passed")
    return failed == 0


# ---------------------------------------------------------------------------
# argument handling

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="retifuse", description="Multimodal retinal fusion experiments.")
    parser.add_argument("--log-level", default="info", choices=["debug", "info", "warning", "error"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the configured synthetic dataset")
    p.add_argument("config")
    p.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    p.add_argument("--output-dir", help="override the config's output directory")

    p = sub.add_parser("run", help="train every configured run")
    p.add_argument("config")
    p.add_argument("--jobs", type=int, default=1, help="train up to N runs in parallel processes")
    p.add_argument("--output-dir", help="override the config's output directory")

    p = sub.add_parser("compare", help="evaluate runs and write the comparison report")
    p.add_argument("config")
    p.add_argument("--from-scores", help="directory of stored scores/<run>.json files to tabulate instead")
    p.add_argument("--output-dir", help="override the config's output directory")

    p = sub.add_parser("gradcheck", help="finite-difference check of backbone gradients")
    p.add_argument("--seeds", type=int, default=20)
    return parser


def _setup_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    log.handlers[:] = [handler]
    log.setLevel(level.upper())
    log.propagate = False


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.log_level)
    try:
        if args.command == "gradcheck":
            return EXIT_OK if cmd_gradcheck(args.seeds) else EXIT_RUN_FAILED
        cfg = load_config(args.config)
        if args.output_dir:
            cfg = replace(cfg, output_dir=Path(args.output_dir))
        if args.command == "synth":
            cmd_synth(cfg, force=args.force)
        elif args.command == "run":
            if args.jobs < 1:
                raise ConfigError("--jobs must be >= 1")
            results = cmd_run(cfg, jobs=args.jobs)
            failed = [r["run"] for r in results if r["status"] != "ok"]
            if failed:
                _event(logging.ERROR, "runs failed", runs=failed)
                return EXIT_RUN_FAILED
        elif args.command == "compare":
            report = cmd_compare(cfg, args.from_scores)
            sys.stdout.write(report.to_text())
    except (ConfigError, OutputExistsError) as exc:
        _event(logging.ERROR, str(exc), kind=type(exc).__name__)
        return EXIT_CONFIG
    except (MissingInputError, DataError) as exc:
        _event(logging.ERROR, str(exc), kind=type(exc).__name__)
        return EXIT_MISSING
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

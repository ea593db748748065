"""Run single experiments and sweeps, and persist their artifacts.

Per run, under the output directory:

* ``<run_id>.csv``          step metrics, first line ``# run_id: <run_id>``
* ``<run_id>.summary.json`` config, accuracy, verdict and runtime
* ``<run_id>.FAILED``       only for poisoned runs; names the failing step
* ``<run_id>.<metric>.svg`` only with ``emit_plots``
"""

from __future__ import annotations

import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

from .adapt import AdaptState, RunResult, run_stream
from .config import ExperimentConfig, SweepSpec, axis_label, canonical_json, config_to_dict, run_id
from .diagnostics import Trajectory, Verdict, collapse_verdict, csv_run_id, write_csv
from .models import AdaptiveModel, LabeledSet, accuracy, source_train
from .plotting import render_panels
from .streams import Stream, generate_source, make_stream, sample_task

T = TypeVar("T")
R = TypeVar("R")


class ArtifactMismatchError(RuntimeError):
    """An artifact on disk was produced by a different config."""


# ---------------------------------------------------------------- source models

_SOURCE_CACHE: Dict[str, Tuple[AdaptiveModel, LabeledSet]] = {}
_SOURCE_LOCK = threading.Lock()


def _source_key(cfg: ExperimentConfig) -> str:
    d = config_to_dict(cfg)
    return json.dumps({k: d[k] for k in ("seed", "task", "train", "pool_size")}, sort_keys=True)


def source_setup(cfg: ExperimentConfig) -> Tuple[AdaptiveModel, LabeledSet]:
    """Trained source model and the clean test pool for ``cfg``.

    Results are cached per process; callers get a fresh clone of the model.
    The pool is drawn with seed ``task.seed + 1000`` so it never overlaps the
    training draw.
    """
    key = _source_key(cfg)
    with _SOURCE_LOCK:
        if key not in _SOURCE_CACHE:
            task = cfg.task
            model = AdaptiveModel(task.input_dim, task.n_classes, seed=cfg.seed)
            source_train(model, generate_source(task), cfg.train.epochs, cfg.train.lr, seed=cfg.seed)
            pool = sample_task(task, cfg.pool_size, seed=task.seed + 1000)
            _SOURCE_CACHE[key] = (model, pool)
        model, pool = _SOURCE_CACHE[key]
        return model.clone(), pool


def build_stream(cfg: ExperimentConfig, source: AdaptiveModel, pool: LabeledSet) -> Stream:
    ref = source if cfg.stream.blind_spot else None
    stream = make_stream(cfg.stream, pool, ref_model=ref)
    return stream.truncated(cfg.steps) if cfg.steps is not None else stream


def verdict_window(n_steps: int) -> int:
    """Trailing window used for verdicts: the last tenth of the run."""
    return max(1, n_steps // 10)


# ---------------------------------------------------------------- single runs


@dataclass
class RunOutcome:
    config: ExperimentConfig
    run_id: str
    result: RunResult
    trajectory: Trajectory
    verdict: Verdict
    noadapt_accuracy: float
    runtime_s: float
    model: AdaptiveModel = field(repr=False)
    stream: Stream = field(repr=False)

    @property
    def poisoned(self) -> bool:
        return self.result.poisoned

    def summary(self, include_runtime: bool = True) -> Dict[str, Any]:
        out = {
            "run_id": self.run_id,
            "method": self.config.method.name,
            "steps": len(self.trajectory),
            "online_accuracy": self.result.online_accuracy,
            "noadapt_accuracy": self.noadapt_accuracy,
            "verdict": self.verdict.value,
            "failed_step": self.result.failed_step,
            "config": config_to_dict(self.config),
        }
        if include_runtime:
            out["runtime_s"] = self.runtime_s
        return out


def execute(cfg: ExperimentConfig) -> RunOutcome:
    """Run one experiment in memory; nothing is written."""
    cfg.validate()
    start = time.perf_counter()
    rid = run_id(cfg)
    source, pool = source_setup(cfg)
    stream = build_stream(cfg, source, pool)
    noadapt = accuracy(source, stream.as_labeled_set())
    model = source.clone()
    model.replace_predictor(cfg.method.predictor)
    state = AdaptState(model, seed=cfg.seed)
    result = run_stream(state, cfg.method, stream, cfg.steps)
    traj = Trajectory(result.records, cfg.task.n_classes, cfg.method.name, cfg.seed, rid)
    verdict = collapse_verdict(traj, verdict_window(len(traj))) if len(traj) else Verdict.INCONCLUSIVE
    return RunOutcome(cfg, rid, result, traj, verdict, noadapt, time.perf_counter() - start, model, stream)


def write_outputs(outcome: RunOutcome, out_dir) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rid = outcome.run_id
    csv_path = out_dir / f"{rid}.csv"
    write_csv(outcome.trajectory.records, csv_path, run_id=rid)
    summary_path = out_dir / f"{rid}.summary.json"
    summary_path.write_text(json.dumps(outcome.summary(), indent=2, sort_keys=True, allow_nan=True) + "\n")
    paths = [csv_path, summary_path]
    marker = out_dir / f"{rid}.FAILED"
    if outcome.poisoned:
        marker.write_text(f"run_id: {rid}\nnon-finite loss at step {outcome.result.failed_step}\n")
        paths.append(marker)
    elif marker.exists():
        marker.unlink()
    if outcome.config.emit_plots and len(outcome.trajectory):
        label = outcome.config.method.name
        paths.extend(render_panels({label: outcome.trajectory}, out_dir, rid, rid))
    return paths


def run(cfg: ExperimentConfig, out_dir=None) -> RunOutcome:
    """Execute ``cfg`` and write its artifacts to ``out_dir`` (default ``cfg.output_dir``)."""
    outcome = execute(cfg)
    write_outputs(outcome, out_dir if out_dir is not None else cfg.output_dir)
    return outcome


def verify_artifacts(cfg: ExperimentConfig, out_dir) -> Dict[str, Any]:
    """Load the summary for ``cfg`` from ``out_dir``, refusing files from another config."""
    rid = run_id(cfg)
    out_dir = Path(out_dir)
    csv_path = out_dir / f"{rid}.csv"
    summary_path = out_dir / f"{rid}.summary.json"
    for path in (csv_path, summary_path):
        if not path.exists():
            raise ArtifactMismatchError(f"missing artifact {path}")
    if csv_run_id(csv_path) != rid:
        raise ArtifactMismatchError(f"{csv_path}: run_id {csv_run_id(csv_path)!r} != {rid!r}")
    summary = json.loads(summary_path.read_text())
    if summary.get("run_id") != rid:
        raise ArtifactMismatchError(f"{summary_path}: run_id {summary.get('run_id')!r} != {rid!r}")
    if json.dumps({k: v for k, v in summary["config"].items() if k not in ("output_dir", "emit_plots")},
                  sort_keys=True, separators=(",", ":")) != canonical_json(cfg):
        raise ArtifactMismatchError(f"{summary_path}: embedded config does not match")
    return summary


# ---------------------------------------------------------------- parallel execution


def parallel_map(fn: Callable[[T], R], items: Sequence[T], jobs: int = 1) -> List[R]:
    """``[fn(x) for x in items]`` on up to ``jobs`` threads; order is preserved."""
    if jobs < 1:
        raise ValueError("jobs must be >= 1")
    if jobs == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def execute_many(configs: Sequence[ExperimentConfig], jobs: int = 1) -> List[RunOutcome]:
    return parallel_map(execute, configs, jobs)


# ---------------------------------------------------------------- sweeps


@dataclass
class SweepRow:
    point: Dict[str, Any]
    run_id: str
    outcome: Optional[RunOutcome] = None
    error: str = ""


@dataclass
class SweepReport:
    axes: List[str]
    rows: List[SweepRow]

    COLUMNS = ("run_id", "online_accuracy", "noadapt_accuracy", "verdict", "failed_step", "error")

    def to_csv(self) -> str:
        lines = [",".join(list(self.axes) + list(self.COLUMNS))]
        for row in self.rows:
            o = row.outcome
            vals = [axis_label(row.point[a]) for a in self.axes]
            vals.append(row.run_id)
            if o is None:
                vals += ["", "", "", "", row.error.replace(",", ";").replace("\n", " ")]
            else:
                failed = "" if o.result.failed_step is None else str(o.result.failed_step)
                vals += [repr(o.result.online_accuracy), repr(o.noadapt_accuracy), o.verdict.value, failed, ""]
            lines.append(",".join(f'"{v}"' if "," in v else v for v in vals))
        return "\n".join(lines) + "\n"


def sweep(spec: SweepSpec, parallelism: int = 1, out_dir=None) -> SweepReport:
    """Run every point of ``spec``; a failing run is recorded and the sweep continues."""
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    points = spec.points()
    configs = spec.configs()

    def one(cfg: ExperimentConfig) -> SweepRow:
        try:
            outcome = execute(cfg)
        except Exception as exc:  # recorded per row, never aborts the sweep
            return SweepRow({}, run_id(cfg), None, f"{type(exc).__name__}: {exc}")
        if out_dir is not None:
            write_outputs(outcome, out_dir)
        return SweepRow({}, outcome.run_id, outcome)

    rows = parallel_map(one, configs, parallelism)
    for row, point in zip(rows, points):
        row.point = point
    report = SweepReport([k for k, _ in spec.axes], rows)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "sweep.csv").write_text(report.to_csv())
    return report

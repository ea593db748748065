"""Per-step collapse metrics and trajectory-level verdicts."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .autodiff import ContractError

CSV_FIELDS = (
    "step",
    "batch_acc",
    "entropy_online",
    "entropy_target",
    "logit_l2",
    "center_dominance",
    "pred_frob_drift",
    "div_loss",
    "dominant_class_frac",
    "grad_norm",
)


@dataclass
class StepRecord:
    step: int
    batch_acc: Optional[float]
    entropy_online: float
    entropy_target: float
    logit_l2: float
    center_dominance: float
    pred_frob_drift: float
    div_loss: float
    dominant_class_frac: float
    grad_norm: float
    # mean total-variation distance between online and target predictions; not in the CSV
    branch_tv: float = 0.0

    def csv_row(self) -> List[str]:
        out = []
        for name in CSV_FIELDS:
            v = getattr(self, name)
            out.append("" if v is None else repr(v) if isinstance(v, float) else str(v))
        return out


class Verdict(str, Enum):
    COLLAPSED = "collapsed"
    STABLE = "stable"
    INCONCLUSIVE = "inconclusive"


@dataclass
class Trajectory:
    records: List[StepRecord]
    n_classes: int
    method: str = ""
    seed: int = 0
    config_hash: str = ""
    meta: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        steps = [r.step for r in self.records]
        if steps and (steps[0] != 0 or any(b <= a for a, b in zip(steps, steps[1:]))):
            raise ContractError("trajectory steps must start at 0 and strictly increase")

    def __len__(self) -> int:
        return len(self.records)

    def series(self, name: str) -> np.ndarray:
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name) for r in self.records], dtype=float)


# ---------------------------------------------------------------- metrics


def center_dominance(u: np.ndarray) -> float:
    """``||mean_i u_i|| / mean_i ||u_i||``; 0 when every row is zero."""
    u = np.asarray(getattr(u, "data", u), dtype=np.float64)
    if u.ndim != 2 or u.shape[0] < 1:
        raise ContractError(f"center_dominance expects [b, C] with b >= 1, got {u.shape}")
    peak = np.abs(u).max()
    if peak == 0 or not np.isfinite(peak):
        return 0.0 if peak == 0 else float("nan")
    u = u / peak  # the ratio is scale-free; normalizing keeps tiny logits out of the subnormal range
    return float(np.linalg.norm(u.mean(axis=0)) / np.linalg.norm(u, axis=1).mean())


def mean_row_l2(u: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(u), axis=1).mean())


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    """Batch-mean of ``0.5 * sum_c |p_c - q_c|``."""
    return float(0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=1).mean())


def moving_average(values: Sequence[float], window: int = 10) -> np.ndarray:
    """Trailing mean over up to ``window`` most recent values."""
    v = np.asarray(values, dtype=float)
    if window < 1:
        raise ValueError("window must be >= 1")
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


# ---------------------------------------------------------------- verdicts


def collapse_verdict(
    traj: Trajectory,
    window: int,
    ent_frac: float = 0.05,
    dom_frac: float = 0.9,
) -> Verdict:
    """Classify the trailing ``window`` steps.

    Collapsed: mean target entropy below ``ent_frac * ln C`` and mean dominant
    class fraction above ``dom_frac``. Stable: entropy at least twice its bound
    and dominance at most half of its bound. Anything else is inconclusive.
    """
    if window < 1 or window > len(traj):
        raise ContractError(f"window {window} outside [1, {len(traj)}]")
    tail = traj.records[-window:]
    ent = float(np.mean([r.entropy_target for r in tail]))
    dom = float(np.mean([r.dominant_class_frac for r in tail]))
    ent_bound = ent_frac * math.log(traj.n_classes)
    if ent < ent_bound and dom > dom_frac:
        return Verdict.COLLAPSED
    if ent >= 2.0 * ent_bound and dom <= dom_frac / 2.0:
        return Verdict.STABLE
    return Verdict.INCONCLUSIVE


def drift_vs_ratio(results: Mapping[float, Trajectory]) -> List[Tuple[float, float]]:
    """Final predictor drift per imbalance ratio, sorted by ratio."""
    methods = {t.method for t in results.values()}
    if len(methods) > 1:
        raise ContractError(f"trajectories mix methods: {sorted(methods)}")
    lengths = {len(t) for t in results.values()}
    if len(lengths) > 1:
        raise ContractError("trajectories differ in length")
    return sorted((float(rho), t.records[-1].pred_frob_drift) for rho, t in results.items())


def trailing_quartile(traj: Trajectory) -> List[StepRecord]:
    n = len(traj)
    return traj.records[n - max(1, n // 4):]


def summarize(traj: Trajectory) -> Dict[str, float]:
    acc = traj.series("batch_acc")
    return {
        "steps": len(traj),
        "mean_batch_acc": float(np.nanmean(acc)) if np.isfinite(acc).any() else float("nan"),
        "final_entropy_target": traj.records[-1].entropy_target if traj.records else float("nan"),
        "final_logit_l2": traj.records[-1].logit_l2 if traj.records else float("nan"),
        "final_pred_frob_drift": traj.records[-1].pred_frob_drift if traj.records else float("nan"),
    }


# ---------------------------------------------------------------- persistence


RUN_ID_PREFIX = "# run_id: "


def csv_text(records: Sequence[StepRecord], run_id: Optional[str] = None) -> str:
    """CSV body with one row per step; a ``run_id`` goes on a leading ``#`` comment line."""
    buf = io.StringIO()
    if run_id is not None:
        buf.write(f"{RUN_ID_PREFIX}{run_id}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in records:
        w.writerow(r.csv_row())
    return buf.getvalue()


def write_csv(records: Sequence[StepRecord], path, run_id: Optional[str] = None) -> None:
    Path(path).write_text(csv_text(records, run_id))


def csv_run_id(path) -> Optional[str]:
    with open(path) as fh:
        first = fh.readline().rstrip("\n")
    return first[len(RUN_ID_PREFIX):] if first.startswith(RUN_ID_PREFIX) else None


def read_csv(path) -> List[StepRecord]:
    out = []
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    if tuple(reader.fieldnames or ()) != CSV_FIELDS:
        raise ContractError(f"{path}: unexpected header {reader.fieldnames}")
    for row in reader:
        kw = {}
        for k, v in row.items():
            if k == "step":
                kw[k] = int(v)
            else:
                kw[k] = None if v == "" else float(v)
        out.append(StepRecord(**kw))
    return out

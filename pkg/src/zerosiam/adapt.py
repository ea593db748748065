"""Online test-time adaptation: NoAdapt, Tent, entropy-filtered Tent and ZeroSiam."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, NumericError, Tensor
from .diagnostics import StepRecord, center_dominance, mean_row_l2, total_variation
from .models import SENTINEL_LABEL, AdaptiveModel, PredictorInit, predictor_frobenius_drift
from .objectives import DivergenceKind, ObjectiveKind, divergence, entropy, objective, objective_per_sample
from .streams import Stream

METHODS = ("noadapt", "tent", "filtered_tent", "zerosiam")


class PoisonedStateError(RuntimeError):
    """A non-finite loss was produced; the adaptation state is frozen."""

    def __init__(self, step: int, msg: str = "non-finite loss"):
        super().__init__(f"step {step}: {msg}")
        self.step = step


@dataclass(frozen=True)
class MethodSpec:
    """Which adaptation rule to run and its hyper-parameters.

    ``objective`` applies to every adapting method, so ``tent`` with
    ``objective="neg_squared_prob"`` is the single-branch baseline for that loss.
    Learning rates are divided by ``lr_divisor`` before use.
    """

    name: str = "zerosiam"
    lr_f: float = 0.01
    lr_h: float = 0.05
    alpha: float = 1.0
    objective: ObjectiveKind = ObjectiveKind.ENTROPY
    divergence: DivergenceKind = DivergenceKind.SYM_KL
    predictor: PredictorInit = PredictorInit()
    e0_fraction: float = 0.4
    lr_divisor: float = 1.0
    momentum: float = 0.9
    logit_branch: str = "target"

    def __post_init__(self):
        object.__setattr__(self, "objective", ObjectiveKind(self.objective))
        object.__setattr__(self, "divergence", DivergenceKind(self.divergence))
        if self.name not in METHODS:
            raise ContractError(f"unknown method {self.name!r}; expected one of {METHODS}")
        if self.alpha < 0:
            raise ContractError("alpha must be non-negative")
        if self.lr_f < 0 or self.lr_h < 0 or self.lr_divisor <= 0:
            raise ContractError("learning rates must be >= 0 and lr_divisor > 0")
        if self.logit_branch not in ("target", "online"):
            raise ContractError("logit_branch must be 'target' or 'online'")

    @property
    def adapts(self) -> bool:
        return self.name != "noadapt"

    def e0(self, n_classes: int) -> float:
        return self.e0_fraction * math.log(n_classes)


def NoAdapt() -> MethodSpec:
    return MethodSpec(name="noadapt")


def Tent(lr_f: float, **kw) -> MethodSpec:
    return MethodSpec(name="tent", lr_f=lr_f, **kw)


def FilteredTent(lr_f: float, e0_fraction: float = 0.4, **kw) -> MethodSpec:
    return MethodSpec(name="filtered_tent", lr_f=lr_f, e0_fraction=e0_fraction, **kw)


def ZeroSiam(lr_f: float, lr_h: float, alpha: float = 1.0, **kw) -> MethodSpec:
    return MethodSpec(name="zerosiam", lr_f=lr_f, lr_h=lr_h, alpha=alpha, **kw)


def param_groups(model: AdaptiveModel, method: MethodSpec) -> Dict[str, float]:
    """Adaptable parameter names mapped to their effective learning rate."""
    if not method.adapts:
        return {}
    lr_f = method.lr_f / method.lr_divisor
    groups = {n: lr_f for n in model.norm_param_names()}
    if method.name == "zerosiam" and model.predictor.init.learnable:
        lr_h = method.lr_h / method.lr_divisor
        groups.update({n: lr_h for n in model.predictor_param_names()})
    return groups


@dataclass
class AdaptState:
    model: AdaptiveModel
    seed: int = 0
    step_count: int = 0
    momentum_buffers: Dict[str, np.ndarray] = field(default_factory=dict)
    pred_counts: Optional[np.ndarray] = None
    poisoned: bool = False

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)
        if self.pred_counts is None:
            self.pred_counts = np.zeros(self.model.n_classes, dtype=np.int64)


def _sgd_step(state: AdaptState, groups: Dict[str, float], momentum: float) -> float:
    params = state.model.named_parameters()
    sq = 0.0
    for name, lr in groups.items():
        p = params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        sq += float((g * g).sum())
        buf = state.momentum_buffers.get(name)
        buf = g.copy() if buf is None else momentum * buf + g
        state.momentum_buffers[name] = buf
        p.data = p.data - lr * buf
        p.grad = None
    return math.sqrt(sq)


def _drift(model: AdaptiveModel) -> float:
    return predictor_frobenius_drift(model) if model.predictor.is_linear else float("nan")


def adapt_step(state: AdaptState, method: MethodSpec, x: np.ndarray) -> Tuple[np.ndarray, StepRecord]:
    """Predict on one batch and take one optimizer step.

    Returned predictions come from the target branch, computed before the
    update. ``record.batch_acc`` is left empty; the stream driver fills it.
    """
    if state.poisoned:
        raise PoisonedStateError(state.step_count, "state is poisoned")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ContractError(f"batch must be [b, d] with b >= 1, got {x.shape}")
    model = state.model
    C = model.n_classes
    groups = param_groups(model, method)
    model.set_trainable(groups)
    xt = Tensor(x)
    step = state.step_count
    loss = None
    try:
        if method.name == "zerosiam":
            u_o, u_r, _ = model.forward_branches(xt)
            p_o, p_r = ad.softmax(u_o), ad.softmax(u_r)
        else:
            u_r = model.forward_target(xt)
            p_r = ad.softmax(u_r)
            u_o, p_o = u_r, p_r
    except NumericError as exc:
        state.poisoned = True
        raise PoisonedStateError(step, str(exc)) from exc

    p_r_sg = ad.stop_gradient(p_r)
    p_o_sg = ad.stop_gradient(p_o)
    div_value = 0.0
    if method.name == "zerosiam":
        div_value = float(divergence(method.divergence, p_o_sg, p_r_sg).data)
        loss = objective(method.objective, p_o)
        if method.alpha > 0:
            loss = ad.add(loss, ad.scale(divergence(method.divergence, p_o, p_r_sg), method.alpha))
    elif method.name == "tent":
        loss = objective(method.objective, p_r)
    elif method.name == "filtered_tent":
        ent_i = -(p_r.data * np.log(np.maximum(p_r.data, ad.LOG_EPS))).sum(axis=1)
        keep = (ent_i <= method.e0(C)).astype(np.float64)
        if keep.sum() > 0:
            per = objective_per_sample(method.objective, p_r)
            loss = ad.scale(ad.sum(ad.mul(per, Tensor(keep))), 1.0 / keep.sum())

    grad_norm = 0.0
    if loss is not None:
        if not np.isfinite(loss.data).all():
            state.poisoned = True
            model.set_trainable(())
            raise PoisonedStateError(step)
        ad.backward(loss)
        grad_norm = _sgd_step(state, groups, method.momentum)
    model.set_trainable(())

    preds = np.argmax(p_r.data, axis=1)
    state.pred_counts += np.bincount(preds, minlength=C)
    u_diag = u_o if method.logit_branch == "online" else u_r
    record = StepRecord(
        step=step,
        batch_acc=None,
        entropy_online=float(entropy(p_o_sg).data),
        entropy_target=float(entropy(p_r_sg).data),
        logit_l2=mean_row_l2(u_diag.data),
        center_dominance=center_dominance(u_diag.data),
        pred_frob_drift=_drift(model),
        div_loss=div_value,
        dominant_class_frac=float(state.pred_counts.max() / state.pred_counts.sum()),
        grad_norm=grad_norm,
        branch_tv=total_variation(p_o.data, p_r.data),
    )
    state.step_count += 1
    return preds, record


@dataclass
class RunResult:
    records: List[StepRecord]
    online_accuracy: float
    n_labeled: int
    failed_step: Optional[int] = None

    @property
    def poisoned(self) -> bool:
        return self.failed_step is not None


def run_stream(
    state: AdaptState, method: MethodSpec, stream: Stream, max_steps: Optional[int] = None
) -> RunResult:
    """Adapt over the stream in order; labels are only used to score predictions."""
    if len(stream) == 0:
        raise ContractError("empty stream")
    records: List[StepRecord] = []
    correct = 0
    labeled = 0
    failed = None
    for i, (xb, yb) in enumerate(stream):
        if max_steps is not None and i >= max_steps:
            break
        try:
            preds, rec = adapt_step(state, method, xb)
        except PoisonedStateError as exc:
            failed = exc.step
            break
        mask = yb != SENTINEL_LABEL
        if mask.any():
            hits = int((preds[mask] == yb[mask]).sum())
            rec.batch_acc = hits / int(mask.sum())
            correct += hits
            labeled += int(mask.sum())
        records.append(rec)
    acc = correct / labeled if labeled else float("nan")
    return RunResult(records, acc, labeled, failed)


def branch_entropy_changes(
    state: AdaptState, method: MethodSpec, stream: Stream, max_steps: Optional[int] = None
) -> Tuple[np.ndarray, np.ndarray, List[StepRecord]]:
    """Per-step ``|dH(p_o)|`` and ``|dH(p_r)|`` on the batch that drove each update.

    Post-update entropies come from an uncounted re-evaluation of the same batch.
    """
    d_o, d_r, records = [], [], []
    for i, (xb, _) in enumerate(stream):
        if max_steps is not None and i >= max_steps:
            break
        _, rec = adapt_step(state, method, xb)
        u_o, u_r, _ = state.model.forward_branches(Tensor(xb), count=False)
        h_o = float(entropy(ad.softmax(u_o)).data)
        h_r = float(entropy(ad.softmax(u_r)).data)
        d_o.append(abs(h_o - rec.entropy_online))
        d_r.append(abs(h_r - rec.entropy_target))
        records.append(rec)
    return np.array(d_o), np.array(d_r), records


def with_lr(method: MethodSpec, lr_f: Optional[float] = None, lr_h: Optional[float] = None) -> MethodSpec:
    kw = {}
    if lr_f is not None:
        kw["lr_f"] = lr_f
    if lr_h is not None:
        kw["lr_h"] = lr_h
    return replace(method, **kw)

"""Acceptance suite: exact-math oracles plus seeded synthetic benchmarks.

Every threshold and benchmark setting below is a fixed constant chosen from
pilot sweeps before the suite was frozen; nothing is tuned at run time.

Benchmarks share one source task (6 Gaussian classes in 8 dimensions, means
4 apart) and one corruption: a mean shift of length 3 along a fixed random
direction, a 0.6 feature rescale, then N(0, 0.5^2) noise.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .adapt import AdaptState, MethodSpec, NoAdapt, Tent, ZeroSiam, adapt_step, branch_entropy_changes, run_stream
from .autodiff import Tensor
from .config import ExperimentConfig, SweepSpec, TrainSpec
from .diagnostics import Trajectory, Verdict, csv_text, moving_average, trailing_quartile
from .models import accuracy
from .objectives import DivergenceKind, ObjectiveKind, divergence, entropy
from .plotting import line_panel, render_panels
from .runner import RunOutcome, build_stream, execute, execute_many, parallel_map, source_setup, sweep
from .streams import AdditiveGaussian, Compose, FeatureScale, MeanShift, PureNoise, SourceTask, StreamSpec, shifted_pool

# ---------------------------------------------------------------- calibrated constants

N_CLASSES = 6
INPUT_DIM = 8
BENCH_STEPS = 1500
BATCH = 64
STREAM_SEED = 3
BENCH_LR = 0.03               # lr_f = lr_h on the collapse/stable benchmarks (k = 1)
BLIND_LR = (0.005, 0.025)     # (lr_f, lr_h), k = 5
BLIND_STEPS = 300
NOISE_LR = 0.015              # lr_f = lr_h
NOISE_STEPS = 600
NOISE_BATCHES = 50
DOMINANCE_K = 10.0

COLLAPSE_ENT_FRAC = 0.05      # verdict thresholds
COLLAPSE_DOM_FRAC = 0.9
ZS_ENTROPY_FLOOR = 0.01       # fractions of ln C
TENT_ENTROPY_FLOOR = 0.001
TV_MAX = 0.05
ACC_MARGIN = 0.02
DRIFT_RATIO_MIN = 1.5
SMOOTH_WINDOW = 10
RUNTIME_MAX_S = 60.0


def shift_direction() -> np.ndarray:
    d = np.random.default_rng(7).standard_normal(INPUT_DIM)
    return d / np.linalg.norm(d)


def bench_shift() -> Compose:
    return Compose((MeanShift(tuple(float(v) for v in 3.0 * shift_direction())), FeatureScale(0.6), AdditiveGaussian(0.5)))


def _base(stream: StreamSpec, method: MethodSpec) -> ExperimentConfig:
    task = SourceTask(n_classes=N_CLASSES, input_dim=INPUT_DIM, noise_sigma=1.0, separation=4.0, n_train=1200, seed=0)
    return ExperimentConfig(seed=0, task=task, train=TrainSpec(30, 0.05), stream=stream, method=method, pool_size=3000)


PRESETS = ("collapse-bench", "stable-bench", "drift-bench", "blind-spot-bench", "noise-bench")


def preset(name: str, method: Optional[MethodSpec] = None) -> ExperimentConfig:
    """Benchmark config by name; ``method`` overrides the preset's ZeroSiam default."""
    n = BATCH * BENCH_STEPS
    if name == "collapse-bench":
        stream = StreamSpec(bench_shift(), "class_ordered", batch_size=BATCH, n_samples=n, seed=STREAM_SEED)
        default = ZeroSiam(BENCH_LR, BENCH_LR)
    elif name == "stable-bench":
        stream = StreamSpec(bench_shift(), "shuffled", batch_size=BATCH, n_samples=n, seed=STREAM_SEED)
        default = ZeroSiam(BENCH_LR, BENCH_LR)
    elif name == "drift-bench":
        stream = StreamSpec(bench_shift(), "imbalanced", rho=math.inf, batch_size=BATCH, n_samples=n, seed=STREAM_SEED)
        default = ZeroSiam(BENCH_LR, BENCH_LR)
    elif name == "blind-spot-bench":
        stream = StreamSpec(bench_shift(), "shuffled", batch_size=BATCH, n_samples=BATCH * BLIND_STEPS,
                            blind_spot=True, seed=STREAM_SEED)
        default = ZeroSiam(*BLIND_LR)
    elif name == "noise-bench":
        shift = Compose((PureNoise(NOISE_BATCHES),) + bench_shift().parts)
        stream = StreamSpec(shift, "shuffled", batch_size=BATCH, n_samples=BATCH * NOISE_STEPS, seed=STREAM_SEED)
        default = ZeroSiam(NOISE_LR, NOISE_LR)
    else:
        raise KeyError(f"unknown preset {name!r}; expected one of {PRESETS}")
    return _base(stream, method if method is not None else default)


def with_method(cfg: ExperimentConfig, method: MethodSpec) -> ExperimentConfig:
    return replace(cfg, method=method)


# ---------------------------------------------------------------- results


@dataclass
class CriterionResult:
    number: int
    title: str
    passed: bool
    detail: str
    artifacts: Dict[str, bytes] = field(default_factory=dict)
    figures: Dict[str, Dict[str, Trajectory]] = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        return f"criterion {self.number:2d} [{'PASS' if self.passed else 'FAIL'}] {self.title}: {self.detail}"

    def digest(self) -> Dict[str, str]:
        return {k: hashlib.sha256(v).hexdigest() for k, v in sorted(self.artifacts.items())}


def _outcome_bytes(o: RunOutcome) -> bytes:
    summary = json.dumps(o.summary(include_runtime=False), sort_keys=True, allow_nan=True)
    return csv_text(o.trajectory.records, o.run_id).encode() + summary.encode()


def _f(x: float) -> str:
    return f"{x:.4f}"


# ---------------------------------------------------------------- 1-3: math oracles


def _fd_gradient(fn, inputs: List[np.ndarray], weights: np.ndarray, h: float) -> List[np.ndarray]:
    def value(arrs):
        return float((fn([Tensor(a) for a in arrs]).data * weights).sum())

    grads = []
    for i, x in enumerate(inputs):
        g = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            plus = [a.copy() for a in inputs]
            minus = [a.copy() for a in inputs]
            plus[i][idx] += h
            minus[i][idx] -= h
            g[idx] = (value(plus) - value(minus)) / (2 * h)
        grads.append(g)
    return grads


def _away_from_zero(rng, shape):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.5, size=shape)


def gradient_oracle_ops() -> Dict[str, Tuple[Callable, Callable]]:
    """Op name -> (function of input tensors, input sampler)."""
    def two(shape_a, shape_b, sampler=None):
        s = sampler or (lambda r, sh: r.standard_normal(sh))
        return lambda r: [s(r, shape_a), s(r, shape_b)]

    def one(shape, sampler=None):
        s = sampler or (lambda r, sh: r.standard_normal(sh))
        return lambda r: [s(r, shape)]

    pos = lambda r, sh: r.uniform(0.3, 2.0, size=sh)  # noqa: E731
    small = lambda r, sh: r.uniform(-1.0, 1.0, size=sh)  # noqa: E731
    return {
        "add": (lambda t: ad.add(t[0], t[1]), two((3, 4), (3, 4))),
        "add_rowwise": (lambda t: ad.add(t[0], t[1]), two((3, 4), (4,))),
        "sub": (lambda t: ad.sub(t[0], t[1]), two((3, 4), (3, 4))),
        "sub_rowwise": (lambda t: ad.sub(t[0], t[1]), two((3, 4), (4,))),
        "mul": (lambda t: ad.mul(t[0], t[1]), two((3, 4), (3, 4))),
        "mul_rowwise": (lambda t: ad.mul(t[0], t[1]), two((3, 4), (4,))),
        "neg": (lambda t: -t[0], one((3, 4))),
        "scale": (lambda t: ad.scale(t[0], -1.7), one((3, 4))),
        "log": (lambda t: ad.log(t[0]), one((3, 4), pos)),
        "exp": (lambda t: ad.exp(t[0]), one((3, 4), small)),
        "relu": (lambda t: ad.relu(t[0]), one((3, 4), _away_from_zero)),
        "sum": (lambda t: ad.sum(t[0]), one((3, 4))),
        "sum_rows": (lambda t: ad.sum(t[0], axis=1), one((3, 4))),
        "row_sum": (lambda t: ad.row_sum(t[0]), one((3, 4))),
        "mean": (lambda t: ad.mean(t[0]), one((3, 4))),
        "l2_norm": (lambda t: ad.l2_norm(t[0]), one((3, 4), _away_from_zero)),
        "l2_norm_rows": (lambda t: ad.l2_norm(t[0], axis=1), one((3, 4), _away_from_zero)),
        "matmul": (lambda t: ad.matmul(t[0], t[1]), two((3, 4), (4, 5))),
        "softmax": (lambda t: ad.softmax(t[0]), one((3, 5))),
        "layer_norm": (lambda t: ad.layer_norm(t[0]), one((3, 6))),
    }


def gradient_oracle(n_points: int = 100, h: float = 1e-6, seed: int = 0) -> Dict[str, float]:
    """Worst relative error ``|g - g_fd| / max(|g|, |g_fd|, 1e-8)`` (vector norms) per op."""
    rng = np.random.default_rng(seed)
    worst = {}
    for name, (fn, sampler) in gradient_oracle_ops().items():
        err = 0.0
        for _ in range(n_points):
            inputs = sampler(rng)
            tensors = [Tensor(x.copy(), requires_grad=True) for x in inputs]
            out = fn(tensors)
            w = rng.standard_normal(out.shape)
            ad.backward(ad.sum(ad.mul(out, Tensor(w))) if out.data.ndim else ad.scale(out, float(w)))
            numeric = _fd_gradient(fn, inputs, w, h)
            for t, g_fd in zip(tensors, numeric):
                g = t.grad if t.grad is not None else np.zeros_like(t.data)
                denom = max(np.linalg.norm(g), np.linalg.norm(g_fd), 1e-8)
                err = max(err, float(np.linalg.norm(g - g_fd) / denom))
        worst[name] = err
    return worst


def criterion_1(ctx: "Suite") -> CriterionResult:
    t0 = time.perf_counter()
    worst = gradient_oracle()
    secs = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if not v < 1e-5}
    ok = not bad and secs < 10.0
    detail = f"{len(worst)} ops x 100 points, max rel err {max(worst.values()):.2e}, {secs:.1f}s"
    if bad:
        detail += f"; failing {sorted(bad)}"
    return CriterionResult(1, "gradient oracle", ok, detail)


def _random_sg_graph(rng: np.random.Generator):
    """Random program over a few leaves; some intermediate values pass through stop_gradient.

    Returns a replay function ``build(leaves, sg_mode)`` where ``sg_mode`` is
    ``"sg"`` (use stop_gradient) or a dict of constants keyed by step index.
    """
    n_leaves = int(rng.integers(2, 5))
    shape = (int(rng.integers(1, 4)), int(rng.integers(2, 5)))
    leaves = [rng.uniform(0.5, 1.5, size=shape) for _ in range(n_leaves)]
    unary = ["exp", "log", "scale", "softmax", "neg"]
    binary = ["add", "sub", "mul"]
    program = []
    n_vals = n_leaves
    for _ in range(int(rng.integers(4, 10))):
        if rng.random() < 0.5:
            program.append((str(rng.choice(unary)), (int(rng.integers(n_vals)),), bool(rng.random() < 0.4)))
        else:
            program.append((str(rng.choice(binary)), (int(rng.integers(n_vals)), int(rng.integers(n_vals))),
                            bool(rng.random() < 0.4)))
        n_vals += 1
    # guarantee at least one stop-gradient, and one leaf reachable only through it
    isolated = [Tensor(rng.uniform(0.5, 1.5, size=shape), requires_grad=True)]
    program.append(("mul", (n_vals - 1, n_vals), False))  # n_vals indexes the isolated leaf's sg'd image

    def build(leaf_tensors, constants=None):
        vals = list(leaf_tensors)
        captured = {}
        for step, (op, args, sg) in enumerate(program[:-1]):
            xs = [vals[a] for a in args]
            if op == "exp":
                v = ad.exp(ad.scale(xs[0], 0.1))
            elif op == "log":
                v = ad.log(ad.add(ad.mul(xs[0], xs[0]), Tensor(np.ones(shape))))
            elif op == "scale":
                v = ad.scale(xs[0], 0.7)
            elif op == "softmax":
                v = ad.softmax(xs[0]) if shape[1] >= 2 else xs[0]
            elif op == "neg":
                v = -xs[0]
            elif op == "add":
                v = ad.add(xs[0], xs[1])
            elif op == "sub":
                v = ad.sub(xs[0], xs[1])
            else:
                v = ad.mul(xs[0], ad.scale(xs[1], 0.5))
            if sg:
                captured[step] = v.data.copy()
                v = Tensor(constants[step]) if constants is not None else ad.stop_gradient(v)
            vals.append(v)
        iso = isolated[0]
        iso_image = ad.exp(ad.scale(iso, 0.3))
        captured["iso"] = iso_image.data.copy()
        iso_sg = Tensor(constants["iso"]) if constants is not None else ad.stop_gradient(iso_image)
        vals.append(iso_sg)
        a, b = program[-1][1]
        loss = ad.sum(ad.mul(vals[a], vals[b]))
        return loss, captured

    return leaves, isolated[0], build


def stop_gradient_soundness(n_graphs: int = 50, seed: int = 1) -> Tuple[int, List[str]]:
    """Check random graphs; returns (number checked, list of failures)."""
    rng = np.random.default_rng(seed)
    failures = []
    for gi in range(n_graphs):
        leaves, iso, build = _random_sg_graph(rng)
        ts = [Tensor(x.copy(), requires_grad=True) for x in leaves]
        iso.grad = None
        visited = []
        loss, captured = build(ts)
        ad.backward(loss, on_visit=lambda node: visited.append(node.op))
        # the same program with every stop_gradient output replaced by a plain constant
        ts_ref = [Tensor(x.copy(), requires_grad=True) for x in leaves]
        iso_grad = iso.grad
        loss_ref, _ = build(ts_ref, constants=captured)
        ad.backward(loss_ref)
        if iso_grad is not None and np.any(iso_grad != 0):
            failures.append(f"graph {gi}: gradient leaked through stop_gradient to an isolated leaf")
        for t, r in zip(ts, ts_ref):
            g = np.zeros_like(t.data) if t.grad is None else t.grad
            gr = np.zeros_like(r.data) if r.grad is None else r.grad
            if not np.array_equal(g, gr):
                failures.append(f"graph {gi}: gradient differs from constant-substituted graph")
                break
    return n_graphs, failures


def criterion_2(ctx: "Suite") -> CriterionResult:
    n, failures = stop_gradient_soundness()
    return CriterionResult(2, "stop-gradient soundness", not failures,
                           f"{n} random graphs, {len(failures)} failures" + (f": {failures[0]}" if failures else ""))


def _oracle_entropy(p: Sequence[float]) -> float:
    return -math.fsum(pi * math.log(max(pi, ad.LOG_EPS)) for pi in p)


def _oracle_kl(p, q) -> float:
    return math.fsum(pi * (math.log(max(pi, ad.LOG_EPS)) - math.log(max(qi, ad.LOG_EPS))) for pi, qi in zip(p, q))


def _oracle_divergence(kind: DivergenceKind, p, q) -> float:
    if kind is DivergenceKind.KL:
        return _oracle_kl(p, q)
    if kind is DivergenceKind.REVERSE_KL:
        return _oracle_kl(q, p)
    if kind is DivergenceKind.SYM_KL:
        return _oracle_kl(p, q) + _oracle_kl(q, p)
    if kind is DivergenceKind.JS:
        m = [(a + b) / 2 for a, b in zip(p, q)]
        return 0.5 * (_oracle_kl(p, m) + _oracle_kl(q, m))
    return math.fsum((a - b) ** 2 for a, b in zip(p, q))


def _oracle_softmax(u: Sequence[float]) -> List[float]:
    top = max(u)
    e = [math.exp(v - top) for v in u]
    s = math.fsum(e)
    return [v / s for v in e]


def closed_form_oracle(n_pairs: int = 1000, seed: int = 2) -> Dict[str, float]:
    """Max absolute deviation from scalar reference implementations."""
    rng = np.random.default_rng(seed)
    worst = {"entropy": 0.0, "softmax": 0.0, **{k.value: 0.0 for k in DivergenceKind}}
    for _ in range(n_pairs):
        C = int(rng.integers(2, 11))
        u = rng.normal(0.0, 3.0, size=C)
        p = _oracle_softmax(list(u))
        q = list(rng.dirichlet(np.ones(C)) * 0.98 + 0.02 / C)
        sm = ad.softmax(Tensor(u[None, :])).data[0]
        worst["softmax"] = max(worst["softmax"], float(np.abs(sm - np.array(p)).max()))
        pt, qt = Tensor(np.array([p])), Tensor(np.array([q]))
        worst["entropy"] = max(worst["entropy"], abs(float(entropy(pt).data) - _oracle_entropy(p)))
        for kind in DivergenceKind:
            got = float(divergence(kind, pt, qt).data)
            worst[kind.value] = max(worst[kind.value], abs(got - _oracle_divergence(kind, p, q)))
    return worst


def criterion_3(ctx: "Suite") -> CriterionResult:
    worst = closed_form_oracle()
    ok = all(v <= 1e-10 for v in worst.values())
    return CriterionResult(3, "closed-form oracles", ok,
                           f"1000 random pairs, max abs err {max(worst.values()):.1e} over {len(worst)} functions")


# ---------------------------------------------------------------- 4-5: exact equivalences


def tent_equivalence(steps: int = 200) -> Tuple[bool, int, bytes]:
    cfg = preset("stable-bench")
    source, pool = source_setup(cfg)
    stream = build_stream(cfg, source, pool).truncated(steps)
    tent, zs = Tent(BENCH_LR), ZeroSiam(BENCH_LR, 0.0, alpha=0.0)
    a, b = AdaptState(source.clone()), AdaptState(source.clone())
    trace = []
    first_diff = -1
    for i, (xb, _) in enumerate(stream):
        adapt_step(a, tent, xb)
        adapt_step(b, zs, xb)
        sa, sb = a.model.state_dict(), b.model.state_dict()
        for name in a.model.norm_param_names():
            trace.append(sa[name].tobytes())
            if first_diff < 0 and sa[name].tobytes() != sb[name].tobytes():
                first_diff = i
    return first_diff < 0, first_diff, b"".join(trace)


def criterion_4(ctx: "Suite") -> CriterionResult:
    ok, first, trace = tent_equivalence()
    detail = "norm parameters bitwise equal after each of 200 steps" if ok else f"first mismatch at step {first}"
    return CriterionResult(4, "Tent equivalence", ok, detail, {"trajectory": trace})


def criterion_5(ctx: "Suite") -> CriterionResult:
    cfg = preset("stable-bench")
    source, pool = source_setup(cfg)
    xb, _ = next(iter(build_stream(cfg, source, pool)))
    _, rec = adapt_step(AdaptState(source.clone()), cfg.method, xb)
    ok = rec.div_loss == 0.0 and rec.entropy_online == rec.entropy_target
    return CriterionResult(5, "warm-start exactness", ok,
                           f"div_loss={rec.div_loss!r}, H(p_o)-H(p_r)={rec.entropy_online - rec.entropy_target!r}",
                           {"record": repr(rec).encode()})


# ---------------------------------------------------------------- 6-8: collapse benchmark


def _collapse_runs(ctx: "Suite") -> Dict[str, RunOutcome]:
    cfg = preset("collapse-bench")
    methods = {"noadapt": NoAdapt(), "tent": Tent(BENCH_LR), "zerosiam": ZeroSiam(BENCH_LR, BENCH_LR)}
    return ctx.cached("collapse", lambda: dict(zip(methods, execute_many(
        [with_method(cfg, m) for m in methods.values()], ctx.jobs))))


def criterion_6(ctx: "Suite") -> CriterionResult:
    runs = _collapse_runs(ctx)
    na, tent, zs = runs["noadapt"], runs["tent"], runs["zerosiam"]
    base = na.result.online_accuracy
    slow = max(o.runtime_s for o in runs.values())
    ok = (
        tent.verdict is Verdict.COLLAPSED
        and tent.result.online_accuracy < base
        and zs.verdict is Verdict.STABLE
        and zs.result.online_accuracy >= base + ACC_MARGIN
        and slow < RUNTIME_MAX_S
    )
    detail = (f"NoAdapt {_f(base)}; Tent {_f(tent.result.online_accuracy)} {tent.verdict.value}; "
              f"ZeroSiam {_f(zs.result.online_accuracy)} {zs.verdict.value}; slowest run {slow:.1f}s")
    return CriterionResult(6, "collapse reproduction", ok, detail,
                           {k: _outcome_bytes(o) for k, o in runs.items()},
                           {"collapse-bench": {k: o.trajectory for k, o in runs.items() if k != "noadapt"}})


def criterion_7(ctx: "Suite") -> CriterionResult:
    runs = _collapse_runs(ctx)
    ln_c = math.log(N_CLASSES)
    zs_min = min(r.entropy_online for r in trailing_quartile(runs["zerosiam"].trajectory))
    tent_min = min(r.entropy_target for r in trailing_quartile(runs["tent"].trajectory))
    ok = zs_min > ZS_ENTROPY_FLOOR * ln_c and tent_min < TENT_ENTROPY_FLOOR * ln_c
    detail = (f"ZeroSiam min H(p_o) {zs_min:.4g} > {ZS_ENTROPY_FLOOR * ln_c:.4g}; "
              f"Tent min H {tent_min:.3g} < {TENT_ENTROPY_FLOOR * ln_c:.4g}")
    return CriterionResult(7, "entropy floor", ok, detail)


def criterion_8(ctx: "Suite") -> CriterionResult:
    o = execute(preset("stable-bench"))
    tv = float(np.mean([r.branch_tv for r in trailing_quartile(o.trajectory)]))
    return CriterionResult(8, "branch convergence", tv < TV_MAX,
                           f"final-quartile mean TV(p_o, p_r) {tv:.4f} < {TV_MAX}",
                           {"stable": _outcome_bytes(o), "tv": repr(tv).encode()})


# ---------------------------------------------------------------- 9-10: predictor dynamics


def online_dominance() -> Tuple[float, int, bytes]:
    """Fraction of pre-collapse steps with ``|dH(p_o)| > |dH(p_r)|`` at alpha = 0, k = 10.

    The window ends when the trailing mean entropy of the optimized (online)
    branch first drops below the collapse bound.
    """
    cfg = preset("collapse-bench", ZeroSiam(BENCH_LR, DOMINANCE_K * BENCH_LR, alpha=0.0))
    source, pool = source_setup(cfg)
    stream = build_stream(cfg, source, pool)
    d_o, d_r, recs = branch_entropy_changes(AdaptState(source.clone()), cfg.method, stream)
    h_o = moving_average([r.entropy_online for r in recs], SMOOTH_WINDOW)
    below = np.flatnonzero(h_o < COLLAPSE_ENT_FRAC * math.log(N_CLASSES))
    end = int(below[0]) if below.size else len(recs)
    frac = float((d_o[:end] > d_r[:end]).mean()) if end else float("nan")
    return frac, end, d_o.tobytes() + d_r.tobytes()


def criterion_9(ctx: "Suite") -> CriterionResult:
    frac, end, raw = online_dominance()
    return CriterionResult(9, "online-branch dominance", end > 0 and frac > 0.5,
                           f"|dH(p_o)| > |dH(p_r)| on {frac:.2f} of {end} pre-collapse steps", {"deltas": raw})


def criterion_10(ctx: "Suite") -> CriterionResult:
    base = preset("drift-bench")
    cfgs = [replace(base, stream=replace(base.stream, rho=rho)) for rho in (1.0, math.inf)]
    flat, skew = execute_many(cfgs, ctx.jobs)
    d1, dinf = flat.trajectory.records[-1].pred_frob_drift, skew.trajectory.records[-1].pred_frob_drift
    ratio = dinf / d1 if d1 > 0 else float("inf")
    s1 = moving_average(flat.trajectory.series("div_loss"), SMOOTH_WINDOW)
    sinf = moving_average(skew.trajectory.series("div_loss"), SMOOTH_WINDOW)
    above = float((sinf >= s1).mean())
    ok = ratio >= DRIFT_RATIO_MIN and above == 1.0
    detail = (f"final drift rho=1 {d1:.3f}, rho=inf {dinf:.3f}, ratio {ratio:.2f} (need >= {DRIFT_RATIO_MIN}); "
              f"smoothed div_loss rho=inf >= rho=1 on {above:.2f} of steps (need all)")
    return CriterionResult(10, "drift-vs-ratio monotonicity", ok, detail,
                           {"rho1": _outcome_bytes(flat), "rhoinf": _outcome_bytes(skew)},
                           {"drift-bench": {"rho=1": flat.trajectory, "rho=inf": skew.trajectory}})


# ---------------------------------------------------------------- 11-13: robustness


def criterion_11(ctx: "Suite") -> CriterionResult:
    cfg = preset("blind-spot-bench")
    source, pool = source_setup(cfg)
    full = shifted_pool(cfg.stream, pool)
    base = accuracy(source, full)
    outs = execute_many([with_method(cfg, Tent(BLIND_LR[0])), cfg], ctx.jobs)
    tent_acc, zs_acc = (accuracy(o.model, full) for o in outs)
    ok = zs_acc >= base and tent_acc < base
    detail = (f"full-pool accuracy after blind-spot adaptation: NoAdapt {_f(base)}, "
              f"Tent {_f(tent_acc)}, ZeroSiam {_f(zs_acc)}")
    arts = {f"run{i}": _outcome_bytes(o) for i, o in enumerate(outs)}
    arts["acc"] = repr((base, tent_acc, zs_acc)).encode()
    return CriterionResult(11, "blind-spot robustness", ok, detail, arts)


def criterion_12(ctx: "Suite") -> CriterionResult:
    noisy = preset("noise-bench")
    clean = replace(noisy, stream=replace(noisy.stream, shift=Compose(bench_shift().parts)))
    cfgs = []
    for m in (Tent(NOISE_LR), ZeroSiam(NOISE_LR, NOISE_LR)):
        cfgs += [with_method(clean, m), with_method(noisy, m)]
    outs = execute_many(cfgs, ctx.jobs)
    acc = [o.result.online_accuracy for o in outs]
    drop_tent, drop_zs = acc[0] - acc[1], acc[2] - acc[3]
    ok = drop_tent > 0 and drop_zs <= 0.5 * drop_tent
    detail = (f"accuracy drop after {NOISE_BATCHES} noise batches: Tent {_f(drop_tent)}, "
              f"ZeroSiam {_f(drop_zs)} (need <= {_f(0.5 * drop_tent)})")
    return CriterionResult(12, "pure-noise resistance", ok, detail,
                           {f"run{i}": _outcome_bytes(o) for i, o in enumerate(outs)})


OBJECTIVES = tuple(k.value for k in ObjectiveKind)
DIVERGENCES = tuple(k.value for k in DivergenceKind)


def criterion_13(ctx: "Suite") -> CriterionResult:
    base = preset("collapse-bench")
    grid = sweep(SweepSpec(base, (("objective", OBJECTIVES), ("divergence", DIVERGENCES))), ctx.jobs)
    single = sweep(SweepSpec(with_method(base, Tent(BENCH_LR)), (("objective", OBJECTIVES),)), ctx.jobs)
    baseline = {r.point["objective"]: r.outcome.result.online_accuracy for r in single.rows}
    losers = []
    for r in grid.rows:
        if r.outcome is None or not r.outcome.result.online_accuracy > baseline[r.point["objective"]]:
            losers.append(f"{r.point['objective']}/{r.point['divergence']}")
    worst_gap = min(r.outcome.result.online_accuracy - baseline[r.point["objective"]]
                    for r in grid.rows if r.outcome is not None)
    detail = (f"{len(grid.rows) - len(losers)}/{len(grid.rows)} cells beat their alpha=0 baseline; "
              f"smallest gain {worst_gap:+.4f}" + (f"; losing {losers}" if losers else ""))
    return CriterionResult(13, "generality grid", not losers, detail,
                           {"grid": grid.to_csv().encode(), "single": single.to_csv().encode()})


# ---------------------------------------------------------------- 14 + driver


CRITERIA: Dict[int, Callable[["Suite"], CriterionResult]] = {
    1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5,
    6: criterion_6, 7: criterion_7, 8: criterion_8, 9: criterion_9, 10: criterion_10,
    11: criterion_11, 12: criterion_12, 13: criterion_13,
}
DETERMINISM_SCOPE = tuple(range(4, 14))


class Suite:
    """Holds the parallelism level and runs shared between criteria."""

    def __init__(self, jobs: int = 1):
        self.jobs = jobs
        self._cache: Dict[str, object] = {}

    def cached(self, key: str, make):
        if key not in self._cache:
            self._cache[key] = make()
        return self._cache[key]

    def run(self, numbers: Sequence[int]) -> List[CriterionResult]:
        out = []
        for n in numbers:
            t0 = time.perf_counter()
            res = CRITERIA[n](self)
            res.seconds = time.perf_counter() - t0
            out.append(res)
        return out


def determinism_check(first: Mapping[int, CriterionResult], first_jobs: int, jobs: int) -> CriterionResult:
    """Re-run criteria 4-13 in a fresh suite at another parallelism level and compare artifacts."""
    again = {r.number: r for r in Suite(jobs).run([n for n in DETERMINISM_SCOPE if n in first])}
    mismatched = [n for n, r in again.items() if r.digest() != first[n].digest() or r.passed != first[n].passed]
    n_art = sum(len(r.artifacts) for r in again.values())
    detail = (f"{n_art} artifacts from criteria {min(again)}-{max(again)} compared at jobs={first_jobs} vs jobs={jobs}: "
              + ("all byte-identical" if not mismatched else f"differences in criteria {mismatched}"))
    return CriterionResult(14, "determinism & parallelism", not mismatched, detail)


def run_all(jobs: int = 1, rerun_jobs: int = 4) -> List[CriterionResult]:
    results = Suite(jobs).run(sorted(CRITERIA))
    results.append(determinism_check({r.number: r for r in results}, jobs, rerun_jobs))
    return results


def report_lines(results: Sequence[CriterionResult]) -> List[str]:
    """Tab-delimited table: number, status, seconds, title, detail."""
    lines = ["criterion\tstatus\tseconds\ttitle\tdetail"]
    for r in results:
        lines.append(f"{r.number}\t{'PASS' if r.passed else 'FAIL'}\t{r.seconds:.1f}\t{r.title}\t{r.detail}")
    return lines


def render_report(results: Sequence[CriterionResult], out_dir) -> List[Path]:
    """Write the delimited table plus SVG panels for criteria that carry trajectories."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = out_dir / "acceptance.tsv"
    table.write_text("\n".join(report_lines(results)) + "\n")
    paths = [table]
    for r in results:
        for stem, trajs in r.figures.items():
            paths += render_panels(trajs, out_dir, stem, stem)
            curves = {}
            for label, t in trajs.items():
                y = moving_average(t.series("div_loss"), SMOOTH_WINDOW)
                curves[label] = (np.arange(len(y)), y)
            paths.append(line_panel(curves, "divergence loss (smoothed)", out_dir / f"{stem}.div_loss.svg", stem))
    return paths

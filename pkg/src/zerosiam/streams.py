"""Synthetic source tasks, feature shifts and test-stream construction.

Dataset text format (``export_dataset`` / ``import_dataset``)::

    dim,classes
    <d>,<C>
    <x_0>,<x_1>,...,<x_{d-1}>,<label>
    ...

Floats are written with ``repr`` and so round-trip exactly. A label of ``-1``
marks a sample with no valid label (pure-noise batches).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from .models import SENTINEL_LABEL, AdaptiveModel, LabeledSet


class ConfigError(ValueError):
    """Invalid task or stream description."""


class EmptySubsetError(ValueError):
    """The blind-spot filter left no samples."""


# ---------------------------------------------------------------- source task


@dataclass(frozen=True)
class SourceTask:
    """Gaussian blobs around well separated class means.

    With ``layout="simplex"`` (needs ``n_classes <= input_dim``) the means sit at
    ``separation / sqrt(2) * e_c`` (centered), all pairwise ``separation`` apart.
    With ``layout="circle"`` they sit evenly on a circle in the first two
    coordinates, neighbours ``separation`` apart; the remaining coordinates
    carry only noise.
    """

    n_classes: int = 6
    input_dim: int = 8
    noise_sigma: float = 1.0
    separation: float = 6.0
    n_train: int = 1200
    seed: int = 0
    layout: str = "simplex"

    def class_means(self) -> np.ndarray:
        C, d = self.n_classes, self.input_dim
        means = np.zeros((C, d))
        if self.layout == "simplex":
            if C > d:
                raise ConfigError("simplex layout needs n_classes <= input_dim")
            means[np.arange(C), np.arange(C)] = self.separation / math.sqrt(2.0)
            means -= means.mean(axis=0)
        else:
            radius = self.separation / (2.0 * math.sin(math.pi / C))
            angles = 2.0 * math.pi * np.arange(C) / C
            means[:, 0] = radius * np.cos(angles)
            means[:, 1] = radius * np.sin(angles)
        return means

    def validate(self) -> None:
        if self.n_classes < 2 or self.input_dim < 2:
            raise ConfigError("need n_classes >= 2 and input_dim >= 2")
        if self.layout not in ("simplex", "circle"):
            raise ConfigError(f"unknown layout {self.layout!r}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        m = self.class_means()
        dists = np.linalg.norm(m[:, None, :] - m[None, :, :], axis=-1)
        closest = dists[~np.eye(self.n_classes, dtype=bool)].min()
        if closest < 4.0 * self.noise_sigma - 1e-12:
            raise ConfigError(
                f"class means {closest:.3g} apart, need >= 4 * noise_sigma = {4 * self.noise_sigma:.3g}"
            )


def sample_task(task: SourceTask, n: int, seed: int) -> LabeledSet:
    """Draw ``n`` labeled points; per-class counts differ by at most one."""
    task.validate()
    rng = np.random.default_rng(seed)
    C = task.n_classes
    y = np.arange(n) % C
    y = np.sort(y)
    means = task.class_means()
    x = means[y] + task.noise_sigma * rng.standard_normal((n, task.input_dim))
    perm = rng.permutation(n)
    return LabeledSet(x=x[perm], y=y[perm].astype(np.int64), n_classes=C)


def generate_source(task: SourceTask) -> LabeledSet:
    return sample_task(task, task.n_train, task.seed)


# ---------------------------------------------------------------- shifts


@dataclass(frozen=True)
class NoShift:
    kind: str = field(default="none", init=False)


@dataclass(frozen=True)
class AdditiveGaussian:
    sigma: float
    kind: str = field(default="additive_gaussian", init=False)


@dataclass(frozen=True)
class MeanShift:
    delta: Tuple[float, ...]
    kind: str = field(default="mean_shift", init=False)


@dataclass(frozen=True)
class FeatureScale:
    factor: float
    kind: str = field(default="feature_scale", init=False)


@dataclass(frozen=True)
class Compose:
    """Apply several shifts in sequence to the same samples.

    A ``PureNoise`` part is not applied sample-wise; it becomes a prefix of
    noise batches in front of the shifted stream.
    """

    parts: Tuple["Shift", ...]
    kind: str = field(default="compose", init=False)


@dataclass(frozen=True)
class Mixture:
    """Split the stream into contiguous segments, one shift per segment."""

    parts: Tuple["Shift", ...]
    proportions: Tuple[float, ...]
    kind: str = field(default="mixture", init=False)

    def __post_init__(self):
        if len(self.parts) != len(self.proportions) or not self.parts:
            raise ConfigError("mixture needs one proportion per part")
        if any(p < 0 for p in self.proportions) or abs(sum(self.proportions) - 1.0) > 1e-9:
            raise ConfigError("mixture proportions must be non-negative and sum to 1")


@dataclass(frozen=True)
class PureNoise:
    """Prefix of ``n_batches`` label-free Gaussian batches."""

    n_batches: int
    sigma: float = 1.0
    kind: str = field(default="pure_noise", init=False)


Shift = Union[NoShift, AdditiveGaussian, MeanShift, FeatureScale, Compose, Mixture, PureNoise]


def apply_shift(shift: Shift, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Return shifted features. Mixture and pure-noise are handled by ``make_stream``."""
    if isinstance(shift, NoShift):
        return x.copy()
    if isinstance(shift, AdditiveGaussian):
        return x + shift.sigma * rng.standard_normal(x.shape)
    if isinstance(shift, MeanShift):
        delta = np.asarray(shift.delta, dtype=np.float64)
        if delta.shape != (x.shape[1],):
            raise ConfigError(f"mean shift has {delta.size} entries for {x.shape[1]} features")
        return x + delta
    if isinstance(shift, FeatureScale):
        return x * shift.factor
    if isinstance(shift, Compose):
        for part in shift.parts:
            x = apply_shift(part, x, rng)
        return x
    raise ConfigError(f"{type(shift).__name__} cannot be applied sample-wise")


# ---------------------------------------------------------------- streams


ORDERINGS = ("shuffled", "class_ordered", "imbalanced")


@dataclass(frozen=True)
class StreamSpec:
    shift: Shift = NoShift()
    ordering: str = "shuffled"
    rho: float = 1.0
    batch_size: int = 64
    n_samples: int = 6400
    blind_spot: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.ordering not in ORDERINGS:
            raise ConfigError(f"ordering must be one of {ORDERINGS}, got {self.ordering!r}")
        if self.ordering == "imbalanced" and not self.rho >= 1.0:
            raise ConfigError("rho must be >= 1")
        if self.batch_size < 1 or self.n_samples < 1:
            raise ConfigError("batch_size and n_samples must be positive")


@dataclass(frozen=True)
class Stream:
    """Immutable sequence of test batches. Labels are for measurement only."""

    x: np.ndarray
    y: np.ndarray
    batch_size: int
    n_classes: int

    def __post_init__(self):
        self.x.setflags(write=False)
        self.y.setflags(write=False)

    def __len__(self) -> int:
        return math.ceil(len(self.y) / self.batch_size)

    def __iter__(self) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        b = self.batch_size
        for start in range(0, len(self.y), b):
            yield self.x[start:start + b], self.y[start:start + b]

    def truncated(self, n_batches: int) -> "Stream":
        n = min(len(self.y), n_batches * self.batch_size)
        return Stream(self.x[:n].copy(), self.y[:n].copy(), self.batch_size, self.n_classes)

    def as_labeled_set(self) -> LabeledSet:
        return LabeledSet(self.x.copy(), self.y.copy(), self.n_classes)


class _ClassSampler:
    """Draws pool indices of a given class without replacement, reshuffling when exhausted."""

    def __init__(self, y: np.ndarray, n_classes: int, rng: np.random.Generator):
        self.rng = rng
        self.pools = [np.flatnonzero(y == c) for c in range(n_classes)]
        self.queues = [self.rng.permutation(p) for p in self.pools]
        self.pos = [0] * n_classes

    def available(self, c: int) -> bool:
        return self.pools[c].size > 0

    def draw(self, c: int) -> int:
        if self.pos[c] >= self.queues[c].size:
            self.queues[c] = self.rng.permutation(self.pools[c])
            self.pos[c] = 0
        idx = self.queues[c][self.pos[c]]
        self.pos[c] += 1
        return int(idx)


def imbalanced_labels(n: int, n_classes: int, rho: float, rng: np.random.Generator) -> np.ndarray:
    """Phase-wise label sequence.

    The stream is cut into ``n_classes`` equal phases; in phase ``k`` class ``k``
    is drawn with probability ``rho / (rho + C - 1)`` and each other class with
    ``1 / (rho + C - 1)``. ``rho = inf`` gives a class-ordered stream.
    """
    C = n_classes
    bounds = np.linspace(0, n, C + 1).round().astype(int)
    out = np.empty(n, dtype=np.int64)
    for k in range(C):
        m = bounds[k + 1] - bounds[k]
        if math.isinf(rho):
            probs = np.zeros(C)
            probs[k] = 1.0
        else:
            probs = np.full(C, 1.0 / (rho + C - 1))
            probs[k] = rho / (rho + C - 1)
        out[bounds[k]:bounds[k + 1]] = rng.choice(C, size=m, p=probs)
    return out


def _order_indices(spec: StreamSpec, y: np.ndarray, n_classes: int, n: int, rng) -> np.ndarray:
    if spec.ordering == "shuffled":
        reps = math.ceil(n / len(y))
        return np.concatenate([rng.permutation(len(y)) for _ in range(reps)])[:n]
    if spec.ordering == "class_ordered":
        labels = imbalanced_labels(n, n_classes, math.inf, rng)
    else:
        labels = imbalanced_labels(n, n_classes, spec.rho, rng)
    sampler = _ClassSampler(y, n_classes, rng)
    missing = [c for c in np.unique(labels) if not sampler.available(int(c))]
    if missing:
        raise EmptySubsetError(f"no pool samples for classes {missing}")
    return np.array([sampler.draw(int(c)) for c in labels], dtype=np.int64)


def _segment(spec: StreamSpec, shift: Shift, pool: LabeledSet, n: int, ref_model, rng):
    x = apply_shift(shift, pool.x, rng)
    y = pool.y
    if spec.blind_spot:
        if ref_model is None:
            raise ConfigError("blind_spot streams need a reference model")
        wrong = ref_model.predict(x) != y
        if not wrong.any():
            raise EmptySubsetError("reference model classifies the whole pool correctly")
        x, y = x[wrong], y[wrong]
    idx = _order_indices(spec, y, pool.n_classes, n, rng)
    return x[idx], y[idx]


def make_stream(spec: StreamSpec, pool: LabeledSet, ref_model: Optional[AdaptiveModel] = None) -> Stream:
    """Shift the pool, optionally keep only ``ref_model``'s mistakes, then order it."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    noise, shift = _split_noise(spec.shift)
    if isinstance(shift, Mixture):
        sizes = np.floor(np.asarray(shift.proportions) * spec.n_samples).astype(int)
        sizes[-1] = spec.n_samples - sizes[:-1].sum()
        parts = [_segment(spec, s, pool, int(m), ref_model, rng) for s, m in zip(shift.parts, sizes) if m > 0]
        x = np.concatenate([p[0] for p in parts])
        y = np.concatenate([p[1] for p in parts])
    else:
        x, y = _segment(spec, shift, pool, spec.n_samples, ref_model, rng)
    stream = Stream(np.ascontiguousarray(x), np.ascontiguousarray(y), spec.batch_size, pool.n_classes)
    if noise is not None:
        stream = pure_noise_prefix(stream, noise.n_batches, noise.sigma, seed=spec.seed + 1)
    return stream


def _split_noise(shift: Shift) -> Tuple[Optional[PureNoise], Shift]:
    """Separate a pure-noise prefix from the shift applied to the real samples."""
    if isinstance(shift, PureNoise):
        return shift, NoShift()
    if isinstance(shift, Compose):
        noise = [p for p in shift.parts if isinstance(p, PureNoise)]
        if len(noise) > 1:
            raise ConfigError("at most one pure-noise prefix per stream")
        if noise:
            return noise[0], Compose(tuple(p for p in shift.parts if not isinstance(p, PureNoise)))
    return None, shift


def shifted_pool(spec: StreamSpec, pool: LabeledSet) -> LabeledSet:
    """The shifted pool exactly as ``make_stream`` sees it before filtering and ordering.

    Only defined for single-segment shifts; a noise prefix is ignored.
    """
    _, shift = _split_noise(spec.shift)
    if isinstance(shift, Mixture):
        raise ConfigError("shifted_pool is undefined for mixture streams")
    rng = np.random.default_rng(spec.seed)
    return LabeledSet(apply_shift(shift, pool.x, rng), pool.y.copy(), pool.n_classes)


def pure_noise_prefix(stream: Stream, n_batches: int, sigma: float = 1.0, seed: int = 0) -> Stream:
    """Prepend ``n_batches`` full batches of N(0, sigma^2) features labeled ``-1``."""
    if n_batches < 0:
        raise ConfigError("n_batches must be >= 0")
    if n_batches == 0:
        return stream
    rng = np.random.default_rng(seed)
    m = n_batches * stream.batch_size
    noise = sigma * rng.standard_normal((m, stream.x.shape[1]))
    x = np.concatenate([noise, stream.x])
    y = np.concatenate([np.full(m, SENTINEL_LABEL, dtype=np.int64), stream.y])
    return Stream(x, y, stream.batch_size, stream.n_classes)


# ---------------------------------------------------------------- text format


def export_dataset(data: Union[LabeledSet, Stream], path) -> None:
    x, y = data.x, data.y
    lines = ["dim,classes", f"{x.shape[1]},{data.n_classes}"]
    for row, label in zip(x, y):
        lines.append(",".join(repr(float(v)) for v in row) + f",{int(label)}")
    Path(path).write_text("\n".join(lines) + "\n")


def import_dataset(path) -> LabeledSet:
    lines = Path(path).read_text().splitlines()
    if len(lines) < 2 or lines[0].strip() != "dim,classes":
        raise ConfigError(f"{path}: missing 'dim,classes' header")
    dim, n_classes = (int(v) for v in lines[1].split(","))
    rows = [ln.split(",") for ln in lines[2:] if ln.strip()]
    for i, r in enumerate(rows):
        if len(r) != dim + 1:
            raise ConfigError(f"{path}: row {i + 3} has {len(r)} columns, expected {dim + 1}")
    x = np.array([[float(v) for v in r[:dim]] for r in rows], dtype=np.float64).reshape(-1, dim)
    y = np.array([int(r[dim]) for r in rows], dtype=np.int64)
    return LabeledSet(x, y, n_classes)


def label_counts(labels: Sequence[int], n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    return np.bincount(labels[labels >= 0], minlength=n_classes)

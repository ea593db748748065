"""Small MLP classifiers split into encoder, classifier and an inserted predictor."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor

CHECKPOINT_FORMAT = "zerosiam-checkpoint"
CHECKPOINT_VERSION = 1

SENTINEL_LABEL = -1


class DataError(ValueError):
    pass


class UnsupportedMetricError(ValueError):
    pass


@dataclass
class LabeledSet:
    """Features ``x`` of shape [n, d] with integer labels (``-1`` marks "no label")."""

    x: np.ndarray
    y: np.ndarray
    n_classes: int

    def __len__(self) -> int:
        return len(self.y)


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: Optional[np.random.Generator] = None, bias: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(d_in)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(d_in, d_out)))
        self.bias = Tensor(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.matmul(x, self.weight)
        return out if self.bias is None else ad.add(out, self.bias)


class NormLayer:
    """Per-sample feature standardization followed by a learnable affine map."""

    def __init__(self, feature_dim: int, eps: float = 1e-5):
        if feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        self.feature_dim = feature_dim
        self.eps = eps
        self.gamma = Tensor(np.ones(feature_dim))
        self.beta = Tensor(np.zeros(feature_dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.mul(ad.layer_norm(x, self.eps), self.gamma), self.beta)


@dataclass(frozen=True)
class PredictorInit:
    """How the inserted predictor starts out.

    ``variant`` is ``"identity"``, ``"random"`` (``I + scale * W`` with standard
    normal ``W``) or ``"mlp"`` (FC-ReLU-FC, identity-like at init is not attempted).
    """

    variant: str = "identity"
    learnable: bool = True
    scale: float = 0.1
    seed: int = 0
    hidden_dim: int = 32
    bias: bool = True

    def __post_init__(self):
        if self.variant not in ("identity", "random", "mlp"):
            raise ValueError(f"unknown predictor variant {self.variant!r}")


class Predictor:
    def __init__(self, dim: int, init: PredictorInit):
        self.dim = dim
        self.init = init
        self.layers: List[Linear] = []
        if init.variant == "mlp":
            rng = np.random.default_rng(init.seed)
            self.layers = [Linear(dim, init.hidden_dim, rng), Linear(init.hidden_dim, dim, rng)]
        else:
            lin = Linear(dim, dim, bias=init.bias)
            w = np.eye(dim)
            if init.variant == "random":
                w = w + init.scale * np.random.default_rng(init.seed).standard_normal((dim, dim))
            lin.weight = Tensor(w)
            self.layers = [lin]

    @property
    def is_linear(self) -> bool:
        return len(self.layers) == 1

    def __call__(self, z: Tensor) -> Tensor:
        if self.is_linear:
            return self.layers[0](z)
        return self.layers[1](ad.relu(self.layers[0](z)))


class AdaptiveModel:
    """Encoder f (Linear/Norm/ReLU blocks), classifier g and predictor h.

    ``u_r = g(z)`` is the target branch and ``u_o = g(h(z))`` the online branch,
    both computed from a single encoder pass.
    """

    def __init__(
        self,
        d_in: int,
        n_classes: int,
        widths: Tuple[int, ...] = (32, 16),
        predictor: PredictorInit = PredictorInit(),
        seed: int = 0,
    ):
        if n_classes < 2:
            raise ValueError("need at least two classes")
        rng = np.random.default_rng(seed)
        self.d_in = d_in
        self.n_classes = n_classes
        self.widths = tuple(widths)
        self.seed = seed
        dims = (d_in,) + self.widths
        self.linears = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.norms = [NormLayer(b) for b in dims[1:]]
        self.classifier = Linear(dims[-1], n_classes, rng)
        self.predictor = Predictor(dims[-1], predictor)
        self.encoder_passes = 0

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    # ------------------------------------------------------------ parameters

    def named_parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for i, (lin, norm) in enumerate(zip(self.linears, self.norms)):
            params[f"encoder.{i}.linear.weight"] = lin.weight
            params[f"encoder.{i}.linear.bias"] = lin.bias
            params[f"encoder.{i}.norm.gamma"] = norm.gamma
            params[f"encoder.{i}.norm.beta"] = norm.beta
        params["classifier.weight"] = self.classifier.weight
        params["classifier.bias"] = self.classifier.bias
        for i, lin in enumerate(self.predictor.layers):
            params[f"predictor.{i}.weight"] = lin.weight
            if lin.bias is not None:
                params[f"predictor.{i}.bias"] = lin.bias
        return params

    def norm_param_names(self) -> List[str]:
        return [n for n in self.named_parameters() if ".norm." in n]

    def predictor_param_names(self) -> List[str]:
        return [n for n in self.named_parameters() if n.startswith("predictor.")]

    def adaptable_param_names(self) -> List[str]:
        names = self.norm_param_names()
        if self.predictor.init.learnable:
            names += self.predictor_param_names()
        return names

    def frozen_param_names(self) -> List[str]:
        adaptable = set(self.adaptable_param_names())
        return [n for n in self.named_parameters() if n not in adaptable]

    def source_param_names(self) -> List[str]:
        return [n for n in self.named_parameters() if not n.startswith("predictor.")]

    def set_trainable(self, names) -> None:
        """Mark exactly ``names`` as requiring gradients."""
        names = set(names)
        for name, p in self.named_parameters().items():
            p.requires_grad = name in names
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise ContractError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, arr in state.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != params[name].shape:
                raise ContractError(f"{name}: shape {arr.shape} != {params[name].shape}")
            params[name].data = arr.copy()

    def clone(self) -> "AdaptiveModel":
        other = AdaptiveModel(self.d_in, self.n_classes, self.widths, self.predictor.init, self.seed)
        other.load_state_dict(self.state_dict())
        return other

    def replace_predictor(self, init: PredictorInit) -> None:
        """Swap in a freshly initialized predictor; encoder and classifier are kept."""
        self.predictor = Predictor(self.feature_dim, init)

    # ------------------------------------------------------------ forward

    def encode(self, x: Tensor, count: bool = True) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.d_in:
            raise ContractError(f"expected input [b, {self.d_in}], got {x.shape}")
        if count:
            self.encoder_passes += 1
        h = x
        for lin, norm in zip(self.linears, self.norms):
            h = ad.relu(norm(lin(h)))
        return h

    def forward_target(self, x: Tensor, count: bool = True) -> Tensor:
        return self.classifier(self.encode(x, count))

    def forward_branches(self, x: Tensor, count: bool = True) -> Tuple[Tensor, Tensor, Tensor]:
        """Return ``(u_o, u_r, z)`` from one encoder pass.

        No stop-gradient is applied here; the loss applies it to the target branch.
        """
        z = self.encode(x, count)
        u_r = self.classifier(z)
        u_o = self.classifier(self.predictor(z))
        return u_o, u_r, z

    def predict(self, x: np.ndarray) -> np.ndarray:
        u = self.forward_target(Tensor(x), count=False)
        return np.argmax(u.data, axis=1)


def predictor_frobenius_drift(model: AdaptiveModel) -> float:
    """``||P - I||_F`` of a linear predictor; the bias is ignored."""
    if not model.predictor.is_linear:
        raise UnsupportedMetricError("Frobenius drift is only defined for a linear predictor")
    w = model.predictor.layers[0].weight.data
    return float(np.linalg.norm(w - np.eye(w.shape[0])))


def accuracy(model: AdaptiveModel, data: LabeledSet) -> float:
    mask = data.y != SENTINEL_LABEL
    if not mask.any():
        return float("nan")
    return float(np.mean(model.predict(data.x[mask]) == data.y[mask]))


# ---------------------------------------------------------------- source training


@dataclass
class TrainReport:
    epochs: int
    accuracy: float
    loss: float


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    logp = ad.log(ad.softmax(logits))
    return ad.scale(ad.mean(ad.row_sum(ad.mul(logp, Tensor(onehot)))), -1.0)


def _dataset_loss(model: AdaptiveModel, data: LabeledSet) -> float:
    return float(cross_entropy(model.forward_target(Tensor(data.x), count=False), data.y).data)


def source_train(
    model: AdaptiveModel,
    data: LabeledSet,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 64,
    momentum: float = 0.9,
) -> TrainReport:
    """Fit encoder and classifier by minibatch SGD with momentum on cross-entropy.

    The predictor is not touched.
    """
    y = np.asarray(data.y)
    if y.size == 0 or y.min() < 0 or y.max() >= model.n_classes:
        raise DataError("labels must lie in [0, n_classes)")
    counts = np.bincount(y, minlength=model.n_classes)
    if (counts == 0).any():
        raise DataError(f"classes without samples: {np.flatnonzero(counts == 0).tolist()}")

    names = model.source_param_names()
    params = model.named_parameters()
    model.set_trainable(names)
    bufs = {n: np.zeros_like(params[n].data) for n in names}
    rng = np.random.default_rng(seed)
    n = len(y)
    try:
        for _ in range(epochs):
            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                idx = order[start:start + batch_size]
                loss = cross_entropy(model.forward_target(Tensor(data.x[idx]), count=False), y[idx])
                ad.backward(loss)
                for name in names:
                    p = params[name]
                    bufs[name] = momentum * bufs[name] + p.grad
                    p.data = p.data - lr * bufs[name]
                    p.grad = None
    finally:
        model.set_trainable(())
    return TrainReport(epochs=epochs, accuracy=accuracy(model, data), loss=_dataset_loss(model, data))


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: AdaptiveModel, path) -> None:
    """Write a JSON checkpoint; floats are stored with ``repr`` so they round-trip exactly."""
    init = model.predictor.init
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": {
            "d_in": model.d_in,
            "n_classes": model.n_classes,
            "widths": list(model.widths),
            "seed": model.seed,
            "predictor": {
                "variant": init.variant,
                "learnable": init.learnable,
                "scale": init.scale,
                "seed": init.seed,
                "hidden_dim": init.hidden_dim,
                "bias": init.bias,
            },
        },
        "params": {
            name: {"shape": list(arr.shape), "data": [float(v) for v in arr.reshape(-1)]}
            for name, arr in model.state_dict().items()
        },
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_checkpoint(path) -> AdaptiveModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    arch = doc["arch"]
    model = AdaptiveModel(
        arch["d_in"],
        arch["n_classes"],
        tuple(arch["widths"]),
        PredictorInit(**arch["predictor"]),
        arch["seed"],
    )
    state = {
        name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in doc["params"].items()
    }
    model.load_state_dict(state)
    return model

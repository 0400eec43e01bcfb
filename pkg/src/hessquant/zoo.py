"""Small reference MLPs, synthetic datasets, SGD training, and checkpoints.

Models stay tiny on purpose (tens to low thousands of parameters per layer)
so that explicit dense Hessians remain computable and every estimator in the
package can be checked against a brute-force oracle.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import engine
from .rng import substream

CHECKPOINT_FORMAT_VERSION = 1

LAYER_KINDS = ("dense", "dense+relu", "dense+tanh")
LOSS_HEADS = ("mse", "cross_entropy")


class ZooError(Exception):
    pass


class CheckpointError(ZooError):
    """Malformed checkpoint file; message carries offset or field path."""


class TrainingDivergedError(ZooError):
    def __init__(self, message: str, history: list[float]):
        super().__init__(message)
        self.history = history


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------


@dataclass
class Layer:
    name: str
    kind: str
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.kind not in LAYER_KINDS:
            raise ZooError(f"layer {self.name!r}: unknown kind {self.kind!r}")
        if self.weight.ndim != 2:
            raise ZooError(f"layer {self.name!r}: weight must be a matrix")
        if self.bias.shape != (self.weight.shape[1],):
            raise ZooError(
                f"layer {self.name!r}: bias shape {self.bias.shape} does not "
                f"match fan-out {self.weight.shape[1]}"
            )

    @property
    def n_params(self) -> int:
        """Weights and bias jointly; this is the sensitivity block size."""
        return self.weight.size + self.bias.size

    @property
    def n_weights(self) -> int:
        """Weight entries only; this is what the size accounting counts."""
        return self.weight.size


@dataclass
class Model:
    layers: list[Layer]
    loss_head: str

    def __post_init__(self):
        if len(self.layers) < 2:
            raise ZooError("a model needs at least two layers")
        if self.loss_head not in LOSS_HEADS:
            raise ZooError(f"unknown loss head {self.loss_head!r}")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[1] != nxt.weight.shape[0]:
                raise ZooError(
                    f"layers {prev.name!r} ({prev.weight.shape}) and "
                    f"{nxt.name!r} ({nxt.weight.shape}) do not compose"
                )

    @property
    def n_params(self) -> int:
        return sum(layer.n_params for layer in self.layers)

    def copy(self) -> "Model":
        return Model(
            layers=[
                Layer(l.name, l.kind, l.weight.copy(), l.bias.copy())
                for l in self.layers
            ],
            loss_head=self.loss_head,
        )

    def flat_params(self) -> np.ndarray:
        return np.concatenate(
            [np.concatenate([l.weight.ravel(), l.bias.ravel()]) for l in self.layers]
        )

    def set_layer_params(self, index: int, flat: np.ndarray) -> None:
        """Overwrite one layer's (weight, bias) from a flat vector."""
        layer = self.layers[index]
        flat = np.asarray(flat, dtype=np.float64).ravel()
        if flat.size != layer.n_params:
            raise ZooError(
                f"layer {layer.name!r} has {layer.n_params} parameters, "
                f"got {flat.size}"
            )
        nw = layer.weight.size
        layer.weight = flat[:nw].reshape(layer.weight.shape)
        layer.bias = flat[nw:].copy()


def init_mlp(
    layer_dims: list[int],
    activation: str = "relu",
    loss_head: str = "cross_entropy",
    seed: int = 0,
) -> Model:
    """An MLP with hidden nonlinearities and a plain dense output layer."""
    if len(layer_dims) < 3:
        raise ZooError("need at least input, one hidden, and output dims")
    if activation not in ("relu", "tanh"):
        raise ZooError(f"unknown activation {activation!r}")
    hidden_kind = f"dense+{activation}"
    layers = []
    n = len(layer_dims) - 1
    for i in range(n):
        fan_in, fan_out = layer_dims[i], layer_dims[i + 1]
        rng = substream(seed, "init", i)
        scale = math.sqrt(2.0 / fan_in)
        weight = rng.standard_normal((fan_in, fan_out)) * scale
        bias = np.zeros(fan_out)
        kind = hidden_kind if i < n - 1 else "dense"
        layers.append(Layer(name=f"fc{i + 1}", kind=kind, weight=weight, bias=bias))
    return Model(layers=layers, loss_head=loss_head)


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, n_features)
    labels: np.ndarray  # (N,) int for classification, (N, t) float for regression
    task: str  # "classification" | "regression"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.task == "classification":
            self.labels = np.asarray(self.labels, dtype=np.int64)
        else:
            self.labels = np.asarray(self.labels, dtype=np.float64)
        if len(self.inputs) != len(self.labels) or len(self.inputs) == 0:
            raise ZooError("inputs and labels must be non-empty and aligned")

    def __len__(self) -> int:
        return len(self.inputs)

    def batch(self) -> tuple[np.ndarray, np.ndarray]:
        return self.inputs, self.labels

    def subset(self, idx) -> tuple[np.ndarray, np.ndarray]:
        return self.inputs[idx], self.labels[idx]


def _balanced_labels(n_samples: int, n_classes: int) -> np.ndarray:
    counts = [n_samples // n_classes] * n_classes
    for c in range(n_samples % n_classes):
        counts[c] += 1
    return np.repeat(np.arange(n_classes), counts)


def make_synthetic(
    kind: str,
    n_samples: int,
    n_features: int,
    n_classes: int = 2,
    seed: int = 0,
    separation: float = 4.0,
    noise: float = 0.35,
) -> Dataset:
    """Deterministic synthetic datasets.

    ``gaussian-blobs``: class means on a circle of radius ``separation`` in
    the first two feature dims, unit-variance noise everywhere. Classes are
    balanced within one sample.

    ``two-moons-like``: two interleaved half-circles with Gaussian jitter
    (binary only).

    ``regression``: smooth nonlinear targets of a random linear projection;
    ``n_classes`` is reused as the target dimension.
    """
    if n_samples < 1 or n_features < 1:
        raise ZooError("n_samples and n_features must be positive")
    rng = substream(seed, "dataset", kind)

    if kind == "gaussian-blobs":
        if not 2 <= n_classes <= n_samples:
            raise ZooError("need n_samples >= n_classes >= 2")
        labels = _balanced_labels(n_samples, n_classes)
        angles = 2.0 * np.pi * labels / n_classes
        means = np.zeros((n_samples, n_features))
        means[:, 0] = separation * np.cos(angles)
        if n_features > 1:
            means[:, 1] = separation * np.sin(angles)
        inputs = means + rng.standard_normal((n_samples, n_features))
        return Dataset(inputs=inputs, labels=labels, task="classification")

    if kind == "two-moons-like":
        if n_classes != 2:
            raise ZooError("two-moons-like is binary")
        if n_features < 2:
            raise ZooError("two-moons-like needs at least two features")
        labels = _balanced_labels(n_samples, 2)
        theta = rng.uniform(0.0, np.pi, size=n_samples)
        inputs = rng.standard_normal((n_samples, n_features)) * noise
        upper = labels == 0
        inputs[upper, 0] += np.cos(theta[upper])
        inputs[upper, 1] += np.sin(theta[upper])
        inputs[~upper, 0] += 1.0 - np.cos(theta[~upper])
        inputs[~upper, 1] += 0.5 - np.sin(theta[~upper])
        return Dataset(inputs=inputs, labels=labels, task="classification")

    if kind == "regression":
        n_targets = max(1, n_classes)
        inputs = rng.standard_normal((n_samples, n_features))
        proj = rng.standard_normal((n_features, n_targets)) / math.sqrt(n_features)
        targets = np.sin(inputs @ proj) + 0.1 * (inputs @ proj)
        targets += noise * 0.1 * rng.standard_normal(targets.shape)
        return Dataset(inputs=inputs, labels=targets, task="regression")

    raise ZooError(f"unknown dataset kind {kind!r}")


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    grad_tol: float = 1e-4  # full-batch gradient norm stopping threshold

    def __post_init__(self):
        if self.grad_tol <= 0:
            raise ZooError("grad_tol must be positive")


@dataclass
class TrainResult:
    model: Model
    loss_history: list[float]
    final_grad_norm: float
    converged: bool
    epochs_run: int


def full_grad_norm(model: Model, dataset: Dataset) -> float:
    g = engine.grad(model, dataset.batch(), block="all")
    return float(np.linalg.norm(g))


def train_sgd(model: Model, dataset: Dataset, config: TrainConfig) -> TrainResult:
    """Mini-batch SGD with momentum; stops early on the gradient-norm test.

    The input model is not mutated. Shuffling, batching, and updates are all
    derived from ``config.seed``, so the result is a pure function of
    (model, dataset, config).
    """
    if config.batch_size > len(dataset):
        raise ZooError("batch_size exceeds dataset size")
    m = model.copy()
    velocity = [
        (np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in m.layers
    ]
    history: list[float] = []
    n = len(dataset)
    converged = False
    epochs_run = 0
    for epoch in range(config.epochs):
        perm = substream(config.seed, "shuffle", epoch).permutation(n)
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            try:
                grads = engine.grad_per_layer(m, dataset.subset(idx))
            except engine.NumericalError as e:
                raise TrainingDivergedError(
                    f"training diverged at epoch {epoch}: {e}", history
                ) from e
            for layer, (vw, vb), (gw, gb) in zip(m.layers, velocity, grads):
                vw *= config.momentum
                vw -= config.learning_rate * gw
                vb *= config.momentum
                vb -= config.learning_rate * gb
                layer.weight = layer.weight + vw
                layer.bias = layer.bias + vb
        try:
            epoch_loss = engine.eval_loss(m, dataset.batch())
        except engine.NumericalError as e:
            raise TrainingDivergedError(
                f"loss became non-finite at epoch {epoch}", history
            ) from e
        history.append(epoch_loss)
        epochs_run = epoch + 1
        gnorm = full_grad_norm(m, dataset)
        if gnorm <= config.grad_tol:
            converged = True
            break
    return TrainResult(
        model=m,
        loss_history=history,
        final_grad_norm=full_grad_norm(m, dataset),
        converged=converged,
        epochs_run=epochs_run,
    )


@dataclass
class LocalMinReport:
    grad_norm: float
    grad_tol: float
    rayleigh_quotients: list[float]
    min_rayleigh: float
    gradient_ok: bool
    curvature_ok: bool
    psd_check_is_sampled: bool = True  # random directions only, not a proof

    @property
    def passed(self) -> bool:
        return self.gradient_ok and self.curvature_ok


def verify_local_min(
    model: Model,
    dataset: Dataset,
    grad_tol: float = 1e-4,
    n_probe_dirs: int = 10,
    seed: int = 0,
    curvature_tol: float = -1e-3,
) -> LocalMinReport:
    """First/second-order optimality report at the current weights.

    Reports the full-batch gradient norm and Rayleigh quotients v'Hv/v'v
    along ``n_probe_dirs`` random directions. The curvature check is
    probabilistic: it can reveal a negative direction but cannot certify
    positive semi-definiteness.
    """
    gnorm = full_grad_norm(model, dataset)
    oracle, dim = engine.weight_hvp_oracle(model, dataset.batch(), "all")
    quotients = []
    for k in range(n_probe_dirs):
        v = substream(seed, "verify-direction", k).standard_normal(dim)
        quotients.append(float(v @ oracle(v) / (v @ v)))
    min_rq = min(quotients) if quotients else float("nan")
    return LocalMinReport(
        grad_norm=gnorm,
        grad_tol=grad_tol,
        rayleigh_quotients=quotients,
        min_rayleigh=min_rq,
        gradient_ok=gnorm <= grad_tol,
        curvature_ok=min_rq >= curvature_tol,
    )


def evaluate(model: Model, dataset: Dataset) -> dict:
    """Loss (and accuracy for classification) over the full dataset."""
    out = {"loss": engine.eval_loss(model, dataset.batch())}
    if dataset.task == "classification":
        logits = engine.forward_logits(model, dataset.inputs)
        pred = np.argmax(logits, axis=1)
        out["accuracy"] = float(np.mean(pred == dataset.labels))
    return out


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def _checkpoint_dict(model: Model) -> dict:
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "loss_head": model.loss_head,
        "layers": [
            {
                "name": l.name,
                "kind": l.kind,
                "shape": list(l.weight.shape),
                "weights": l.weight.ravel().tolist(),
                "bias": l.bias.ravel().tolist(),
            }
            for l in model.layers
        ],
    }


def save_checkpoint(model: Model, path) -> None:
    """Write a model as JSON; float serialization round-trips exactly.

    Python's shortest-repr float formatting guarantees that reading the file
    back reproduces every 64-bit value bit for bit.
    """
    text = json.dumps(_checkpoint_dict(model), indent=2, allow_nan=False)
    Path(path).write_text(text + "\n")


def _require(cond: bool, where: str) -> None:
    if not cond:
        raise CheckpointError(f"invalid checkpoint field: {where}")


def load_checkpoint(path) -> Model:
    raw = Path(path).read_text()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as e:
        raise CheckpointError(
            f"unparseable checkpoint {path}: {e.msg} at offset {e.pos}"
        ) from e
    _require(isinstance(doc, dict), "top-level object")
    _require(doc.get("format_version") == CHECKPOINT_FORMAT_VERSION, "format_version")
    _require(doc.get("loss_head") in LOSS_HEADS, "loss_head")
    _require(isinstance(doc.get("layers"), list) and doc["layers"], "layers")
    layers = []
    for i, entry in enumerate(doc["layers"]):
        where = f"layers[{i}]"
        _require(isinstance(entry, dict), where)
        for key in ("name", "kind", "shape", "weights", "bias"):
            _require(key in entry, f"{where}.{key}")
        shape = entry["shape"]
        _require(
            isinstance(shape, list) and len(shape) == 2 and all(
                isinstance(d, int) and d > 0 for d in shape
            ),
            f"{where}.shape",
        )
        weights = np.asarray(entry["weights"], dtype=np.float64)
        bias = np.asarray(entry["bias"], dtype=np.float64)
        _require(weights.size == shape[0] * shape[1], f"{where}.weights length")
        _require(bias.size == shape[1], f"{where}.bias length")
        layers.append(
            Layer(
                name=str(entry["name"]),
                kind=str(entry["kind"]),
                weight=weights.reshape(shape),
                bias=bias,
            )
        )
    return Model(layers=layers, loss_head=doc["loss_head"])

"""Uniform affine quantization, STE fine-tuning, and size accounting.

Quantization is simulated in float64 (values snap to the grid but stay in
ordinary arrays), which keeps every oracle exact. Rounding is half-to-even.
Bit widths of 32 and above mean "leave at full precision".

Bias vectors are kept at full precision throughout and are excluded from the
size accounting, so the perturbation metric and the byte counts describe the
same payload.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
import json

import numpy as np

from . import engine
from .rng import substream
from .zoo import Dataset, Model, TrainingDivergedError, evaluate

FULL_PRECISION_BITS = 32


class QuantizationError(Exception):
    pass


@dataclass(frozen=True)
class RangePolicy:
    """How clamp ranges are chosen from a tensor.

    ``clip_percentile=100`` uses the exact min/max; lower values trim the
    tails symmetrically (range from the (100-p)-th to the p-th percentile).
    """

    clip_percentile: float = 100.0

    def __post_init__(self):
        if not 50.0 < self.clip_percentile <= 100.0:
            raise QuantizationError("clip_percentile must be in (50, 100]")

    def range_of(self, values: np.ndarray) -> tuple[float, float]:
        values = np.asarray(values, dtype=np.float64)
        if self.clip_percentile >= 100.0:
            lo, hi = float(values.min()), float(values.max())
        else:
            lo = float(np.percentile(values, 100.0 - self.clip_percentile))
            hi = float(np.percentile(values, self.clip_percentile))
        if lo == hi:
            # constant tensor: widen upward so it lands exactly on grid point 0
            hi = lo + 1.0
        return lo, hi


@dataclass(frozen=True)
class QuantScheme:
    """A 2**bits point uniform grid: {q_low + j*step, j = 0 .. 2**bits - 1}.

    ``q_high`` is defined as the last grid point, so it is exact by
    construction rather than a separately stored endpoint.
    """

    bits: int
    q_low: float
    step: float

    def __post_init__(self):
        if self.bits < 1:
            raise QuantizationError("bit width must be >= 1")
        if not (self.step > 0.0 and math.isfinite(self.step)):
            raise QuantizationError(
                f"inconsistent scheme: step {self.step} is not positive"
            )

    @property
    def n_levels(self) -> int:
        return 2**self.bits

    @property
    def q_high(self) -> float:
        return self.q_low + (self.n_levels - 1) * self.step

    @classmethod
    def from_range(cls, bits: int, q_low: float, q_high: float) -> "QuantScheme":
        if bits < 1:
            raise QuantizationError("bit width must be >= 1")
        step = (q_high - q_low) / (2**bits - 1)
        return cls(bits=bits, q_low=q_low, step=step)

    @classmethod
    def for_tensor(
        cls, values: np.ndarray, bits: int, policy: RangePolicy | None = None
    ) -> "QuantScheme":
        lo, hi = (policy or RangePolicy()).range_of(values)
        return cls.from_range(bits, lo, hi)


@dataclass
class QuantizedTensor:
    scheme: QuantScheme
    indices: np.ndarray  # int64 in [0, 2**bits - 1]
    shape: tuple[int, ...]

    def dequantize(self) -> np.ndarray:
        return (self.scheme.q_low + self.indices * self.scheme.step).reshape(
            self.shape
        )


def quantize(values: np.ndarray, scheme: QuantScheme) -> QuantizedTensor:
    """Clamp to the scheme range, then round to the nearest grid index.

    ``np.rint`` implements the round-half-to-even tie rule. Quantizing a
    tensor that is already on the grid is the identity.
    """
    values = np.asarray(values, dtype=np.float64)
    clamped = np.clip(values, scheme.q_low, scheme.q_high)
    idx = np.rint((clamped - scheme.q_low) / scheme.step)
    idx = np.clip(idx, 0, scheme.n_levels - 1).astype(np.int64)
    return QuantizedTensor(scheme=scheme, indices=idx, shape=values.shape)


def quantize_values(values: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    """Convenience: quantize then dequantize (values snapped to the grid)."""
    return quantize(values, scheme).dequantize()


def perturbation_l2(weights: np.ndarray, scheme: QuantScheme) -> float:
    """Squared L2 norm of the quantization error, exactly rounded.

    Uses ``math.fsum`` so an independent recomputation of the sum matches
    bit for bit.
    """
    weights = np.asarray(weights, dtype=np.float64)
    diff = quantize_values(weights, scheme) - weights
    return math.fsum((diff * diff).ravel())


def ste_grad(
    upstream: np.ndarray, values: np.ndarray, scheme: QuantScheme
) -> np.ndarray:
    """Straight-through gradient: pass inside the clamp range, zero outside."""
    upstream = np.asarray(upstream, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if upstream.shape != values.shape:
        raise QuantizationError(
            f"gradient shape {upstream.shape} does not match values {values.shape}"
        )
    mask = (values >= scheme.q_low) & (values <= scheme.q_high)
    return upstream * mask


def ste_mask(values: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return ((values >= scheme.q_low) & (values <= scheme.q_high)).astype(np.float64)


# --------------------------------------------------------------------------
# per-model assignments
# --------------------------------------------------------------------------


@dataclass
class Assignment:
    """Per-layer weight bit widths, plus optional activation bit widths."""

    layer_bits: list[int]
    activation_bits: list[int] | None = None

    def __post_init__(self):
        if any(b < 1 for b in self.layer_bits):
            raise QuantizationError("bit widths must be >= 1")
        if self.activation_bits is not None and any(
            b < 1 for b in self.activation_bits
        ):
            raise QuantizationError("activation bit widths must be >= 1")

    def validate_for(self, model: Model) -> None:
        if len(self.layer_bits) != len(model.layers):
            raise QuantizationError(
                f"assignment has {len(self.layer_bits)} entries for "
                f"{len(model.layers)} layers"
            )
        if self.activation_bits is not None and len(self.activation_bits) != len(
            model.layers
        ):
            raise QuantizationError("activation bits must cover every layer")

    def to_json_dict(self, model: Model) -> dict:
        doc = {
            "layers": [
                {"name": layer.name, "bits": int(bits)}
                for layer, bits in zip(model.layers, self.layer_bits)
            ]
        }
        if self.activation_bits is not None:
            doc["activation_bits"] = [int(b) for b in self.activation_bits]
        return doc

    @classmethod
    def from_json_dict(cls, doc: dict) -> "Assignment":
        try:
            layer_bits = [int(entry["bits"]) for entry in doc["layers"]]
        except (KeyError, TypeError) as e:
            raise QuantizationError(f"malformed assignment document: {e}") from e
        act = doc.get("activation_bits")
        return cls(
            layer_bits=layer_bits,
            activation_bits=[int(b) for b in act] if act is not None else None,
        )


def save_assignment(assignment: Assignment, model: Model, path) -> None:
    text = json.dumps(assignment.to_json_dict(model), indent=2)
    Path(path).write_text(text + "\n")


def load_assignment(path) -> Assignment:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise QuantizationError(
            f"unparseable assignment {path}: {e.msg} at offset {e.pos}"
        ) from e
    return Assignment.from_json_dict(doc)


@dataclass
class SizeReport:
    size_bytes: int
    baseline_bytes: int

    @property
    def compression_ratio(self) -> float:
        return self.baseline_bytes / self.size_bytes


def model_size_bytes(model: Model, layer_bits) -> SizeReport:
    """Weight payload size under an assignment.

    ``ceil(sum_i n_weights_i * bits_i / 8)`` bytes; biases and the per-layer
    range parameters are excluded from the accounting.
    """
    layer_bits = list(layer_bits)
    if len(layer_bits) != len(model.layers):
        raise QuantizationError("assignment length does not match layer count")
    total_bits = sum(
        layer.n_weights * int(bits) for layer, bits in zip(model.layers, layer_bits)
    )
    baseline_bits = sum(layer.n_weights * 32 for layer in model.layers)
    return SizeReport(
        size_bytes=math.ceil(total_bits / 8),
        baseline_bytes=math.ceil(baseline_bits / 8),
    )


def quantize_model(
    model: Model, assignment: Assignment, policy: RangePolicy | None = None
) -> tuple[Model, list[QuantScheme | None]]:
    """Snap each layer's weights to its grid; biases stay untouched.

    Returns the quantized model and the per-layer schemes (None where the
    layer is kept at full precision).
    """
    assignment.validate_for(model)
    policy = policy or RangePolicy()
    out = model.copy()
    schemes: list[QuantScheme | None] = []
    for layer, bits in zip(out.layers, assignment.layer_bits):
        if bits >= FULL_PRECISION_BITS:
            schemes.append(None)
            continue
        scheme = QuantScheme.for_tensor(layer.weight, bits, policy)
        layer.weight = quantize_values(layer.weight, scheme)
        schemes.append(scheme)
    return out, schemes


def export_quantized_checkpoint(
    model: Model, schemes: list[QuantScheme | None], path
) -> None:
    """Checkpoint format plus a per-layer scheme block {k, q0, qmax}."""
    from .zoo import _checkpoint_dict

    doc = _checkpoint_dict(model)
    doc["quantization"] = [
        None
        if s is None
        else {"k": s.bits, "q0": s.q_low, "qmax": s.q_high}
        for s in schemes
    ]
    Path(path).write_text(json.dumps(doc, indent=2, allow_nan=False) + "\n")


# --------------------------------------------------------------------------
# quantization-aware fine-tuning
# --------------------------------------------------------------------------


def _calibrate_activation_schemes(
    model: Model, dataset: Dataset, activation_bits, policy: RangePolicy
) -> list[QuantScheme | None]:
    """Static activation ranges from one pass of the unquantized model."""
    schemes: list[QuantScheme | None] = [None] * len(model.layers)
    if activation_bits is None:
        return schemes
    x = dataset.inputs
    for i, layer in enumerate(model.layers):
        z = x @ layer.weight + layer.bias
        if layer.kind == "dense+relu":
            z = np.maximum(z, 0.0)
        elif layer.kind == "dense+tanh":
            z = np.tanh(z)
        if activation_bits[i] < FULL_PRECISION_BITS:
            schemes[i] = QuantScheme.for_tensor(z, activation_bits[i], policy)
        x = z
    return schemes


def _qat_loss_graph(
    model: Model,
    shadows: list[tuple[engine.Tensor, engine.Tensor]],
    batch,
    assignment: Assignment,
    act_schemes: list[QuantScheme | None],
    policy: RangePolicy,
):
    """Forward with weights quantized from their full-precision shadows.

    Weight ranges are re-derived from the current shadow values every
    forward pass; the backward rule is the straight-through estimator.
    """
    inputs, labels = batch
    x = engine.Tensor(np.atleast_2d(np.asarray(inputs, dtype=np.float64)))
    for i, layer in enumerate(model.layers):
        w_leaf, b_leaf = shadows[i]
        bits = assignment.layer_bits[i]
        if bits >= FULL_PRECISION_BITS:
            w = w_leaf
        else:
            scheme = QuantScheme.for_tensor(w_leaf.data, bits, policy)
            w = engine.straight_through(
                w_leaf,
                quantize_values(w_leaf.data, scheme),
                ste_mask(w_leaf.data, scheme),
            )
        h = engine.add(engine.matmul(x, w), b_leaf)
        if layer.kind == "dense+relu":
            h = engine.relu(h)
        elif layer.kind == "dense+tanh":
            h = engine.tanh(h)
        scheme = act_schemes[i]
        if scheme is not None:
            h = engine.straight_through(
                h, quantize_values(h.data, scheme), ste_mask(h.data, scheme)
            )
        x = h
    if model.loss_head == "mse":
        return engine.mse_loss(x, labels)
    return engine.cross_entropy_loss(x, labels)


def quantized_eval(
    model: Model,
    dataset: Dataset,
    assignment: Assignment,
    policy: RangePolicy | None = None,
    act_schemes: list[QuantScheme | None] | None = None,
) -> dict:
    """Evaluate a model under the fully simulated quantized forward pass.

    Weights are snapped per the assignment; activations are snapped with the
    given calibrated schemes (calibrated here from the model itself when not
    supplied).
    """
    policy = policy or RangePolicy()
    if act_schemes is None:
        act_schemes = _calibrate_activation_schemes(
            model, dataset, assignment.activation_bits, policy
        )
    quantized, _ = quantize_model(model, assignment, policy)
    x = dataset.inputs
    for i, layer in enumerate(quantized.layers):
        z = x @ layer.weight + layer.bias
        if layer.kind == "dense+relu":
            z = np.maximum(z, 0.0)
        elif layer.kind == "dense+tanh":
            z = np.tanh(z)
        if act_schemes[i] is not None:
            z = quantize_values(z, act_schemes[i])
        x = z
    logits = engine.Tensor(x)
    if quantized.loss_head == "mse":
        loss = engine.mse_loss(logits, dataset.labels)
    else:
        loss = engine.cross_entropy_loss(logits, dataset.labels)
    out = {"loss": float(loss.data)}
    if dataset.task == "classification":
        out["accuracy"] = float(np.mean(np.argmax(x, axis=1) == dataset.labels))
    return out


@dataclass
class QatResult:
    model: Model  # full-precision shadow weights after fine-tuning
    quantized_model: Model
    schemes: list[QuantScheme | None]
    loss_history: list[float]
    baseline: dict  # evaluation of the input model, unquantized
    quantized: dict  # evaluation after quantize(fine-tuned shadows)


def qat_finetune(
    model: Model,
    dataset: Dataset,
    assignment: Assignment,
    epochs: int = 20,
    learning_rate: float = 0.01,
    momentum: float = 0.9,
    batch_size: int | None = None,
    seed: int = 0,
    policy: RangePolicy | None = None,
) -> QatResult:
    """Fine-tune full-precision shadows under simulated quantization.

    Forward passes see quantized weights (and, when requested, activations
    quantized after the nonlinearity with ranges calibrated once up front);
    backward passes use the straight-through estimator. The returned
    evaluation is of the quantized model built from the final shadows.
    """
    assignment.validate_for(model)
    policy = policy or RangePolicy()
    baseline = evaluate(model, dataset)
    act_schemes = _calibrate_activation_schemes(
        model, dataset, assignment.activation_bits, policy
    )
    work = model.copy()
    batch_size = batch_size or min(32, len(dataset))
    shadows = [
        (engine.leaf(l.weight), engine.leaf(l.bias)) for l in work.layers
    ]
    velocity = [
        (np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in work.layers
    ]
    history: list[float] = []
    n = len(dataset)
    for epoch in range(epochs):
        perm = substream(seed, "qat-shuffle", epoch).permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            try:
                loss = _qat_loss_graph(
                    work, shadows, dataset.subset(idx), assignment, act_schemes, policy
                )
                flat = [t for pair in shadows for t in pair]
                grads = engine.backward(loss, flat)
            except (engine.NumericalError, QuantizationError) as e:
                raise TrainingDivergedError(
                    f"fine-tuning diverged at epoch {epoch}: {e}", history
                ) from e
            new_shadows = []
            for i, ((w_leaf, b_leaf), (vw, vb)) in enumerate(zip(shadows, velocity)):
                gw, gb = grads[2 * i].data, grads[2 * i + 1].data
                vw *= momentum
                vw -= learning_rate * gw
                vb *= momentum
                vb -= learning_rate * gb
                new_shadows.append(
                    (engine.leaf(w_leaf.data + vw), engine.leaf(b_leaf.data + vb))
                )
            shadows = new_shadows
        epoch_loss = _qat_loss_graph(
            work, shadows, dataset.batch(), assignment, act_schemes, policy
        )
        value = float(epoch_loss.data)
        if not math.isfinite(value):
            raise TrainingDivergedError(
                f"fine-tuning diverged at epoch {epoch}", history
            )
        history.append(value)
    for layer, (w_leaf, b_leaf) in zip(work.layers, shadows):
        layer.weight = w_leaf.data.copy()
        layer.bias = b_leaf.data.copy()
    quantized_model, schemes = quantize_model(work, assignment, policy)
    quantized = quantized_eval(
        work, dataset, assignment, policy, act_schemes=act_schemes
    )
    return QatResult(
        model=work,
        quantized_model=quantized_model,
        schemes=schemes,
        loss_history=history,
        baseline=baseline,
        quantized=quantized,
    )

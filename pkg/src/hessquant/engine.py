"""Dense-tensor reverse-mode autodiff with exact Hessian-vector products.

The graph is functional: ``backward`` returns gradients as new graph nodes
built from the same primitive ops, so differentiating a gradient expression a
second time (reverse-on-reverse) yields exact Hessian-vector products up to
floating-point roundoff. All data is float64; every public entry point checks
its output for NaN/Inf.

Conventions fixed here and relied on by the rest of the package:

* losses are means over the batch (squared error sums over output features),
* ReLU uses the subgradient 0 at the kink and its second derivative is 0
  everywhere,
* each evaluation builds its own graph, so concurrent evaluations never share
  mutable state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np

from .rng import substream

if TYPE_CHECKING:  # pragma: no cover
    from .zoo import Model


class EngineError(Exception):
    """Base class for autodiff failures."""


class ShapeMismatchError(EngineError):
    """Operand shapes do not compose; the message names the offending site."""


class NumericalError(EngineError):
    """A public operation produced NaN/Inf from finite inputs."""


# --------------------------------------------------------------------------
# graph nodes
# --------------------------------------------------------------------------


class Tensor:
    """One node of a computation graph holding a float64 ndarray.

    Leaves are created with ``requires_grad=True``; interior nodes carry a
    ``vjp`` closure mapping the output cotangent to one cotangent per parent.
    The closures build their results out of these same ops, which is what
    makes second-order differentiation exact.
    """

    __slots__ = ("data", "parents", "vjp", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, parents=(), vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = tuple(parents)
        self.vjp = vjp
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in self.parents
        )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; constants are wrapped on the fly
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """A non-differentiable graph node."""
    return Tensor(x)


def leaf(x) -> Tensor:
    """A differentiable leaf node."""
    return Tensor(x, requires_grad=True)


def stop_gradient(x: Tensor) -> Tensor:
    """Detach ``x`` from the graph (same data, no gradient path)."""
    return Tensor(x.data)


# --------------------------------------------------------------------------
# primitive ops
# --------------------------------------------------------------------------


def _sum_to(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcast cotangent back to the original operand shape."""
    if t.shape == tuple(shape):
        return t
    lead = t.ndim - len(shape)
    if lead > 0:
        t = tsum(t, axis=tuple(range(lead)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and t.shape[i] != 1)
    if axes:
        t = tsum(t, axis=axes, keepdims=True)
    return t


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data, parents=(a, b))
    out.vjp = lambda g: (_sum_to(g, a.shape), _sum_to(g, b.shape))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data, parents=(a, b))
    out.vjp = lambda g: (_sum_to(g, a.shape), _sum_to(neg(g), b.shape))
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, parents=(a,))
    out.vjp = lambda g: (neg(g),)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data, parents=(a, b))
    out.vjp = lambda g: (_sum_to(mul(g, b), a.shape), _sum_to(mul(g, a), b.shape))
    return out


def reciprocal(a: Tensor) -> Tensor:
    out = Tensor(1.0 / a.data, parents=(a,))
    out.vjp = lambda g: (neg(mul(g, mul(out, out))),)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(
            f"matmul: cannot multiply {a.shape} by {b.shape}"
        )
    out = Tensor(a.data @ b.data, parents=(a, b))
    out.vjp = lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g))
    return out


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeMismatchError(f"transpose expects a matrix, got {a.shape}")
    out = Tensor(a.data.T, parents=(a,))
    out.vjp = lambda g: (transpose(g),)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), parents=(a,))
    out.vjp = lambda g: (reshape(g, a.shape),)
    return out


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = Tensor(np.broadcast_to(a.data, shape), parents=(a,))
    out.vjp = lambda g: (_sum_to(g, a.shape),)
    return out


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(np.sum(a.data, axis=axis, keepdims=keepdims), parents=(a,))

    def vjp(g: Tensor):
        if axis is None:
            return (broadcast_to(reshape(g, (1,) * a.ndim), a.shape),)
        if not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            kept = list(a.shape)
            for ax in axes:
                kept[ax % a.ndim] = 1
            g = reshape(g, tuple(kept))
        return (broadcast_to(g, a.shape),)

    out.vjp = vjp
    return out


def relu(a: Tensor) -> Tensor:
    # derivative 0 at the kink (subgradient convention); second derivative 0
    mask = Tensor((a.data > 0).astype(np.float64))
    out = Tensor(np.maximum(a.data, 0.0), parents=(a,))
    out.vjp = lambda g: (mul(g, mask),)
    return out


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.data), parents=(a,))
    out.vjp = lambda g: (mul(g, sub(Tensor(1.0), mul(out, out))),)
    return out


def exp(a: Tensor) -> Tensor:
    out = Tensor(np.exp(a.data), parents=(a,))
    out.vjp = lambda g: (mul(g, out),)
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data), parents=(a,))
    out.vjp = lambda g: (mul(g, reciprocal(a)),)
    return out


def straight_through(a: Tensor, values: np.ndarray, grad_mask: np.ndarray) -> Tensor:
    """Forward ``values``; backward passes the cotangent through ``grad_mask``.

    The mask is treated as constant, so second derivatives through this node
    are zero. This is the hook the quantizer uses for simulated quantization.
    """
    if values.shape != a.shape or grad_mask.shape != a.shape:
        raise ShapeMismatchError("straight_through: value/mask shape mismatch")
    mask = Tensor(np.asarray(grad_mask, dtype=np.float64))
    out = Tensor(values, parents=(a,))
    out.vjp = lambda g: (mul(g, mask),)
    return out


# --------------------------------------------------------------------------
# backward pass
# --------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order over the differentiable subgraph (parents first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(output: Tensor, wrt: Sequence[Tensor]) -> list[Tensor]:
    """Gradients of a scalar ``output`` w.r.t. each tensor in ``wrt``.

    The returned tensors are graph nodes, so they can be differentiated
    again. Leaves not reached by the sweep get zero gradients.
    """
    if output.size != 1:
        raise ShapeMismatchError(
            f"backward expects a scalar output, got shape {output.shape}"
        )
    grads: dict[int, Tensor] = {id(output): Tensor(np.ones_like(output.data))}
    for node in reversed(_topo_order(output)):
        g = grads.get(id(node))
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            held = grads.get(id(parent))
            grads[id(parent)] = pg if held is None else add(held, pg)
    out = []
    for w in wrt:
        g = grads.get(id(w))
        out.append(g if g is not None else Tensor(np.zeros_like(w.data)))
    return out


# --------------------------------------------------------------------------
# model forward / losses
# --------------------------------------------------------------------------


def _layer_apply(x: Tensor, weight: Tensor, bias: Tensor, kind: str) -> Tensor:
    z = add(matmul(x, weight), bias)
    if kind == "dense":
        return z
    if kind == "dense+relu":
        return relu(z)
    if kind == "dense+tanh":
        return tanh(z)
    raise ValueError(f"unknown layer kind {kind!r}")


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Squared error summed over outputs, averaged over the batch."""
    target = np.asarray(target, dtype=np.float64)
    if target.ndim == 1:
        target = target.reshape(-1, 1)
    if pred.shape != target.shape:
        raise ShapeMismatchError(
            f"mse: prediction {pred.shape} vs target {target.shape}"
        )
    diff = sub(pred, Tensor(target))
    n_batch = pred.shape[0]
    return mul(tsum(mul(diff, diff)), Tensor(1.0 / n_batch))


def cross_entropy_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Softmax cross-entropy, averaged over the batch.

    Uses the standard constant max shift for the log-sum-exp; the shift is a
    detached node, so derivatives of any order stay exact.
    """
    labels = np.asarray(labels)
    n_batch, n_classes = logits.shape
    if labels.shape != (n_batch,):
        raise ShapeMismatchError(
            f"cross-entropy: labels {labels.shape} vs batch {n_batch}"
        )
    shift = Tensor(np.max(logits.data, axis=1, keepdims=True))
    z = sub(logits, shift)
    lse = add(log(tsum(exp(z), axis=1, keepdims=True)), shift)
    onehot = np.zeros((n_batch, n_classes))
    onehot[np.arange(n_batch), labels.astype(int)] = 1.0
    picked = tsum(mul(logits, Tensor(onehot)), axis=1, keepdims=True)
    return mul(tsum(sub(lse, picked)), Tensor(1.0 / n_batch))


def _head_loss(pred: Tensor, labels: np.ndarray, loss_head: str) -> Tensor:
    if loss_head == "mse":
        return mse_loss(pred, labels)
    if loss_head == "cross_entropy":
        return cross_entropy_loss(pred, labels)
    raise ValueError(f"unknown loss head {loss_head!r}")


def _check_inputs(model: "Model", inputs: np.ndarray) -> np.ndarray:
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if inputs.shape[0] == 0:
        raise ShapeMismatchError("empty batch")
    expected = model.layers[0].weight.shape[0]
    if inputs.shape[1] != expected:
        raise ShapeMismatchError(
            f"layer {model.layers[0].name!r} expects {expected} input features, "
            f"got {inputs.shape[1]}"
        )
    return inputs


def _resolve_blocks(model: "Model", block) -> list[int]:
    n_layers = len(model.layers)
    if block == "all":
        return list(range(n_layers))
    idx = int(block)
    if not 0 <= idx < n_layers:
        raise IndexError(f"block index {idx} out of range for {n_layers} layers")
    return [idx]


def _loss_graph(model: "Model", batch, grad_layers: Sequence[int]):
    """Build the loss graph; returns (loss, per-layer (weight, bias) leaves)."""
    inputs, labels = batch
    inputs = _check_inputs(model, inputs)
    grad_set = set(grad_layers)
    x = Tensor(inputs)
    leaves: dict[int, tuple[Tensor, Tensor]] = {}
    for i, layer in enumerate(model.layers):
        if i in grad_set:
            w, b = leaf(layer.weight), leaf(layer.bias)
            leaves[i] = (w, b)
        else:
            w, b = Tensor(layer.weight), Tensor(layer.bias)
        x = _layer_apply(x, w, b, layer.kind)
    loss = _head_loss(x, labels, model.loss_head)
    return loss, leaves


def _ensure_finite(arr: np.ndarray, context: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{context} produced non-finite values")
    return arr


def eval_loss(model: "Model", batch) -> float:
    """Mean per-example loss of ``model`` on ``batch = (inputs, labels)``."""
    loss, _ = _loss_graph(model, batch, grad_layers=())
    return float(_ensure_finite(loss.data, "eval_loss"))


def forward_logits(model: "Model", inputs: np.ndarray) -> np.ndarray:
    """Network outputs with no gradient bookkeeping."""
    x = Tensor(_check_inputs(model, inputs))
    for layer in model.layers:
        x = _layer_apply(x, Tensor(layer.weight), Tensor(layer.bias), layer.kind)
    return _ensure_finite(x.data, "forward")


def _flatten(parts: Sequence[Tensor]) -> np.ndarray:
    return np.concatenate([p.data.ravel() for p in parts])


def grad_per_layer(model: "Model", batch) -> list[tuple[np.ndarray, np.ndarray]]:
    """Loss gradient per layer as (weight grad, bias grad) arrays."""
    all_layers = range(len(model.layers))
    loss, leaves = _loss_graph(model, batch, grad_layers=all_layers)
    flat = [t for i in all_layers for t in leaves[i]]
    gs = backward(loss, flat)
    out = []
    for i in all_layers:
        gw, gb = gs[2 * i], gs[2 * i + 1]
        out.append(
            (
                _ensure_finite(gw.data, "grad"),
                _ensure_finite(gb.data, "grad"),
            )
        )
    return out


def grad(model: "Model", batch, block="all") -> np.ndarray:
    """Flat loss gradient over one layer block (or every parameter)."""
    blocks = _resolve_blocks(model, block)
    loss, leaves = _loss_graph(model, batch, grad_layers=blocks)
    parts = [t for i in blocks for t in leaves[i]]
    gs = backward(loss, parts)
    return _ensure_finite(_flatten(gs), "grad")


def block_dim(model: "Model", block) -> int:
    return sum(model.layers[i].n_params for i in _resolve_blocks(model, block))


def _split_like(v: np.ndarray, parts: Sequence[Tensor]) -> list[Tensor]:
    chunks = []
    offset = 0
    for p in parts:
        n = p.size
        chunks.append(Tensor(v[offset : offset + n].reshape(p.shape)))
        offset += n
    return chunks


def hvp_weights(model: "Model", batch, block, v: np.ndarray) -> np.ndarray:
    """Hessian-vector product over a layer block via double backward.

    The Hessian is that of the batch-mean loss w.r.t. the block's weights and
    bias jointly, flattened in (weight, bias) order.
    """
    blocks = _resolve_blocks(model, block)
    v = np.asarray(v, dtype=np.float64).ravel()
    dim = sum(model.layers[i].n_params for i in blocks)
    if v.size != dim:
        raise ShapeMismatchError(
            f"direction has {v.size} entries, block has {dim} parameters"
        )
    loss, leaves = _loss_graph(model, batch, grad_layers=blocks)
    parts = [t for i in blocks for t in leaves[i]]
    gs = backward(loss, parts)
    v_parts = _split_like(v, parts)
    dot = None
    for g, vc in zip(gs, v_parts):
        term = tsum(mul(g, vc))
        dot = term if dot is None else add(dot, term)
    hs = backward(dot, parts)
    return _ensure_finite(_flatten(hs), "hvp")


def weight_hvp_oracle(model: "Model", batch, block) -> tuple[Callable[[np.ndarray], np.ndarray], int]:
    """Matrix-free Hessian operator for a layer block: ``(oracle, dim)``."""
    dim = block_dim(model, block)
    return (lambda v: hvp_weights(model, batch, block, v)), dim


def _activation_loss_graph(model: "Model", inputs: np.ndarray, labels, layer: int):
    """Loss graph with layer ``layer``'s output replaced by a leaf."""
    n_layers = len(model.layers)
    if not 0 <= layer < n_layers:
        raise IndexError(
            f"layer {layer} has no activation output (model has {n_layers} layers)"
        )
    x = Tensor(_check_inputs(model, inputs))
    for i in range(layer + 1):
        lay = model.layers[i]
        x = _layer_apply(x, Tensor(lay.weight), Tensor(lay.bias), lay.kind)
    act = leaf(x.data)
    h = act
    for i in range(layer + 1, n_layers):
        lay = model.layers[i]
        h = _layer_apply(h, Tensor(lay.weight), Tensor(lay.bias), lay.kind)
    return _head_loss(h, labels, model.loss_head), act


def hvp_activations(model: "Model", example, layer: int, v: np.ndarray) -> np.ndarray:
    """Hessian-vector product w.r.t. one input's post-layer activation.

    The Hessian is taken for the single example alone (a batch of one), with
    the activation treated as a differentiable leaf and all weights held
    constant.
    """
    x, y = example
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] != 1:
        raise ShapeMismatchError("hvp_activations expects exactly one input")
    labels = np.asarray(y).reshape(1, -1) if model.loss_head == "mse" else np.asarray(y).reshape(1)
    loss, act = _activation_loss_graph(model, x, labels, layer)
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size != act.size:
        raise ShapeMismatchError(
            f"direction has {v.size} entries, activation has {act.size}"
        )
    (g,) = backward(loss, [act])
    dot = tsum(mul(g, Tensor(v.reshape(act.shape))))
    (h,) = backward(dot, [act])
    return _ensure_finite(h.data.ravel(), "hvp_activations")


def activation_hvp_oracle(model: "Model", example, layer: int):
    """Matrix-free single-input activation Hessian operator: ``(oracle, dim)``."""
    x, _ = example
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    dim = activation_dim(model, layer)
    return (lambda v: hvp_activations(model, example, layer, v)), dim


def batch_activation_hvp_oracle(model: "Model", batch, layer: int):
    """Hessian operator w.r.t. the concatenated activations of a whole batch.

    The underlying matrix is block-diagonal with one block per input because
    examples do not interact; this oracle exposes the concatenated operator
    directly so that structure can be verified rather than assumed.
    """
    inputs, labels = batch
    inputs = _check_inputs(model, inputs)
    labels = np.asarray(labels)
    n_batch = inputs.shape[0]
    dim = n_batch * activation_dim(model, layer)

    def oracle(v: np.ndarray) -> np.ndarray:
        vv = np.asarray(v, dtype=np.float64).ravel()
        if vv.size != dim:
            raise ShapeMismatchError(
                f"direction has {vv.size} entries, expected {dim}"
            )
        loss, act = _activation_loss_graph(model, inputs, labels, layer)
        (g,) = backward(loss, [act])
        dot = tsum(mul(g, Tensor(vv.reshape(act.shape))))
        (h,) = backward(dot, [act])
        return _ensure_finite(h.data.ravel(), "hvp_activations")

    return oracle, dim


def activation_dim(model: "Model", layer: int) -> int:
    if not 0 <= layer < len(model.layers):
        raise IndexError(f"layer {layer} has no activation output")
    return model.layers[layer].weight.shape[1]


# --------------------------------------------------------------------------
# spectral helpers
# --------------------------------------------------------------------------


@dataclass
class EigenResult:
    value: float
    vector: np.ndarray
    converged: bool
    iterations: int
    residual: float


def top_eigenpair(
    oracle: Callable[[np.ndarray], np.ndarray],
    dim: int,
    max_iters: int = 5000,
    tol: float = 1e-9,
    seed: int = 0,
) -> EigenResult:
    """Dominant eigenpair of a symmetric operator by power iteration.

    Starts from a fixed-seed unit Gaussian vector for reproducibility. The
    residual reported is ``|Hv - lambda v| / max(|lambda|, tiny)``; a zero
    operator returns eigenvalue 0 with the converged flag set.
    """
    if dim < 1:
        raise ValueError("operator dimension must be >= 1")
    rng = substream(seed, "power-iteration")
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    lam = 0.0
    residual = np.inf
    for it in range(1, max_iters + 1):
        hv = np.asarray(oracle(v), dtype=np.float64)
        norm_hv = np.linalg.norm(hv)
        if norm_hv == 0.0:
            return EigenResult(0.0, v, True, it, 0.0)
        lam = float(v @ hv)
        residual = float(np.linalg.norm(hv - lam * v) / max(abs(lam), 1e-300))
        if residual <= tol:
            return EigenResult(lam, v, True, it, residual)
        v = hv / norm_hv
    return EigenResult(lam, v, False, max_iters, residual)


def deflate(
    oracle: Callable[[np.ndarray], np.ndarray], value: float, vector: np.ndarray
) -> Callable[[np.ndarray], np.ndarray]:
    """Subtract a known eigenpair's rank-one term from an operator."""
    vec = np.asarray(vector, dtype=np.float64)

    def deflated(v: np.ndarray) -> np.ndarray:
        return np.asarray(oracle(v), dtype=np.float64) - value * (vec @ v) * vec

    return deflated


def dense_from_oracle(
    oracle: Callable[[np.ndarray], np.ndarray], dim: int
) -> np.ndarray:
    """Assemble the dense matrix column by column from unit probes."""
    cols = np.empty((dim, dim))
    e = np.zeros(dim)
    for k in range(dim):
        e[k] = 1.0
        cols[:, k] = oracle(e)
        e[k] = 0.0
    return cols

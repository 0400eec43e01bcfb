"""Independent oracles the tests check the library against.

Everything here is deliberately written from scratch against the math
(finite differences, dense linear algebra, brute-force enumeration) and
never calls the code paths under test.
"""

from __future__ import annotations

import numpy as np

from hessquant import engine
from hessquant.zoo import Dataset, Layer, Model


def loss_at_params(model: Model, batch, theta: np.ndarray) -> float:
    m = model.copy()
    offset = 0
    for i, layer in enumerate(m.layers):
        n = layer.n_params
        m.set_layer_params(i, theta[offset : offset + n])
        offset += n
    return engine.eval_loss(m, batch)


def fd_gradient(model: Model, batch, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient over every parameter."""
    theta = model.flat_params()
    grad = np.empty_like(theta)
    for k in range(theta.size):
        hi = theta.copy()
        hi[k] += eps
        lo = theta.copy()
        lo[k] -= eps
        grad[k] = (loss_at_params(model, batch, hi) - loss_at_params(model, batch, lo)) / (
            2 * eps
        )
    return grad


def grad_at_block(model: Model, batch, block: int, delta: np.ndarray) -> np.ndarray:
    m = model.copy()
    base = np.concatenate(
        [m.layers[block].weight.ravel(), m.layers[block].bias.ravel()]
    )
    m.set_layer_params(block, base + delta)
    return engine.grad(m, batch, block)


def fd_hvp(model: Model, batch, block: int, v: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Symmetric difference of the analytic gradient along v."""
    return (grad_at_block(model, batch, block, eps * v) - grad_at_block(model, batch, block, -eps * v)) / (2 * eps)


def fd_hessian(model: Model, batch, block: int, eps: float = 1e-4) -> np.ndarray:
    """Dense Hessian of one block from finite differences of the gradient."""
    dim = model.layers[block].n_params
    h = np.empty((dim, dim))
    e = np.zeros(dim)
    for k in range(dim):
        e[k] = eps
        h[:, k] = (grad_at_block(model, batch, block, e) - grad_at_block(model, batch, block, -e)) / (
            2 * eps
        )
        e[k] = 0.0
    return 0.5 * (h + h.T)


# --------------------------------------------------------------------------
# deep-linear construction with closed-form per-layer Hessians
# --------------------------------------------------------------------------


def deep_linear_model(
    dims: list[int], seed: int = 0, identity_layers: tuple[int, ...] = ()
) -> tuple[Model, Dataset]:
    """A bias-free-in-values deep linear model at an exact global minimum.

    Targets are defined as the model's own outputs, so the residual (and the
    full gradient) is exactly zero while the per-layer Hessians stay
    nonzero. Layers listed in ``identity_layers`` get identity weights (they
    must be square), making their Hessian blocks equal by symmetry.
    """
    rng = np.random.default_rng(seed)
    layers = []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        if i in identity_layers:
            if fan_in != fan_out:
                raise ValueError("identity layers must be square")
            weight = np.eye(fan_in)
        else:
            weight = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
        layers.append(
            Layer(name=f"lin{i + 1}", kind="dense", weight=weight, bias=np.zeros(fan_out))
        )
    model = Model(layers=layers, loss_head="mse")
    inputs = rng.standard_normal((3 * dims[0], dims[0]))
    targets = engine.forward_logits(model, inputs)
    return model, Dataset(inputs=inputs, labels=targets, task="regression")


def deep_linear_block_trace(model: Model, dataset: Dataset, block: int) -> float:
    """Closed-form trace of one layer's (weight, bias) Hessian block.

    For predictions ((A W + 1 b') D + C) under batch-mean summed-square
    error, the block Hessian is (2/B) [A, 1]'[A, 1] kron D D', whose trace
    is (2/B) (||A||_F^2 + B) ||D||_F^2.
    """
    a = dataset.inputs
    for layer in model.layers[:block]:
        a = a @ layer.weight + layer.bias
    d = np.eye(model.layers[-1].weight.shape[1])
    for layer in reversed(model.layers[block + 1 :]):
        d = layer.weight @ d
    n_batch = a.shape[0]
    return 2.0 / n_batch * (np.sum(a * a) + n_batch) * np.sum(d * d)


# --------------------------------------------------------------------------
# hand-rolled suffix network (for activation-Hessian finite differences)
# --------------------------------------------------------------------------


def suffix_grad(model: Model, layer: int, a_value: np.ndarray, label) -> np.ndarray:
    """Analytic gradient of the single-example loss w.r.t. a chosen
    activation, written directly in numpy (no autodiff)."""
    a_value = np.atleast_2d(a_value)
    hs = [a_value]
    for lay in model.layers[layer + 1 :]:
        z = hs[-1] @ lay.weight + lay.bias
        if lay.kind == "dense+relu":
            z = np.maximum(z, 0.0)
        elif lay.kind == "dense+tanh":
            z = np.tanh(z)
        hs.append(z)
    out = hs[-1]
    if model.loss_head == "mse":
        target = np.atleast_2d(np.asarray(label, dtype=np.float64))
        dh = 2.0 * (out - target)
    else:
        shifted = out - out.max(axis=1, keepdims=True)
        p = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
        onehot = np.zeros_like(p)
        onehot[0, int(label)] = 1.0
        dh = p - onehot
    for lay, h_in, h_out in zip(
        reversed(model.layers[layer + 1 :]), reversed(hs[:-1]), reversed(hs[1:])
    ):
        if lay.kind == "dense+relu":
            dh = dh * (h_out > 0)
        elif lay.kind == "dense+tanh":
            dh = dh * (1.0 - h_out * h_out)
        dh = dh @ lay.weight.T
    return dh.ravel()


def fd_activation_hvp(
    model: Model, layer: int, a_value: np.ndarray, label, v: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    a_value = np.atleast_2d(a_value)
    shaped = v.reshape(a_value.shape)
    return (
        suffix_grad(model, layer, a_value + eps * shaped, label)
        - suffix_grad(model, layer, a_value - eps * shaped, label)
    ) / (2 * eps)


def partial_forward(model: Model, x: np.ndarray, upto_layer: int) -> np.ndarray:
    """Activation after ``upto_layer`` (inclusive), plain numpy."""
    h = np.atleast_2d(x)
    for lay in model.layers[: upto_layer + 1]:
        z = h @ lay.weight + lay.bias
        if lay.kind == "dense+relu":
            z = np.maximum(z, 0.0)
        elif lay.kind == "dense+tanh":
            z = np.tanh(z)
        h = z
    return h


# --------------------------------------------------------------------------
# brute-force planner oracles
# --------------------------------------------------------------------------


def all_assignments(n_layers: int, menu: list[int]):
    """Every bit vector in menu^n_layers."""
    if n_layers == 0:
        yield ()
        return
    for rest in all_assignments(n_layers - 1, menu):
        for b in menu:
            yield (b, *rest)


def brute_force_admissible(traces, menu) -> set[tuple[int, ...]]:
    """Filter the full cross product by the pairwise ordering predicate."""
    out = set()
    for bits in all_assignments(len(traces), list(menu)):
        ok = True
        for i in range(len(traces)):
            for j in range(len(traces)):
                if traces[i] > traces[j] and bits[i] < bits[j]:
                    ok = False
        if ok:
            out.add(bits)
    return out


def brute_force_dominated(points: list[tuple[int, float]]) -> list[bool]:
    """Quadratic-time dominance flags over (size, omega) pairs."""
    flags = []
    for i, (si, oi) in enumerate(points):
        dominated = False
        for j, (sj, oj) in enumerate(points):
            if j == i:
                continue
            if sj <= si and oj <= oi and (sj < si or oj < oi):
                dominated = True
                break
        flags.append(dominated)
    return flags

import numpy as np
import pytest

from hessquant import zoo


@pytest.fixture(scope="session")
def blob_dataset() -> zoo.Dataset:
    return zoo.make_synthetic("gaussian-blobs", 96, 4, 3, seed=11)


@pytest.fixture(scope="session")
def tiny_mlp() -> zoo.Model:
    # 4 -> 6 -> 5 -> 3, tanh hiddens: 30+35+18 = 83 parameters
    return zoo.init_mlp([4, 6, 5, 3], activation="tanh", loss_head="cross_entropy", seed=7)


@pytest.fixture(scope="session")
def interpolated_regression() -> tuple[zoo.Model, zoo.Dataset]:
    """A nonlinear MSE model at an exact global minimum.

    Targets are the model's own outputs, so the gradient is zero to machine
    precision while the curvature (the Gauss-Newton term) stays generic.
    """
    from hessquant import engine

    model = zoo.init_mlp([4, 8, 6, 2], activation="tanh", loss_head="mse", seed=5)
    rng = np.random.default_rng(3)
    inputs = rng.standard_normal((64, 4))
    targets = engine.forward_logits(model, inputs)
    dataset = zoo.Dataset(inputs=inputs, labels=targets, task="regression")
    result = zoo.train_sgd(
        model,
        dataset,
        zoo.TrainConfig(learning_rate=0.01, epochs=50, batch_size=64, seed=9, grad_tol=1e-9),
    )
    assert result.converged
    return result.model, dataset


@pytest.fixture(scope="session")
def wide_interpolated() -> tuple[zoo.Model, zoo.Dataset]:
    """Interpolation minimum with larger layer blocks (168/500/63 params)."""
    from hessquant import engine

    model = zoo.init_mlp([6, 24, 20, 3], activation="tanh", loss_head="mse", seed=5)
    rng = np.random.default_rng(3)
    inputs = rng.standard_normal((64, 6))
    targets = engine.forward_logits(model, inputs)
    return model, zoo.Dataset(inputs=inputs, labels=targets, task="regression")


@pytest.fixture(scope="session")
def trained_classifier(blob_dataset) -> zoo.Model:
    model = zoo.init_mlp([4, 8, 6, 3], activation="tanh", loss_head="cross_entropy", seed=2)
    config = zoo.TrainConfig(
        learning_rate=0.05, momentum=0.9, epochs=250, batch_size=32, seed=4,
        grad_tol=1e-4,
    )
    return zoo.train_sgd(model, blob_dataset, config).model


@pytest.fixture(scope="session")
def demo_trained() -> tuple[zoo.Model, zoo.Dataset]:
    """Trained classifier with a wide per-layer sensitivity spread.

    Average traces fall roughly 9x from the first to the last layer, which
    is what the planner experiments need to be meaningful.
    """
    dataset = zoo.make_synthetic("gaussian-blobs", 192, 6, 3, seed=0, separation=2.0)
    model = zoo.init_mlp(
        [6, 16, 12, 8, 3], activation="tanh", loss_head="cross_entropy", seed=0
    )
    result = zoo.train_sgd(
        model,
        dataset,
        zoo.TrainConfig(learning_rate=0.05, momentum=0.9, epochs=400, batch_size=32, seed=0),
    )
    return result.model, dataset


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))

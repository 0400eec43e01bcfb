"""Empirical checks connecting curvature statistics to quantization damage.

Three harnesses:

* ``perturbation_ordering_check``: perturb two layers by equal-norm mixes of
  their Hessian eigenvectors and compare the loss increases against the
  average-trace ordering. On quadratic losses the comparison is a theorem
  (loss increase = norm^2/2 * average trace, Taylor remainder zero); on
  trained nonlinear models it is a statistical observation, reported rather
  than asserted.
* ``quadratic_sensitivity_demo``: two quadratics with identical top Hessian
  eigenvalue but very different traces, showing why the top eigenvalue alone
  misranks sensitivity.
* ``loss_landscape_grid``: the loss surface over the span of a layer's top
  two Hessian eigenvectors, emitted as CSV for plotting.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .quantizer import QuantScheme, RangePolicy, quantize_values
from .trace import ProbeConfig, TraceEstimate, hutchinson_trace
from .zoo import Dataset, Model


class AnalysisError(Exception):
    pass


class NotConvergedError(AnalysisError):
    """The model is not close enough to a minimum for a curvature study."""


# --------------------------------------------------------------------------
# eigen machinery shared by the harnesses
# --------------------------------------------------------------------------

DENSE_LIMIT = 500  # blocks up to this many parameters get exact eigenpairs


def _block_eigensystem(
    model: Model, dataset: Dataset, layer: int, top_r: int, seed: int
) -> tuple[np.ndarray, np.ndarray, bool]:
    """Eigenvalues/eigenvectors of one layer's Hessian block.

    Blocks up to DENSE_LIMIT parameters are assembled densely and solved
    exactly; larger blocks fall back to ``top_r`` power-iteration pairs
    (flagged as approximate).
    """
    oracle, dim = engine.weight_hvp_oracle(model, dataset.batch(), layer)
    if dim <= DENSE_LIMIT:
        dense = engine.dense_from_oracle(oracle, dim)
        values, vectors = np.linalg.eigh(dense)
        return values, vectors, False
    values = []
    vectors = []
    work = oracle
    for k in range(min(top_r, dim)):
        pair = engine.top_eigenpair(work, dim, seed=seed + k)
        values.append(pair.value)
        vectors.append(pair.vector)
        work = engine.deflate(work, pair.value, pair.vector)
    return np.asarray(values), np.column_stack(vectors), True


def _perturbed_loss(
    model: Model, dataset: Dataset, layer: int, delta: np.ndarray
) -> float:
    perturbed = model.copy()
    flat = np.concatenate(
        [perturbed.layers[layer].weight.ravel(), perturbed.layers[layer].bias.ravel()]
    )
    perturbed.set_layer_params(layer, flat + delta)
    return engine.eval_loss(perturbed, dataset.batch())


# --------------------------------------------------------------------------
# equal-norm eigen-mix perturbation comparison
# --------------------------------------------------------------------------


@dataclass
class LayerPerturbation:
    layer_index: int
    n_params: int
    # mean eigenvalue over the eigenvectors actually mixed; equals the
    # average Hessian trace whenever the basis is complete (dense path)
    avg_trace: float
    alpha: float  # per-eigenvector coefficient of the mix
    delta_norm: float
    loss_increase: float
    predicted_increase: float  # norm^2/2 * avg_trace, exact on quadratics
    approximate_eigenbasis: bool
    quant_loss_increase: float | None = None  # quantization-shaped comparison


@dataclass
class PerturbationOrderingReport:
    base_loss: float
    norm: float
    first: LayerPerturbation
    second: LayerPerturbation
    ordering_consistent: bool
    notes: list[str] = field(default_factory=list)


def perturbation_ordering_check(
    model: Model,
    dataset: Dataset,
    layer_i: int,
    layer_j: int,
    perturbation_norm: float,
    grad_tol: float = 1e-3,
    top_r: int = 8,
    seed: int = 0,
    quant_bits: int | None = None,
) -> PerturbationOrderingReport:
    """Compare equal-norm curvature-aligned perturbations of two layers.

    Each layer is perturbed by the uniform mix of its Hessian eigenvectors,
    scaled so both perturbations have L2 norm ``perturbation_norm`` (the
    per-eigenvector coefficient is therefore norm/sqrt(n)). The report says
    whether the lower-average-trace layer indeed suffered the smaller (or
    equal) loss increase.

    Refuses to run on models away from a minimum, since the comparison rests
    on a vanishing gradient term. With ``quant_bits`` set, the loss increase
    along the actual quantization error direction Q(W) - W (rescaled to the
    same norm) is reported as well, without any ordering claim.
    """
    from .zoo import full_grad_norm

    gnorm = full_grad_norm(model, dataset)
    if gnorm > grad_tol:
        raise NotConvergedError(
            f"full-batch gradient norm {gnorm:.3e} exceeds {grad_tol:.1e}; "
            "train to a minimum before running the perturbation comparison"
        )
    base_loss = engine.eval_loss(model, dataset.batch())
    sides = []
    for layer in (layer_i, layer_j):
        values, vectors, approximate = _block_eigensystem(
            model, dataset, layer, top_r, seed
        )
        n = model.layers[layer].n_params
        mix = vectors.sum(axis=1)
        mix *= perturbation_norm / np.linalg.norm(mix)
        alpha = perturbation_norm / math.sqrt(vectors.shape[1])
        avg_trace = float(values.sum() / n) if not approximate else float(
            values.sum() / len(values)
        )
        increase = _perturbed_loss(model, dataset, layer, mix) - base_loss
        quant_increase = None
        if quant_bits is not None:
            weight = model.layers[layer].weight
            scheme = QuantScheme.for_tensor(weight, quant_bits, RangePolicy())
            err = quantize_values(weight, scheme) - weight
            direction = np.concatenate(
                [err.ravel(), np.zeros(model.layers[layer].bias.size)]
            )
            norm_err = np.linalg.norm(direction)
            if norm_err > 0:
                direction *= perturbation_norm / norm_err
                quant_increase = (
                    _perturbed_loss(model, dataset, layer, direction) - base_loss
                )
        sides.append(
            LayerPerturbation(
                layer_index=layer,
                n_params=n,
                avg_trace=avg_trace,
                alpha=alpha,
                delta_norm=float(np.linalg.norm(mix)),
                loss_increase=increase,
                predicted_increase=0.5 * perturbation_norm**2 * avg_trace,
                approximate_eigenbasis=approximate,
                quant_loss_increase=quant_increase,
            )
        )
    first, second = sides
    trace_order = first.avg_trace <= second.avg_trace
    loss_order = first.loss_increase <= second.loss_increase
    report = PerturbationOrderingReport(
        base_loss=base_loss,
        norm=perturbation_norm,
        first=first,
        second=second,
        ordering_consistent=trace_order == loss_order,
    )
    if first.approximate_eigenbasis or second.approximate_eigenbasis:
        report.notes.append(
            f"eigenbasis truncated to top {top_r} pairs on large blocks; "
            "predicted increases cover only that subspace"
        )
    return report


def perturbation_report_dict(report: PerturbationOrderingReport) -> dict:
    def side(p: LayerPerturbation) -> dict:
        d = {
            "layer_index": p.layer_index,
            "n_params": p.n_params,
            "avg_trace": p.avg_trace,
            "alpha": p.alpha,
            "delta_norm": p.delta_norm,
            "loss_increase": p.loss_increase,
            "predicted_increase": p.predicted_increase,
            "approximate_eigenbasis": p.approximate_eigenbasis,
        }
        if p.quant_loss_increase is not None:
            d["quant_loss_increase"] = p.quant_loss_increase
        return d

    return {
        "base_loss": report.base_loss,
        "perturbation_norm": report.norm,
        "layers": [side(report.first), side(report.second)],
        "ordering_consistent": report.ordering_consistent,
        "notes": report.notes,
    }


# --------------------------------------------------------------------------
# equal-top-eigenvalue quadratic demo
# --------------------------------------------------------------------------


@dataclass
class QuadraticDemoSide:
    name: str
    hessian_diag: tuple[float, float]
    top_eigenvalue: float
    exact_avg_trace: float
    estimated_avg_trace: TraceEstimate
    loss_increase: float  # equal-norm eigen-mix, unit norm


@dataclass
class QuadraticDemoReport:
    flat: QuadraticDemoSide
    sharp: QuadraticDemoSide

    @property
    def top_eigenvalues_tie(self) -> bool:
        return math.isclose(
            self.flat.top_eigenvalue, self.sharp.top_eigenvalue, rel_tol=1e-8
        )

    @property
    def sharp_increases_more(self) -> bool:
        return self.sharp.loss_increase > self.flat.loss_increase


def quadratic_sensitivity_demo(
    probes: int = 100, seed: int = 0
) -> QuadraticDemoReport:
    """Two quadratics with equal top curvature but unequal average trace.

    Both surfaces are 0.5 x'Hx with diagonal H; the first is stiff in one
    direction only, the second in both. Their top Hessian eigenvalues tie,
    yet the equal-norm perturbation loss increase (norm^2/2 times the
    average trace) differs by almost a factor of two — average trace
    separates them, the top eigenvalue does not.
    """
    sides = []
    for name, diag in (("flat", (200.0, 2.0)), ("sharp", (200.0, 198.0))):
        h = np.diag(diag)
        oracle = lambda v, h=h: h @ v
        pair = engine.top_eigenpair(oracle, 2, max_iters=20000, tol=1e-12, seed=seed)
        config = ProbeConfig(max_probes=probes, rel_stderr_tol=None, seed=seed)
        estimate = hutchinson_trace(oracle, 2, config)
        # unit-norm uniform eigen-mix of a diagonal quadratic: the loss
        # increase is exactly half the average trace
        mix = np.ones(2) / math.sqrt(2.0)
        increase = 0.5 * float(mix @ h @ mix)
        sides.append(
            QuadraticDemoSide(
                name=name,
                hessian_diag=diag,
                top_eigenvalue=pair.value,
                exact_avg_trace=sum(diag) / 2.0,
                estimated_avg_trace=estimate,
                loss_increase=increase,
            )
        )
    return QuadraticDemoReport(flat=sides[0], sharp=sides[1])


def quadratic_demo_table(report: QuadraticDemoReport) -> str:
    lines = [
        f"{'surface':<8} {'top eigenvalue':>15} {'avg trace':>12} "
        f"{'est avg trace':>14} {'loss increase':>14}",
    ]
    for side in (report.flat, report.sharp):
        lines.append(
            f"{side.name:<8} {side.top_eigenvalue:>15.6f} "
            f"{side.exact_avg_trace:>12.3f} "
            f"{side.estimated_avg_trace.avg_trace:>14.3f} "
            f"{side.loss_increase:>14.3f}"
        )
    lines.append(
        "top eigenvalues tie: %s; sharper surface loses more: %s"
        % (report.top_eigenvalues_tie, report.sharp_increases_more)
    )
    return "\n".join(lines)


# --------------------------------------------------------------------------
# loss landscape grids
# --------------------------------------------------------------------------


@dataclass
class LandscapeGrid:
    layer_index: int
    epsilons: np.ndarray  # (grid_points,) perturbation magnitudes per axis
    losses: np.ndarray  # (grid_points, grid_points), axis 0 = first direction
    base_loss: float
    eigenvalues: tuple[float, float]
    converged: bool


def loss_landscape_grid(
    model: Model,
    dataset: Dataset,
    layer: int,
    grid_radius: float,
    grid_points: int = 9,
    seed: int = 0,
) -> LandscapeGrid:
    """Loss over the span of a layer's top two Hessian eigenvectors.

    ``grid_points`` must be odd so the exact unperturbed loss sits at the
    center of the grid. For blocks over DENSE_LIMIT parameters the two
    directions come from power iteration with deflation; non-convergence is
    flagged on the result rather than raised.
    """
    if grid_points < 3 or grid_points % 2 == 0:
        raise AnalysisError(
            "grid_points must be odd and >= 3 so the unperturbed point is on the grid"
        )
    oracle, dim = engine.weight_hvp_oracle(model, dataset.batch(), layer)
    if dim <= DENSE_LIMIT:
        dense = engine.dense_from_oracle(oracle, dim)
        values, vectors = np.linalg.eigh(dense)
        lam1, lam2 = float(values[-1]), float(values[-2])
        v1, v2 = vectors[:, -1], vectors[:, -2]
        converged = True
    else:
        pair1 = engine.top_eigenpair(oracle, dim, seed=seed)
        pair2 = engine.top_eigenpair(
            engine.deflate(oracle, pair1.value, pair1.vector), dim, seed=seed + 1
        )
        lam1, lam2 = pair1.value, pair2.value
        v1, v2 = pair1.vector, pair2.vector
        converged = pair1.converged and pair2.converged
    # build the axis symmetrically so each step is the exact negation of
    # its mirror (linspace endpoints do not round symmetrically)
    half = np.linspace(0.0, grid_radius, grid_points // 2 + 1)
    epsilons = np.concatenate([-half[:0:-1], half])
    base_loss = engine.eval_loss(model, dataset.batch())
    losses = np.empty((grid_points, grid_points))
    for a, e1 in enumerate(epsilons):
        for b, e2 in enumerate(epsilons):
            if e1 == 0.0 and e2 == 0.0:
                losses[a, b] = base_loss
                continue
            losses[a, b] = _perturbed_loss(model, dataset, layer, e1 * v1 + e2 * v2)
    return LandscapeGrid(
        layer_index=layer,
        epsilons=epsilons,
        losses=losses,
        base_loss=base_loss,
        eigenvalues=(lam1, lam2),
        converged=converged,
    )


def center_curvature(grid: LandscapeGrid) -> float:
    """Discrete Laplacian of the loss at the grid center."""
    c = len(grid.epsilons) // 2
    h = grid.epsilons[c + 1] - grid.epsilons[c]
    stencil = (
        grid.losses[c + 1, c]
        + grid.losses[c - 1, c]
        + grid.losses[c, c + 1]
        + grid.losses[c, c - 1]
        - 4.0 * grid.losses[c, c]
    )
    return float(stencil / h**2)


def write_landscape_csv(grid: LandscapeGrid, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["eps1", "eps2", "loss"])
        for a, e1 in enumerate(grid.epsilons):
            for b, e2 in enumerate(grid.epsilons):
                writer.writerow([repr(float(e1)), repr(float(e2)), repr(float(grid.losses[a, b]))])


# --------------------------------------------------------------------------
# sensitivity ordering comparison
# --------------------------------------------------------------------------


@dataclass
class OrderingReport:
    trace_order: list[int]  # layer indices, most sensitive first
    eigenvalue_order: list[int]
    discordant_pairs: list[tuple[int, int]]
    n_pairs: int

    @property
    def kendall_distance(self) -> int:
        return len(self.discordant_pairs)

    @property
    def normalized_distance(self) -> float:
        return self.kendall_distance / self.n_pairs if self.n_pairs else 0.0


def ordering_compare(avg_traces, top_eigenvalues) -> OrderingReport:
    """How differently the two sensitivity metrics rank the layers.

    A pair of layers is discordant when one metric strictly prefers the
    first and the other strictly prefers the second; ties on either metric
    never count as disagreement.
    """
    traces = [float(t) for t in avg_traces]
    eigs = [float(e) for e in top_eigenvalues]
    if len(traces) != len(eigs):
        raise AnalysisError("metrics must cover the same layers")
    n = len(traces)
    discordant = []
    for i in range(n):
        for j in range(i + 1, n):
            dt = traces[i] - traces[j]
            de = eigs[i] - eigs[j]
            if dt * de < 0.0:
                discordant.append((i, j))
    return OrderingReport(
        trace_order=sorted(range(n), key=lambda k: (-traces[k], k)),
        eigenvalue_order=sorted(range(n), key=lambda k: (-eigs[k], k)),
        discordant_pairs=discordant,
        n_pairs=n * (n - 1) // 2,
    )

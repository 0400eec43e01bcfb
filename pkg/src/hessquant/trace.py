"""Stochastic Hessian trace estimation with convergence tracking.

The estimator averages quadratic forms z'Hz over random probe vectors.
Probe k is derived from (seed, k) alone, so the estimate is independent of
evaluation order: probes may run on any number of threads and the reduction
happens in probe-index order, making results bit-stable under parallelism.

Rademacher probes are the default (lower variance for trace estimation);
Gaussian probes are available as well. Negative trace estimates near
marginal minima are reported as-is and flagged, never clamped.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import engine
from .rng import substream, substream_seed
from .zoo import Dataset, Model

DISTRIBUTIONS = ("rademacher", "gaussian")


class TraceError(Exception):
    pass


class ProbeFailure(TraceError):
    """The Hessian oracle failed; carries the probe index."""

    def __init__(self, probe_index: int, cause: Exception):
        super().__init__(f"Hessian oracle failed on probe {probe_index}: {cause}")
        self.probe_index = probe_index


@dataclass
class ProbeConfig:
    distribution: str = "rademacher"
    max_probes: int = 100
    rel_stderr_tol: float | None = 0.05  # None disables adaptive stopping
    seed: int = 0

    def __post_init__(self):
        if self.distribution not in DISTRIBUTIONS:
            raise TraceError(f"unknown probe distribution {self.distribution!r}")
        if self.max_probes < 1:
            raise TraceError("max_probes must be >= 1")
        if self.rel_stderr_tol is not None and self.rel_stderr_tol <= 0:
            raise TraceError("rel_stderr_tol must be positive")


@dataclass
class TraceEstimate:
    """Summary of Hutchinson samples for one Hessian block.

    ``mean`` is the exactly rounded arithmetic mean of ``samples``;
    ``avg_trace`` divides by the block dimension.
    """

    samples: list[float]
    dim: int
    mean: float
    variance: float  # sample variance (ddof=1), 0.0 for a single probe

    @classmethod
    def from_samples(cls, samples: Sequence[float], dim: int) -> "TraceEstimate":
        samples = [float(s) for s in samples]
        if not samples or dim < 1:
            raise TraceError("need at least one sample and a positive dimension")
        m = len(samples)
        mean = math.fsum(samples) / m
        variance = (
            math.fsum((s - mean) ** 2 for s in samples) / (m - 1) if m > 1 else 0.0
        )
        return cls(samples=samples, dim=dim, mean=mean, variance=variance)

    @property
    def probes_used(self) -> int:
        return len(self.samples)

    @property
    def stderr(self) -> float:
        return math.sqrt(self.variance / self.probes_used)

    @property
    def avg_trace(self) -> float:
        return self.mean / self.dim

    @property
    def is_negative(self) -> bool:
        return self.mean < 0.0


def probe_vector(seed: int, index: int, dim: int, distribution: str) -> np.ndarray:
    """The probe for (seed, index): unit-variance, zero-mean entries."""
    rng = np.random.default_rng([int(seed), int(index)])
    if distribution == "rademacher":
        return rng.integers(0, 2, size=dim).astype(np.float64) * 2.0 - 1.0
    return rng.standard_normal(dim)


def _first_stopping_index(
    samples: list[float], tol: float | None, minimum: int = 2
) -> int | None:
    """Earliest m with stderr/|mean| <= tol, scanning in probe order."""
    if tol is None:
        return None
    running = 0.0
    running_sq = 0.0
    for m, s in enumerate(samples, start=1):
        running += s
        running_sq += s * s
        if m < minimum:
            continue
        mean = running / m
        var = max(0.0, (running_sq - m * mean * mean) / (m - 1))
        if math.sqrt(var / m) <= tol * abs(mean):
            return m
    return None


def hutchinson_trace(
    oracle: Callable[[np.ndarray], np.ndarray],
    dim: int,
    config: ProbeConfig,
    threads: int = 1,
) -> TraceEstimate:
    """Estimate the trace of a symmetric operator from z'Hz samples.

    Stops at ``max_probes``, or earlier once the relative standard error of
    the running mean reaches ``rel_stderr_tol``. The probes actually used
    are always the prefix of the (seed, index)-derived sequence, so the
    estimate does not depend on the thread count.
    """
    if dim < 1:
        raise TraceError("operator dimension must be >= 1")

    def sample(k: int) -> float:
        z = probe_vector(config.seed, k, dim, config.distribution)
        try:
            hz = np.asarray(oracle(z), dtype=np.float64)
        except Exception as e:  # noqa: BLE001 - re-raised with probe index
            raise ProbeFailure(k, e) from e
        return float(z @ hz)

    samples: list[float] = []
    wave = max(1, int(threads))
    k = 0
    pool = ThreadPoolExecutor(max_workers=wave) if wave > 1 else None
    try:
        while k < config.max_probes:
            batch = list(range(k, min(k + wave, config.max_probes)))
            if pool is not None:
                samples.extend(pool.map(sample, batch))
            else:
                samples.extend(sample(i) for i in batch)
            k = batch[-1] + 1
            stop = _first_stopping_index(samples, config.rel_stderr_tol)
            if stop is not None:
                samples = samples[:stop]
                break
    finally:
        if pool is not None:
            pool.shutdown()
    return TraceEstimate.from_samples(samples, dim)


# --------------------------------------------------------------------------
# per-layer traces for models
# --------------------------------------------------------------------------


@dataclass
class LayerTrace:
    layer_index: int
    layer_name: str
    block_dim: int  # parameters for weight blocks, activation size otherwise
    estimate: TraceEstimate
    kind: str  # "weight" | "activation"


def _fixed_batch(dataset: Dataset, batch_size: int, seed: int):
    if batch_size > len(dataset):
        raise TraceError(
            f"batch_size {batch_size} exceeds dataset size {len(dataset)}"
        )
    idx = substream(seed, "trace-batch").permutation(len(dataset))[:batch_size]
    return dataset.subset(np.sort(idx))


def layer_avg_traces(
    model: Model,
    dataset: Dataset,
    batch_size: int,
    config: ProbeConfig,
    threads: int = 1,
) -> list[LayerTrace]:
    """Average weight-Hessian trace per layer on one fixed sub-sampled batch.

    The batch is drawn once from the config seed and shared by every layer,
    separating probe noise from data noise. Each layer consumes its own
    probe substream.
    """
    batch = _fixed_batch(dataset, batch_size, config.seed)
    out = []
    for i, layer in enumerate(model.layers):
        oracle, dim = engine.weight_hvp_oracle(model, batch, i)
        layer_config = ProbeConfig(
            distribution=config.distribution,
            max_probes=config.max_probes,
            rel_stderr_tol=config.rel_stderr_tol,
            seed=substream_seed(config.seed, "weight-trace", i),
        )
        estimate = hutchinson_trace(oracle, dim, layer_config, threads=threads)
        out.append(
            LayerTrace(
                layer_index=i,
                layer_name=layer.name,
                block_dim=dim,
                estimate=estimate,
                kind="weight",
            )
        )
    return out


def activation_avg_traces(
    model: Model,
    dataset: Dataset,
    n_inputs: int,
    config: ProbeConfig,
    threads: int = 1,
) -> list[LayerTrace]:
    """Average activation-Hessian trace per layer over ``n_inputs`` examples.

    The Hessian w.r.t. the concatenated per-input activations is block
    diagonal (inputs do not interact), so each probe draws an independent
    vector per input, and sample k is the mean of the per-input quadratic
    forms. That equals one Hutchinson sample of the concatenated operator,
    and its expectation is the mean per-input trace.
    """
    if n_inputs > len(dataset):
        raise TraceError(f"n_inputs {n_inputs} exceeds dataset size {len(dataset)}")
    idx = substream(config.seed, "activation-inputs").permutation(len(dataset))[
        :n_inputs
    ]
    idx = np.sort(idx)
    examples = [(dataset.inputs[i], dataset.labels[i]) for i in idx]
    out = []
    for j, layer in enumerate(model.layers):
        dim = engine.activation_dim(model, j)
        oracles = [engine.activation_hvp_oracle(model, ex, j)[0] for ex in examples]
        seeds = [
            substream_seed(config.seed, "activation-trace", j, int(i)) for i in idx
        ]

        def sample(k: int) -> float:
            forms = []
            for oracle, seed in zip(oracles, seeds):
                z = probe_vector(seed, k, dim, config.distribution)
                try:
                    forms.append(float(z @ np.asarray(oracle(z))))
                except Exception as e:  # noqa: BLE001
                    raise ProbeFailure(k, e) from e
            return math.fsum(forms) / len(forms)

        samples: list[float] = []
        wave = max(1, int(threads))
        k = 0
        pool = ThreadPoolExecutor(max_workers=wave) if wave > 1 else None
        try:
            while k < config.max_probes:
                batch_ids = list(range(k, min(k + wave, config.max_probes)))
                if pool is not None:
                    samples.extend(pool.map(sample, batch_ids))
                else:
                    samples.extend(sample(i) for i in batch_ids)
                k = batch_ids[-1] + 1
                stop = _first_stopping_index(samples, config.rel_stderr_tol)
                if stop is not None:
                    samples = samples[:stop]
                    break
        finally:
            if pool is not None:
                pool.shutdown()
        out.append(
            LayerTrace(
                layer_index=j,
                layer_name=layer.name,
                block_dim=dim,
                estimate=TraceEstimate.from_samples(samples, dim),
                kind="activation",
            )
        )
    return out


# --------------------------------------------------------------------------
# convergence tracking and CSV reports
# --------------------------------------------------------------------------


@dataclass
class ConvergenceRow:
    probes: int
    running_mean: float
    stderr: float


def convergence_report(estimate: TraceEstimate) -> list[ConvergenceRow]:
    """Running mean and standard error after each probe.

    The final row reproduces the estimate's mean and stderr exactly (the
    same fsum-based reductions are applied to the same prefix).
    """
    rows = []
    for m in range(1, estimate.probes_used + 1):
        prefix = TraceEstimate.from_samples(estimate.samples[:m], estimate.dim)
        rows.append(
            ConvergenceRow(probes=m, running_mean=prefix.mean, stderr=prefix.stderr)
        )
    return rows


TRACE_COLUMNS = [
    "layer_index",
    "layer_name",
    "n_i",
    "trace_mean",
    "trace_stderr",
    "avg_trace",
    "probes_used",
    "kind",
]


def write_trace_csv(traces: list[LayerTrace], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for t in traces:
            writer.writerow(
                [
                    t.layer_index,
                    t.layer_name,
                    t.block_dim,
                    repr(t.estimate.mean),
                    repr(t.estimate.stderr),
                    repr(t.estimate.avg_trace),
                    t.estimate.probes_used,
                    t.kind,
                ]
            )


@dataclass
class TraceRow:
    layer_index: int
    layer_name: str
    block_dim: int
    trace_mean: float
    trace_stderr: float
    avg_trace: float
    probes_used: int
    kind: str


def read_trace_csv(path) -> list[TraceRow]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != TRACE_COLUMNS:
            raise TraceError(
                f"{path}: expected columns {TRACE_COLUMNS}, got {reader.fieldnames}"
            )
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append(
                    TraceRow(
                        layer_index=int(row["layer_index"]),
                        layer_name=row["layer_name"],
                        block_dim=int(row["n_i"]),
                        trace_mean=float(row["trace_mean"]),
                        trace_stderr=float(row["trace_stderr"]),
                        avg_trace=float(row["avg_trace"]),
                        probes_used=int(row["probes_used"]),
                        kind=row["kind"],
                    )
                )
            except (ValueError, KeyError) as e:
                raise TraceError(f"{path}: bad row at line {lineno}: {e}") from e
    return rows


def write_convergence_csv(layer_rows: dict[int, list[ConvergenceRow]], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer_index", "probes", "running_mean", "stderr"])
        for layer_index in sorted(layer_rows):
            for row in layer_rows[layer_index]:
                writer.writerow(
                    [layer_index, row.probes, repr(row.running_mean), repr(row.stderr)]
                )

"""Bit-width planning: admissible enumeration, counting, and selection.

A bit assignment is admissible when layers with strictly larger average
Hessian trace never get fewer bits than layers with smaller trace. The
planner enumerates exactly that set (output-linear, never filter-all),
scores each assignment with the trace-weighted squared quantization
perturbation ``omega``, and picks the minimizer under a byte budget.

Counting uses exact big-integer arithmetic throughout; the unconstrained
search space (menu_size ** n_layers) overflows 64-bit integers for real
depths.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterator, Sequence

from .quantizer import (
    FULL_PRECISION_BITS,
    QuantScheme,
    RangePolicy,
    model_size_bytes,
    perturbation_l2,
)
from .zoo import Model


class PlannerError(Exception):
    pass


class InfeasibleBudgetError(PlannerError):
    """The budget is below the all-min-bits model size."""

    def __init__(self, target_bytes: int, min_bytes: int):
        super().__init__(
            f"target of {target_bytes} bytes is infeasible: the smallest "
            f"admissible assignment needs {min_bytes} bytes"
        )
        self.target_bytes = target_bytes
        self.min_bytes = min_bytes


# --------------------------------------------------------------------------
# counting
# --------------------------------------------------------------------------


def count_admissible(n_layers: int, menu_size: int) -> int:
    """Exact count of admissible assignments when all traces are distinct.

    Choose j of the menu's widths, then split the trace-ordered layers into
    j contiguous groups: sum_j C(menu_size, j) * C(n_layers - 1, j - 1).
    """
    if n_layers < 1 or menu_size < 1:
        raise PlannerError("need at least one layer and one menu entry")
    return sum(
        math.comb(menu_size, j) * math.comb(n_layers - 1, j - 1)
        for j in range(1, menu_size + 1)
    )


def count_unconstrained(n_layers: int, menu_size: int) -> int:
    """Size of the raw search space: menu_size ** n_layers."""
    if n_layers < 1 or menu_size < 1:
        raise PlannerError("need at least one layer and one menu entry")
    return menu_size**n_layers


def count_finetune_orderings(n_layers: int, layerwise: bool = False) -> int:
    """Number of progressive fine-tuning orders over layer groups.

    Ordered set partitions of the layers, via the second-kind Stirling
    recurrence S(n, k) = k*S(n-1, k) + S(n-1, k-1); with ``layerwise`` the
    groups are singletons and the count collapses to n_layers!.
    """
    if n_layers < 1:
        raise PlannerError("need at least one layer")
    if layerwise:
        return math.factorial(n_layers)
    stirling = [1] + [0] * n_layers  # row n=0
    for n in range(1, n_layers + 1):
        new = [0] * (n_layers + 1)
        for k in range(1, n + 1):
            new[k] = k * stirling[k] + stirling[k - 1]
        stirling = new
    return sum(
        math.factorial(k) * stirling[k] for k in range(1, n_layers + 1)
    )


# --------------------------------------------------------------------------
# admissible enumeration
# --------------------------------------------------------------------------


@dataclass
class BitAssignment:
    """Per-layer bit widths in original layer order, plus derived scores."""

    bits: tuple[int, ...]
    size_bytes: int | None = None
    omega: float | None = None
    per_layer_omega: tuple[float, ...] | None = None


class AdmissibleSet:
    """Iterable over admissible assignments for given per-layer traces.

    ``tie_mode="stderr"`` treats two layers as tied (mutually unconstrained)
    when their trace means differ by at most the combined standard error
    sqrt(se_i**2 + se_j**2); ``tie_mode="strict"`` only ties exactly equal
    means. Enumeration is depth-first over layers sorted by decreasing trace
    (index as tie-break), emitting bits in descending lexicographic order
    along that sort, and is exactly the set the pairwise admissibility
    predicate accepts — including non-transitive statistical ties.

    After iteration, ``truncated`` records whether ``limit`` cut it short.
    """

    def __init__(
        self,
        avg_traces: Sequence[float],
        bit_menu: Sequence[int],
        stderrs: Sequence[float] | None = None,
        tie_mode: str = "stderr",
        limit: int | None = None,
    ):
        self.traces = [float(t) for t in avg_traces]
        if not self.traces:
            raise PlannerError("need at least one layer trace")
        if not all(math.isfinite(t) for t in self.traces):
            raise PlannerError("traces must be finite")
        menu = sorted(set(int(b) for b in bit_menu))
        if not menu or menu[0] < 1:
            raise PlannerError("bit menu must contain widths >= 1")
        self.menu_desc = tuple(reversed(menu))
        if tie_mode not in ("stderr", "strict"):
            raise PlannerError(f"unknown tie_mode {tie_mode!r}")
        if tie_mode == "stderr" and stderrs is not None:
            self.stderrs = [float(s) for s in stderrs]
            if len(self.stderrs) != len(self.traces):
                raise PlannerError("stderrs must align with traces")
        else:
            self.stderrs = [0.0] * len(self.traces)
        self.limit = limit
        self.truncated = False
        self.has_negative_traces = any(t < 0 for t in self.traces)
        if self.has_negative_traces:
            warnings.warn(
                "negative average traces present; the sensitivity ordering "
                "still applies but the estimates may be unreliable",
                stacklevel=2,
            )
        # layers sorted by decreasing trace, original index as tie-break
        self.order = sorted(
            range(len(self.traces)), key=lambda i: (-self.traces[i], i)
        )
        # positions (in sorted order) whose earlier layers constrain them;
        # ties impose no constraint in either direction
        self._constrainers: list[list[int]] = []
        for p, layer in enumerate(self.order):
            self._constrainers.append(
                [
                    q
                    for q in range(p)
                    if self.traces[self.order[q]] > self.traces[layer]
                    and not self._tied(self.order[q], layer)
                ]
            )
        # with no ties anywhere the bits are non-increasing along the sort,
        # so the binding cap is simply the previous choice
        self._chain = [
            all(len(self._constrainers[q]) == q for q in range(p + 1))
            for p in range(len(self.order))
        ]

    def _tied(self, i: int, j: int) -> bool:
        gap = abs(self.traces[i] - self.traces[j])
        return gap <= math.hypot(self.stderrs[i], self.stderrs[j])

    def __iter__(self) -> Iterator[BitAssignment]:
        n = len(self.traces)
        order = self.order
        emitted = 0
        self.truncated = False
        top = self.menu_desc[0]

        stack: list[tuple[int, list[int]]] = [(0, [])]
        while stack:
            pos, prefix = stack.pop()
            if pos == n:
                bits = [0] * n
                for p, layer_index in enumerate(order):
                    bits[layer_index] = prefix[p]
                yield BitAssignment(bits=tuple(bits))
                emitted += 1
                if self.limit is not None and emitted >= self.limit:
                    self.truncated = bool(stack)
                    return
                continue
            if pos == 0:
                cap = top
            elif self._chain[pos]:
                cap = prefix[-1]
            else:
                cap = min(
                    (prefix[q] for q in self._constrainers[pos]), default=top
                )
            # push ascending so descending-lex options pop first
            for b in reversed([b for b in self.menu_desc if b <= cap]):
                stack.append((pos + 1, prefix + [b]))


def is_admissible(
    bits: Sequence[int],
    avg_traces: Sequence[float],
    stderrs: Sequence[float] | None = None,
) -> bool:
    """Pairwise predicate: strictly larger trace never gets fewer bits."""
    n = len(bits)
    stderrs = [0.0] * n if stderrs is None else list(stderrs)
    for i in range(n):
        for j in range(n):
            if avg_traces[i] > avg_traces[j] and abs(
                avg_traces[i] - avg_traces[j]
            ) > math.hypot(stderrs[i], stderrs[j]):
                if bits[i] < bits[j]:
                    return False
    return True


# --------------------------------------------------------------------------
# omega and selection
# --------------------------------------------------------------------------


def _perturbation_table(
    model: Model, bit_menu: Sequence[int], policy: RangePolicy
) -> list[dict[int, float]]:
    table = []
    for layer in model.layers:
        row = {}
        for bits in set(int(b) for b in bit_menu):
            if bits >= FULL_PRECISION_BITS:
                row[bits] = 0.0
            else:
                scheme = QuantScheme.for_tensor(layer.weight, bits, policy)
                row[bits] = perturbation_l2(layer.weight, scheme)
        table.append(row)
    return table


def compute_omega(
    model: Model,
    avg_traces: Sequence[float],
    layer_bits: Sequence[int],
    policy: RangePolicy | None = None,
) -> tuple[float, tuple[float, ...]]:
    """Trace-weighted squared quantization perturbation, layer by layer.

    omega_i = avg_trace_i * ||Q(W_i) - W_i||_2^2 with the same range policy
    the quantizer deploys, so the score and the deployed perturbation agree
    bit for bit. The total is the exactly rounded sum of the layer terms.
    """
    if len(layer_bits) != len(model.layers):
        raise PlannerError("assignment length does not match layer count")
    policy = policy or RangePolicy()
    per_layer = []
    for layer, trace, bits in zip(model.layers, avg_traces, layer_bits):
        if int(bits) >= FULL_PRECISION_BITS:
            per_layer.append(0.0)
            continue
        scheme = QuantScheme.for_tensor(layer.weight, int(bits), policy)
        per_layer.append(float(trace) * perturbation_l2(layer.weight, scheme))
    return math.fsum(per_layer), tuple(per_layer)


@dataclass
class ParetoPoint:
    assignment: BitAssignment
    size_bytes: int
    omega: float
    dominated: bool = False
    chosen: bool = False


@dataclass
class PlanResult:
    chosen: BitAssignment
    points: list[ParetoPoint]
    target_size_bytes: int
    truncated: bool = False
    notes: list[str] = field(default_factory=list)


def mark_dominated(points: list[ParetoPoint]) -> None:
    """Set the dominated flag: another point at least as small in both
    coordinates, strictly smaller in one."""
    order = sorted(range(len(points)), key=lambda k: (points[k].size_bytes, points[k].omega))
    best_smaller = math.inf  # min omega over strictly smaller sizes
    i = 0
    while i < len(order):
        j = i
        size = points[order[i]].size_bytes
        while j < len(order) and points[order[j]].size_bytes == size:
            j += 1
        group = order[i:j]
        group_min = min(points[k].omega for k in group)
        for k in group:
            p = points[k]
            p.dominated = p.omega > group_min or best_smaller <= p.omega
        best_smaller = min(best_smaller, group_min)
        i = j


def pareto_select(
    model: Model,
    avg_traces: Sequence[float],
    bit_menu: Sequence[int],
    target_size_bytes: int,
    stderrs: Sequence[float] | None = None,
    policy: RangePolicy | None = None,
    tie_mode: str = "stderr",
    limit: int | None = None,
) -> PlanResult:
    """Minimal-omega admissible assignment with size at most the target.

    Ties break toward smaller size, then the lexicographically smallest bit
    vector in layer order, so the result does not depend on enumeration
    order. Every enumerated (size, omega) point is returned with its
    dominance flag for frontier reporting.
    """
    policy = policy or RangePolicy()
    traces = [float(t) for t in avg_traces]
    if len(traces) != len(model.layers):
        raise PlannerError("traces length does not match layer count")
    menu = sorted(set(int(b) for b in bit_menu))
    min_size = model_size_bytes(model, [menu[0]] * len(model.layers)).size_bytes
    if min_size > target_size_bytes:
        raise InfeasibleBudgetError(target_size_bytes, min_size)

    pert = _perturbation_table(model, menu, policy)
    enumeration = AdmissibleSet(
        traces, menu, stderrs=stderrs, tie_mode=tie_mode, limit=limit
    )
    points: list[ParetoPoint] = []
    best_key = None
    best_index = -1
    for assignment in enumeration:
        size = model_size_bytes(model, assignment.bits).size_bytes
        per_layer = tuple(
            traces[i] * pert[i][b] for i, b in enumerate(assignment.bits)
        )
        omega = math.fsum(per_layer)
        assignment.size_bytes = size
        assignment.omega = omega
        assignment.per_layer_omega = per_layer
        points.append(ParetoPoint(assignment=assignment, size_bytes=size, omega=omega))
        if size <= target_size_bytes:
            key = (omega, size, assignment.bits)
            if best_key is None or key < best_key:
                best_key = key
                best_index = len(points) - 1
    if best_key is None:
        # the budget is feasible, so only an early limit can land here
        raise PlannerError(
            f"enumeration limit {limit} cut off before any assignment fit "
            f"the {target_size_bytes}-byte budget"
        )
    mark_dominated(points)
    points[best_index].chosen = True
    result = PlanResult(
        chosen=points[best_index].assignment,
        points=points,
        target_size_bytes=target_size_bytes,
        truncated=enumeration.truncated,
    )
    if enumeration.has_negative_traces:
        result.notes.append("negative average traces present")
    if enumeration.truncated:
        result.notes.append(f"enumeration truncated at {limit} assignments")
    return result


# --------------------------------------------------------------------------
# frontier reporting
# --------------------------------------------------------------------------

FRONTIER_COLUMNS = ["assignment_id", "bits", "size_bytes", "omega", "dominated", "chosen"]


def write_frontier_csv(points: list[ParetoPoint], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(FRONTIER_COLUMNS)
        for k, p in enumerate(points):
            writer.writerow(
                [
                    k,
                    ";".join(str(b) for b in p.assignment.bits),
                    p.size_bytes,
                    repr(p.omega),
                    int(p.dominated),
                    int(p.chosen),
                ]
            )


def read_frontier_csv(path) -> list[ParetoPoint]:
    points = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != FRONTIER_COLUMNS:
            raise PlannerError(
                f"{path}: expected columns {FRONTIER_COLUMNS}, got {reader.fieldnames}"
            )
        for row in reader:
            points.append(
                ParetoPoint(
                    assignment=BitAssignment(
                        bits=tuple(int(b) for b in row["bits"].split(";"))
                    ),
                    size_bytes=int(row["size_bytes"]),
                    omega=float(row["omega"]),
                    dominated=bool(int(row["dominated"])),
                    chosen=bool(int(row["chosen"])),
                )
            )
    return points

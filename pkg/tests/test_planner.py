import itertools
import math

import numpy as np
import pytest

from hessquant import planner, quantizer, zoo
from hessquant.planner import (
    AdmissibleSet,
    InfeasibleBudgetError,
    ParetoPoint,
    compute_omega,
    count_admissible,
    count_finetune_orderings,
    count_unconstrained,
    is_admissible,
    mark_dominated,
    pareto_select,
)

from _oracles import all_assignments, brute_force_admissible, brute_force_dominated


class TestCounting:
    def test_reference_depth_fifty_menu_four(self):
        assert count_admissible(50, 4) == 23_426

    def test_unconstrained_is_exact_big_integer(self):
        assert count_unconstrained(50, 4) == 4**50
        assert count_unconstrained(50, 4) == 1267650600228229401496703205376

    def test_small_cases(self):
        assert count_admissible(2, 2) == 3
        assert count_admissible(1, 5) == 5
        for n_layers in range(1, 6):
            assert count_admissible(n_layers, 1) == 1

    def test_matches_stars_and_bars_identity(self):
        # the grouped sum collapses to C(L + m - 1, m - 1)
        for n_layers in range(1, 8):
            for menu in range(1, 6):
                assert count_admissible(n_layers, menu) == math.comb(
                    n_layers + menu - 1, menu - 1
                )

    def test_orderings_small_values(self):
        assert count_finetune_orderings(1) == 1
        assert count_finetune_orderings(3) == 13
        assert count_finetune_orderings(4) == 75

    def test_layerwise_collapse_to_factorial(self):
        for n in range(1, 8):
            assert count_finetune_orderings(n, layerwise=True) == math.factorial(n)

    def test_orderings_never_below_factorial(self):
        for n in range(1, 9):
            assert count_finetune_orderings(n) >= math.factorial(n)


class TestAdmissibleSet:
    def test_two_layer_reference_enumeration(self):
        found = [a.bits for a in AdmissibleSet([5.0, 1.0], [2, 4])]
        assert found == [(4, 4), (4, 2), (2, 2)]

    def test_single_width_menu(self):
        found = [a.bits for a in AdmissibleSet([3.0, 2.0, 1.0], [8])]
        assert found == [(8, 8, 8)]

    def test_matches_filter_of_full_cross_product(self):
        rng = np.random.default_rng(0)
        for n_layers in range(1, 7):
            for menu in ([4], [2, 4], [1, 2, 4], [1, 2, 4, 8]):
                traces = rng.uniform(0.0, 1.0, size=n_layers).tolist()
                got = {a.bits for a in AdmissibleSet(traces, menu, tie_mode="strict")}
                assert got == brute_force_admissible(traces, menu)
                assert len(got) == count_admissible(n_layers, len(menu))

    def test_unsorted_layers_mapped_back_to_original_order(self):
        found = {a.bits for a in AdmissibleSet([1.0, 9.0], [2, 4])}
        # layer 1 is the sensitive one: it may never get fewer bits
        assert found == {(4, 4), (2, 4), (2, 2)}

    def test_exact_tie_imposes_no_constraint(self):
        found = {a.bits for a in AdmissibleSet([1.0, 1.0], [2, 4], tie_mode="strict")}
        assert found == {(2, 2), (2, 4), (4, 2), (4, 4)}

    def test_stderr_ties_relax_ordering(self):
        strict = {a.bits for a in AdmissibleSet([1.1, 1.0], [2, 4], tie_mode="strict")}
        relaxed = {
            a.bits
            for a in AdmissibleSet([1.1, 1.0], [2, 4], stderrs=[0.1, 0.1])
        }
        assert strict == {(4, 4), (4, 2), (2, 2)}
        assert relaxed == {(4, 4), (4, 2), (2, 4), (2, 2)}

    def test_non_transitive_ties_match_pairwise_predicate(self):
        # t0 ties t1, t1 ties t2, but t0 and t2 are separated: only the
        # (t0, t2) pair is constrained, so non-monotone patterns that spike
        # in the middle are admissible
        traces = [1.0, 0.9, 0.8]
        stderrs = [0.08, 0.08, 0.08]
        got = {a.bits for a in AdmissibleSet(traces, [2, 4], stderrs=stderrs)}
        expected = {
            bits
            for bits in all_assignments(3, [2, 4])
            if is_admissible(bits, traces, stderrs)
        }
        assert got == expected
        assert (2, 4, 2) in got  # middle layer unconstrained by its ties
        assert (2, 4, 4) not in got  # t0 vs t2 still binds
        assert (2, 2, 4) not in got

    def test_limit_sets_truncation_flag(self):
        aset = AdmissibleSet([3.0, 2.0, 1.0], [2, 4, 8], limit=4)
        found = list(aset)
        assert len(found) == 4
        assert aset.truncated

    def test_no_truncation_when_limit_not_hit(self):
        aset = AdmissibleSet([3.0, 1.0], [2, 4], limit=100)
        list(aset)
        assert not aset.truncated

    def test_negative_traces_flagged(self):
        with pytest.warns(UserWarning, match="negative"):
            aset = AdmissibleSet([1.0, -0.5], [2, 4])
        assert aset.has_negative_traces
        assert {a.bits for a in aset} == {(4, 4), (4, 2), (2, 2)}

    def test_depth_fifty_enumeration_is_fast(self):
        import time

        traces = list(range(50, 0, -1))
        start = time.time()
        count = sum(1 for _ in AdmissibleSet(traces, [1, 2, 4, 8]))
        assert count == 23_426
        assert time.time() - start < 1.0


class TestOmega:
    def test_zero_when_weights_on_grid(self):
        layers = [
            zoo.Layer("a", "dense", np.array([[0.0, 1.0], [1.0, 0.0]]), np.zeros(2)),
            zoo.Layer("b", "dense", np.array([[1.0], [0.0]]), np.zeros(1)),
        ]
        model = zoo.Model(layers=layers, loss_head="mse")
        total, per_layer = compute_omega(model, [3.0, 2.0], [1, 1])
        assert total == 0.0 and per_layer == (0.0, 0.0)

    def test_single_quantized_layer_is_trace_times_perturbation(self, tiny_mlp):
        # keep all but one layer at full precision: omega reduces to
        # avg_trace * perturbation of that layer
        traces = [3.5, 1.25, 0.5]
        total, per_layer = compute_omega(tiny_mlp, traces, [2, 32, 32])
        scheme = quantizer.QuantScheme.for_tensor(tiny_mlp.layers[0].weight, 2)
        expected = 3.5 * quantizer.perturbation_l2(tiny_mlp.layers[0].weight, scheme)
        assert per_layer == (expected, 0.0, 0.0)
        assert total == expected

    def test_matches_independent_recomputation(self, tiny_mlp):
        traces = [0.7, 0.2, 0.1]
        for bits in ((2, 2, 4), (8, 4, 2)):
            total, per_layer = compute_omega(tiny_mlp, traces, bits)
            recomputed = []
            for layer, t, b in zip(tiny_mlp.layers, traces, bits):
                scheme = quantizer.QuantScheme.for_tensor(layer.weight, b)
                recomputed.append(t * quantizer.perturbation_l2(layer.weight, scheme))
            assert per_layer == tuple(recomputed)
            assert total == math.fsum(recomputed)

    def test_scale_covariance(self, tiny_mlp):
        traces = [0.7, 0.2, 0.1]
        base, _ = compute_omega(tiny_mlp, traces, (4, 2, 2))
        scaled, _ = compute_omega(tiny_mlp, [2.0 * t for t in traces], (4, 2, 2))
        assert scaled == pytest.approx(2.0 * base, rel=1e-15)


class TestParetoSelect:
    def test_generous_budget_picks_all_max_bits(self, tiny_mlp):
        result = pareto_select(tiny_mlp, [3.0, 2.0, 1.0], [2, 4, 8], 10_000)
        assert result.chosen.bits == (8, 8, 8)

    def test_matches_exhaustive_oracle(self):
        rng = np.random.default_rng(7)
        for trial in range(12):
            n_layers = int(rng.integers(2, 6))
            menu = sorted(rng.choice([1, 2, 3, 4, 6, 8], size=int(rng.integers(2, 4)), replace=False).tolist())
            dims = [(int(rng.integers(2, 5)), int(rng.integers(2, 5))) for _ in range(n_layers + 1)]
            layers = []
            fan = dims[0][0]
            for i in range(n_layers):
                out = dims[i + 1][0]
                layers.append(
                    zoo.Layer(
                        f"l{i}",
                        "dense",
                        rng.standard_normal((fan, out)),
                        np.zeros(out),
                    )
                )
                fan = out
            model = zoo.Model(layers=layers, loss_head="mse")
            traces = rng.uniform(0.1, 2.0, size=n_layers).tolist()
            min_size = quantizer.model_size_bytes(model, [menu[0]] * n_layers).size_bytes
            max_size = quantizer.model_size_bytes(model, [menu[-1]] * n_layers).size_bytes
            target = int(rng.integers(min_size, max_size + 1))

            result = pareto_select(model, traces, menu, target, tie_mode="strict")

            best = None
            for bits in brute_force_admissible(traces, menu):
                size = quantizer.model_size_bytes(model, bits).size_bytes
                if size > target:
                    continue
                omega, _ = compute_omega(model, traces, bits)
                key = (omega, size, bits)
                if best is None or key < best:
                    best = key
            assert best is not None
            assert result.chosen.omega == best[0]
            assert result.chosen.size_bytes == best[1]
            assert result.chosen.bits == best[2]
            assert len(result.points) == count_admissible(n_layers, len(menu))

    def test_infeasible_budget_names_minimum(self, tiny_mlp):
        min_size = quantizer.model_size_bytes(tiny_mlp, [2, 2, 2]).size_bytes
        with pytest.raises(InfeasibleBudgetError) as exc:
            pareto_select(tiny_mlp, [3.0, 2.0, 1.0], [2, 4, 8], min_size - 1)
        assert exc.value.min_bytes == min_size
        assert str(min_size) in str(exc.value)

    def test_chosen_point_is_not_dominated(self, tiny_mlp):
        result = pareto_select(tiny_mlp, [3.0, 2.0, 1.0], [2, 4, 8], 200)
        chosen_points = [p for p in result.points if p.chosen]
        assert len(chosen_points) == 1
        assert not chosen_points[0].dominated

    def test_raising_bits_never_increases_omega(self, tiny_mlp):
        traces = [3.0, 2.0, 1.0]
        for bits in itertools.product([2, 4, 8], repeat=3):
            for layer in range(3):
                if bits[layer] == 8:
                    continue
                raised = list(bits)
                raised[layer] = 8
                low, _ = compute_omega(tiny_mlp, traces, bits)
                high, _ = compute_omega(tiny_mlp, traces, raised)
                assert high <= low + 1e-18

    def test_argmin_invariant_under_trace_scaling(self, tiny_mlp):
        traces = [1.3, 0.61, 0.17]
        a = pareto_select(tiny_mlp, traces, [2, 4, 8], 200)
        b = pareto_select(tiny_mlp, [42.0 * t for t in traces], [2, 4, 8], 200)
        assert a.chosen.bits == b.chosen.bits


class TestDominance:
    def test_flags_match_quadratic_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            n = int(rng.integers(1, 40))
            sizes = rng.integers(1, 12, size=n)
            omegas = rng.integers(0, 10, size=n).astype(float) / 4.0
            points = [
                ParetoPoint(
                    assignment=planner.BitAssignment(bits=(0,)),
                    size_bytes=int(s),
                    omega=float(o),
                )
                for s, o in zip(sizes, omegas)
            ]
            mark_dominated(points)
            expected = brute_force_dominated(
                [(p.size_bytes, p.omega) for p in points]
            )
            assert [p.dominated for p in points] == expected


class TestFrontierCsv:
    def test_round_trip(self, tmp_path, tiny_mlp):
        result = pareto_select(tiny_mlp, [3.0, 2.0, 1.0], [2, 4, 8], 300)
        path = tmp_path / "frontier.csv"
        planner.write_frontier_csv(result.points, path)
        loaded = planner.read_frontier_csv(path)
        assert len(loaded) == len(result.points)
        for got, src in zip(loaded, result.points):
            assert got.assignment.bits == src.assignment.bits
            assert got.size_bytes == src.size_bytes
            assert got.omega == src.omega
            assert got.dominated == src.dominated
            assert got.chosen == src.chosen

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "frontier.csv"
        path.write_text("x,y\n1,2\n")
        with pytest.raises(planner.PlannerError, match="expected columns"):
            planner.read_frontier_csv(path)

"""Command-line pipeline: train, trace, plan, quantize, finetune, analyze, report.

One JSON config describes a full experiment; every stage can also run
standalone against the previous stage's artifacts. All randomness flows from
the single config seed through named substreams, so re-running any stage (or
the whole pipeline) with the same config overwrites its outputs with
byte-identical files.

Exit codes: 0 success, 2 config or artifact error, 3 infeasible plan,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import analysis, engine, planner, quantizer, trace, zoo

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_NUMERICAL = 4

OUT_ENV_VAR = "HESSQUANT_OUT"


class ConfigError(Exception):
    pass


class DependencyError(Exception):
    """A stage input artifact is missing; the message names the producer."""


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass
class RunConfig:
    experiment: str
    seed: int
    out_dir: Path
    threads: int
    hidden_dims: list[int]
    activation: str
    dataset_kind: str
    n_samples: int
    n_features: int
    n_classes: int
    separation: float
    train: zoo.TrainConfig
    probe_distribution: str
    max_probes: int
    rel_stderr_tol: float | None
    trace_batch_size: int
    activation_inputs: int
    bit_menu: list[int]
    target_bytes: int | None
    tie_mode: str
    plan_limit: int | None
    finetune_enabled: bool
    finetune_epochs: int
    finetune_lr: float
    finetune_batch_size: int | None
    notes: list[str] = field(default_factory=list)

    @property
    def loss_head(self) -> str:
        return "mse" if self.dataset_kind == "regression" else "cross_entropy"

    def probe_config(self) -> trace.ProbeConfig:
        return trace.ProbeConfig(
            distribution=self.probe_distribution,
            max_probes=self.max_probes,
            rel_stderr_tol=self.rel_stderr_tol,
            seed=self.seed,
        )


def _get(doc: dict, path: str, default=None, required: bool = False):
    node = doc
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            if required:
                raise ConfigError(f"config is missing required field {path!r}")
            return default
        node = node[part]
    return node


def load_config(path, overrides: argparse.Namespace) -> RunConfig:
    """Parse and validate the experiment config; flags win over file fields,
    and the HESSQUANT_OUT environment variable wins over --out."""
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(
            f"unparseable config {path}: {e.msg} at offset {e.pos}"
        ) from e
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")

    seed = overrides.seed if overrides.seed is not None else _get(doc, "seed", 0)
    out_dir = _get(doc, "out_dir", required=True)
    if overrides.out is not None:
        out_dir = overrides.out
    if os.environ.get(OUT_ENV_VAR):
        out_dir = os.environ[OUT_ENV_VAR]

    bit_menu = _get(doc, "plan.bit_menu", [2, 4, 8])
    if overrides.bits is not None:
        bit_menu = overrides.bits
    target_bytes = _get(doc, "plan.target_bytes", None)
    if overrides.target_bytes is not None:
        target_bytes = overrides.target_bytes

    max_probes = _get(doc, "probes.max_probes", 100)
    if overrides.probes is not None:
        max_probes = overrides.probes
    distribution = _get(doc, "probes.distribution", "rademacher")
    if overrides.probe_dist is not None:
        distribution = overrides.probe_dist

    threads = _get(doc, "threads", 1)
    if overrides.threads is not None:
        threads = overrides.threads

    try:
        train_cfg = zoo.TrainConfig(
            learning_rate=float(_get(doc, "train.learning_rate", 0.05)),
            momentum=float(_get(doc, "train.momentum", 0.9)),
            epochs=int(_get(doc, "train.epochs", 200)),
            batch_size=int(_get(doc, "train.batch_size", 32)),
            seed=int(seed),
            grad_tol=float(_get(doc, "train.grad_tol", 1e-4)),
        )
        config = RunConfig(
            experiment=str(_get(doc, "experiment", Path(path).stem)),
            seed=int(seed),
            out_dir=Path(out_dir),
            threads=int(threads),
            hidden_dims=[int(d) for d in _get(doc, "model.hidden_dims", [16, 12, 8])],
            activation=str(_get(doc, "model.activation", "relu")),
            dataset_kind=str(_get(doc, "dataset.kind", "gaussian-blobs")),
            n_samples=int(_get(doc, "dataset.n_samples", 192)),
            n_features=int(_get(doc, "dataset.n_features", 6)),
            n_classes=int(_get(doc, "dataset.n_classes", 3)),
            separation=float(_get(doc, "dataset.separation", 4.0)),
            train=train_cfg,
            probe_distribution=str(distribution),
            max_probes=int(max_probes),
            rel_stderr_tol=_get(doc, "probes.rel_stderr_tol", 0.05),
            trace_batch_size=int(_get(doc, "probes.batch_size", 128)),
            activation_inputs=int(_get(doc, "probes.activation_inputs", 0)),
            bit_menu=[int(b) for b in bit_menu],
            target_bytes=int(target_bytes) if target_bytes is not None else None,
            tie_mode=str(_get(doc, "plan.tie_mode", "stderr")),
            plan_limit=_get(doc, "plan.limit", None),
            finetune_enabled=bool(_get(doc, "finetune.enabled", True)),
            finetune_epochs=int(_get(doc, "finetune.epochs", 25)),
            finetune_lr=float(_get(doc, "finetune.learning_rate", 0.01)),
            finetune_batch_size=_get(doc, "finetune.batch_size", None),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid config value: {e}") from e
    if config.rel_stderr_tol is not None:
        config.rel_stderr_tol = float(config.rel_stderr_tol)
    if not config.bit_menu:
        raise ConfigError("plan.bit_menu must not be empty")
    if config.trace_batch_size > config.n_samples:
        config.trace_batch_size = config.n_samples
    return config


def make_dataset(config: RunConfig) -> zoo.Dataset:
    return zoo.make_synthetic(
        kind=config.dataset_kind,
        n_samples=config.n_samples,
        n_features=config.n_features,
        n_classes=config.n_classes,
        seed=config.seed,
        separation=config.separation,
    )


def make_model(config: RunConfig) -> zoo.Model:
    dims = [config.n_features, *config.hidden_dims, config.n_classes]
    return zoo.init_mlp(
        dims,
        activation=config.activation,
        loss_head=config.loss_head,
        seed=config.seed,
    )


# --------------------------------------------------------------------------
# artifacts
# --------------------------------------------------------------------------

CHECKPOINT = "checkpoint.json"
LOCAL_MIN = "local_min.json"
TRAIN_HISTORY = "train_history.csv"
TRACES = "traces.csv"
CONVERGENCE = "trace_convergence.csv"
FRONTIER = "frontier.csv"
ASSIGNMENT = "assignment.json"
QUANTIZED = "quantized_checkpoint.json"
FINETUNED = "finetuned_checkpoint.json"
SUMMARY = "summary.json"
FAILED_MARKER = "FAILED_STAGE"


def _artifact(config: RunConfig, name: str, producer: str) -> Path:
    path = config.out_dir / name
    if not path.exists():
        raise DependencyError(
            f"missing artifact {path}; run `hessquant {producer}` first"
        )
    return path


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------


def stage_train(config: RunConfig) -> tuple[zoo.Model, zoo.Dataset]:
    config.out_dir.mkdir(parents=True, exist_ok=True)
    dataset = make_dataset(config)
    result = zoo.train_sgd(make_model(config), dataset, config.train)
    zoo.save_checkpoint(result.model, config.out_dir / CHECKPOINT)
    with open(config.out_dir / TRAIN_HISTORY, "w", newline="") as fh:
        fh.write("epoch,loss\n")
        for epoch, loss in enumerate(result.loss_history):
            fh.write(f"{epoch},{loss!r}\n")
    verify = zoo.verify_local_min(
        result.model, dataset, grad_tol=config.train.grad_tol, seed=config.seed
    )
    _write_json(
        config.out_dir / LOCAL_MIN,
        {
            "grad_norm": verify.grad_norm,
            "grad_tol": verify.grad_tol,
            "min_rayleigh": verify.min_rayleigh,
            "rayleigh_quotients": verify.rayleigh_quotients,
            "gradient_ok": verify.gradient_ok,
            "curvature_ok": verify.curvature_ok,
            "psd_check_is_sampled": verify.psd_check_is_sampled,
            "converged": result.converged,
            "epochs_run": result.epochs_run,
        },
    )
    print(
        f"[train] {result.epochs_run} epochs, final grad norm "
        f"{result.final_grad_norm:.3e}, converged={result.converged}"
    )
    return result.model, dataset


def stage_trace(
    config: RunConfig, model: zoo.Model, dataset: zoo.Dataset
) -> list[trace.LayerTrace]:
    probe_config = config.probe_config()
    batch_size = min(config.trace_batch_size, len(dataset))
    traces = trace.layer_avg_traces(
        model, dataset, batch_size, probe_config, threads=config.threads
    )
    if config.activation_inputs > 0:
        traces = traces + trace.activation_avg_traces(
            model,
            dataset,
            min(config.activation_inputs, len(dataset)),
            probe_config,
            threads=config.threads,
        )
    trace.write_trace_csv(traces, config.out_dir / TRACES)
    trace.write_convergence_csv(
        {
            t.layer_index: trace.convergence_report(t.estimate)
            for t in traces
            if t.kind == "weight"
        },
        config.out_dir / CONVERGENCE,
    )
    for t in traces:
        flag = "  (negative)" if t.estimate.is_negative else ""
        print(
            f"[trace] {t.kind:<10} {t.layer_name:<8} avg_trace="
            f"{t.estimate.avg_trace:.6g} +- {t.estimate.stderr / t.block_dim:.2g}"
            f" ({t.estimate.probes_used} probes){flag}"
        )
    return traces


def stage_plan(
    config: RunConfig,
    model: zoo.Model,
    avg_traces: list[float],
    stderrs: list[float],
) -> tuple[planner.PlanResult, quantizer.Assignment]:
    config.out_dir.mkdir(parents=True, exist_ok=True)
    if config.target_bytes is None:
        raise ConfigError("set plan.target_bytes in the config or pass --target-bytes")
    if len(avg_traces) != len(model.layers):
        raise DependencyError(
            "trace artifact does not cover every layer; re-run `hessquant trace`"
        )
    result = planner.pareto_select(
        model,
        avg_traces,
        config.bit_menu,
        config.target_bytes,
        stderrs=stderrs,
        tie_mode=config.tie_mode,
        limit=config.plan_limit,
    )
    planner.write_frontier_csv(result.points, config.out_dir / FRONTIER)
    assignment = quantizer.Assignment(layer_bits=list(result.chosen.bits))
    quantizer.save_assignment(assignment, model, config.out_dir / ASSIGNMENT)
    print(
        f"[plan] {len(result.points)} admissible assignments; chose bits "
        f"{list(result.chosen.bits)} (size {result.chosen.size_bytes} B, "
        f"omega {result.chosen.omega:.6g})"
    )
    return result, assignment


def _plan_inputs(traces: list[trace.LayerTrace]) -> tuple[list[float], list[float]]:
    weight_rows = [t for t in traces if t.kind == "weight"]
    return (
        [t.estimate.avg_trace for t in weight_rows],
        [t.estimate.stderr / t.block_dim for t in weight_rows],
    )


def stage_quantize(
    config: RunConfig,
    model: zoo.Model,
    dataset: zoo.Dataset,
    assignment: quantizer.Assignment,
) -> dict:
    config.out_dir.mkdir(parents=True, exist_ok=True)
    quantized_model, schemes = quantizer.quantize_model(model, assignment)
    quantizer.export_quantized_checkpoint(
        quantized_model, schemes, config.out_dir / QUANTIZED
    )
    metrics = zoo.evaluate(quantized_model, dataset)
    print(f"[quantize] quantized loss {metrics['loss']:.6g}")
    return metrics


def stage_finetune(
    config: RunConfig,
    model: zoo.Model,
    dataset: zoo.Dataset,
    assignment: quantizer.Assignment,
) -> quantizer.QatResult:
    config.out_dir.mkdir(parents=True, exist_ok=True)
    result = quantizer.qat_finetune(
        model,
        dataset,
        assignment,
        epochs=config.finetune_epochs,
        learning_rate=config.finetune_lr,
        batch_size=config.finetune_batch_size,
        seed=config.seed,
    )
    zoo.save_checkpoint(result.model, config.out_dir / FINETUNED)
    quantizer.export_quantized_checkpoint(
        result.quantized_model, result.schemes, config.out_dir / QUANTIZED
    )
    print(f"[finetune] quantized loss {result.quantized['loss']:.6g}")
    return result


def _summary_doc(
    config: RunConfig,
    baseline: dict,
    quantized: dict,
    finetuned: dict | None,
    plan: planner.PlanResult,
    size: quantizer.SizeReport,
) -> dict:
    doc = {
        "experiment": config.experiment,
        "seed": config.seed,
        "bit_menu": config.bit_menu,
        "target_size_bytes": config.target_bytes,
        "chosen_bits": list(plan.chosen.bits),
        "size_bytes": size.size_bytes,
        "compression_ratio": size.compression_ratio,
        "omega": plan.chosen.omega,
        "baseline": baseline,
        "quantized": quantized,
    }
    if finetuned is not None:
        doc["finetuned"] = finetuned
    if plan.notes:
        doc["plan_notes"] = plan.notes
    return doc


def run_pipeline(config: RunConfig) -> None:
    config.out_dir.mkdir(parents=True, exist_ok=True)
    marker = config.out_dir / FAILED_MARKER
    stage = "train"
    try:
        model, dataset = stage_train(config)
        stage = "trace"
        traces = stage_trace(config, model, dataset)
        stage = "plan"
        avg_traces, stderrs = _plan_inputs(traces)
        plan, assignment = stage_plan(config, model, avg_traces, stderrs)
        stage = "quantize"
        baseline = zoo.evaluate(model, dataset)
        quantized = stage_quantize(config, model, dataset, assignment)
        finetuned = None
        if config.finetune_enabled:
            stage = "finetune"
            finetuned = stage_finetune(config, model, dataset, assignment).quantized
        stage = "summary"
        size = quantizer.model_size_bytes(model, assignment.layer_bits)
        _write_json(
            config.out_dir / SUMMARY,
            _summary_doc(config, baseline, quantized, finetuned, plan, size),
        )
        if marker.exists():
            marker.unlink()
        print(f"[pipeline] summary written to {config.out_dir / SUMMARY}")
    except Exception:
        marker.write_text(stage + "\n")
        raise


# --------------------------------------------------------------------------
# standalone subcommands
# --------------------------------------------------------------------------


def cmd_train(config: RunConfig, args) -> int:
    stage_train(config)
    return EXIT_OK


def cmd_trace(config: RunConfig, args) -> int:
    checkpoint = args.checkpoint or _artifact(config, CHECKPOINT, "train")
    model = zoo.load_checkpoint(checkpoint)
    config.out_dir.mkdir(parents=True, exist_ok=True)
    stage_trace(config, model, make_dataset(config))
    return EXIT_OK


def cmd_plan(config: RunConfig, args) -> int:
    model = zoo.load_checkpoint(args.checkpoint or _artifact(config, CHECKPOINT, "train"))
    rows = trace.read_trace_csv(args.traces or _artifact(config, TRACES, "trace"))
    weight_rows = [r for r in rows if r.kind == "weight"]
    stage_plan(
        config,
        model,
        [r.avg_trace for r in weight_rows],
        [r.trace_stderr / r.block_dim for r in weight_rows],
    )
    return EXIT_OK


def cmd_quantize(config: RunConfig, args) -> int:
    model = zoo.load_checkpoint(args.checkpoint or _artifact(config, CHECKPOINT, "train"))
    assignment = quantizer.load_assignment(
        args.assignment or _artifact(config, ASSIGNMENT, "plan")
    )
    stage_quantize(config, model, make_dataset(config), assignment)
    return EXIT_OK


def cmd_finetune(config: RunConfig, args) -> int:
    model = zoo.load_checkpoint(args.checkpoint or _artifact(config, CHECKPOINT, "train"))
    assignment = quantizer.load_assignment(
        args.assignment or _artifact(config, ASSIGNMENT, "plan")
    )
    stage_finetune(config, model, make_dataset(config), assignment)
    return EXIT_OK


def cmd_analyze(config: RunConfig, args) -> int:
    if args.what == "quadratic-demo":
        report = analysis.quadratic_sensitivity_demo(
            probes=config.max_probes, seed=config.seed
        )
        print(analysis.quadratic_demo_table(report))
        return EXIT_OK

    model = zoo.load_checkpoint(args.checkpoint or _artifact(config, CHECKPOINT, "train"))
    dataset = make_dataset(config)
    config.out_dir.mkdir(parents=True, exist_ok=True)

    if args.what == "perturb":
        layer_i, layer_j = args.layers
        report = analysis.perturbation_ordering_check(
            model,
            dataset,
            layer_i,
            layer_j,
            args.norm,
            seed=config.seed,
            quant_bits=args.quant_bits,
        )
        doc = analysis.perturbation_report_dict(report)
        _write_json(config.out_dir / f"perturb_{layer_i}_{layer_j}.json", doc)
        print(json.dumps(doc, indent=2, sort_keys=True))
        return EXIT_OK

    if args.what == "landscape":
        grid = analysis.loss_landscape_grid(
            model,
            dataset,
            args.layer,
            grid_radius=args.radius,
            grid_points=args.points,
            seed=config.seed,
        )
        path = config.out_dir / f"landscape_layer{args.layer}.csv"
        analysis.write_landscape_csv(grid, path)
        print(
            f"[analyze] layer {args.layer}: top eigenvalues "
            f"{grid.eigenvalues[0]:.6g}, {grid.eigenvalues[1]:.6g}; "
            f"grid written to {path}"
        )
        if not grid.converged:
            print("[analyze] warning: eigen-solver did not fully converge")
        return EXIT_OK

    if args.what == "ordering":
        rows = [
            r
            for r in trace.read_trace_csv(_artifact(config, TRACES, "trace"))
            if r.kind == "weight"
        ]
        batch = dataset.batch()
        eigs = []
        for r in rows:
            oracle, dim = engine.weight_hvp_oracle(model, batch, r.layer_index)
            eigs.append(engine.top_eigenpair(oracle, dim, seed=config.seed).value)
        report = analysis.ordering_compare([r.avg_trace for r in rows], eigs)
        doc = {
            "trace_order": report.trace_order,
            "eigenvalue_order": report.eigenvalue_order,
            "discordant_pairs": [list(p) for p in report.discordant_pairs],
            "kendall_distance": report.kendall_distance,
            "normalized_distance": report.normalized_distance,
        }
        _write_json(config.out_dir / "ordering.json", doc)
        print(json.dumps(doc, indent=2, sort_keys=True))
        return EXIT_OK

    raise ConfigError(f"unknown analyze mode {args.what!r}")


def cmd_report(config: RunConfig, args) -> int:
    from .report import render_report

    written = render_report(args.run or config.out_dir)
    for path in written:
        print(f"[report] wrote {path}")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing and dispatch
# --------------------------------------------------------------------------


def _bits_list(text: str) -> list[int]:
    try:
        return [int(b) for b in text.split(",") if b]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad bit list {text!r}") from e


def _layer_pair(text: str) -> tuple[int, int]:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected two layer indices, e.g. 0,2")
    return int(parts[0]), int(parts[1])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hessquant",
        description="Hessian-trace-aware mixed-precision quantization planning",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment config JSON")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=None)
    common.add_argument("--out", default=None, help=f"output dir (env {OUT_ENV_VAR} wins)")
    common.add_argument("--bits", type=_bits_list, default=None, help="e.g. 2,4,8")
    common.add_argument("--target-bytes", type=int, default=None)
    common.add_argument("--probes", type=int, default=None)
    common.add_argument(
        "--probe-dist", choices=["rademacher", "gaussian"], default=None
    )

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("pipeline", parents=[common], help="run every stage in order")
    sub.add_parser("train", parents=[common], help="train and checkpoint the model")

    p_trace = sub.add_parser("trace", parents=[common], help="estimate layer traces")
    p_trace.add_argument("--checkpoint", default=None)

    p_plan = sub.add_parser("plan", parents=[common], help="select bit widths")
    p_plan.add_argument("--checkpoint", default=None)
    p_plan.add_argument("--traces", default=None)

    p_quant = sub.add_parser("quantize", parents=[common], help="apply an assignment")
    p_quant.add_argument("--checkpoint", default=None)
    p_quant.add_argument("--assignment", default=None)

    p_ft = sub.add_parser("finetune", parents=[common], help="quantization-aware fine-tune")
    p_ft.add_argument("--checkpoint", default=None)
    p_ft.add_argument("--assignment", default=None)

    p_an = sub.add_parser("analyze", parents=[common], help="curvature studies")
    p_an.add_argument(
        "what", choices=["quadratic-demo", "perturb", "landscape", "ordering"]
    )
    p_an.add_argument("--checkpoint", default=None)
    p_an.add_argument("--layers", type=_layer_pair, default=(0, 1))
    p_an.add_argument("--norm", type=float, default=1e-2)
    p_an.add_argument("--quant-bits", type=int, default=None)
    p_an.add_argument("--layer", type=int, default=0)
    p_an.add_argument("--radius", type=float, default=0.5)
    p_an.add_argument("--points", type=int, default=9)

    p_rep = sub.add_parser("report", parents=[common], help="render text + figures")
    p_rep.add_argument("--run", default=None, help="run dir (defaults to out dir)")
    return parser


_HANDLERS = {
    "train": cmd_train,
    "trace": cmd_trace,
    "plan": cmd_plan,
    "quantize": cmd_quantize,
    "finetune": cmd_finetune,
    "analyze": cmd_analyze,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, args)
        if args.command == "pipeline":
            run_pipeline(config)
            return EXIT_OK
        return _HANDLERS[args.command](config, args)
    except (zoo.TrainingDivergedError, engine.NumericalError,
            analysis.NotConvergedError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except planner.InfeasibleBudgetError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ConfigError, DependencyError, zoo.CheckpointError, trace.TraceError,
            quantizer.QuantizationError, planner.PlannerError, zoo.ZooError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

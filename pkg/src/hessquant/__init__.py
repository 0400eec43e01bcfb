"""Hessian-trace-aware mixed-precision quantization planning at desk scale.

Train a small dense network, estimate per-layer average Hessian traces with
a matrix-free Hutchinson estimator (for weights and activations), enumerate
the trace-order-admissible bit assignments, and pick the one minimizing the
trace-weighted quantization perturbation under a model-size budget.
"""

from .engine import (
    EigenResult,
    NumericalError,
    ShapeMismatchError,
    Tensor,
    eval_loss,
    grad,
    hvp_activations,
    hvp_weights,
    top_eigenpair,
)
from .planner import (
    AdmissibleSet,
    BitAssignment,
    InfeasibleBudgetError,
    compute_omega,
    count_admissible,
    count_finetune_orderings,
    count_unconstrained,
    pareto_select,
)
from .quantizer import (
    Assignment,
    QuantScheme,
    QuantizedTensor,
    RangePolicy,
    model_size_bytes,
    perturbation_l2,
    qat_finetune,
    quantize,
    ste_grad,
)
from .trace import (
    ProbeConfig,
    TraceEstimate,
    activation_avg_traces,
    hutchinson_trace,
    layer_avg_traces,
)
from .zoo import (
    Dataset,
    Layer,
    Model,
    TrainConfig,
    load_checkpoint,
    make_synthetic,
    save_checkpoint,
    train_sgd,
    verify_local_min,
)

__version__ = "0.1.0"

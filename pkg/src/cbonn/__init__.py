"""Derivative-free training of two-layer ReLU networks.

Consensus-based optimization (CBO), Adam, a hybrid of the two, a multi-task
CBO variant, and an optimal-transport formulation where networks are empirical
measures and the consensus point is a Wasserstein barycenter.
"""

__version__ = "0.1.0"

from .network import (
    EmpiricalMeasure,
    LossKind,
    NetworkShape,
    barron_estimate,
    empirical_risk,
    forward,
    forward_batch,
    forward_measure,
    forward_measure_batch,
    gradient,
    loss,
    measure_risk,
    to_measure,
    to_params,
)
from .data import (
    Dataset,
    IdxFormatError,
    MinibatchSampler,
    TaskSet,
    gen_class_images,
    gen_shifted_sines,
    gen_sine,
    gen_square,
    load_mnist_idx,
    next_batch,
    write_idx_images,
    write_idx_labels,
)
from .optim import (
    AdamState,
    CBOConfig,
    Ensemble,
    HybridConfig,
    ScheduleConfig,
    adam_step,
    apply_schedules,
    block_assignment,
    cbo_step,
    consensus_point,
    gibbs_weights,
    hybrid_step,
    init_ensemble,
    multitask_step,
)
from .transport import (
    Assignment,
    Barycenter,
    MeasureEnsemble,
    barycenter,
    ensemble_variance,
    init_measure_ensemble,
    ot_cbo_step,
    w2_empirical,
)

__all__ = [name for name in dir() if not name.startswith("_")]

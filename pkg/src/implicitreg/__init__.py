"""Implicit-regularization toolkit.

Library surface for studying how discrete optimizers (SGD and variants)
track gradient flow on modified losses: model families with exact gradients
and Hessian-vector products, batch partitioning and scheduling, modified-loss
evaluation and high-accuracy flow integration, optimizers, and a verification
harness of exact-expectation oracles and scaling experiments.
"""

from .batching import (
    BatchPartition,
    EpochSchedule,
    enumerate_all_batches,
    enumerate_orderings,
    make_partition,
    palindromic_schedule,
    sample_ordering,
)
from .data import (
    Dataset,
    gaussian_cluster_split,
    gaussian_clusters,
    load_csv,
    save_csv,
    xor_cluster_split,
    xor_clusters,
)
from .flows import (
    FlowSpec,
    c_reg,
    expected_modified_loss,
    flow_loss,
    gamma_trace,
    gamma_trace_grad,
    integrate_flow,
    modified_flow_gradient,
    modified_loss_gd,
    modified_loss_nsgd,
    modified_loss_sgd,
    modified_loss_sgd_expanded,
)
from .models import (
    LogisticRegressionModel,
    LossModel,
    QuadraticEnsemble,
    SmallMlp,
    random_quadratic_ensemble,
)
from .optim import (
    DivergenceError,
    EpochRow,
    RunRecord,
    TrainConfig,
    derive_seed,
    gd_step,
    modified_loss_sgd_epoch,
    nstep_sgd_epoch,
    run_schedule,
    sgd_epoch,
    train,
)
from .verify import (
    ScalingReport,
    default_eps_grid,
    enumerate_partitions,
    error_scaling_experiment,
    expected_sgd_iterate_exact,
    expected_sgd_iterate_mc,
    fit_loglog_slope,
    mean_modified_loss_over_partitions,
    minibatch_grad_error_bruteforce,
    minibatch_grad_error_closed,
    nstep_first_order_check,
    nstep_scaling_experiment,
    palindrome_scaling_experiment,
    xi_expectation_closed,
    xi_expectation_direct,
)

__version__ = "0.1.0"

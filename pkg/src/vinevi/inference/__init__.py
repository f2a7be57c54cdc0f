from .bounds import (
    VrIwaeConfig,
    draw_eps,
    log_weights,
    normalized_weights,
    vr_iwae_estimate,
    vr_iwae_from_log_weights,
    vr_iwae_gradient,
    vr_iwae_value_and_grad,
)
from .fitting import (
    GLOBAL_CRITERION,
    MAX_ITERS,
    MAX_TREE,
    GcviReport,
    OptimizerConfig,
    StageResult,
    StepwiseReport,
    StopConfig,
    fit_stage,
    gcvi_fit,
    mf_fit,
    stepwise_fit,
)
from .optimizers import SGD, Adam, make_optimizer, optimizer_step
from .rhat import NOT_CONVERGED, RhatMonitor, split_rhat

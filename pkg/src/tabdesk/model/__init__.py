"""Three-stage tabular in-context learner with classification and regression heads."""

from .config import ModelConfig
from .forward import (
    ContextCache,
    ContractError,
    ForwardOutput,
    bounded,
    build_context_cache,
    cached_trunk,
    classify_head,
    column_embed,
    feature_groups,
    forward,
    forward_cached,
    group_features,
    icl_forward,
    inducing_summary,
    qassmax_base,
    qassmax_scale,
    quantile_levels,
    regress_head,
    residual_blend,
    row_interact,
    softcap,
    target_embed,
    trunk,
)
from .params import (
    ModelParams,
    init_params,
    lambda_schedule,
    load_checkpoint,
    save_checkpoint,
)

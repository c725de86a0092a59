"""Synthetic pretraining data from random DAG structural causal models."""

from .archive import read_dataset, write_dataset
from .filter import FilterConfig, FilterResult, extratrees_fit, extratrees_score, quality_filter
from .generate import (
    DatasetRejected,
    GenerationError,
    GeneratorConfig,
    SyntheticDataset,
    generate_dataset,
    postprocess,
    to_classification,
)
from .scm import (
    FUNCTION_TYPES,
    ROOT_DISTRIBUTIONS,
    NonFiniteOutput,
    ScmGraph,
    apply_function,
    assign_functions,
    inject_noise,
    propagate,
    sample_dag,
    sample_root_column,
    sample_roots,
)

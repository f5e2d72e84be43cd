"""Hierarchical mixture-of-experts diffusion transformer for image restoration.

Pure-numpy reverse-mode autodiff, a DiT backbone whose conditioning branch is
a mixture of attention-expert groups with dense inter- and sparse intra-
routing, a rectified-flow objective with an Euler sampler, a synthetic
degradation lab, and deterministic training/evaluation tooling.
"""

from .errors import (
    ConfigurationError,
    ContractError,
    DimensionError,
    MimError,
    NumericalFailureError,
    ParameterError,
    PersistenceError,
)
from .tensor import Tensor, backward, computation_graph, read_tensor, write_tensor
from .gradcheck import FD_STEP, FD_TOLERANCE, central_difference, max_relative_error, relative_error
from .attention import TokenSequence
from .routing import GROUP_ORDER, VARIANTS, MiM, MiMConfig, RoutingTrace, mim_forward
from .backbone import (
    MiMDiT,
    latent_sequence,
    load_checkpoint,
    patchify,
    save_checkpoint,
    unpatchify,
)
from .flow import SamplerConfig, euler_sample, flow_loss, interpolate
from .degradations import (
    KINDS,
    DegradationSpec,
    PairedSample,
    apply_degradation,
    build_dataset,
    load_dataset,
    make_spec,
    synthesize_clean,
    write_dataset,
    write_pgm,
    write_ppm,
)
from .training import (
    Adam,
    DataConfig,
    ExperimentConfig,
    MetricsRecord,
    OptimizerConfig,
    RoutingReport,
    aggregate_traces,
    collect_routing_traces,
    evaluate_model,
    from_ini_text,
    load_ini,
    psnr_from_mse,
    render_ablation_table,
    render_routing_report,
    restore_image,
    run_ablation,
    to_ini_text,
    train_model,
)
from .estimator import MiMRestorer, validate_image_batch

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "ConfigurationError",
    "ContractError",
    "DataConfig",
    "DegradationSpec",
    "DimensionError",
    "ExperimentConfig",
    "FD_STEP",
    "FD_TOLERANCE",
    "GROUP_ORDER",
    "KINDS",
    "MetricsRecord",
    "MiM",
    "MiMConfig",
    "MiMDiT",
    "MiMRestorer",
    "MimError",
    "NumericalFailureError",
    "OptimizerConfig",
    "PairedSample",
    "ParameterError",
    "PersistenceError",
    "RoutingReport",
    "RoutingTrace",
    "SamplerConfig",
    "Tensor",
    "TokenSequence",
    "VARIANTS",
    "aggregate_traces",
    "apply_degradation",
    "backward",
    "build_dataset",
    "central_difference",
    "collect_routing_traces",
    "computation_graph",
    "euler_sample",
    "evaluate_model",
    "flow_loss",
    "from_ini_text",
    "interpolate",
    "latent_sequence",
    "load_checkpoint",
    "load_dataset",
    "load_ini",
    "make_spec",
    "max_relative_error",
    "mim_forward",
    "patchify",
    "psnr_from_mse",
    "read_tensor",
    "relative_error",
    "render_ablation_table",
    "render_routing_report",
    "restore_image",
    "run_ablation",
    "save_checkpoint",
    "synthesize_clean",
    "to_ini_text",
    "train_model",
    "unpatchify",
    "validate_image_batch",
    "write_dataset",
    "write_pgm",
    "write_ppm",
    "write_tensor",
]

"""prime-traffic - plasticity-triggered incremental learning for encrypted traffic classification."""

from importlib.metadata import version

__version__ = version("prime-traffic")

from .config import RunConfig, load_config
from .errors import (
    ConfigError,
    DegenerateMatrixError,
    FreezeViolation,
    GradientError,
    LabelConflictError,
    MetricsError,
    PcapError,
    PreconditionError,
    PrimeError,
    ScenarioMismatchError,
    ShapeError,
    UnsupportedFormatError,
)
from .features import Dataset, FeatureVector, extract_features
from .harness import compare, ingest_external, run_scenario, sweep
from .incremental import (
    ewc_train_task,
    lwf_train_expanded,
    lwf_train_task,
    naive_train_task,
    prime_controller,
    train_base,
    widen,
)
from .metrics import AccuracyMatrix, aggregate, compute
from .model import PartitionedModel, backward, forward, load_checkpoint, save_checkpoint
from .pcap import FlowKey, FlowRecord, assemble_flows, parse_pcap
from .plasticity import effective_rank, entropy_efficiency, evaluate, plan_expansion
from .synth import make_profiles, sample_dataset, stage_stream

__all__ = [
    "AccuracyMatrix",
    "ConfigError",
    "Dataset",
    "DegenerateMatrixError",
    "FeatureVector",
    "FlowKey",
    "FlowRecord",
    "FreezeViolation",
    "GradientError",
    "LabelConflictError",
    "MetricsError",
    "PartitionedModel",
    "PcapError",
    "PreconditionError",
    "PrimeError",
    "RunConfig",
    "ScenarioMismatchError",
    "ShapeError",
    "UnsupportedFormatError",
    "aggregate",
    "assemble_flows",
    "backward",
    "compare",
    "compute",
    "effective_rank",
    "entropy_efficiency",
    "evaluate",
    "ewc_train_task",
    "extract_features",
    "forward",
    "ingest_external",
    "load_checkpoint",
    "load_config",
    "lwf_train_expanded",
    "lwf_train_task",
    "make_profiles",
    "naive_train_task",
    "parse_pcap",
    "plan_expansion",
    "prime_controller",
    "run_scenario",
    "sample_dataset",
    "save_checkpoint",
    "stage_stream",
    "sweep",
    "train_base",
    "widen",
]

"""Light-field 3D Richardson-Lucy deconvolution with DCT-entropy automatic stopping."""

from .deconv import DeconvResult, MetricEntry, MetricSeries, StopPolicy, deconvolve, rl_step
from .lfmodel import PsfStack, backward_project, compute_normalizer, forward_project
from .metric import MetricConfig, dct2, dct_entropy, idct2, max_project_z, shannon_entropy
from .optics import CutoffRegion, OpticsParams, cutoff_region, resolution_limit, sample_pitch
from .pipeline import WorkerPlan, estimate_memory, partition_layers, plan_workers, run_parallel

__version__ = "0.1.0"

__all__ = [
    "CutoffRegion",
    "DeconvResult",
    "MetricConfig",
    "MetricEntry",
    "MetricSeries",
    "OpticsParams",
    "PsfStack",
    "StopPolicy",
    "WorkerPlan",
    "backward_project",
    "compute_normalizer",
    "cutoff_region",
    "dct2",
    "dct_entropy",
    "deconvolve",
    "estimate_memory",
    "forward_project",
    "idct2",
    "max_project_z",
    "partition_layers",
    "plan_workers",
    "resolution_limit",
    "rl_step",
    "run_parallel",
    "sample_pitch",
    "shannon_entropy",
]

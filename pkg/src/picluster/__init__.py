"""Master/worker cluster toolkit: distributed mat-vec and Monte Carlo pi, with a benchmark harness."""

from .core import (
    ClusterTopology,
    DenseVector,
    Matrix,
    PartitionPlan,
    PiEstimate,
    SampleBudget,
    WorkerEndpoint,
    load_topology,
    parse_topology,
    partition,
    shard_row_range,
)
from .kernels import (
    PartialEstimate,
    RngStreamSpec,
    combine_estimates,
    matvec_parallel,
    matvec_sequential,
    mc_pi_parallel,
    mc_pi_sequential,
)

__version__ = "0.1.0"

__all__ = [
    "ClusterTopology",
    "DenseVector",
    "Matrix",
    "PartialEstimate",
    "PartitionPlan",
    "PiEstimate",
    "RngStreamSpec",
    "SampleBudget",
    "WorkerEndpoint",
    "combine_estimates",
    "load_topology",
    "matvec_parallel",
    "matvec_sequential",
    "mc_pi_parallel",
    "mc_pi_sequential",
    "parse_topology",
    "partition",
    "shard_row_range",
]

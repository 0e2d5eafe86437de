"""Deterministic simulator for personalized federated learning with
clustered (contextualized) generalized models."""

__version__ = "0.1.0"

from .client import ClientState, LocalUpdateReport, local_round, solve_theta
from .data import (
    ClientShard,
    Dataset,
    PartitionConfig,
    load_idx,
    load_shards,
    partition_noniid,
    save_shards,
    synth_contexts,
)
from .models import (
    Batch,
    ModelSpec,
    grad,
    init_params,
    loss,
    personalized_grad,
    personalized_objective,
    predict,
)
from .orchestrator import (
    RoundMetrics,
    RunConfig,
    RunOutput,
    evaluate,
    run,
    run_cgpfl,
    run_cgpfl_heur,
    run_fedavg,
    run_global_prox,
)
from .server import (
    Assignment,
    ServerState,
    TransitionRecord,
    aggregate,
    cluster_clients,
    cost,
    heuristic_select_K,
    kmeans_pp_seed,
    lloyd,
    transition,
)

__all__ = [
    "Assignment",
    "Batch",
    "ClientShard",
    "ClientState",
    "Dataset",
    "LocalUpdateReport",
    "ModelSpec",
    "PartitionConfig",
    "RoundMetrics",
    "RunConfig",
    "RunOutput",
    "ServerState",
    "TransitionRecord",
    "aggregate",
    "cluster_clients",
    "cost",
    "evaluate",
    "grad",
    "heuristic_select_K",
    "init_params",
    "kmeans_pp_seed",
    "lloyd",
    "load_idx",
    "load_shards",
    "local_round",
    "loss",
    "partition_noniid",
    "personalized_grad",
    "personalized_objective",
    "predict",
    "run",
    "run_cgpfl",
    "run_cgpfl_heur",
    "run_fedavg",
    "run_global_prox",
    "save_shards",
    "solve_theta",
    "synth_contexts",
    "transition",
]

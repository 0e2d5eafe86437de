"""Training loops: the clustered-generalization algorithm, its heuristic
K-selection variant, a FedAvg baseline, and a single-global proximal
baseline (the exact K=1 reduction of the clustered algorithm).

Every run is deterministic given its RunConfig: client generators are
spawned from the run seed in client-id order, uploads are reduced in
client-id order, and the server owns a separate generator. Client work
inside a round may execute on a thread pool (size capped by the
CGPFL_THREADS environment variable) without affecting any result.
"""

from __future__ import annotations

import csv
import json
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .client import ClientState, LocalUpdateReport, full_batch, local_round, sgd_steps
from .data import ClientShard
from .errors import ConfigError, NumericalError
from .models import ModelSpec, init_params, loss, predict
from .server import (
    Assignment,
    KSelectionRow,
    ServerState,
    TransitionRecord,
    aggregate,
    aggregate_omegas,
    build_assignment,
    cluster_clients,
    cost,
    heuristic_select_K,
    project_columns,
    round_robin_assignment,
    transition,
)

CGPFL = "cgpfl"
CGPFL_HEUR = "cgpfl_heur"
FEDAVG = "fedavg"
GLOBAL_PROX = "global_prox"

ALGORITHMS = (CGPFL, CGPFL_HEUR, FEDAVG, GLOBAL_PROX)

METRICS_COLUMNS = (
    "round",
    "mean_test_accuracy",
    "mean_train_loss",
    "grad_norm_sq_avg",
    "changed_clients",
    "cost_value",
    "wall_ms",
)


@dataclass
class RunConfig:
    model: ModelSpec
    algorithm: str = CGPFL
    num_clients: int = 40
    K: int = 4
    T: int = 200
    R: int = 10
    S: int = 5
    lam: float = 12.0
    eta: float = 0.005
    beta: float | None = None  # None -> eta
    alpha: float = 1.0
    mu: float = 1.0
    batch_size: int = 32
    seed: int = 0
    eval_every: int = 1
    K_min: int = 1
    K_max: int | None = None  # None -> num_clients // 2, floor 1
    weights: str = "data"  # "data": m_i / m, "uniform": 1 / N
    proj_radius: float | None = None
    reset_theta_each_round: bool = False
    heur_rerun_every: int = 0  # 0: select K in round 0 only
    record_omegas: bool = False

    @property
    def beta_value(self) -> float:
        return self.eta if self.beta is None else self.beta

    @property
    def k_max_value(self) -> int:
        if self.K_max is not None:
            return self.K_max
        return max(1, self.num_clients // 2)

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.num_clients < 1:
            raise ConfigError("num_clients must be >= 1")
        if not (1 <= self.K <= self.num_clients):
            raise ConfigError("need 1 <= K <= num_clients")
        if self.T < 0:
            raise ConfigError("T must be >= 0")
        if self.R < 1 or self.S < 1:
            raise ConfigError("R and S must be >= 1")
        if self.eta <= 0 or self.beta_value <= 0:
            raise ConfigError("eta and beta must be positive")
        if self.lam < 0 or self.mu < 0:
            raise ConfigError("lam and mu must be non-negative")
        if not (0.0 < self.alpha <= 1.0):
            raise ConfigError("alpha must lie in (0, 1]")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if not (1 <= self.K_min <= self.k_max_value <= self.num_clients):
            raise ConfigError("need 1 <= K_min <= K_max <= num_clients")
        if self.weights not in ("data", "uniform"):
            raise ConfigError("weights must be 'data' or 'uniform'")
        # smoothness ceiling for the local generalized-model step, with the
        # curvature of the quadratic sub-objective estimated as 2 / N
        ceiling = self.num_clients / (4.0 * np.sqrt(self.R * (self.R + 1)))
        if self.beta_value > ceiling:
            warnings.warn(
                f"beta={self.beta_value:g} exceeds the stability ceiling "
                f"{ceiling:g} for R={self.R}, N={self.num_clients}",
                stacklevel=2,
            )


@dataclass
class RoundMetrics:
    round: int
    mean_test_accuracy: float
    mean_train_loss: float
    grad_norm_sq_avg: float
    changed_clients: int
    cost_value: float
    wall_ms: int


@dataclass
class RunOutput:
    metrics: list[RoundMetrics]
    clients: list[ClientState]
    omegas: np.ndarray
    assignments: list[Assignment] = field(default_factory=list)
    transitions: list[TransitionRecord] = field(default_factory=list)
    omega_trajectory: list[np.ndarray] = field(default_factory=list)
    selected_K: int | None = None
    ek_table: list[KSelectionRow] | None = None


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get("CGPFL_THREADS", "1")))
    except ValueError:
        return 1


def build_clients(
    cfg: RunConfig, shards: list[ClientShard], theta0: np.ndarray
) -> list[ClientState]:
    """Client states with spawned generators, all starting from theta0."""
    if len(shards) != cfg.num_clients:
        raise ConfigError(
            f"got {len(shards)} shards for num_clients={cfg.num_clients}"
        )
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.num_clients)
    clients = []
    for shard, ss in zip(sorted(shards, key=lambda s: s.client_id), children):
        clients.append(
            ClientState(
                client_id=shard.client_id,
                shard=shard,
                theta=theta0.copy(),
                omega_local=None,
                rng=np.random.default_rng(ss),
            )
        )
    return clients


def initialize_run(
    cfg: RunConfig, shards: list[ClientShard]
) -> tuple[list[ClientState], np.ndarray, np.random.Generator]:
    """Clients, the shared initial model, and the server generator.

    All personal models and every generalized model start from the same
    drawn vector: with distinct per-client starts the early uploads differ
    mostly by initialization noise, which drowns the context signal the
    clustering step needs.
    """
    root = np.random.SeedSequence(cfg.seed)
    children = root.spawn(cfg.num_clients + 2)
    init_rng = np.random.default_rng(children[cfg.num_clients])
    server_rng = np.random.default_rng(children[cfg.num_clients + 1])
    omega0 = init_params(cfg.model, init_rng)
    return build_clients(cfg, shards, omega0), omega0, server_rng


def client_weights(cfg: RunConfig, shards: list[ClientShard]) -> np.ndarray:
    if cfg.weights == "uniform":
        return np.full(cfg.num_clients, 1.0 / cfg.num_clients)
    ordered = sorted(shards, key=lambda s: s.client_id)
    sizes = np.array([len(s.train) for s in ordered], dtype=np.float64)
    return sizes / sizes.sum()


def evaluate(
    spec: ModelSpec,
    states: list[ClientState],
    mode: str = "personalized",
    omegas: np.ndarray | None = None,
    assignment: Assignment | None = None,
) -> tuple[float, np.ndarray]:
    """Per-client test accuracy and its unweighted mean.

    mode "personalized" scores each client's own model; mode "global"
    scores the generalized model the client is assigned to.
    """
    per_client = np.empty(len(states))
    labels = assignment.labels() if assignment is not None else None
    for i, state in enumerate(states):
        if mode == "personalized":
            params = state.theta
        elif mode == "global":
            if omegas is None or labels is None:
                raise ConfigError("global evaluation needs omegas and an assignment")
            params = omegas[:, labels[state.client_id]]
        else:
            raise ConfigError(f"unknown evaluation mode {mode!r}")
        test = state.shard.test
        per_client[i] = float(
            np.mean(predict(spec, params, test.features) == test.labels)
        )
    return float(per_client.mean()), per_client


def _mean_train_loss(spec: ModelSpec, states: list[ClientState], params_of) -> float:
    values = [
        loss(spec, params_of(state), full_batch(state.shard.train)) for state in states
    ]
    return float(np.mean(values))


def _grad_norm_sq_avg(reports: list[LocalUpdateReport], k: int) -> float:
    return float(sum(r.grad_norm_sq for r in reports) / k)


def _run_local_rounds(
    cfg: RunConfig,
    clients: list[ClientState],
    omega_of_client,
    round_index: int,
) -> list[LocalUpdateReport]:
    def work(state: ClientState) -> LocalUpdateReport:
        if cfg.reset_theta_each_round:
            state.theta = omega_of_client(state.client_id).copy()
        return local_round(
            cfg.model,
            state,
            omega_of_client(state.client_id),
            lam=cfg.lam,
            eta=cfg.eta,
            beta=cfg.beta_value,
            outer_iters=cfg.R,
            inner_steps=cfg.S,
            num_clients=cfg.num_clients,
            batch_size=cfg.batch_size,
        )

    try:
        workers = _worker_count()
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                return list(pool.map(work, clients))
        return [work(state) for state in clients]
    except NumericalError as err:
        raise NumericalError(str(err), round=round_index) from err


def _uploads_matrix(reports: list[LocalUpdateReport]) -> np.ndarray:
    return np.column_stack([r.omega_out for r in reports])


def _thetas_matrix(clients: list[ClientState]) -> np.ndarray:
    return np.column_stack([c.theta for c in clients])


def _round_metrics(
    cfg: RunConfig,
    t: int,
    clients: list[ClientState],
    reports: list[LocalUpdateReport],
    omegas: np.ndarray,
    weights: np.ndarray,
    changed: int,
    wall_ms: int,
) -> RoundMetrics:
    mean_acc, _ = evaluate(cfg.model, clients, "personalized")
    return RoundMetrics(
        round=t,
        mean_test_accuracy=mean_acc,
        mean_train_loss=_mean_train_loss(cfg.model, clients, lambda s: s.theta),
        grad_norm_sq_avg=_grad_norm_sq_avg(reports, omegas.shape[1]),
        changed_clients=changed,
        cost_value=cost(_thetas_matrix(clients), omegas, weights),
        wall_ms=wall_ms,
    )


def _should_eval(cfg: RunConfig, t: int) -> bool:
    return t % cfg.eval_every == 0 or t == cfg.T - 1


def run_cgpfl(cfg: RunConfig, shards: list[ClientShard]) -> RunOutput:
    """The clustered-generalization loop with a fixed cluster count."""
    cfg.validate()
    k = cfg.K
    clients, omega0, server_rng = initialize_run(cfg, shards)
    server = ServerState(
        omegas=np.tile(omega0[:, None], (1, k)),
        assignment=round_robin_assignment(cfg.num_clients, k),
    )
    weights = client_weights(cfg, shards)
    out = RunOutput(metrics=[], clients=clients, omegas=server.omegas)

    for t in range(cfg.T):
        started = time.perf_counter()
        labels = server.assignment.labels()
        reports = _run_local_rounds(
            cfg, clients, lambda i: server.omegas[:, labels[i]], t
        )
        uploads = _uploads_matrix(reports)

        prev = server.assignment
        server.assignment = cluster_clients(uploads, k, server_rng, prev)
        record = transition(prev, server.assignment)
        server.prev_assignment = prev
        server.omegas = aggregate(server, uploads, cfg.alpha)
        if cfg.proj_radius is not None:
            server.omegas = project_columns(server.omegas, cfg.proj_radius)
        server.round = t + 1

        out.assignments.append(server.assignment)
        out.transitions.append(record)
        if cfg.record_omegas:
            out.omega_trajectory.append(server.omegas.copy())
        if _should_eval(cfg, t):
            wall_ms = int((time.perf_counter() - started) * 1000)
            out.metrics.append(
                _round_metrics(
                    cfg, t, clients, reports, server.omegas, weights,
                    record.changed_clients, wall_ms,
                )
            )

    out.omegas = server.omegas
    return out


def run_global_prox(cfg: RunConfig, shards: list[ClientShard]) -> RunOutput:
    """Single-global proximal baseline: one generalized model, no clustering.

    Uses the same aggregation arithmetic as the clustered path so that its
    model trajectory is bit-identical to run_cgpfl with K=1 under a shared
    seed.
    """
    cfg.validate()
    clients, omega0, _ = initialize_run(cfg, shards)
    omegas = omega0[:, None]
    p_single = np.full((cfg.num_clients, 1), 1.0 / cfg.num_clients)
    weights = client_weights(cfg, shards)
    single = build_assignment([list(range(cfg.num_clients))], cfg.num_clients)
    out = RunOutput(metrics=[], clients=clients, omegas=omegas)

    for t in range(cfg.T):
        started = time.perf_counter()
        reports = _run_local_rounds(cfg, clients, lambda i: omegas[:, 0], t)
        uploads = _uploads_matrix(reports)
        omegas = aggregate_omegas(omegas, uploads, p_single, cfg.alpha)
        if cfg.proj_radius is not None:
            omegas = project_columns(omegas, cfg.proj_radius)
        if not np.all(np.isfinite(omegas)):
            raise NumericalError("non-finite aggregated model", round=t)

        out.assignments.append(single)
        if cfg.record_omegas:
            out.omega_trajectory.append(omegas.copy())
        if _should_eval(cfg, t):
            wall_ms = int((time.perf_counter() - started) * 1000)
            out.metrics.append(
                _round_metrics(cfg, t, clients, reports, omegas, weights, 0, wall_ms)
            )

    out.omegas = omegas
    return out


def run_cgpfl_heur(cfg: RunConfig, shards: list[ClientShard]) -> RunOutput:
    """Round 0 runs with K = K_max; its uploads feed the K-selection
    heuristic, after which training continues at the selected K."""
    cfg.validate()
    k_max = cfg.k_max_value
    clients, omega0, server_rng = initialize_run(cfg, shards)
    server = ServerState(
        omegas=np.tile(omega0[:, None], (1, k_max)),
        assignment=round_robin_assignment(cfg.num_clients, k_max),
    )
    weights = client_weights(cfg, shards)
    m_total = int(sum(len(s.train) for s in shards))
    out = RunOutput(metrics=[], clients=clients, omegas=server.omegas)
    k_current = k_max

    for t in range(cfg.T):
        started = time.perf_counter()
        labels = server.assignment.labels()
        reports = _run_local_rounds(
            cfg, clients, lambda i: server.omegas[:, labels[i]], t
        )
        uploads = _uploads_matrix(reports)

        select_now = t == 0 or (
            cfg.heur_rerun_every > 0 and t % cfg.heur_rerun_every == 0
        )
        switched = False
        if select_now:
            k_hat, table = heuristic_select_K(
                uploads,
                weights,
                (cfg.K_min, k_max),
                cfg.mu,
                m_total,
                cfg.model.dim,
                server_rng,
            )
            out.selected_K, out.ek_table = k_hat, table
            switched = k_hat != k_current
            k_current = k_hat

        prev = server.assignment
        if switched:
            # re-seed the generalized models at the new K: cluster the
            # current uploads and take the cluster means
            server.assignment = cluster_clients(uploads, k_current, server_rng)
            record = transition(prev, server.assignment)
            server.omegas = uploads @ server.assignment.P
        else:
            server.assignment = cluster_clients(uploads, k_current, server_rng, prev)
            record = transition(prev, server.assignment)
            server.omegas = aggregate(server, uploads, cfg.alpha)
        server.prev_assignment = prev

        if cfg.proj_radius is not None:
            server.omegas = project_columns(server.omegas, cfg.proj_radius)
        server.round = t + 1

        out.assignments.append(server.assignment)
        out.transitions.append(record)
        if cfg.record_omegas:
            out.omega_trajectory.append(server.omegas.copy())
        if _should_eval(cfg, t):
            wall_ms = int((time.perf_counter() - started) * 1000)
            out.metrics.append(
                _round_metrics(
                    cfg, t, clients, reports, server.omegas, weights,
                    record.changed_clients, wall_ms,
                )
            )

    out.omegas = server.omegas
    return out


def run_fedavg(cfg: RunConfig, shards: list[ClientShard]) -> RunOutput:
    """FedAvg baseline: one global model, R * S plain SGD steps per client
    per round (matching the per-round compute of the clustered algorithm),
    aggregation weighted by training-set sizes."""
    cfg.validate()
    clients, omega0, _ = initialize_run(cfg, shards)
    omega = omega0
    sizes = np.array([len(c.shard.train) for c in clients], dtype=np.float64)
    agg_weights = (sizes / sizes.sum())[:, None]
    weights = client_weights(cfg, shards)
    single = build_assignment([list(range(cfg.num_clients))], cfg.num_clients)
    out = RunOutput(metrics=[], clients=clients, omegas=omega[:, None])
    local_steps = cfg.R * cfg.S

    for t in range(cfg.T):
        started = time.perf_counter()
        try:
            locals_ = [
                sgd_steps(
                    cfg.model, state, omega,
                    eta=cfg.eta, steps=local_steps, batch_size=cfg.batch_size,
                )
                for state in clients
            ]
        except NumericalError as err:
            raise NumericalError(str(err), round=t) from err
        uploads = np.column_stack(locals_)
        drift = omega[:, None] - uploads
        omega = (uploads @ agg_weights)[:, 0]

        out.assignments.append(single)
        if cfg.record_omegas:
            out.omega_trajectory.append(omega[:, None].copy())
        if _should_eval(cfg, t):
            wall_ms = int((time.perf_counter() - started) * 1000)
            mean_acc, _ = evaluate(
                cfg.model, clients, "global", omegas=omega[:, None], assignment=single
            )
            avg_grad = (2.0 / cfg.num_clients) * drift.sum(axis=1)
            out.metrics.append(
                RoundMetrics(
                    round=t,
                    mean_test_accuracy=mean_acc,
                    mean_train_loss=_mean_train_loss(
                        cfg.model, clients, lambda s: omega
                    ),
                    grad_norm_sq_avg=float(avg_grad @ avg_grad),
                    changed_clients=0,
                    cost_value=cost(uploads, omega[:, None], weights),
                    wall_ms=wall_ms,
                )
            )

    out.omegas = omega[:, None]
    return out


def run(cfg: RunConfig, shards: list[ClientShard]) -> RunOutput:
    """Dispatch on cfg.algorithm."""
    if cfg.algorithm == CGPFL:
        return run_cgpfl(cfg, shards)
    if cfg.algorithm == CGPFL_HEUR:
        return run_cgpfl_heur(cfg, shards)
    if cfg.algorithm == FEDAVG:
        return run_fedavg(cfg, shards)
    if cfg.algorithm == GLOBAL_PROX:
        return run_global_prox(cfg, shards)
    raise ConfigError(f"unknown algorithm {cfg.algorithm!r}")


def write_metrics_csv(metrics: list[RoundMetrics], path) -> None:
    """RFC-4180 CSV, one row per evaluated round, fixed column order."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for m in metrics:
            writer.writerow(
                [
                    m.round,
                    repr(m.mean_test_accuracy),
                    repr(m.mean_train_loss),
                    repr(m.grad_norm_sq_avg),
                    m.changed_clients,
                    repr(m.cost_value),
                    m.wall_ms,
                ]
            )


def write_assignment_history(out: RunOutput, path) -> None:
    """Per-round cluster membership, movement count, and transition matrix."""
    history = []
    for t, assignment in enumerate(out.assignments):
        entry: dict = {"round": t, "clusters": assignment.clusters}
        if t < len(out.transitions):
            record = out.transitions[t]
            entry["changed_clients"] = record.changed_clients
            entry["Q"] = record.Q.tolist()
            entry["doubly_stochastic"] = record.doubly_stochastic
        history.append(entry)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(history, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_ek_table(table: list[KSelectionRow], path) -> None:
    """CSV of the K-selection score decomposition."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["K", "complexity_term", "cost_term", "e_K"])
        for row in table:
            writer.writerow(
                [row.K, repr(row.complexity_term), repr(row.cost_term), repr(row.e_value)]
            )

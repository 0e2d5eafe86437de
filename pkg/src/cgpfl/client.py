"""One client's per-round work.

A round consists of R outer iterations. Each iteration first runs S SGD
steps on the proximally regularized personal objective (producing the
inexact minimizer theta~ for the current local generalized-model copy
omega~), then moves omega~ one gradient step along its own sub-objective:

    omega~ <- omega~ - beta * (2 / N) * (omega~ - theta~)

The personal model warm-starts across iterations and across rounds;
omega~ is re-initialized from the server's assigned model every round.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import ClientShard, Dataset
from .errors import ConfigError, NumericalError
from .models import Batch, ModelSpec, grad, personalized_grad, personalized_objective

Solver = Callable[..., np.ndarray]


@dataclass
class ClientState:
    client_id: int
    shard: ClientShard
    theta: np.ndarray
    omega_local: np.ndarray | None
    rng: np.random.Generator


@dataclass
class LocalUpdateReport:
    """Immutable upload message produced at the end of a local round."""

    client_id: int
    omega_out: np.ndarray
    theta_out: np.ndarray
    final_personalized_loss: float
    grad_norm_sq: float


def draw_batch(dataset: Dataset, batch_size: int, rng: np.random.Generator) -> Batch:
    """Mini-batch sampled with replacement; batch_size <= 0 or >= M gives
    the full dataset in index order without consuming the generator."""
    m = len(dataset)
    if batch_size <= 0 or batch_size >= m:
        return Batch(dataset.features, dataset.labels)
    idx = rng.integers(m, size=batch_size)
    return Batch(dataset.features[idx], dataset.labels[idx])


def full_batch(dataset: Dataset) -> Batch:
    return Batch(dataset.features, dataset.labels)


def solve_theta(
    spec: ModelSpec,
    state: ClientState,
    omega: np.ndarray,
    *,
    lam: float,
    eta: float,
    steps: int,
    batch_size: int,
) -> np.ndarray:
    """Run `steps` SGD steps on the personal objective from state.theta.

    Returns the new theta without mutating the state; mini-batches are
    drawn deterministically from state.rng.
    """
    if steps < 1:
        raise ConfigError("steps must be >= 1")
    if eta < 0 or lam < 0:
        raise ConfigError("eta and lam must be non-negative")
    theta = state.theta.copy()
    for s in range(steps):
        batch = draw_batch(state.shard.train, batch_size, state.rng)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                theta -= eta * personalized_grad(spec, theta, omega, batch, lam)
        except NumericalError as err:
            raise NumericalError(str(err), client=state.client_id, step=s) from err
        if not np.all(np.isfinite(theta)):
            raise NumericalError(
                "personal model diverged", client=state.client_id, step=s
            )
    return theta


def local_round(
    spec: ModelSpec,
    state: ClientState,
    omega_assigned: np.ndarray,
    *,
    lam: float,
    eta: float,
    beta: float,
    outer_iters: int,
    inner_steps: int,
    num_clients: int,
    batch_size: int,
    solver: Solver | None = None,
) -> LocalUpdateReport:
    """Execute one full local round and return the upload report.

    `solver` defaults to :func:`solve_theta`; tests may stub it.
    """
    if outer_iters < 1:
        raise ConfigError("outer_iters must be >= 1")
    if beta <= 0 or num_clients < 1:
        raise ConfigError("beta must be positive and num_clients >= 1")
    run_solver = solver if solver is not None else solve_theta

    scale = beta * (2.0 / num_clients)
    omega = omega_assigned.copy()
    theta = state.theta
    for _ in range(outer_iters):
        theta = run_solver(
            spec, state, omega, lam=lam, eta=eta, steps=inner_steps, batch_size=batch_size
        )
        state.theta = theta
        omega = omega - scale * (omega - theta)
    state.omega_local = omega

    residual = omega - theta
    train = full_batch(state.shard.train)
    return LocalUpdateReport(
        client_id=state.client_id,
        omega_out=omega,
        theta_out=theta,
        final_personalized_loss=personalized_objective(spec, theta, omega, train, lam),
        grad_norm_sq=float((2.0 / num_clients) ** 2 * (residual @ residual)),
    )


def sgd_steps(
    spec: ModelSpec,
    state: ClientState,
    start: np.ndarray,
    *,
    eta: float,
    steps: int,
    batch_size: int,
) -> np.ndarray:
    """Plain mini-batch SGD on the client loss, used by the FedAvg baseline."""
    params = start.copy()
    for s in range(steps):
        batch = draw_batch(state.shard.train, batch_size, state.rng)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                params -= eta * grad(spec, params, batch)
        except NumericalError as err:
            raise NumericalError(str(err), client=state.client_id, step=s) from err
        if not np.all(np.isfinite(params)):
            raise NumericalError("model diverged", client=state.client_id, step=s)
    return params

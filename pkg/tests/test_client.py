import numpy as np
import pytest

from cgpfl.client import ClientState, draw_batch, full_batch, local_round, sgd_steps, solve_theta
from cgpfl.data import synth_contexts
from cgpfl.errors import ConfigError
from cgpfl.models import ModelSpec, init_params, personalized_objective

SPEC = ModelSpec(kind="mlr", input_dim=2, num_classes=3, l2_coeff=1e-4)


def make_state(seed=0, client_id=0):
    shard = synth_contexts(1, 1, 2, 3, 80, 2.0, seed=seed)[0]
    rng = np.random.default_rng(seed)
    return ClientState(client_id, shard, init_params(SPEC, rng), None, rng)


def test_draw_batch_full_when_batch_size_zero_or_large():
    state = make_state()
    before = state.rng.bit_generator.state["state"]["state"]
    batch = draw_batch(state.shard.train, 0, state.rng)
    assert batch.features.shape[0] == len(state.shard.train)
    batch = draw_batch(state.shard.train, 10_000, state.rng)
    assert batch.features.shape[0] == len(state.shard.train)
    # full-batch mode consumes no generator draws
    assert state.rng.bit_generator.state["state"]["state"] == before


def test_solve_theta_zero_eta_leaves_theta():
    state = make_state()
    theta0 = state.theta.copy()
    out = solve_theta(SPEC, state, theta0.copy(), lam=3.0, eta=0.0, steps=5, batch_size=16)
    np.testing.assert_array_equal(out, theta0)
    np.testing.assert_array_equal(state.theta, theta0)  # state untouched by solver


def test_solve_theta_huge_lambda_contracts_to_omega():
    # eta * lam = 0.1: the proximal term dominates, theta walks to omega
    state = make_state(seed=3)
    omega = init_params(SPEC, np.random.default_rng(99))
    lam, eta = 1e8, 1e-9
    dists = []
    for _ in range(200):
        state.theta = solve_theta(
            SPEC, state, omega, lam=lam, eta=eta, steps=1, batch_size=16
        )
        dists.append(np.linalg.norm(state.theta - omega))
    # strict shrinkage until the eta * grad_f noise floor (~1e-9) is reached
    assert all(b < a for a, b in zip(dists[:100], dists[1:100]))
    assert dists[-1] < 1e-3


def test_solve_theta_full_batch_descends_objective():
    # convex d=33 instance (10 features, 3 classes), small eta
    spec = ModelSpec(kind="mlr", input_dim=10, num_classes=3, l2_coeff=1e-4)
    shard = synth_contexts(1, 1, 10, 3, 80, 2.0, seed=5)[0]
    rng = np.random.default_rng(5)
    state = ClientState(0, shard, init_params(spec, rng), None, rng)
    omega = init_params(spec, np.random.default_rng(6))
    train = full_batch(shard.train)
    before = personalized_objective(spec, state.theta, omega, train, 4.0)
    theta = solve_theta(spec, state, omega, lam=4.0, eta=1e-3, steps=25, batch_size=0)
    after = personalized_objective(spec, theta, omega, train, 4.0)
    assert spec.dim == 33
    assert after <= before


def test_solve_theta_validation():
    state = make_state()
    with pytest.raises(ConfigError):
        solve_theta(SPEC, state, state.theta, lam=1.0, eta=0.1, steps=0, batch_size=4)


class TestLocalRound:
    def stub_solver(self, value):
        def solver(spec, state, omega, **kwargs):
            state.theta = value.copy()
            return value.copy()

        return solver

    def test_identity_solver_leaves_omega(self):
        # solver returning the current omega makes the omega gradient zero
        state = make_state()
        omega0 = init_params(SPEC, np.random.default_rng(1))

        def solver(spec, state, omega, **kwargs):
            state.theta = omega.copy()
            return omega.copy()

        report = local_round(
            SPEC, state, omega0, lam=1.0, eta=0.1, beta=0.5,
            outer_iters=4, inner_steps=1, num_clients=6, batch_size=8,
            solver=solver,
        )
        np.testing.assert_array_equal(report.omega_out, omega0)

    def test_single_step_matches_scalar_arithmetic(self):
        state = make_state()
        omega0 = np.linspace(-1.0, 1.0, SPEC.dim)
        c = np.full(SPEC.dim, 0.25)
        beta, n = 0.75, 6
        report = local_round(
            SPEC, state, omega0, lam=1.0, eta=0.1, beta=beta,
            outer_iters=1, inner_steps=1, num_clients=n, batch_size=8,
            solver=self.stub_solver(c),
        )
        expected = omega0 - beta * (2.0 / n) * (omega0 - c)
        np.testing.assert_allclose(report.omega_out, expected, rtol=1e-15)

    def test_full_step_lands_exactly_on_target(self):
        # beta * (2 / N) == 1 and omega0 = 0 make the step land on c exactly
        state = make_state()
        n = 6
        omega0 = np.zeros(SPEC.dim)
        c = np.linspace(0.1, 0.9, SPEC.dim)
        report = local_round(
            SPEC, state, omega0, lam=1.0, eta=0.1, beta=n / 2.0,
            outer_iters=1, inner_steps=1, num_clients=n, batch_size=8,
            solver=self.stub_solver(c),
        )
        np.testing.assert_array_equal(report.omega_out, c)

    @pytest.mark.parametrize("beta_frac", [0.25, 0.6, 1.0])
    def test_contraction_rate_toward_fixed_target(self, beta_frac):
        # ||omega_{r+1} - c|| = (1 - 2 beta / N) ||omega_r - c|| for fixed c
        state = make_state()
        n = 8
        beta = beta_frac * n / 2.0
        omega0 = np.ones(SPEC.dim)
        c = -np.ones(SPEC.dim)
        rate = 1.0 - beta * 2.0 / n
        dist = np.linalg.norm(omega0 - c)
        for r in range(1, 4):
            report = local_round(
                SPEC, make_state(), omega0, lam=1.0, eta=0.1, beta=beta,
                outer_iters=r, inner_steps=1, num_clients=n, batch_size=8,
                solver=self.stub_solver(c),
            )
            expected = rate**r * dist
            assert np.linalg.norm(report.omega_out - c) == pytest.approx(
                expected, abs=1e-12
            )

    def test_theta_warm_start_persists(self):
        state = make_state(seed=8)
        omega = init_params(SPEC, np.random.default_rng(10))
        local_round(
            SPEC, state, omega, lam=2.0, eta=0.01, beta=0.2,
            outer_iters=3, inner_steps=2, num_clients=4, batch_size=8,
        )
        after_first = state.theta.copy()
        local_round(
            SPEC, state, omega, lam=2.0, eta=0.01, beta=0.2,
            outer_iters=3, inner_steps=2, num_clients=4, batch_size=8,
        )
        assert not np.array_equal(state.theta, after_first)

    def test_report_is_deterministic(self):
        def one():
            state = make_state(seed=21)
            omega = init_params(SPEC, np.random.default_rng(22))
            return local_round(
                SPEC, state, omega, lam=2.0, eta=0.01, beta=0.2,
                outer_iters=5, inner_steps=3, num_clients=4, batch_size=8,
            )

        a, b = one(), one()
        np.testing.assert_array_equal(a.omega_out, b.omega_out)
        np.testing.assert_array_equal(a.theta_out, b.theta_out)
        assert a.final_personalized_loss == b.final_personalized_loss
        assert a.grad_norm_sq == b.grad_norm_sq

    def test_report_finite(self):
        state = make_state(seed=30)
        omega = init_params(SPEC, np.random.default_rng(31))
        report = local_round(
            SPEC, state, omega, lam=2.0, eta=0.01, beta=0.2,
            outer_iters=2, inner_steps=2, num_clients=4, batch_size=8,
        )
        assert np.isfinite(report.final_personalized_loss)
        assert np.isfinite(report.grad_norm_sq) and report.grad_norm_sq >= 0.0


def test_sgd_steps_moves_and_is_deterministic():
    state_a, state_b = make_state(seed=12), make_state(seed=12)
    start = init_params(SPEC, np.random.default_rng(13))
    out_a = sgd_steps(SPEC, state_a, start, eta=0.05, steps=10, batch_size=16)
    out_b = sgd_steps(SPEC, state_b, start, eta=0.05, steps=10, batch_size=16)
    np.testing.assert_array_equal(out_a, out_b)
    assert not np.array_equal(out_a, start)
    np.testing.assert_array_equal(state_a.theta, state_b.theta)

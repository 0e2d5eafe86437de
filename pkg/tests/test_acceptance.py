"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line (run with -s to see them). The synthetic three-context
fixture and its calibrated hyperparameters live in conftest.py."""

import os
import statistics
import time
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from cgpfl.data import load_idx, partition_noniid, PartitionConfig
from cgpfl.models import Batch, ModelSpec, init_params, loss, grad, personalized_grad, personalized_objective
from cgpfl.orchestrator import run_cgpfl, run_fedavg, run_global_prox, write_assignment_history, write_metrics_csv
from cgpfl.server import lloyd

from conftest import fixture_config, ground_truth_partition
from oracles import all_distinct_seedings, brute_force_min_sse, central_diff, max_rel_error


@contextmanager
def criterion(name: str):
    started = time.perf_counter()
    try:
        yield
    except Exception:
        print(f"[FAIL] {name}")
        raise
    print(f"[PASS] {name} ({time.perf_counter() - started:.1f}s)")


def random_instance(rng, kind):
    if kind == "mlr":
        input_dim = int(rng.integers(2, 31))
        classes = int(rng.integers(2, 7))
        spec = ModelSpec(kind="mlr", input_dim=input_dim, num_classes=classes,
                         l2_coeff=float(rng.uniform(0, 1e-2)))
    else:
        input_dim = int(rng.integers(2, 11))
        hidden = int(rng.integers(2, 11))
        classes = int(rng.integers(2, 6))
        spec = ModelSpec(kind="mlp1", input_dim=input_dim, num_classes=classes,
                         hidden_dim=hidden)
    assert spec.dim <= 200
    params = init_params(spec, rng)
    size = int(rng.integers(2, 12))
    batch = Batch(
        rng.standard_normal((size, spec.input_dim)),
        rng.integers(0, spec.num_classes, size=size),
    )
    return spec, params, batch


def test_gradient_oracle():
    with criterion("gradient oracle: analytic vs central differences < 1e-5"):
        started = time.perf_counter()
        rng = np.random.default_rng(2024)
        for kind in ("mlr", "mlp1"):
            for _ in range(20):
                spec, params, batch = random_instance(rng, kind)
                fd = central_diff(lambda p: loss(spec, p, batch), params)
                assert max_rel_error(grad(spec, params, batch), fd) < 1e-5
                omega = init_params(spec, rng)
                lam = float(rng.uniform(0.5, 12.0))
                fd_pers = central_diff(
                    lambda p: personalized_objective(spec, p, omega, batch, lam), params
                )
                assert (
                    max_rel_error(
                        personalized_grad(spec, params, omega, batch, lam), fd_pers
                    )
                    < 1e-5
                )
        assert time.perf_counter() - started < 5.0


def test_kmeans_brute_force_equivalence():
    with criterion("k-means: Lloyd attains exhaustive optimum, SSE monotone"):
        started = time.perf_counter()
        rng = np.random.default_rng(77)
        for _ in range(30):
            n = int(rng.integers(4, 9))
            d = int(rng.integers(1, 4))
            k = int(rng.integers(1, min(3, n) + 1))
            points = rng.standard_normal((n, d))
            optimum = brute_force_min_sse(points, k)
            best = np.inf
            for init in all_distinct_seedings(points, k):
                result = lloyd(points, init)
                history = result.sse_history
                assert all(b <= a + 1e-12 for a, b in zip(history, history[1:]))
                best = min(best, history[-1])
            assert best <= optimum + 1e-9
        assert time.perf_counter() - started < 10.0


def test_assignment_matrix_invariants(run_cache):
    with criterion("assignment invariants over a 50-round synthetic run"):
        started = time.perf_counter()
        out = run_cache("cgpfl", K=3, seed=1)
        assert len(out.assignments) == 50
        n = 12
        for assignment in out.assignments:
            assert np.allclose(assignment.P.sum(axis=0), 1.0, atol=1e-12, rtol=0.0)
            k = assignment.num_clusters
            assert np.abs(assignment.J @ assignment.P - np.eye(k)).max() <= 1e-12
            members = sorted(i for c in assignment.clusters for i in c)
            assert members == list(range(n))
        assert time.perf_counter() - started < 30.0


def test_k1_reduction_bit_identical(fixture_shards):
    with criterion("K=1 reduction: bit-identical to the single-global baseline"):
        started = time.perf_counter()
        base = fixture_config(K=1, T=20, record_omegas=True)
        out_k1 = run_cgpfl(base, fixture_shards)
        out_prox = run_global_prox(
            replace(base, algorithm="global_prox"), fixture_shards
        )
        assert len(out_k1.omega_trajectory) == 20
        for a, b in zip(out_k1.omega_trajectory, out_prox.omega_trajectory):
            assert np.array_equal(a, b)
        assert time.perf_counter() - started < 20.0


def test_cluster_recovery_and_stability(run_cache):
    with criterion("cluster recovery from round 3, membership frozen from round 5"):
        started = time.perf_counter()
        out = run_cache("cgpfl", K=3, seed=1)
        truth = ground_truth_partition()
        for t, assignment in enumerate(out.assignments):
            if t >= 3:
                found = [set(c) for c in assignment.clusters]
                assert all(part in truth for part in found), f"round {t}: {found}"
        for m in out.metrics:
            if m.round >= 5:
                assert m.changed_clients == 0, f"round {m.round} moved clients"
        assert time.perf_counter() - started < 60.0


def test_accuracy_ordering(run_cache):
    with criterion("ordering: CGPFL(K=3) beats K=1 and FedAvg by >= 0.05 (median)"):
        started = time.perf_counter()
        seeds = (1, 2, 3)
        finals = {}
        for algorithm, k in (("cgpfl", 3), ("cgpfl", 1), ("fedavg", 1)):
            finals[(algorithm, k)] = [
                run_cache(algorithm, K=k, seed=s).metrics[-1].mean_test_accuracy
                for s in seeds
            ]
        k3 = statistics.median(finals[("cgpfl", 3)])
        k1 = statistics.median(finals[("cgpfl", 1)])
        fed = statistics.median(finals[("fedavg", 1)])
        assert k3 >= k1 + 0.05, f"K3={k3:.3f} K1={k1:.3f}"
        assert k3 >= fed + 0.05, f"K3={k3:.3f} FedAvg={fed:.3f}"
        assert time.perf_counter() - started < 180.0


def test_heuristic_recovers_k3(run_cache):
    with criterion("heuristic: selects K=3 and matches CGPFL(K=3) within 0.02"):
        started = time.perf_counter()
        out_heur = run_cache("cgpfl_heur", K=3, seed=1)
        assert out_heur.selected_K == 3
        acc_heur = out_heur.metrics[-1].mean_test_accuracy
        acc_k3 = run_cache("cgpfl", K=3, seed=1).metrics[-1].mean_test_accuracy
        assert abs(acc_heur - acc_k3) <= 0.02
        assert time.perf_counter() - started < 180.0


def _metrics_bytes_without_wall(path: Path) -> bytes:
    lines = path.read_bytes().split(b"\r\n")
    # wall_ms is the final column and inherently nondeterministic
    return b"\r\n".join(line.rsplit(b",", 1)[0] for line in lines if line)


def test_determinism_of_metrics_files(tmp_path, fixture_shards, run_cache):
    with criterion("determinism: byte-identical metrics files across executions"):
        out_a = run_cache("cgpfl", K=3, seed=1)
        out_b = run_cgpfl(fixture_config(K=3, seed=1, record_omegas=True), fixture_shards)
        path_a, path_b = tmp_path / "a.csv", tmp_path / "b.csv"
        write_metrics_csv(out_a.metrics, path_a)
        write_metrics_csv(out_b.metrics, path_b)
        assert _metrics_bytes_without_wall(path_a) == _metrics_bytes_without_wall(path_b)

        hist_a, hist_b = tmp_path / "a.json", tmp_path / "b.json"
        write_assignment_history(out_a, hist_a)
        write_assignment_history(out_b, hist_b)
        assert hist_a.read_bytes() == hist_b.read_bytes()

        for omega_a, omega_b in zip(out_a.omega_trajectory, out_b.omega_trajectory):
            assert np.array_equal(omega_a, omega_b)


@pytest.mark.slow
def test_mnist_scaled_ordering():
    """Optional: N=40 MLR on a real MNIST IDX pair, quarter training budget.

    Set CGPFL_MNIST_DIR to a directory containing train-images-idx3-ubyte
    and train-labels-idx1-ubyte to enable.
    """
    data_dir = os.environ.get("CGPFL_MNIST_DIR")
    if not data_dir:
        pytest.skip("CGPFL_MNIST_DIR not set")
    images = Path(data_dir) / "train-images-idx3-ubyte"
    labels = Path(data_dir) / "train-labels-idx1-ubyte"
    if not (images.is_file() and labels.is_file()):
        pytest.skip("MNIST IDX files not found")

    with criterion("MNIST scaled ordering: CGPFL(K=4) >= FedAvg + 0.03"):
        pool = load_idx(images, labels)
        # shard_size_max capped: disjoint sampling of sizes in [400, 5000]
        # has an expected demand of ~108k, beyond the 60k pool
        shards = partition_noniid(
            pool,
            PartitionConfig(num_clients=40, classes_per_client=3,
                            shard_size_min=400, shard_size_max=1500, seed=0),
        )
        spec = ModelSpec(kind="mlr", input_dim=784, num_classes=10, l2_coeff=1e-4)
        base = dict(
            model=spec, num_clients=40, T=50, R=10, S=5, lam=12.0,
            eta=0.005, alpha=1.0, batch_size=32, seed=1, eval_every=10,
        )
        from cgpfl.orchestrator import RunConfig

        cgpfl_out = run_cgpfl(RunConfig(K=4, beta=0.9, **base), shards)
        fed_out = run_fedavg(RunConfig(K=1, algorithm="fedavg", **base), shards)
        acc_cgpfl = cgpfl_out.metrics[-1].mean_test_accuracy
        acc_fed = fed_out.metrics[-1].mean_test_accuracy
        assert acc_cgpfl >= acc_fed + 0.03, f"cgpfl={acc_cgpfl:.4f} fedavg={acc_fed:.4f}"

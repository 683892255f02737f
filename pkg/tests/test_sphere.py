import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from planted import make_planted, recovered_columns
from reluinv.errors import ConfigError
from reluinv.sphere import (
    L1, PGD, LogCosh, NegL4, OptimizerConfig, default_mu, loss_and_subgradient, make_loss, optimize_batch,
    optimize_on_sphere, random_unit_direction, restart_rng, run_restarts,
)


def test_l1_example():
    value, g = loss_and_subgradient(L1(), np.array([1.0, -2.0, 0.0]))
    assert value == 3.0
    np.testing.assert_array_equal(g, [1.0, -1.0, 0.0])


def test_logcosh_at_zero():
    value, g = loss_and_subgradient(LogCosh(500.0), np.zeros(4))
    assert value == 0.0 and np.all(g == 0)


def test_logcosh_matches_definition_and_asymptote():
    mu = 0.3
    y = np.linspace(-2, 2, 41)
    direct = np.sum(mu * np.log(np.cosh(y / mu)))
    assert loss_and_subgradient(LogCosh(mu), y)[0] == pytest.approx(direct, rel=1e-12)
    big = np.array([50.0, -80.0, 120.0])
    expected = np.abs(big).sum() - big.size * mu * math.log(2)
    assert loss_and_subgradient(LogCosh(mu), big)[0] == pytest.approx(expected, rel=1e-12)


def test_negl4_example():
    value, g = loss_and_subgradient(NegL4(), np.array([1.0, -2.0]))
    assert value == -17.0
    np.testing.assert_array_equal(g, [-4.0, 32.0])


@pytest.mark.parametrize("loss", [L1(), LogCosh(0.5), LogCosh(500.0), NegL4()])
def test_subgradient_finite_differences(loss):
    rng = np.random.default_rng(0)
    h = 1e-6
    for _ in range(100):
        y = rng.standard_normal(6)
        g = loss_and_subgradient(loss, y)[1]
        for i in range(y.size):
            if isinstance(loss, L1) and abs(y[i]) < 1e-6:
                continue
            e = np.zeros_like(y)
            e[i] = h
            fd = (loss_and_subgradient(loss, y + e)[0] - loss_and_subgradient(loss, y - e)[0]) / (2 * h)
            assert abs(fd - g[i]) <= 1e-6 * max(1.0, abs(g[i]))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_sign_symmetry_of_losses(seed):
    rng = np.random.default_rng(seed)
    L, q = rng.standard_normal((20, 4)), random_unit_direction(4, rng)
    for loss in (L1(), LogCosh(0.1), NegL4()):
        assert loss_and_subgradient(loss, L @ -q)[0] == loss_and_subgradient(loss, L @ q)[0]


def test_make_loss_defaults():
    assert make_loss("logcosh", m=200) == LogCosh(default_mu(200))
    assert make_loss("logcosh", m=1000) == LogCosh(default_mu(1000))
    assert make_loss("logcosh", m=200, mu=300.0) == LogCosh(300.0)
    with pytest.raises(ConfigError):
        make_loss("l2")
    with pytest.raises(ConfigError):
        LogCosh(0.0)


def test_random_unit_direction():
    rng = np.random.default_rng(1)
    assert abs(random_unit_direction(1, rng)[0]) == 1.0
    q = random_unit_direction(8, restart_rng(3, 4))
    assert np.array_equal(q, random_unit_direction(8, restart_rng(3, 4)))
    assert abs(np.linalg.norm(q) - 1) <= 1e-12
    with pytest.raises(ConfigError):
        random_unit_direction(0, rng)


def test_unit_direction_mean_is_zero():
    rng = np.random.default_rng(2)
    draws = np.array([random_unit_direction(8, rng) for _ in range(100_000)])
    # each coordinate has variance 1/b
    se = np.sqrt(1 / 8 / draws.shape[0])
    assert np.all(np.abs(draws.mean(axis=0)) <= 3 * se)


def test_schedules_and_validation():
    cfg = OptimizerConfig()
    rates = cfg.rates()
    assert rates[0] == 1e-1 and rates[199] == 1e-1 and rates[200] == 1e-3 and rates[400] == 1e-5
    pgd = OptimizerConfig.for_method(PGD)
    assert pgd.rates()[0] == 1e-2 and pgd.rates()[250] == 1e-4 and pgd.rates()[499] == 1e-6
    for bad in ([(0, 0.1), (0, 0.2)], [(5, 0.1)], [(0, -1.0)], []):
        with pytest.raises(ConfigError):
            OptimizerConfig(schedule=bad)
    with pytest.raises(ConfigError):
        OptimizerConfig(method="lbfgs")


@pytest.mark.parametrize("method", ["radam", "pgd"])
@pytest.mark.parametrize("loss", [L1(), LogCosh(0.01), NegL4()])
def test_exact_kernel_direction_is_fixed_point(method, loss):
    # rank L = b - 1 with kernel e_b: L k = 0 exactly, so every subgradient vanishes
    rng = np.random.default_rng(3)
    L = np.hstack([rng.standard_normal((40, 4)), np.zeros((40, 1))])
    k = np.eye(5)[:, -1]
    q = optimize_on_sphere(L, loss, k, OptimizerConfig.for_method(method))
    np.testing.assert_array_equal(q, k)


def test_sphere_constraint_every_iterate():
    p = make_planted(m=80, b=6, seed=4)
    Q0 = np.column_stack([random_unit_direction(6, restart_rng(0, i)) for i in range(20)])
    for method in ("radam", "pgd"):
        Q = Q0
        cfg = OptimizerConfig.for_method(method, steps=1)
        for _ in range(60):
            Q, ok = optimize_batch(p.L, L1(), Q, cfg)
            assert ok.all()
            assert np.max(np.abs(np.linalg.norm(Q, axis=0) - 1)) <= 1e-9


def test_planted_recovery_radam():
    p = make_planted(seed=5)
    cfg = OptimizerConfig(restarts=200)
    got = []
    run_restarts(p.L, L1(), cfg, lambda i, q: got.append(q) or False)
    assert len(recovered_columns(got, p.Q)) >= 10


def test_radam_beats_pgd_on_planted():
    p = make_planted(seed=6)
    counts = {}
    for method in ("radam", "pgd"):
        got = []
        run_restarts(p.L, L1(), OptimizerConfig.for_method(method, restarts=200), lambda i, q: got.append(q) or False)
        hits = sum(len(recovered_columns([q], p.Q)) for q in got)
        counts[method] = hits
    assert counts["radam"] >= counts["pgd"]


@pytest.mark.parametrize("loss", [L1(), LogCosh(0.01), NegL4()])
def test_pgd_sign_symmetry(loss):
    p = make_planted(m=60, b=5, seed=7)
    init = random_unit_direction(5, restart_rng(1, 2))
    cfg = OptimizerConfig.for_method(PGD, steps=100)
    q_plus = optimize_on_sphere(p.L, loss, init, cfg)
    q_minus = optimize_on_sphere(p.L, loss, -init, cfg)
    np.testing.assert_array_equal(q_minus, -q_plus)


def test_pgd_logcosh_monotone_trend():
    p = make_planted(seed=8)
    loss = LogCosh(default_mu(200))
    cfg = OptimizerConfig(method=PGD, steps=50, schedule=[(0, 1e-4)])
    Q = np.column_stack([random_unit_direction(10, restart_rng(0, i)) for i in range(64)])
    prev = loss.value(p.L @ Q)
    for _ in range(10):
        Q, _ = optimize_batch(p.L, loss, Q, cfg)
        cur = loss.value(p.L @ Q)
        assert np.median(cur - prev) <= 0
        prev = cur


def test_run_restarts_single_matches_direct():
    p = make_planted(m=60, b=5, seed=9)
    cfg = OptimizerConfig(restarts=1, steps=100)
    got = []
    stats = run_restarts(p.L, L1(), cfg, lambda i, q: got.append((i, q)) or False)
    direct = optimize_on_sphere(p.L, L1(), random_unit_direction(5, restart_rng(0, 0)), cfg)
    assert stats.executed == 1 and got[0][0] == 0
    np.testing.assert_array_equal(got[0][1], direct)


def test_thread_count_does_not_change_results():
    p = make_planted(m=60, b=5, seed=10)
    cfg = OptimizerConfig(restarts=70, steps=40, chunk_size=16)
    runs = []
    for workers in (1, 4):
        got = []
        run_restarts(p.L, L1(), cfg, lambda i, q: got.append((i, q.tobytes())) or False, workers=workers)
        runs.append(got)
    assert runs[0] == runs[1] and len(runs[0]) == 70


@pytest.mark.parametrize("workers", [1, 3])
def test_early_termination(workers):
    p = make_planted(m=60, b=5, seed=11)
    cfg = OptimizerConfig(restarts=100, steps=20, chunk_size=8)
    seen = []
    stats = run_restarts(p.L, L1(), cfg, lambda i, q: seen.append(i) or i == 10, workers=workers)
    assert stats.stopped_early and stats.executed == 11 < cfg.restarts
    assert seen == list(range(11))


def test_failed_restarts_counted():
    L = np.full((4, 2), np.inf)
    stats = run_restarts(L, L1(), OptimizerConfig(restarts=3, steps=2), lambda i, q: False)
    assert stats.failed == 3 and stats.forwarded == 0

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from planted import make_planted
from reluinv.errors import ConfigError
from reluinv.rounding import RoundingConfig, kernel_direction, round_via_sampling


def test_kernel_of_single_row():
    q = kernel_direction(np.array([[1.0, 0.0]]))
    assert abs(q[1]) == 1.0 and q[0] == 0.0


def test_zero_matrix_has_2d_kernel():
    assert kernel_direction(np.zeros((1, 2))) is None
    assert kernel_direction(np.zeros((3, 3))) is None


def test_full_rank_has_no_kernel():
    assert kernel_direction(np.random.default_rng(0).standard_normal((4, 4))) is None


def test_random_underdetermined_residual():
    rng = np.random.default_rng(1)
    for b in (2, 5, 10, 20):
        A = rng.standard_normal((b - 1, b))
        q = kernel_direction(A)
        assert q is not None
        assert np.max(np.abs(A @ q)) <= 1e-10
        assert abs(np.linalg.norm(q) - 1) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), b=st.integers(2, 12), extra=st.sampled_from([0, 1]))
def test_both_row_counts(seed, b, extra):
    # b-1 rows (minimal for a 1-D kernel) or b rows (what the sampler draws)
    rng = np.random.default_rng(seed)
    k = rng.standard_normal(b)
    k /= np.linalg.norm(k)
    A = rng.standard_normal((b - 1 + extra, b))
    A -= np.outer(A @ k, k)
    q = kernel_direction(A)
    assert q is not None
    assert abs(abs(q @ k) - 1) <= 1e-10


def _perturbed(q, rng, eps=1e-3):
    t = rng.standard_normal(q.size)
    t -= (t @ q) * q
    q_hat = q + eps * t / np.linalg.norm(t)
    return q_hat / np.linalg.norm(q_hat)


def test_fixed_point_for_exact_direction():
    p = make_planted(m=200, b=10, seed=2)
    q = p.Q_unit[:, 0]
    out = round_via_sampling(p.L, q, RoundingConfig(r_factor=1.5), np.random.default_rng(0))
    np.testing.assert_allclose(out, q, atol=1e-10)


def test_planted_perturbation_success_rate():
    p = make_planted(m=200, b=10, seed=3)
    rng = np.random.default_rng(4)
    cfg = RoundingConfig(r_factor=1.5)
    hits = 0
    for t in range(100):
        q = p.Q_unit[:, t % 10]
        out = round_via_sampling(p.L, _perturbed(q, rng), cfg, rng)
        hits += out is not None and np.max(np.abs(out - q)) <= 1e-10
    assert hits >= 90


def test_exactness_invariant_and_determinism():
    p = make_planted(m=200, b=10, seed=5)
    cfg = RoundingConfig(r_factor=3.0)
    rng = np.random.default_rng(6)
    for t in range(30):
        q_hat = _perturbed(p.Q_unit[:, t % 10], rng, 1e-2)
        seed = int(rng.integers(1 << 30))
        out = round_via_sampling(p.L, q_hat, cfg, np.random.default_rng(seed))
        again = round_via_sampling(p.L, q_hat, cfg, np.random.default_rng(seed))
        if out is None:
            assert again is None
            continue
        assert np.array_equal(out, again)
        assert out @ q_hat >= 0
        # rows sampled: recover them by replaying the rng
        r = cfg.pool_size(10, 200)
        closest = np.argsort(np.abs(p.L @ q_hat), kind="stable")[:r]
        rows = np.random.default_rng(seed).choice(closest, size=10, replace=False)
        assert np.max(np.abs(p.L[rows] @ out)) <= 1e-9 * np.abs(p.L).max()


def test_pool_size_bounds():
    assert RoundingConfig(1.5).pool_size(10, 200) == 15
    assert RoundingConfig.for_width(200).r_factor == 3.0
    assert RoundingConfig.for_width(1000).r_factor == 1.5
    with pytest.raises(ConfigError):
        RoundingConfig(3.0).pool_size(10, 20)
    with pytest.raises(ConfigError):
        RoundingConfig(0.5)

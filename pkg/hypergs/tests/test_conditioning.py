import numpy as np
import pytest

from hypergs.conditioning import (
    DenseJoint,
    condition_batch,
    condition_fast,
    condition_fast_backward,
    condition_fast_batched,
    condition_naive,
    condition_naive_backward,
    condition_naive_batched,
    condition_primitive,
    conditional_covariance,
    joint_from_block,
)
from hypergs.errors import DimensionMismatch, LengthMismatch, NotPositiveDefinite
from hypergs.hypergauss import HyperGaussianBlock, Partition, activate_factors, init_primitive
from hypergs.linalg import tri_size


def random_block(rng: np.random.Generator, m: int, n: int) -> HyperGaussianBlock:
    return HyperGaussianBlock(
        Partition(m, n),
        rng.normal(size=m),
        rng.normal(size=n),
        rng.normal(0.0, 0.3, size=tri_size(m)),
        rng.normal(0.0, 0.5, size=(n, m)),
    )


def test_naive_independent_blocks() -> None:
    joint = DenseJoint(mu=np.array([1.0, 2.0, 3.0]), cov=np.diag([2.0, 3.0, 4.0]))
    mu, cov = condition_naive(joint, 2, np.array([10.0]))
    np.testing.assert_allclose(mu, [1.0, 2.0])
    np.testing.assert_allclose(cov, np.diag([2.0, 3.0]))


def test_naive_zero_innovation() -> None:
    cov = np.array([[2.0, 0.5, 0.3], [0.5, 1.5, 0.2], [0.3, 0.2, 1.0]])
    joint = DenseJoint(mu=np.array([1.0, -1.0, 0.5]), cov=cov)
    mu, cov_cond = condition_naive(joint, 2, np.array([0.5]))
    np.testing.assert_allclose(mu, [1.0, -1.0])
    np.testing.assert_allclose(cov_cond, cov[:2, :2] - np.outer(cov[:2, 2], cov[2, :2]) / cov[2, 2])


def test_naive_hand_example() -> None:
    joint = DenseJoint(mu=np.zeros(2), cov=np.array([[2.0, 1.0], [1.0, 1.0]]))
    mu, cov = condition_naive(joint, 1, np.array([2.0]))
    np.testing.assert_allclose(mu, [2.0])
    np.testing.assert_allclose(cov, [[1.0]])


def test_naive_not_positive_definite() -> None:
    joint = DenseJoint(mu=np.zeros(3), cov=np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 2.0], [0.0, 2.0, 1.0]]))
    with pytest.raises(NotPositiveDefinite):
        condition_naive(joint, 1, np.zeros(2))


def test_naive_dimension_mismatch() -> None:
    with pytest.raises(DimensionMismatch):
        condition_naive(DenseJoint(mu=np.zeros(3), cov=np.eye(3)), 1, np.zeros(3))


def test_fast_empty_latent() -> None:
    block = HyperGaussianBlock(Partition(3, 0), np.array([1.0, 2.0, 3.0]), np.zeros(0), np.zeros(6), np.zeros((0, 3)))
    result = condition_fast(block, np.zeros(0))
    np.testing.assert_array_equal(result.mu_cond, [1.0, 2.0, 3.0])


def test_fast_hand_example() -> None:
    # Λ = [[1, -1], [-1, 2]] factors to L11 = 1, L21 = -1
    block = HyperGaussianBlock(Partition(1, 1), [0.0], [0.0], [0.0], [[-1.0]])
    result = condition_fast(block, np.array([2.0]))
    np.testing.assert_allclose(result.mu_cond, [2.0])
    assert result.logdet_cov_cond == 0.0


def test_fast_dimension_mismatch(rng: np.random.Generator) -> None:
    with pytest.raises(DimensionMismatch):
        condition_fast(random_block(rng, 3, 4), np.zeros(3))


@pytest.mark.parametrize('m', [1, 3, 4])
@pytest.mark.parametrize('n', [1, 2, 4, 8, 16])
def test_fast_matches_naive(rng: np.random.Generator, m: int, n: int) -> None:
    for _ in range(200):
        block = random_block(rng, m, n)
        gamma = rng.normal(size=n)
        joint = joint_from_block(block, l22=np.eye(n) * rng.uniform(0.5, 2.0))
        mu_naive, cov_naive = condition_naive(joint, m, gamma)
        fast = condition_fast(block, gamma)
        np.testing.assert_allclose(fast.mu_cond, mu_naive, rtol=1e-8, atol=1e-10)
        assert fast.logdet_cov_cond == pytest.approx(np.linalg.slogdet(cov_naive)[1], rel=0, abs=1e-8)


def test_logdet_matches_dense_conditional_covariance(rng: np.random.Generator) -> None:
    for _ in range(100):
        m, n = int(rng.integers(1, 5)), int(rng.integers(1, 33))
        block = random_block(rng, m, n)
        _, cov_naive = condition_naive(joint_from_block(block), m, rng.normal(size=n))
        fast = condition_fast(block, rng.normal(size=n))
        dense = np.linalg.slogdet(cov_naive)[1]
        l11, _ = activate_factors(block)
        assert -2.0 * np.sum(np.log(np.diag(l11))) == pytest.approx(dense, rel=0, abs=1e-8), (m, n)
        assert fast.logdet_cov_cond == pytest.approx(dense, rel=0, abs=1e-8), (m, n)


def test_conditional_covariance_is_precision_inverse(rng: np.random.Generator) -> None:
    block = random_block(rng, 3, 2)
    joint = joint_from_block(block)
    _, cov_naive = condition_naive(joint, 3, rng.normal(size=2))
    np.testing.assert_allclose(conditional_covariance(block), cov_naive, rtol=1e-8, atol=1e-12)
    assert np.all(np.linalg.eigvalsh(conditional_covariance(block)) > 0)


def test_condition_primitive_fresh_is_identity() -> None:
    prim = init_primitive([0.0, 0.0, 0.0], latent_dim=4)
    offsets = condition_primitive(prim, np.array([1.0, -2.0, 3.0, 0.5]))
    np.testing.assert_array_equal(offsets.d_mu, np.zeros(3))
    np.testing.assert_array_equal(offsets.d_rot, np.zeros(4))
    np.testing.assert_array_equal(offsets.d_scale, np.zeros(3))
    assert offsets.sigma == 0.0


def test_condition_primitive_zero_innovation(rng: np.random.Generator) -> None:
    prim = init_primitive([0.0, 0.0, 0.0], latent_dim=3)
    prim.block_pos = random_block(rng, 3, 3)
    prim.block_pos.mu_b = prim.block_rot.mu_b.copy()
    offsets = condition_primitive(prim, prim.block_rot.mu_b)
    np.testing.assert_allclose(offsets.d_mu, prim.block_pos.mu_a)


def test_condition_primitive_sigma_shift() -> None:
    prim = init_primitive([0.0, 0.0, 0.0], latent_dim=2)
    prim.block_pos.raw_l11[[0, 2, 5]] = 1.0
    assert condition_primitive(prim, np.zeros(2)).sigma == pytest.approx(-6.0)


def test_condition_batch() -> None:
    assert condition_batch([], []) == []
    prim = init_primitive([0.0, 0.0, 0.0], latent_dim=2, rng=np.random.default_rng(0), coupling_std=0.3)
    z = np.array([0.4, -1.0])
    single = condition_batch([prim], [z])
    assert len(single) == 1
    np.testing.assert_array_equal(single[0].d_mu, condition_primitive(prim, z).d_mu)


def test_condition_batch_parallel_keeps_order(rng: np.random.Generator) -> None:
    prims = [init_primitive(rng.normal(size=3), latent_dim=3, rng=rng, coupling_std=0.3) for _ in range(16)]
    zs = [rng.normal(size=3) for _ in prims]
    serial = condition_batch(prims, zs)
    parallel = condition_batch(prims, zs, workers=4)
    for a, b in zip(serial, parallel):
        np.testing.assert_array_equal(a.d_mu, b.d_mu)
        assert a.sigma == b.sigma


def test_condition_batch_length_mismatch() -> None:
    prim = init_primitive([0.0, 0.0, 0.0], latent_dim=1)
    with pytest.raises(LengthMismatch):
        condition_batch([prim, prim], [np.zeros(1)])


def test_fast_batched_matches_scalar(rng: np.random.Generator) -> None:
    blocks = [random_block(rng, 3, 5) for _ in range(4)]
    z = rng.normal(size=(4, 5))
    mu, logdet, _ = condition_fast_batched(
        np.stack([b.mu_a for b in blocks]),
        np.stack([b.mu_b for b in blocks]),
        np.stack([b.raw_l11 for b in blocks]),
        np.stack([b.l21 for b in blocks]),
        z,
    )
    for i, block in enumerate(blocks):
        result = condition_fast(block, z[i])
        np.testing.assert_allclose(mu[i], result.mu_cond, atol=1e-12)
        assert logdet[i] == pytest.approx(result.logdet_cov_cond)


def test_fast_backward_finite_difference(rng: np.random.Generator) -> None:
    g, m, n = 2, 3, 4
    args = {
        'mu_a': rng.normal(size=(g, m)),
        'mu_b': rng.normal(size=(g, n)),
        'raw_l11': rng.normal(0.0, 0.3, size=(g, tri_size(m))),
        'l21': rng.normal(size=(g, n, m)),
        'z': rng.normal(size=(g, n)),
    }
    w_mu, w_logdet = rng.normal(size=(g, m)), rng.normal(size=g)

    def f(values: dict) -> float:
        mu, logdet, _ = condition_fast_batched(**values)
        return float(np.sum(w_mu * mu) + np.sum(w_logdet * logdet))

    _, _, state = condition_fast_batched(**args)
    grads = condition_fast_backward(state, args['l21'], w_mu, w_logdet)
    eps = 1e-6
    for name, value in args.items():
        for idx in np.ndindex(value.shape):
            plus = {k: v.copy() for k, v in args.items()}
            minus = {k: v.copy() for k, v in args.items()}
            plus[name][idx] += eps
            minus[name][idx] -= eps
            numeric = (f(plus) - f(minus)) / (2 * eps)
            assert grads[name][idx] == pytest.approx(numeric, rel=1e-6, abs=1e-8), (name, idx)


def test_naive_backward_finite_difference(rng: np.random.Generator) -> None:
    g, m, n = 2, 2, 3
    d = m + n
    l_cov = np.tril(rng.normal(0.0, 0.3, size=(g, d, d)), -1)
    l_cov[:, np.arange(d), np.arange(d)] = rng.uniform(0.8, 1.5, size=(g, d))
    mu, gamma = rng.normal(size=(g, d)), rng.normal(size=(g, n))
    w_mu, w_logdet = rng.normal(size=(g, m)), rng.normal(size=g)

    def f(mu_: np.ndarray, l_: np.ndarray, gamma_: np.ndarray) -> float:
        mu_cond, logdet, _ = condition_naive_batched(mu_, l_, m, gamma_)
        return float(np.sum(w_mu * mu_cond) + np.sum(w_logdet * logdet))

    _, _, state = condition_naive_batched(mu, l_cov, m, gamma)
    grads = condition_naive_backward(state, m, w_mu, w_logdet)
    eps = 1e-6
    for idx in zip(*np.nonzero(np.tril(np.ones((g, d, d))))):
        step = np.zeros_like(l_cov)
        step[idx] = eps
        numeric = (f(mu, l_cov + step, gamma) - f(mu, l_cov - step, gamma)) / (2 * eps)
        assert grads['l_cov'][idx] == pytest.approx(numeric, rel=1e-6, abs=1e-8)
    for idx in np.ndindex(mu.shape):
        step = np.zeros_like(mu)
        step[idx] = eps
        numeric = (f(mu + step, l_cov, gamma) - f(mu - step, l_cov, gamma)) / (2 * eps)
        assert grads['mu'][idx] == pytest.approx(numeric, rel=1e-6, abs=1e-8)


def test_naive_batched_matches_fast(rng: np.random.Generator) -> None:
    block = random_block(rng, 3, 6)
    joint = joint_from_block(block)
    gamma = rng.normal(size=6)
    l_cov = np.linalg.cholesky(joint.cov)
    mu, logdet, _ = condition_naive_batched(joint.mu[None], l_cov[None], 3, gamma[None])
    fast = condition_fast(block, gamma)
    np.testing.assert_allclose(mu[0], fast.mu_cond, rtol=1e-8, atol=1e-10)
    assert logdet[0] == pytest.approx(fast.logdet_cov_cond, abs=1e-8)

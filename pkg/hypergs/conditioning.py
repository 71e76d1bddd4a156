"""
Conditioning of HyperGaussians.

Two paths compute the conditional distribution p(γ_a | γ_b):

* ``condition_naive`` works on the covariance view and must factor the n x n block Σ_bb;
* ``condition_fast`` works on the precision factors and only ever touches L11 (m x m) and L21 (n x m):

      μ_{a|b} = μ_a - L11⁻ᵀ L21ᵀ (γ_b - μ_b)
      log det Σ_{a|b} = -2 tr log L11

The fast path never builds the conditional covariance; ``conditional_covariance`` reconstructs it
for inspection.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionMismatch, LengthMismatch
from .hypergauss import HyperGaussianBlock, HyperPrimitive, activate_factors, activate_factors_batched
from .linalg import (
    Mat,
    LowerTri,
    cholesky,
    cholesky_batched,
    pack_lower,
    packed_diag_index,
    solve_lower,
    solve_lower_batched,
    solve_upper_transposed,
    solve_upper_transposed_batched,
)

logger = logging.getLogger(__name__)

RTOL = 1e-8


@dataclass(frozen=True)
class ConditionalResult:
    mu_cond: Mat
    logdet_cov_cond: float


@dataclass
class DenseJoint:
    mu: Mat
    cov: Mat

    def split(self, m: int) -> Tuple[Mat, Mat, Mat, Mat, Mat, Mat]:
        """(μ_a, μ_b, Σ_aa, Σ_ab, Σ_ba, Σ_bb)"""
        mu = np.asarray(self.mu, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        if cov.shape != (mu.shape[0], mu.shape[0]) or not 1 <= m <= mu.shape[0]:
            raise DimensionMismatch(f'joint of dim {mu.shape[0]} cant be split at m={m}')
        return mu[:m], mu[m:], cov[:m, :m], cov[:m, m:], cov[m:, :m], cov[m:, m:]


class PrimitiveOffsets(NamedTuple):
    d_mu: Mat
    d_rot: Mat
    d_scale: Mat
    sigma: float


class FastState(NamedTuple):
    l11: LowerTri
    innovation: Mat
    x: Mat


class NaiveState(NamedTuple):
    l_cov: LowerTri
    cov: Mat
    k: Mat
    p: Mat
    s_inv: Mat


def condition_naive(joint: DenseJoint, m: int, gamma_b: Mat) -> Tuple[Mat, Mat]:
    mu_a, mu_b, s_aa, s_ab, s_ba, s_bb = joint.split(m)
    gamma_b = np.asarray(gamma_b, dtype=np.float64).reshape(-1)
    if gamma_b.shape != mu_b.shape:
        raise DimensionMismatch(f'realization has {gamma_b.shape[0]} entries, latent block has {mu_b.shape[0]}')
    if mu_b.shape[0] == 0:
        return mu_a.copy(), s_aa.copy()

    l_bb = cholesky(s_bb)
    k = solve_upper_transposed(l_bb, solve_lower(l_bb, gamma_b - mu_b))
    w = solve_lower(l_bb, s_ba)
    cov_cond = s_aa - w.T @ w
    return mu_a + s_ab @ k, 0.5 * (cov_cond + cov_cond.T)


def condition_fast(block: HyperGaussianBlock, gamma_b: Mat) -> ConditionalResult:
    gamma_b = np.asarray(gamma_b, dtype=np.float64).reshape(-1)
    if gamma_b.shape != (block.n,):
        raise DimensionMismatch(f'realization has {gamma_b.shape[0]} entries, block latent dim is {block.n}')
    logdet = -2.0 * float(np.sum(block.raw_l11[packed_diag_index(block.m)]))
    if block.n == 0:
        return ConditionalResult(mu_cond=block.mu_a.copy(), logdet_cov_cond=logdet)

    l11, l21 = activate_factors(block)
    x = solve_upper_transposed(l11, l21.T @ (gamma_b - block.mu_b))
    return ConditionalResult(mu_cond=block.mu_a - x, logdet_cov_cond=logdet)


def conditional_covariance(block: HyperGaussianBlock) -> Mat:
    """
    Σ_{a|b} = Λ_aa⁻¹ = L11⁻ᵀ L11⁻¹, for inspection only
    """
    l11, _ = activate_factors(block)
    l11_inv = solve_lower(l11, np.eye(block.m))
    return l11_inv.T @ l11_inv


def precision_factor(block: HyperGaussianBlock, l22: Optional[LowerTri] = None) -> LowerTri:
    """
    Full lower Cholesky factor of Λ. L22 is not a parameter of the block (it only shapes the
    marginal of γ_b), identity by default.
    """
    m, n = block.m, block.n
    l11, l21 = activate_factors(block)
    lower = np.zeros((m + n, m + n))
    lower[:m, :m] = l11
    lower[m:, :m] = l21
    lower[m:, m:] = np.eye(n) if l22 is None else np.asarray(l22, dtype=np.float64)
    return lower


def joint_from_block(block: HyperGaussianBlock, l22: Optional[LowerTri] = None) -> DenseJoint:
    lower = precision_factor(block, l22)
    lower_inv = solve_lower(lower, np.eye(lower.shape[0]))
    cov = lower_inv.T @ lower_inv
    return DenseJoint(mu=np.concatenate([block.mu_a, block.mu_b]), cov=0.5 * (cov + cov.T))


def condition_primitive(prim: HyperPrimitive, z: Mat) -> PrimitiveOffsets:
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if z.shape != (prim.latent_dim,):
        raise DimensionMismatch(f'latent has {z.shape[0]} entries, primitive latent dim is {prim.latent_dim}')
    pos = condition_fast(prim.block_pos, z)
    rot = condition_fast(prim.block_rot, z)
    scale = condition_fast(prim.block_scale, z)
    return PrimitiveOffsets(
        d_mu=pos.mu_cond,
        d_rot=rot.mu_cond,
        d_scale=scale.mu_cond,
        sigma=pos.logdet_cov_cond + rot.logdet_cov_cond + scale.logdet_cov_cond,
    )


def condition_batch(
    prims: Sequence[HyperPrimitive], z_per_prim: Sequence[Mat], workers: Optional[int] = None
) -> List[PrimitiveOffsets]:
    if len(prims) != len(z_per_prim):
        raise LengthMismatch(f'{len(prims)} primitives but {len(z_per_prim)} latents')
    if workers is None or workers <= 1 or len(prims) < 2:
        return [condition_primitive(p, z) for p, z in zip(prims, z_per_prim)]
    # no reduction across primitives, map keeps the input order
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(condition_primitive, prims, z_per_prim))


def condition_fast_batched(
    mu_a: Mat, mu_b: Mat, raw_l11: Mat, l21: Mat, z: Mat
) -> Tuple[Mat, Mat, FastState]:
    """
    Vectorised ``condition_fast`` over G blocks: mu_a (G, m), mu_b (G, n), raw_l11 (G, m(m+1)/2),
    l21 (G, n, m), z (G, n) or a shared (n,).
    """
    m = mu_a.shape[-1]
    l11 = activate_factors_batched(raw_l11, m)
    innovation = np.broadcast_to(z, mu_b.shape) - mu_b
    x = solve_upper_transposed_batched(l11, np.einsum('gnm,gn->gm', l21, innovation))
    logdet = -2.0 * np.sum(raw_l11[:, packed_diag_index(m)], axis=-1)
    return mu_a - x, logdet, FastState(l11=l11, innovation=innovation, x=x)


def condition_fast_backward(
    state: FastState, l21: Mat, g_mu: Mat, g_logdet: Optional[Mat] = None
) -> Dict[str, Mat]:
    """
    Adjoint of ``condition_fast_batched``. For L11ᵀ x = w the cotangents are
    g_w = L11⁻¹ g_x and g_L11 = -x g_wᵀ (lower part).
    """
    m = g_mu.shape[-1]
    diag = packed_diag_index(m)
    g_w = solve_lower_batched(state.l11, -g_mu)
    g_l11 = pack_lower(-np.einsum('gi,gj->gij', state.x, g_w))
    g_l11[:, diag] *= state.l11[:, np.arange(m), np.arange(m)]
    if g_logdet is not None:
        g_l11[:, diag] += -2.0 * g_logdet[:, None]
    g_innovation = np.einsum('gnm,gm->gn', l21, g_w)
    return {
        'mu_a': g_mu.copy(),
        'mu_b': -g_innovation,
        'raw_l11': g_l11,
        'l21': np.einsum('gn,gm->gnm', state.innovation, g_w),
        'z': g_innovation,
    }


def condition_naive_batched(mu: Mat, l_cov: LowerTri, m: int, gamma_b: Mat) -> Tuple[Mat, Mat, NaiveState]:
    """
    Vectorised covariance-view conditioning. The joint covariance is parameterized by its own
    Cholesky factor l_cov (G, m+n, m+n); every primitive pays for its n x n Σ_bb.
    """
    cov = l_cov @ np.swapaxes(l_cov, -1, -2)
    s_aa, s_ab, s_ba, s_bb = cov[:, :m, :m], cov[:, :m, m:], cov[:, m:, :m], cov[:, m:, m:]
    innovation = np.broadcast_to(gamma_b, mu[:, m:].shape) - mu[:, m:]
    if s_bb.shape[-1] == 0:
        # nothing to condition on, the marginal is the answer
        k, p = innovation.copy(), s_ba.copy()
    else:
        c_bb = cholesky_batched(s_bb)
        rhs = np.concatenate([innovation[..., None], s_ba], axis=-1)
        sol = solve_upper_transposed_batched(c_bb, solve_lower_batched(c_bb, rhs))
        k, p = sol[..., 0], sol[..., 1:]
    s_cond = s_aa - s_ab @ p
    sign, logdet = np.linalg.slogdet(s_cond)
    if np.any(sign <= 0):
        logger.warning('conditional covariance lost positive definiteness in naive path')
    mu_cond = mu[:, :m] + np.einsum('gmn,gn->gm', s_ab, k)
    return mu_cond, logdet, NaiveState(l_cov=l_cov, cov=cov, k=k, p=p, s_inv=np.linalg.inv(s_cond))


def condition_naive_backward(state: NaiveState, m: int, g_mu: Mat, g_logdet: Mat) -> Dict[str, Mat]:
    cov, k, p = state.cov, state.k, state.p
    g_s = g_logdet[:, None, None] * state.s_inv
    h = np.einsum('gnm,gm->gn', p, g_mu)
    g_cov = np.zeros_like(cov)
    g_cov[:, :m, :m] = g_s
    g_cov[:, :m, m:] = np.einsum('gi,gj->gij', g_mu, k) - g_s @ np.swapaxes(p, -1, -2)
    g_cov[:, m:, :m] = -p @ g_s
    g_cov[:, m:, m:] = p @ g_s @ np.swapaxes(p, -1, -2) - np.einsum('gi,gj->gij', h, k)
    g_l_cov = np.tril((g_cov + np.swapaxes(g_cov, -1, -2)) @ state.l_cov)
    g_mu_full = np.concatenate([g_mu, -h], axis=-1)
    return {'mu': g_mu_full, 'l_cov': g_l_cov, 'gamma_b': h}

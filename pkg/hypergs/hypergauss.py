"""
HyperGaussian primitives.

A HyperGaussianBlock is one attribute's (m + n)-dimensional Gaussian kept as its means plus the
top-left (L11) and bottom-left (L21) Cholesky blocks of the precision matrix. The diagonal of L11 is
stored in log-domain (``raw_l11``) so Λ_aa = L11 L11ᵀ is SPD for every parameter value.

A HyperPrimitive is one splattable Gaussian: base pose plus three blocks (position, rotation and scale
offsets) that are conditioned on the same latent code.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import orjson
from scipy.special import expit

from .const import POS_DIM, ROT_DIM, SCALE_DIM, SCHEMA_VERSION, BlockName
from .dto import BlockDoc, CheckpointDoc, PartitionDoc, PrimitiveDoc
from .errors import DegenerateRotation, DimensionMismatch
from .linalg import (
    LowerTri,
    Mat,
    packed_diag_index,
    quat_to_rotmat,
    quat_to_rotmat_batched,
    rotmat_quat_jacobian,
    tri_size,
    unpack_lower,
)
from .serialization import dumps

logger = logging.getLogger(__name__)

ROTATION_EPS = 1e-8


@dataclass(frozen=True)
class Partition:
    m: int
    n: int

    def __post_init__(self) -> None:
        if self.m < 1 or self.n < 0:
            raise DimensionMismatch(f'invalid partition m={self.m} n={self.n}')


@dataclass
class HyperGaussianBlock:
    partition: Partition
    mu_a: Mat
    mu_b: Mat
    raw_l11: Mat
    l21: Mat

    def __post_init__(self) -> None:
        m, n = self.partition.m, self.partition.n
        self.mu_a = np.asarray(self.mu_a, dtype=np.float64).reshape(-1)
        self.mu_b = np.asarray(self.mu_b, dtype=np.float64).reshape(-1)
        self.raw_l11 = np.asarray(self.raw_l11, dtype=np.float64).reshape(-1)
        self.l21 = np.asarray(self.l21, dtype=np.float64).reshape(n, m)
        if self.mu_a.shape != (m,) or self.mu_b.shape != (n,) or self.raw_l11.shape != (tri_size(m),):
            raise DimensionMismatch(
                f'block shapes do not match partition m={m} n={n}',
                mu_a=self.mu_a.shape[0],
                mu_b=self.mu_b.shape[0],
                raw_l11=self.raw_l11.shape[0],
            )

    @property
    def m(self) -> int:
        return self.partition.m

    @property
    def n(self) -> int:
        return self.partition.n


@dataclass
class HyperPrimitive:
    base_mu: Mat
    base_rot: Mat
    base_scale: Mat
    opacity_raw: float
    color: Mat
    block_pos: HyperGaussianBlock
    block_rot: HyperGaussianBlock
    block_scale: HyperGaussianBlock

    def __post_init__(self) -> None:
        self.base_mu = np.asarray(self.base_mu, dtype=np.float64).reshape(POS_DIM)
        self.base_rot = np.asarray(self.base_rot, dtype=np.float64).reshape(ROT_DIM)
        self.base_scale = np.asarray(self.base_scale, dtype=np.float64).reshape(SCALE_DIM)
        self.opacity_raw = float(self.opacity_raw)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        dims = (self.block_pos.m, self.block_rot.m, self.block_scale.m)
        if dims != (POS_DIM, ROT_DIM, SCALE_DIM):
            raise DimensionMismatch(f'block attribute dims must be (3, 4, 3), got {dims}')
        if len({self.block_pos.n, self.block_rot.n, self.block_scale.n}) != 1:
            raise DimensionMismatch('all blocks of a primitive must share the latent dimension')

    @property
    def latent_dim(self) -> int:
        return self.block_pos.n

    def blocks(self) -> List[Tuple[BlockName, HyperGaussianBlock]]:
        return [(BlockName.POS, self.block_pos), (BlockName.ROT, self.block_rot), (BlockName.SCALE, self.block_scale)]


@dataclass
class Gaussian3D:
    mu: Mat
    cov: Mat
    opacity: float
    color: Mat = field(default_factory=lambda: np.zeros(3))


class PosedBatch(NamedTuple):
    """Forward state of ``pose_batched``, kept for the backward pass."""

    mu: Mat
    q_raw: Mat
    q_norm: Mat
    q: Mat
    rot: Mat
    scale: Mat
    cov: Mat
    opacity: Mat


def activate_factors(block: HyperGaussianBlock) -> Tuple[LowerTri, Mat]:
    raw = unpack_lower(block.raw_l11, block.m)
    diag = np.arange(block.m)
    raw[diag, diag] = np.exp(raw[diag, diag])
    return raw, block.l21.copy()


def activate_factors_batched(raw_l11: Mat, m: int) -> LowerTri:
    # raw_l11 (G, m(m+1)/2) -> L11 (G, m, m)
    lower = unpack_lower(raw_l11, m)
    diag = np.arange(m)
    lower[:, diag, diag] = np.exp(raw_l11[:, packed_diag_index(m)])
    return lower


def splat_covariance(rot_mean: Mat, scale_mean: Mat) -> Mat:
    """
    Σ = R S Sᵀ Rᵀ from a (possibly unnormalized) quaternion and log-domain scales.
    """
    rot = quat_to_rotmat(rot_mean)
    m = rot * np.exp(np.asarray(scale_mean, dtype=np.float64))[None, :]
    return m @ m.T


def apply_offsets(base: HyperPrimitive, d_mu: Mat, d_rot: Mat, d_scale: Mat) -> Gaussian3D:
    q = base.base_rot + np.asarray(d_rot, dtype=np.float64)
    if np.linalg.norm(q) < ROTATION_EPS:
        raise DegenerateRotation('base rotation plus offset is (close to) the zero quaternion')
    return Gaussian3D(
        mu=base.base_mu + np.asarray(d_mu, dtype=np.float64),
        cov=splat_covariance(q, base.base_scale + np.asarray(d_scale, dtype=np.float64)),
        opacity=float(expit(base.opacity_raw)),
        color=base.color.copy(),
    )


def pose_batched(
    base_mu: Mat, base_rot: Mat, base_scale: Mat, opacity_raw: Mat, d_mu: Mat, d_rot: Mat, d_scale: Mat
) -> PosedBatch:
    q_raw = base_rot + d_rot
    q_norm = np.linalg.norm(q_raw, axis=-1)
    if np.any(q_norm < ROTATION_EPS):
        raise DegenerateRotation('base rotation plus offset is (close to) the zero quaternion')
    q = q_raw / q_norm[:, None]
    rot = quat_to_rotmat_batched(q)
    scale = np.exp(base_scale + d_scale)
    m = rot * scale[:, None, :]
    return PosedBatch(
        mu=base_mu + d_mu,
        q_raw=q_raw,
        q_norm=q_norm,
        q=q,
        rot=rot,
        scale=scale,
        cov=m @ np.swapaxes(m, -1, -2),
        opacity=expit(opacity_raw),
    )


def pose_backward(state: PosedBatch, g_mu: Mat, g_cov: Mat, g_opacity: Mat) -> Tuple[Mat, Mat, Mat, Mat]:
    """
    Cotangents of (mu, cov, opacity) pulled back to (position, quaternion sum, log-scale sum, opacity_raw).
    The position cotangent passes through unchanged, returned for symmetry with the forward inputs.
    """
    m = state.rot * state.scale[:, None, :]
    g_m = (g_cov + np.swapaxes(g_cov, -1, -2)) @ m
    g_rot = g_m * state.scale[:, None, :]
    g_log_scale = np.einsum('gij,gij->gj', state.rot, g_m) * state.scale
    g_q = np.einsum('gcij,gij->gc', rotmat_quat_jacobian(state.q), g_rot)
    g_q_raw = (g_q - state.q * np.sum(state.q * g_q, axis=-1, keepdims=True)) / state.q_norm[:, None]
    g_opacity_raw = g_opacity * state.opacity * (1.0 - state.opacity)
    return g_mu, g_q_raw, g_log_scale, g_opacity_raw


def init_block(
    m: int, n: int, rng: Optional[np.random.Generator] = None, coupling_std: float = 1e-2
) -> HyperGaussianBlock:
    """
    Starts at "no conditional effect": unit L11, zero means, L21 small noise (exactly zero without rng).
    """
    l21 = np.zeros((n, m))
    if rng is not None and coupling_std > 0.0:
        l21 = rng.normal(0.0, coupling_std, size=(n, m))
    return HyperGaussianBlock(Partition(m, n), np.zeros(m), np.zeros(n), np.zeros(tri_size(m)), l21)


def init_primitive(
    base_mu: Sequence[float],
    latent_dim: int,
    rng: Optional[np.random.Generator] = None,
    base_scale: float = 0.1,
    opacity: float = 0.5,
    color: Sequence[float] = (0.5, 0.5, 0.5),
    coupling_std: float = 1e-2,
) -> HyperPrimitive:
    return HyperPrimitive(
        base_mu=np.asarray(base_mu, dtype=np.float64),
        base_rot=np.array([1.0, 0.0, 0.0, 0.0]),
        base_scale=np.full(SCALE_DIM, np.log(base_scale)),
        opacity_raw=float(np.log(opacity) - np.log1p(-opacity)),
        color=np.asarray(color, dtype=np.float64),
        block_pos=init_block(POS_DIM, latent_dim, rng, coupling_std),
        block_rot=init_block(ROT_DIM, latent_dim, rng, coupling_std),
        block_scale=init_block(SCALE_DIM, latent_dim, rng, coupling_std),
    )


def block_to_doc(block: HyperGaussianBlock) -> BlockDoc:
    return BlockDoc(
        partition=PartitionDoc(m=block.m, n=block.n),
        mu_a=block.mu_a.tolist(),
        mu_b=block.mu_b.tolist(),
        raw_L11=block.raw_l11.tolist(),
        L21=block.l21.tolist(),
    )


def block_from_doc(doc: BlockDoc) -> HyperGaussianBlock:
    m, n = doc.partition.m, doc.partition.n
    return HyperGaussianBlock(
        Partition(m, n),
        np.array(doc.mu_a, dtype=np.float64),
        np.array(doc.mu_b, dtype=np.float64),
        np.array(doc.raw_L11, dtype=np.float64),
        np.array(doc.L21, dtype=np.float64).reshape(n, m),
    )


def primitive_to_doc(prim: HyperPrimitive) -> PrimitiveDoc:
    return PrimitiveDoc(
        base_mu=prim.base_mu.tolist(),
        base_rot=prim.base_rot.tolist(),
        base_scale=prim.base_scale.tolist(),
        opacity_raw=prim.opacity_raw,
        color=prim.color.tolist(),
        block_pos=block_to_doc(prim.block_pos),
        block_rot=block_to_doc(prim.block_rot),
        block_scale=block_to_doc(prim.block_scale),
    )


def primitive_from_doc(doc: PrimitiveDoc) -> HyperPrimitive:
    return HyperPrimitive(
        base_mu=np.array(doc.base_mu),
        base_rot=np.array(doc.base_rot),
        base_scale=np.array(doc.base_scale),
        opacity_raw=doc.opacity_raw,
        color=np.array(doc.color),
        block_pos=block_from_doc(doc.block_pos),
        block_rot=block_from_doc(doc.block_rot),
        block_scale=block_from_doc(doc.block_scale),
    )


def dump_primitives(
    prims: Sequence[HyperPrimitive],
    latent_dim: int,
    latents: Optional[Mat] = None,
    provenance: Optional[Dict[str, Any]] = None,
) -> bytes:
    doc = CheckpointDoc(
        schema_version=SCHEMA_VERSION,
        latent_dim=latent_dim,
        primitives=[primitive_to_doc(p) for p in prims],
        latents=[] if latents is None else np.asarray(latents, dtype=np.float64).tolist(),
        provenance=provenance or {},
    )
    return dumps(doc)


def load_primitives(data: bytes) -> Tuple[List[HyperPrimitive], int, Mat]:
    doc = CheckpointDoc.parse_obj(orjson.loads(data))
    prims = [primitive_from_doc(p) for p in doc.primitives]
    if any(p.latent_dim != doc.latent_dim for p in prims):
        raise DimensionMismatch('primitive latent dimension differs from checkpoint latent_dim')
    latents = np.array(doc.latents, dtype=np.float64).reshape(len(doc.latents), doc.latent_dim)
    return prims, doc.latent_dim, latents

"""
Reverse-mode gradients of condition -> pose -> splat -> L1 loss, and a central-difference checker.

Every stage has a hand-written adjoint next to its forward (``condition_fast_backward``,
``pose_backward``, ``rasterize_backward``); this module strings them together in reverse order.
Frame contributions are summed in frame-index order so gradients are bitwise reproducible.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .const import BLOCK_DIMS, BlockName
from .conditioning import FastState, condition_fast, condition_fast_backward, condition_fast_batched
from .dto import GradcheckOp
from .errors import DimensionMismatch, NonFiniteLoss
from .hypergauss import (
    HyperGaussianBlock,
    HyperPrimitive,
    Partition,
    PosedBatch,
    activate_factors,
    init_block,
    pose_backward,
    pose_batched,
)
from .linalg import Mat, packed_diag_index, solve_upper_transposed, tri_size
from .logger import log_extra
from .rng import stream
from .splat import Camera, Image, ProjectionState, RasterState, rasterize_backward, rasterize_with_state

logger = logging.getLogger(__name__)

BASE_FIELDS = ('base_mu', 'base_rot', 'base_scale', 'opacity_raw', 'color')
BLOCK_FIELDS = ('mu_a', 'mu_b', 'raw_l11', 'l21')
LATENTS = 'latents'

REL_FLOOR = 1e-6


class ParamSet:
    """
    Flat view over every optimizable scalar of a model.

    Order: base fields, then ``block_pos``/``block_rot``/``block_scale`` x (mu_a, mu_b, raw_l11, l21),
    then ``latents`` (one row per frame). With latent_dim == 0 the block and latent entries do not
    exist at all, the model is a plain static Gaussian set.
    """

    def __init__(self, arrays: Dict[str, Mat], latent_dim: int) -> None:
        self.latent_dim = latent_dim
        self.arrays = {name: np.asarray(arrays[name], dtype=np.float64) for name in self.names_for(latent_dim)}

    @staticmethod
    def names_for(latent_dim: int) -> List[str]:
        names = list(BASE_FIELDS)
        if latent_dim > 0:
            names += [f'{block}.{field}' for block in BlockName for field in BLOCK_FIELDS]
            names.append(LATENTS)
        return names

    @property
    def names(self) -> List[str]:
        return self.names_for(self.latent_dim)

    @property
    def num_primitives(self) -> int:
        return int(self.arrays['base_mu'].shape[0])

    @property
    def num_frames(self) -> int:
        return int(self.arrays[LATENTS].shape[0]) if self.latent_dim > 0 else 0

    def __getitem__(self, name: str) -> Mat:
        return self.arrays[name]

    def __iter__(self) -> Iterator[Tuple[str, Mat]]:
        return iter((name, self.arrays[name]) for name in self.names)

    def block(self, block: BlockName, field: str) -> Mat:
        return self.arrays[f'{block}.{field}']

    def flatten(self) -> Mat:
        return np.concatenate([arr.ravel() for _, arr in self]) if self.names else np.zeros(0)

    def unflatten(self, flat: Mat) -> 'ParamSet':
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.size,):
            raise DimensionMismatch(f'flat vector has {flat.shape} entries, param set has {self.size}')
        out: Dict[str, Mat] = {}
        offset = 0
        for name, arr in self:
            out[name] = flat[offset : offset + arr.size].reshape(arr.shape).copy()
            offset += arr.size
        return ParamSet(out, self.latent_dim)

    @property
    def size(self) -> int:
        return sum(arr.size for _, arr in self)

    def zeros_like(self) -> 'ParamSet':
        return ParamSet({name: np.zeros_like(arr) for name, arr in self}, self.latent_dim)

    def copy(self) -> 'ParamSet':
        return ParamSet({name: arr.copy() for name, arr in self}, self.latent_dim)

    def coordinate_name(self, index: int) -> str:
        for name, arr in self:
            if index < arr.size:
                where = ', '.join(str(int(i)) for i in np.unravel_index(index, arr.shape))
                return f'{name}[{where}]'
            index -= arr.size
        raise IndexError(index)


class FrameBatch(NamedTuple):
    targets: Sequence[Image]
    frames: Sequence[int]
    cam: Camera


@dataclass
class GradReport:
    op: str
    max_rel_error: float
    argmax: str
    num_coords: int
    eps: float
    seed: int = 0


class FrameCache(NamedTuple):
    cond: Dict[BlockName, FastState]
    posed: PosedBatch
    raster: RasterState
    proj: ProjectionState


def params_from_primitives(prims: Sequence[HyperPrimitive], latents: Optional[Mat] = None) -> ParamSet:
    latent_dim = prims[0].latent_dim if prims else (0 if latents is None else int(np.shape(latents)[1]))
    arrays: Dict[str, Mat] = {
        'base_mu': np.array([p.base_mu for p in prims]).reshape(-1, 3),
        'base_rot': np.array([p.base_rot for p in prims]).reshape(-1, 4),
        'base_scale': np.array([p.base_scale for p in prims]).reshape(-1, 3),
        'opacity_raw': np.array([p.opacity_raw for p in prims], dtype=np.float64),
        'color': np.array([p.color for p in prims]).reshape(-1, 3),
    }
    if latent_dim > 0:
        g = len(prims)
        for block, m in BLOCK_DIMS.items():
            blocks = [getattr(p, block.value) for p in prims]
            arrays[f'{block}.mu_a'] = np.array([b.mu_a for b in blocks]).reshape(g, m)
            arrays[f'{block}.mu_b'] = np.array([b.mu_b for b in blocks]).reshape(g, latent_dim)
            arrays[f'{block}.raw_l11'] = np.array([b.raw_l11 for b in blocks]).reshape(g, tri_size(m))
            arrays[f'{block}.l21'] = np.array([b.l21 for b in blocks]).reshape(g, latent_dim, m)
        arrays[LATENTS] = np.zeros((0, latent_dim)) if latents is None else np.asarray(latents).reshape(-1, latent_dim)
    return ParamSet(arrays, latent_dim)


def primitives_from_params(params: ParamSet) -> List[HyperPrimitive]:
    n = params.latent_dim
    prims = []
    for i in range(params.num_primitives):
        blocks: Dict[BlockName, HyperGaussianBlock] = {}
        for block, m in BLOCK_DIMS.items():
            if n == 0:
                blocks[block] = init_block(m, 0)
                continue
            blocks[block] = HyperGaussianBlock(
                Partition(m, n),
                params.block(block, 'mu_a')[i],
                params.block(block, 'mu_b')[i],
                params.block(block, 'raw_l11')[i],
                params.block(block, 'l21')[i],
            )
        prims.append(
            HyperPrimitive(
                base_mu=params['base_mu'][i],
                base_rot=params['base_rot'][i],
                base_scale=params['base_scale'][i],
                opacity_raw=float(params['opacity_raw'][i]),
                color=params['color'][i],
                block_pos=blocks[BlockName.POS],
                block_rot=blocks[BlockName.ROT],
                block_scale=blocks[BlockName.SCALE],
            )
        )
    return prims


def condition_params(params: ParamSet, frame: int) -> Tuple[Dict[BlockName, Mat], Mat, Dict[BlockName, FastState]]:
    """
    Conditional-mean offsets of every primitive for one frame's latent, plus per-primitive σ.
    """
    g = params.num_primitives
    offsets = {block: np.zeros((g, m)) for block, m in BLOCK_DIMS.items()}
    sigma = np.zeros(g)
    states: Dict[BlockName, FastState] = {}
    if params.latent_dim == 0:
        return offsets, sigma, states
    z = params[LATENTS][frame]
    for block in BlockName:
        mu_cond, logdet, state = condition_fast_batched(
            params.block(block, 'mu_a'),
            params.block(block, 'mu_b'),
            params.block(block, 'raw_l11'),
            params.block(block, 'l21'),
            z,
        )
        offsets[block] = mu_cond
        sigma = sigma + logdet
        states[block] = state
    return offsets, sigma, states


def uncertainty(params: ParamSet) -> Mat:
    """σ per primitive: Σ over the three blocks of log det Σ_{a|b} = -2 tr log L11. Latent independent."""
    sigma = np.zeros(params.num_primitives)
    if params.latent_dim == 0:
        return sigma
    for block, m in BLOCK_DIMS.items():
        sigma = sigma - 2.0 * np.sum(params.block(block, 'raw_l11')[:, packed_diag_index(m)], axis=-1)
    return sigma


def pose_params(params: ParamSet, frame: int) -> Tuple[PosedBatch, Dict[BlockName, FastState]]:
    offsets, _, states = condition_params(params, frame)
    posed = pose_batched(
        params['base_mu'],
        params['base_rot'],
        params['base_scale'],
        params['opacity_raw'],
        offsets[BlockName.POS],
        offsets[BlockName.ROT],
        offsets[BlockName.SCALE],
    )
    return posed, states


def render_params(params: ParamSet, frame: int, cam: Camera, color: Optional[Mat] = None) -> Image:
    posed, _ = pose_params(params, frame)
    image, _, _ = rasterize_with_state(
        posed.mu, posed.cov, posed.opacity, params['color'] if color is None else color, cam
    )
    return image


def frame_forward(params: ParamSet, frame: int, cam: Camera) -> Tuple[Image, FrameCache]:
    posed, states = pose_params(params, frame)
    image, raster, proj = rasterize_with_state(posed.mu, posed.cov, posed.opacity, params['color'], cam)
    return image, FrameCache(cond=states, posed=posed, raster=raster, proj=proj)


def frame_backward(
    params: ParamSet, frame: int, cam: Camera, cache: FrameCache, g_image: Image, grads: ParamSet
) -> None:
    g = rasterize_backward(
        cache.raster, cache.proj, cache.posed.cov, cache.posed.opacity, params['color'], cam, g_image
    )
    g_mu, g_rot, g_scale, g_opacity_raw = pose_backward(cache.posed, g['mu'], g['cov'], g['opacity'])
    grads['base_mu'][...] += g_mu
    grads['base_rot'][...] += g_rot
    grads['base_scale'][...] += g_scale
    grads['opacity_raw'][...] += g_opacity_raw
    grads['color'][...] += g['color']
    if params.latent_dim == 0:
        return

    g_offsets = {BlockName.POS: g_mu, BlockName.ROT: g_rot, BlockName.SCALE: g_scale}
    g_z = np.zeros(params.latent_dim)
    for block in BlockName:
        g_block = condition_fast_backward(cache.cond[block], params.block(block, 'l21'), g_offsets[block])
        for field in BLOCK_FIELDS:
            grads.block(block, field)[...] += g_block[field]
        g_z += np.sum(g_block['z'], axis=0)
    grads[LATENTS][frame] += g_z


def l1_loss(image: Image, target: Image) -> Tuple[float, Image]:
    residual = image - target
    return float(np.mean(np.abs(residual))), np.sign(residual) / residual.size


def grad_objective(model: ParamSet, batch: FrameBatch) -> Tuple[float, ParamSet]:
    """
    Mean over the batch frames of the pixelwise L1 loss, and its gradient w.r.t. every parameter.
    """
    if not batch.frames:
        raise DimensionMismatch('empty frame batch')
    if len(batch.targets) != len(batch.frames):
        raise DimensionMismatch(f'{len(batch.targets)} targets for {len(batch.frames)} frames')
    grads = model.zeros_like()
    loss = 0.0
    scale = 1.0 / len(batch.frames)
    for frame, target in zip(batch.frames, batch.targets):
        image, cache = frame_forward(model, frame, batch.cam)
        frame_loss, g_image = l1_loss(image, target)
        loss += scale * frame_loss
        frame_backward(model, frame, batch.cam, cache, scale * g_image, grads)
    if not np.isfinite(loss) or not np.all(np.isfinite(grads.flatten())):
        raise NonFiniteLoss(f'loss {loss} is not finite', frames=list(batch.frames))
    return loss, grads


def objective(model: ParamSet, batch: FrameBatch) -> float:
    loss = 0.0
    for frame, target in zip(batch.frames, batch.targets):
        loss += l1_loss(render_params(model, frame, batch.cam), target)[0] / len(batch.frames)
    return loss


def _relative_errors(analytic: Mat, numeric: Mat) -> Mat:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)


def _central_difference(f: Callable[[Mat], float], x: Mat, coords: Mat, eps: float) -> Mat:
    out = np.empty(coords.shape[0])
    for k, i in enumerate(coords):
        step = np.zeros_like(x)
        step[i] = eps
        out[k] = (f(x + step) - f(x - step)) / (2.0 * eps)
    return out


def _subsample(size: int, max_coords: int, rng: np.random.Generator) -> Mat:
    if size <= max_coords:
        return np.arange(size)
    return np.sort(rng.choice(size, size=max_coords, replace=False))


def check_gradients(
    op: GradcheckOp,
    point: ParamSet,
    eps: float = 1e-5,
    batch: Optional[FrameBatch] = None,
    max_coords: int = 500,
    seed: int = 0,
) -> GradReport:
    """
    Compare analytic derivatives with (f(x+ε) - f(x-ε)) / 2ε coordinate by coordinate.

    quadratic      ½ xᵀAx + bᵀx over the flattened point, A and b drawn from the seed
    condition_mean Jacobian of the block_pos conditional mean of primitive 0 w.r.t. the frame-0 latent
    sigma          Σ of per-primitive σ w.r.t. every parameter (only raw_l11 diagonals are non-zero)
    pipeline       ``grad_objective`` on ``batch``

    Every coordinate is checked up to ``max_coords``, beyond that a seeded subsample.
    Relative error is |a - f| / max(|a|, |f|, 1e-6).
    """
    if not 1e-8 <= eps <= 1e-3:
        raise DimensionMismatch(f'eps {eps} outside [1e-8, 1e-3]')
    rng = stream(seed, 'gradcheck')
    x0 = point.flatten()

    if op == GradcheckOp.CONDITION_MEAN:
        return _check_condition_mean(point, eps, seed)

    if op == GradcheckOp.QUADRATIC:
        a_half = rng.normal(size=(x0.size, x0.size)) / np.sqrt(max(x0.size, 1))
        a = a_half @ a_half.T + np.eye(x0.size)
        b = rng.normal(size=x0.size)

        def f(x: Mat) -> float:
            return float(0.5 * x @ a @ x + b @ x)

        analytic = a @ x0 + b
    elif op == GradcheckOp.SIGMA:

        def f(x: Mat) -> float:
            return float(np.sum(uncertainty(point.unflatten(x))))

        analytic = sigma_gradient(point).flatten()
    elif op == GradcheckOp.PIPELINE:
        if batch is None:
            raise DimensionMismatch('pipeline check needs a frame batch')

        def f(x: Mat) -> float:
            return objective(point.unflatten(x), batch)

        analytic = grad_objective(point, batch)[1].flatten()
    else:
        raise DimensionMismatch(f'unknown op {op}')

    coords = _subsample(x0.size, max_coords, rng)
    numeric = _central_difference(f, x0, coords, eps)
    errors = _relative_errors(analytic[coords], numeric)
    worst = int(np.argmax(errors)) if errors.size else 0
    report = GradReport(
        op=str(op),
        max_rel_error=float(errors[worst]) if errors.size else 0.0,
        argmax=point.coordinate_name(int(coords[worst])) if errors.size else '',
        num_coords=int(coords.size),
        eps=eps,
        seed=seed,
    )
    logger.info('gradient check', **log_extra(op=report.op, max_rel_error=report.max_rel_error, argmax=report.argmax))
    return report


def sigma_gradient(params: ParamSet) -> ParamSet:
    grads = params.zeros_like()
    if params.latent_dim == 0:
        return grads
    for block, m in BLOCK_DIMS.items():
        grads.block(block, 'raw_l11')[:, packed_diag_index(m)] = -2.0
    return grads


def condition_mean_jacobian(block: HyperGaussianBlock) -> Mat:
    """∂μ_{a|b}/∂γ_b = -L11⁻ᵀ L21ᵀ, shape (m, n)."""
    l11, l21 = activate_factors(block)
    return -solve_upper_transposed(l11, l21.T)


def _check_condition_mean(point: ParamSet, eps: float, seed: int) -> GradReport:
    block = primitives_from_params(point)[0].block_pos
    z0 = point[LATENTS][0] if point.latent_dim > 0 else np.zeros(0)
    analytic = condition_mean_jacobian(block)
    numeric = np.empty_like(analytic)
    for j in range(block.n):
        step = np.zeros(block.n)
        step[j] = eps
        numeric[:, j] = (condition_fast(block, z0 + step).mu_cond - condition_fast(block, z0 - step).mu_cond) / (
            2.0 * eps
        )
    errors = _relative_errors(analytic, numeric)
    worst = np.unravel_index(int(np.argmax(errors)), errors.shape) if errors.size else (0, 0)
    report = GradReport(
        op=str(GradcheckOp.CONDITION_MEAN),
        max_rel_error=float(errors[worst]) if errors.size else 0.0,
        argmax=f'd mu_cond[{worst[0]}] / d z[{worst[1]}]',
        num_coords=int(errors.size),
        eps=eps,
        seed=seed,
    )
    logger.info('gradient check', **log_extra(op=report.op, max_rel_error=report.max_rel_error, argmax=report.argmax))
    return report


def random_problem(
    seed: int, num_primitives: int = 4, image_size: int = 8, latent_dim: int = 2, num_frames: int = 2
) -> Tuple[ParamSet, FrameBatch]:
    """
    Small random model with non-trivial HyperGaussian factors and random target images, the
    instance the gradient checks run on.
    """
    rng = stream(seed, 'gradcheck')
    view = np.eye(4)
    view[2, 3] = 4.0
    cam = Camera(
        view=view,
        fx=float(image_size),
        fy=float(image_size),
        cx=image_size / 2.0,
        cy=image_size / 2.0,
        width=image_size,
        height=image_size,
        near=0.1,
    )
    g, n = num_primitives, latent_dim
    quats = rng.normal(size=(g, 4))
    arrays: Dict[str, Mat] = {
        'base_mu': rng.uniform(-0.8, 0.8, size=(g, 3)) * np.array([1.0, 1.0, 0.5]),
        'base_rot': quats / np.linalg.norm(quats, axis=-1, keepdims=True),
        'base_scale': np.log(rng.uniform(0.3, 0.7, size=(g, 3))),
        'opacity_raw': rng.uniform(-1.0, 1.5, size=g),
        'color': rng.uniform(0.1, 0.9, size=(g, 3)),
    }
    if n > 0:
        for block, m in BLOCK_DIMS.items():
            arrays[f'{block}.mu_a'] = rng.normal(0.0, 0.05, size=(g, m))
            arrays[f'{block}.mu_b'] = rng.normal(0.0, 0.3, size=(g, n))
            raw = rng.normal(0.0, 0.2, size=(g, tri_size(m)))
            arrays[f'{block}.raw_l11'] = raw
            arrays[f'{block}.l21'] = rng.normal(0.0, 0.1, size=(g, n, m))
        arrays[LATENTS] = rng.normal(0.0, 0.5, size=(num_frames, n))
    params = ParamSet(arrays, n)
    targets = [rng.uniform(0.0, 1.0, size=(image_size, image_size, 3)) for _ in range(num_frames)]
    return params, FrameBatch(targets=targets, frames=list(range(num_frames)), cam=cam)

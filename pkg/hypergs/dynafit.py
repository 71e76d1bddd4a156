"""
Desk-scale dynamic scene fitting.

``make_scene`` renders a ground-truth animated Gaussian set (``swirl``, ``blink`` or ``glint``);
``fit`` optimizes HyperPrimitives plus one free latent code per frame against it with Adam.
With latent_dim == 0 the model has no blocks and no latents: plain static 3DGS fitting.

The scene's rest-pose positions act as the tracked mesh: every fitted primitive starts at one of them.
"""
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .const import BLOCK_DIMS, PSNR_CAP, SCHEMA_VERSION
from .dto import CameraConfig, FitConfig, RestGaussianDoc, SceneDoc, ScenePreset
from .errors import DimensionMismatch, UnknownPreset
from .gradients import LATENTS, FrameBatch, ParamSet, grad_objective, objective, render_params, uncertainty
from .hypergauss import init_block
from .linalg import Mat, quat_to_rotmat_batched, tri_size
from .logger import log_extra, log_sync_method
from .rng import stream
from .splat import Camera, Image, camera_from_config, rasterize_with_state

logger = logging.getLogger(__name__)

# uncertainty colormap stops: green (low) -> yellow -> red (high)
COLORMAP_STOPS = np.array([0.0, 0.5, 1.0])
COLORMAP_COLORS = np.array([[0x66, 0xB5, 0x6B], [0xFF, 0xFF, 0x00], [0xFF, 0x00, 0x00]]) / 255.0

BLINK_BAND = (-0.85, -0.15)
BLINK_MIN_FACTOR = 0.1
BLINK_DROP = 0.15
SWIRL_MAX_ANGLE = 0.6
GLINT_RADIUS = 0.45
GLINT_WIDTH = 0.1


@dataclass
class RestGaussians:
    mu: Mat
    rot: Mat
    scale: Mat
    opacity: Mat
    color: Mat

    @property
    def count(self) -> int:
        return int(self.mu.shape[0])

    def covariance(self) -> Mat:
        rot = quat_to_rotmat_batched(self.rot / np.linalg.norm(self.rot, axis=-1, keepdims=True))
        m = rot * self.scale[:, None, :]
        return m @ np.swapaxes(m, -1, -2)


@dataclass
class SceneSequence:
    frames: List[Image]
    cam: Camera
    camera_config: CameraConfig
    seed: int
    preset: ScenePreset
    amplitude: float
    truth: RestGaussians
    deforming: Mat

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def anchors(self) -> Mat:
        return self.truth.mu


@dataclass
class FitReport:
    loss_trace: List[float]
    eval_trace: List[Tuple[int, float]]
    psnr: List[float]
    final_loss: float
    wall_time: float
    model: ParamSet
    config: FitConfig
    anchor_index: Mat = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def loss_at(self, iteration: int) -> float:
        """Full-scene loss of the closest evaluation at or before ``iteration``."""
        best = self.eval_trace[0][1]
        for it, loss in self.eval_trace:
            if it <= iteration:
                best = loss
        return best


def _phase(frame: int, num_frames: int) -> float:
    return frame / num_frames


def _sample_truth(rng: np.random.Generator, count: int) -> RestGaussians:
    quats = rng.normal(size=(count, 4))
    return RestGaussians(
        mu=rng.uniform(-1.0, 1.0, size=(count, 3)) * np.array([1.0, 1.0, 0.3]),
        rot=quats / np.linalg.norm(quats, axis=-1, keepdims=True),
        scale=rng.uniform(0.08, 0.2, size=(count, 3)),
        opacity=rng.uniform(0.6, 0.95, size=count),
        color=rng.uniform(0.1, 0.95, size=(count, 3)),
    )


def _deforming_region(preset: ScenePreset, truth: RestGaussians) -> Mat:
    if preset == ScenePreset.BLINK:
        return (truth.mu[:, 1] > BLINK_BAND[0]) & (truth.mu[:, 1] < BLINK_BAND[1])
    if preset == ScenePreset.SWIRL:
        return np.exp(-np.sum(truth.mu[:, :2] ** 2, axis=-1)) > 0.5
    return np.linalg.norm(truth.mu[:, :2], axis=-1) < GLINT_RADIUS


def deform(
    preset: ScenePreset, truth: RestGaussians, deforming: Mat, amplitude: float, phase: float
) -> Tuple[Mat, Mat, Mat, Mat]:
    """
    Ground-truth (mu, cov, opacity, color) at a phase in [0, 1).

    blink  Gaussians of the band collapse along world y and drop slightly, closed at phase 0.5
    swirl  positions rotate about the optical axis by an angle decaying with radius
    glint  a central cluster flashes toward white and opaque around phase 0.5
    """
    mu, cov = truth.mu.copy(), truth.covariance()
    opacity, color = truth.opacity.copy(), truth.color.copy()
    if preset == ScenePreset.BLINK:
        closed = amplitude * 0.5 * (1.0 - np.cos(2.0 * np.pi * phase))
        closed = min(closed, 1.0)
        factor = np.where(deforming, max(1.0 - (1.0 - BLINK_MIN_FACTOR) * closed, BLINK_MIN_FACTOR), 1.0)
        squash = np.ones((truth.count, 3))
        squash[:, 1] = factor
        cov = cov * squash[:, :, None] * squash[:, None, :]
        mu[:, 1] += np.where(deforming, BLINK_DROP * closed, 0.0)
    elif preset == ScenePreset.SWIRL:
        radius2 = np.sum(truth.mu[:, :2] ** 2, axis=-1)
        angle = amplitude * SWIRL_MAX_ANGLE * np.sin(2.0 * np.pi * phase) * np.exp(-radius2)
        c, s = np.cos(angle), np.sin(angle)
        rz = np.zeros((truth.count, 3, 3))
        rz[:, 0, 0], rz[:, 0, 1], rz[:, 1, 0], rz[:, 1, 1], rz[:, 2, 2] = c, -s, s, c, 1.0
        mu = np.einsum('gij,gj->gi', rz, mu)
        cov = rz @ cov @ np.swapaxes(rz, -1, -2)
    elif preset == ScenePreset.GLINT:
        spike = np.clip(amplitude, 0.0, 1.0) * np.exp(-(((phase - 0.5) / GLINT_WIDTH) ** 2))
        spike = np.where(deforming, spike, 0.0)
        color = color + (1.0 - color) * spike[:, None]
        opacity = opacity + (1.0 - opacity) * spike * 0.9
    else:
        raise UnknownPreset(f'unknown preset {preset}')
    return mu, cov, opacity, color


def render_truth(
    preset: ScenePreset, truth: RestGaussians, deforming: Mat, amplitude: float, num_frames: int, cam: Camera
) -> List[Image]:
    frames = []
    for k in range(num_frames):
        mu, cov, opacity, color = deform(preset, truth, deforming, amplitude, _phase(k, num_frames))
        frames.append(rasterize_with_state(mu, cov, opacity, color, cam)[0])
    return frames


def _parse_preset(preset: str) -> ScenePreset:
    try:
        return ScenePreset(preset)
    except ValueError as exc:
        raise UnknownPreset(f'unknown preset {preset!r}, known: {[p.value for p in ScenePreset]}') from exc


@log_sync_method(__name__)
def make_scene(
    preset: str,
    seed: int,
    num_frames: int,
    cam: Optional[CameraConfig] = None,
    num_primitives: int = 64,
    amplitude: float = 1.0,
) -> SceneSequence:
    _preset = _parse_preset(preset)
    if num_frames < 1:
        raise DimensionMismatch('a scene needs at least one frame')
    camera_config = cam or CameraConfig()
    camera = camera_from_config(camera_config)
    truth = _sample_truth(stream(seed, 'scene'), num_primitives)
    deforming = _deforming_region(_preset, truth)
    frames = render_truth(_preset, truth, deforming, amplitude, num_frames, camera)
    logger.info(
        'scene generated',
        **log_extra(preset=_preset.value, frames=num_frames, primitives=num_primitives, deforming=int(deforming.sum())),
    )
    return SceneSequence(
        frames=frames,
        cam=camera,
        camera_config=camera_config,
        seed=seed,
        preset=_preset,
        amplitude=amplitude,
        truth=truth,
        deforming=deforming,
    )


def scene_to_doc(scene: SceneSequence) -> SceneDoc:
    truth = scene.truth
    return SceneDoc(
        schema_version=SCHEMA_VERSION,
        preset=scene.preset,
        seed=scene.seed,
        num_frames=scene.num_frames,
        amplitude=scene.amplitude,
        camera=scene.camera_config,
        truth=[
            RestGaussianDoc(
                mu=truth.mu[i].tolist(),
                rot=truth.rot[i].tolist(),
                scale=truth.scale[i].tolist(),
                opacity=float(truth.opacity[i]),
                color=truth.color[i].tolist(),
            )
            for i in range(truth.count)
        ],
        anchors=truth.mu.tolist(),
        deforming=[bool(d) for d in scene.deforming],
    )


def scene_from_doc(doc: SceneDoc) -> SceneSequence:
    truth = RestGaussians(
        mu=np.array([g.mu for g in doc.truth]).reshape(-1, 3),
        rot=np.array([g.rot for g in doc.truth]).reshape(-1, 4),
        scale=np.array([g.scale for g in doc.truth]).reshape(-1, 3),
        opacity=np.array([g.opacity for g in doc.truth], dtype=np.float64),
        color=np.array([g.color for g in doc.truth]).reshape(-1, 3),
    )
    deforming = np.array(doc.deforming, dtype=bool)
    camera = camera_from_config(doc.camera)
    return SceneSequence(
        frames=render_truth(doc.preset, truth, deforming, doc.amplitude, doc.num_frames, camera),
        cam=camera,
        camera_config=doc.camera,
        seed=doc.seed,
        preset=doc.preset,
        amplitude=doc.amplitude,
        truth=truth,
        deforming=deforming,
    )


def init_model(scene: SceneSequence, cfg: FitConfig) -> Tuple[ParamSet, Mat]:
    """
    One primitive per anchor (cycled with a small jitter when G exceeds the anchor count), identity
    rotation, ``init_scale``, opacity 0.5, gray. Returns the params and each primitive's anchor index.
    """
    rng = stream(cfg.seed, 'init')
    g, n = cfg.num_primitives, cfg.latent_dim
    anchor_index = np.arange(g) % scene.truth.count
    jitter = np.where((np.arange(g) >= scene.truth.count)[:, None], rng.normal(0.0, 0.02, size=(g, 3)), 0.0)
    arrays: Dict[str, Mat] = {
        'base_mu': scene.anchors[anchor_index] + jitter,
        'base_rot': np.tile([1.0, 0.0, 0.0, 0.0], (g, 1)),
        'base_scale': np.full((g, 3), np.log(cfg.init_scale)),
        'opacity_raw': np.zeros(g),
        'color': np.full((g, 3), 0.5),
    }
    if n > 0:
        for block, m in BLOCK_DIMS.items():
            blocks = [init_block(m, n, rng, cfg.coupling_init_std) for _ in range(g)]
            arrays[f'{block}.mu_a'] = np.zeros((g, m))
            arrays[f'{block}.mu_b'] = np.zeros((g, n))
            arrays[f'{block}.raw_l11'] = np.zeros((g, tri_size(m)))
            arrays[f'{block}.l21'] = np.array([b.l21 for b in blocks]).reshape(g, n, m)
        arrays[LATENTS] = stream(cfg.seed, 'latents').normal(0.0, cfg.latent_init_std, size=(scene.num_frames, n))
    return ParamSet(arrays, n), anchor_index


class Adam:
    """
    Adam with one learning rate per parameter name; colors are projected back onto [0, 1].
    """

    def __init__(self, params: ParamSet, lrs: Dict[str, float], beta1: float, beta2: float, eps: float) -> None:
        self.params = params
        self.lrs = lrs
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = params.zeros_like()
        self.v = params.zeros_like()

    def step(self, grads: ParamSet, scale: float = 1.0) -> None:
        self.step_count += 1
        bias1 = 1.0 - self.beta1**self.step_count
        bias2 = 1.0 - self.beta2**self.step_count
        for name, grad in grads:
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            self.params[name][...] -= scale * self.lrs[name] * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
        np.clip(self.params['color'], 0.0, 1.0, out=self.params['color'])


def learning_rates(params: ParamSet, cfg: FitConfig) -> Dict[str, float]:
    """
    Conditional offsets sum over the latent dimensions, so with ``lr_latent_scaling`` the block and
    latent rates shrink by sqrt(n) to keep the offset step size independent of n.
    """
    latent_scale = 1.0 / float(np.sqrt(params.latent_dim)) if cfg.lr_latent_scaling and params.latent_dim > 0 else 1.0
    lrs = {}
    for name in params.names:
        if name == LATENTS:
            lrs[name] = cfg.lr_latent * latent_scale
        elif '.' in name:
            lrs[name] = cfg.lr * latent_scale
        else:
            lrs[name] = cfg.lr_base
    return lrs


def expon_lr(step: int, max_steps: int, final_ratio: float) -> float:
    """Log-linear decay from 1 at step 0 to ``final_ratio`` at ``max_steps``."""
    if max_steps <= 0:
        return 1.0
    t = min(max(step / max_steps, 0.0), 1.0)
    return float(np.exp(t * np.log(final_ratio)))


def full_batch(scene: SceneSequence) -> FrameBatch:
    return FrameBatch(targets=scene.frames, frames=list(range(scene.num_frames)), cam=scene.cam)


@log_sync_method(__name__)
def fit(scene: SceneSequence, cfg: FitConfig) -> FitReport:
    started = time.monotonic()
    params, anchor_index = init_model(scene, cfg)
    optimizer = Adam(params, learning_rates(params, cfg), cfg.beta1, cfg.beta2, cfg.adam_eps)
    frame_rng = stream(cfg.seed, 'frames')
    per_step = min(cfg.frames_per_step, scene.num_frames)
    eval_every = max(1, cfg.iterations // 4)
    batch_all = full_batch(scene)

    initial = objective(params, batch_all)
    loss_trace = [initial]
    eval_trace = [(0, initial)]
    for it in range(1, cfg.iterations + 1):
        frames = sorted(int(f) for f in frame_rng.choice(scene.num_frames, size=per_step, replace=False))
        batch = FrameBatch(targets=[scene.frames[f] for f in frames], frames=frames, cam=scene.cam)
        loss, grads = grad_objective(params, batch)
        optimizer.step(grads, expon_lr(it - 1, cfg.iterations, cfg.lr_final_ratio))
        loss_trace.append(loss)
        if it % eval_every == 0 or it == cfg.iterations:
            eval_trace.append((it, objective(params, batch_all)))
        if it % cfg.log_every == 0:
            logger.info('fit progress', **log_extra(iteration=it, loss=loss, latent_dim=cfg.latent_dim))

    final_loss = eval_trace[-1][1]
    psnr = evaluate(params, scene)
    wall_time = time.monotonic() - started
    logger.info(
        'fit finished',
        **log_extra(
            latent_dim=cfg.latent_dim,
            iterations=cfg.iterations,
            final_loss=final_loss,
            mean_psnr=float(np.mean(psnr)),
            wall_time=round(wall_time, 3),
        ),
    )
    return FitReport(
        loss_trace=loss_trace,
        eval_trace=eval_trace,
        psnr=psnr,
        final_loss=final_loss,
        wall_time=wall_time,
        model=params,
        config=cfg,
        anchor_index=anchor_index,
    )


def psnr(image: Image, target: Image) -> float:
    if image.shape != target.shape:
        raise DimensionMismatch(f'image {image.shape} vs target {target.shape}')
    mse = float(np.mean((image - target) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * float(np.log10(1.0 / mse)))


def _with_latents(model: ParamSet, latents: Optional[Mat]) -> ParamSet:
    if latents is None or model.latent_dim == 0:
        return model
    model = model.copy()
    model.arrays[LATENTS] = np.asarray(latents, dtype=np.float64).reshape(model[LATENTS].shape)
    return model


def evaluate(model: ParamSet, scene: SceneSequence, latents: Optional[Mat] = None) -> List[float]:
    model = _with_latents(model, latents)
    if model.latent_dim > 0 and model.num_frames != scene.num_frames:
        raise DimensionMismatch(f'model has {model.num_frames} latents, scene has {scene.num_frames} frames')
    out = []
    for t, target in enumerate(scene.frames):
        if target.shape != (scene.cam.height, scene.cam.width, 3):
            raise DimensionMismatch('frame does not match the scene camera')
        out.append(psnr(render_params(model, t, scene.cam), target))
    return out


def render_frame(model: ParamSet, cam: Camera, frame: int) -> Image:
    if model.latent_dim > 0 and not 0 <= frame < model.num_frames:
        raise DimensionMismatch(f'frame {frame} outside the {model.num_frames} fitted latents')
    return render_params(model, frame, cam)


def colormap(values: Mat) -> Mat:
    values = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.stack([np.interp(values, COLORMAP_STOPS, COLORMAP_COLORS[:, c]) for c in range(3)], axis=-1)


def uncertainty_colors(model: ParamSet) -> Mat:
    return colormap(expit(uncertainty(model)))


def uncertainty_map(model: ParamSet, cam: Camera, frame: int, latents: Optional[Mat] = None) -> Image:
    """
    Same geometry as a normal render, every primitive colored by colormap(sigmoid(σ)).
    """
    model = _with_latents(model, latents)
    if model.latent_dim > 0 and not 0 <= frame < model.num_frames:
        raise DimensionMismatch(f'frame {frame} outside the {model.num_frames} fitted latents')
    return render_params(model, frame, cam, color=uncertainty_colors(model))


def region_uncertainty(report: FitReport, scene: SceneSequence) -> Tuple[float, float]:
    """Mean σ over primitives anchored in the deforming region and over the rest."""
    sigma = uncertainty(report.model)
    deforming = scene.deforming[report.anchor_index]
    if not deforming.any() or deforming.all():
        raise DimensionMismatch('scene has no split between deforming and static primitives')
    return float(np.mean(sigma[deforming])), float(np.mean(sigma[~deforming]))


def median_final_losses(reports: Sequence[FitReport], at: Optional[int] = None) -> float:
    """Median over reports of the final loss, or of the evaluated loss at iteration ``at``."""
    return float(np.median([r.final_loss if at is None else r.loss_at(at) for r in reports]))

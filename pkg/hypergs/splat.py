"""
Deterministic CPU splatting.

Gaussians are projected with the local affine (EWA) approximation Σ₂D = J W Σ Wᵀ Jᵀ + 0.3 I, sorted
once per image by camera depth (ties broken by index) and blended front to back:

    C = Σᵢ cᵢ α'ᵢ Πⱼ<ᵢ (1 - α'ⱼ),  α'ᵢ = min(opacityᵢ G₂D(pixel), 0.99)

A pixel stops blending once its transmittance falls below 1e-4; background is black. Pixel (row r,
column c) is sampled at image-plane coordinates (x=c, y=r).
"""
import logging
from dataclasses import dataclass
from typing import Dict, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt

from .const import ALPHA_MAX, COV2D_LOWPASS, CULL_SIGMA, RASTER_CHUNK_ELEMENTS, TRANSMITTANCE_EPS
from .dto import CameraConfig
from .errors import DimensionMismatch, NotPositiveDefinite
from .hypergauss import Gaussian3D
from .linalg import Mat

logger = logging.getLogger(__name__)

Image = npt.NDArray[np.float64]


@dataclass(frozen=True)
class Camera:
    view: Mat
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float

    def __post_init__(self) -> None:
        view = np.asarray(self.view, dtype=np.float64)
        object.__setattr__(self, 'view', view)
        if view.shape != (4, 4):
            raise DimensionMismatch(f'view must be 4x4, got {view.shape}')
        if self.fx <= 0 or self.fy <= 0 or self.near <= 0 or self.width < 1 or self.height < 1:
            raise DimensionMismatch('camera needs positive focal lengths, near plane and image size')
        rot = view[:3, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9) or not np.isclose(np.linalg.det(rot), 1.0, atol=1e-9):
            raise DimensionMismatch('view rotation must be a proper rotation')

    @property
    def rotation(self) -> Mat:
        return self.view[:3, :3]

    @property
    def translation(self) -> Mat:
        return self.view[:3, 3]

    @property
    def num_pixels(self) -> int:
        return self.width * self.height

    def pixel_grid(self) -> Tuple[Mat, Mat]:
        rows, cols = np.divmod(np.arange(self.num_pixels), self.width)
        return cols.astype(np.float64), rows.astype(np.float64)

    def black(self) -> Image:
        return np.zeros((self.height, self.width, 3))


def camera_from_config(cfg: CameraConfig) -> Camera:
    view = np.eye(4)
    view[2, 3] = cfg.distance
    return Camera(
        view=view,
        fx=cfg.fx if cfg.fx is not None else float(cfg.width),
        fy=cfg.fy if cfg.fy is not None else float(cfg.width),
        cx=cfg.cx if cfg.cx is not None else cfg.width / 2.0,
        cy=cfg.cy if cfg.cy is not None else cfg.height / 2.0,
        width=cfg.width,
        height=cfg.height,
        near=cfg.near,
    )


class Projected(NamedTuple):
    mu2: Mat
    cov2: Mat
    depth: float


class ProjectionState(NamedTuple):
    t: Mat
    jw: Mat
    mu2: Mat
    cov2: Mat
    depth: Mat
    visible: npt.NDArray[np.bool_]


class RasterState(NamedTuple):
    order: npt.NDArray[np.int64]
    mu2: Mat
    conic: Mat
    opacity: Mat
    chunk: int
    accumulated: Mat
    final_trans: Mat
    raw: Mat


class Footprint(NamedTuple):
    dx: Mat
    dy: Mat
    density: Mat
    alpha: Mat
    clamped: npt.NDArray[np.bool_]
    trans: Mat
    mask: npt.NDArray[np.bool_]
    weights: Mat
    trans_out: Mat


def project_batched(mu: Mat, cov: Mat, cam: Camera) -> ProjectionState:
    t = mu @ cam.rotation.T + cam.translation
    tz = t[:, 2]
    in_front = tz >= cam.near
    z = np.where(in_front, tz, 1.0)
    jac = np.zeros((mu.shape[0], 2, 3))
    jac[:, 0, 0] = cam.fx / z
    jac[:, 0, 2] = -cam.fx * t[:, 0] / z**2
    jac[:, 1, 1] = cam.fy / z
    jac[:, 1, 2] = -cam.fy * t[:, 1] / z**2
    jw = jac @ cam.rotation
    cov2 = jw @ cov @ np.swapaxes(jw, -1, -2) + COV2D_LOWPASS * np.eye(2)
    mu2 = np.stack([cam.fx * t[:, 0] / z + cam.cx, cam.fy * t[:, 1] / z + cam.cy], axis=-1)

    mid = 0.5 * (cov2[:, 0, 0] + cov2[:, 1, 1])
    det = cov2[:, 0, 0] * cov2[:, 1, 1] - cov2[:, 0, 1] ** 2
    radius = CULL_SIGMA * np.sqrt(mid + np.sqrt(np.maximum(mid**2 - det, 0.0)))
    on_screen = (
        (mu2[:, 0] + radius >= 0.0)
        & (mu2[:, 0] - radius <= cam.width - 1)
        & (mu2[:, 1] + radius >= 0.0)
        & (mu2[:, 1] - radius <= cam.height - 1)
    )
    return ProjectionState(t=t, jw=jw, mu2=mu2, cov2=cov2, depth=tz, visible=in_front & on_screen)


def project(g: Gaussian3D, cam: Camera) -> Optional[Projected]:
    """
    Image-plane mean, regularized 2D covariance and depth of one Gaussian; None when culled.
    """
    state = project_batched(np.asarray(g.mu, dtype=np.float64)[None], np.asarray(g.cov, dtype=np.float64)[None], cam)
    if not state.visible[0]:
        return None
    return Projected(mu2=state.mu2[0], cov2=state.cov2[0], depth=float(state.depth[0]))


def project_backward(state: ProjectionState, cov: Mat, cam: Camera, g_mu2: Mat, g_cov2: Mat) -> Tuple[Mat, Mat]:
    t, jw = state.t, state.jw
    z = np.where(state.visible, t[:, 2], 1.0)
    g_cov = np.swapaxes(jw, -1, -2) @ g_cov2 @ jw
    g_jw = (g_cov2 + np.swapaxes(g_cov2, -1, -2)) @ jw @ cov
    g_jac = g_jw @ cam.rotation.T

    fx, fy = cam.fx, cam.fy
    g_t = np.zeros_like(t)
    g_t[:, 0] = g_mu2[:, 0] * fx / z - g_jac[:, 0, 2] * fx / z**2
    g_t[:, 1] = g_mu2[:, 1] * fy / z - g_jac[:, 1, 2] * fy / z**2
    g_t[:, 2] = (
        -g_mu2[:, 0] * fx * t[:, 0] / z**2
        - g_mu2[:, 1] * fy * t[:, 1] / z**2
        - g_jac[:, 0, 0] * fx / z**2
        - g_jac[:, 1, 1] * fy / z**2
        + g_jac[:, 0, 2] * 2.0 * fx * t[:, 0] / z**3
        + g_jac[:, 1, 2] * 2.0 * fy * t[:, 1] / z**3
    )
    visible = state.visible[:, None]
    return np.where(visible, g_t @ cam.rotation, 0.0), np.where(visible[..., None], g_cov, 0.0)


def _conic(cov2: Mat) -> Mat:
    det = cov2[..., 0, 0] * cov2[..., 1, 1] - cov2[..., 0, 1] * cov2[..., 1, 0]
    if np.any(det <= 0.0) or np.any(cov2[..., 0, 0] <= 0.0):
        raise NotPositiveDefinite('2D covariance is not positive definite')
    conic = np.empty_like(cov2)
    conic[..., 0, 0] = cov2[..., 1, 1] / det
    conic[..., 1, 1] = cov2[..., 0, 0] / det
    conic[..., 0, 1] = -cov2[..., 0, 1] / det
    conic[..., 1, 0] = -cov2[..., 1, 0] / det
    return conic


def density_2d(mu2: Mat, cov2: Mat, pixel: Mat) -> float:
    conic = _conic(np.asarray(cov2, dtype=np.float64))
    d = np.asarray(pixel, dtype=np.float64) - np.asarray(mu2, dtype=np.float64)
    return float(np.exp(-0.5 * d @ conic @ d))


def chunk_size(num_pixels: int) -> int:
    return max(1, RASTER_CHUNK_ELEMENTS // num_pixels)


def _blend_chunk(mu2: Mat, conic: Mat, opacity: Mat, px: Mat, py: Mat, trans_in: Mat) -> Footprint:
    dx = px[None, :] - mu2[:, 0, None]
    dy = py[None, :] - mu2[:, 1, None]
    power = -0.5 * (conic[:, 0, 0, None] * dx**2 + 2.0 * conic[:, 0, 1, None] * dx * dy + conic[:, 1, 1, None] * dy**2)
    density = np.exp(power)
    alpha = opacity[:, None] * density
    clamped = alpha > ALPHA_MAX
    alpha = np.where(clamped, ALPHA_MAX, alpha)

    one_minus = 1.0 - alpha
    trans = np.empty_like(alpha)
    trans[0] = trans_in
    trans[1:] = trans_in * np.cumprod(one_minus, axis=0)[:-1]
    # transmittance only decreases, so the mask is a prefix per pixel
    mask = trans >= TRANSMITTANCE_EPS
    weights = np.where(mask, alpha * trans, 0.0)
    trans_out = trans_in * np.prod(np.where(mask, one_minus, 1.0), axis=0)
    return Footprint(
        dx=dx,
        dy=dy,
        density=density,
        alpha=alpha,
        clamped=clamped,
        trans=trans,
        mask=mask,
        weights=weights,
        trans_out=trans_out,
    )


def rasterize_with_state(
    mu: Mat, cov: Mat, opacity: Mat, color: Mat, cam: Camera, chunk: Optional[int] = None
) -> Tuple[Image, RasterState, ProjectionState]:
    """
    Sorted primitives are blended in chunks so memory stays at chunk x pixels; the state keeps only
    per-primitive and per-pixel arrays and the backward pass recomputes each chunk.
    """
    proj = project_batched(mu, cov, cam)
    candidates = np.flatnonzero(proj.visible)
    order = candidates[np.argsort(proj.depth[candidates], kind='stable')]
    chunk = chunk or chunk_size(cam.num_pixels)

    px, py = cam.pixel_grid()
    mu2, conic = proj.mu2[order], _conic(proj.cov2[order])
    sorted_opacity, sorted_color = opacity[order], color[order]
    raw = np.zeros((cam.num_pixels, 3))
    accumulated = np.zeros(cam.num_pixels)
    trans = np.ones(cam.num_pixels)
    for lo in range(0, order.size, chunk):
        part = slice(lo, lo + chunk)
        fp = _blend_chunk(mu2[part], conic[part], sorted_opacity[part], px, py, trans)
        raw += fp.weights.T @ sorted_color[part]
        accumulated += np.sum(fp.weights, axis=0)
        trans = fp.trans_out

    image = np.clip(raw, 0.0, 1.0).reshape(cam.height, cam.width, 3)
    state = RasterState(
        order=order,
        mu2=mu2,
        conic=conic,
        opacity=sorted_opacity,
        chunk=chunk,
        accumulated=accumulated,
        final_trans=trans,
        raw=raw,
    )
    return image, state, proj


def rasterize(gaussians: Sequence[Gaussian3D], cam: Camera) -> Image:
    if not gaussians:
        return cam.black()
    mu = np.stack([np.asarray(g.mu, dtype=np.float64) for g in gaussians])
    cov = np.stack([np.asarray(g.cov, dtype=np.float64) for g in gaussians])
    opacity = np.array([g.opacity for g in gaussians], dtype=np.float64)
    color = np.stack([np.asarray(g.color, dtype=np.float64) for g in gaussians])
    image, _, _ = rasterize_with_state(mu, cov, opacity, color, cam)
    return image


def rasterize_backward(
    state: RasterState, proj: ProjectionState, cov: Mat, opacity: Mat, color: Mat, cam: Camera, g_image: Image
) -> Dict[str, Mat]:
    """
    Pulls an image cotangent back to (mu, cov, opacity, color) of every input Gaussian. Culled
    Gaussians receive zeros, so do the clamped (α' = ALPHA_MAX) terms for opacity and footprint.
    """
    order = state.order
    g_raw = g_image.reshape(-1, 3) * ((state.raw >= 0.0) & (state.raw <= 1.0))
    sorted_color = color[order]
    # everything blended into a pixel; the part behind term i is this minus the prefix up to i
    total = np.sum(state.raw * g_raw, axis=1)

    g_color_sorted = np.zeros_like(sorted_color)
    g_opacity_sorted = np.zeros(order.size)
    g_mu2_sorted = np.zeros((order.size, 2))
    g_cov2_sorted = np.zeros((order.size, 2, 2))

    px, py = cam.pixel_grid()
    trans = np.ones(cam.num_pixels)
    prefix = np.zeros(cam.num_pixels)
    for lo in range(0, order.size, state.chunk):
        part = slice(lo, lo + state.chunk)
        conic = state.conic[part]
        fp = _blend_chunk(state.mu2[part], conic, state.opacity[part], px, py, trans)
        trans = fp.trans_out

        c_dot_g = sorted_color[part] @ g_raw.T
        inclusive = prefix + np.cumsum(fp.weights * c_dot_g, axis=0)
        prefix = inclusive[-1]
        g_alpha = np.where(fp.mask, fp.trans * c_dot_g, 0.0) - (total - inclusive) / (1.0 - fp.alpha)
        g_alpha[fp.clamped] = 0.0

        g_color_sorted[part] = fp.weights @ g_raw
        g_opacity_sorted[part] = np.sum(g_alpha * fp.density, axis=1)
        g_power = g_alpha * state.opacity[part, None] * fp.density

        dx, dy = fp.dx, fp.dy
        g_conic = np.empty_like(conic)
        g_conic[:, 0, 0] = -0.5 * np.sum(g_power * dx * dx, axis=1)
        g_conic[:, 0, 1] = -0.5 * np.sum(g_power * dx * dy, axis=1)
        g_conic[:, 1, 0] = g_conic[:, 0, 1]
        g_conic[:, 1, 1] = -0.5 * np.sum(g_power * dy * dy, axis=1)
        g_cov2_sorted[part] = -conic @ g_conic @ conic
        g_mu2_sorted[part, 0] = np.sum(g_power * (conic[:, 0, 0, None] * dx + conic[:, 0, 1, None] * dy), axis=1)
        g_mu2_sorted[part, 1] = np.sum(g_power * (conic[:, 0, 1, None] * dx + conic[:, 1, 1, None] * dy), axis=1)

    g_color = np.zeros_like(color)
    g_opacity = np.zeros_like(opacity)
    g_mu2 = np.zeros_like(proj.mu2)
    g_cov2 = np.zeros_like(proj.cov2)
    g_color[order] = g_color_sorted
    g_opacity[order] = g_opacity_sorted
    g_mu2[order] = g_mu2_sorted
    g_cov2[order] = g_cov2_sorted
    g_mu, g_cov = project_backward(proj, cov, cam, g_mu2, g_cov2)
    return {'mu': g_mu, 'cov': g_cov, 'opacity': g_opacity, 'color': g_color}

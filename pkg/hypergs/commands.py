"""
Subcommand bodies: each takes its validated run config, writes its artifacts under
``output_dir`` and returns what it computed.
"""
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .bench import emit_csv, run_bench, summarize
from .const import SCHEMA_VERSION
from .dto import (
    BaseDTO,
    BenchRunConfig,
    FitRunConfig,
    GradcheckOp,
    GradcheckRunConfig,
    RenderRunConfig,
    SceneDoc,
    SceneRunConfig,
    UncertaintyRunConfig,
)
from .dynafit import (
    FitReport,
    SceneSequence,
    fit,
    make_scene,
    render_frame,
    scene_from_doc,
    scene_to_doc,
    uncertainty_map,
)
from .gradients import (
    GradReport,
    ParamSet,
    check_gradients,
    params_from_primitives,
    primitives_from_params,
    random_problem,
    uncertainty,
)
from .hypergauss import dump_primitives, load_primitives
from .logger import log_extra
from .serialization import read_bytes, read_json, write_bytes, write_csv, write_json, write_ppm
from .splat import Camera, camera_from_config

logger = logging.getLogger(__name__)

VERSION = '0.1.0'

CHECKPOINT_NAME = 'checkpoint.json'
SCENE_NAME = 'scene.json'
LOSS_NAME = 'loss.csv'
PSNR_NAME = 'psnr.csv'
SUMMARY_NAME = 'fit_summary.json'
BENCH_SUMMARY_NAME = 'bench_summary.json'


def provenance(cfg: BaseDTO) -> Dict[str, Any]:
    return {'package': 'hypergs', 'version': VERSION, 'schema_version': SCHEMA_VERSION, 'config': cfg.dict()}


def load_scene(path: str) -> SceneSequence:
    return scene_from_doc(SceneDoc.parse_obj(read_json(path)))


def save_scene(scene: SceneSequence, path: Path) -> Path:
    return write_json(path, scene_to_doc(scene))


def save_checkpoint(model: ParamSet, path: Path, meta: Optional[Dict[str, Any]] = None) -> Path:
    latents = model['latents'] if model.latent_dim > 0 else None
    return write_bytes(path, dump_primitives(primitives_from_params(model), model.latent_dim, latents, meta))


def load_checkpoint(path: str) -> ParamSet:
    prims, latent_dim, latents = load_primitives(read_bytes(path))
    params = params_from_primitives(prims, latents if latent_dim > 0 else None)
    logger.info(
        'checkpoint loaded',
        **log_extra(path=path, primitives=params.num_primitives, latent_dim=latent_dim, frames=params.num_frames),
    )
    return params


def cmd_scene(cfg: SceneRunConfig) -> Path:
    scene = make_scene(
        cfg.preset, cfg.seed, cfg.num_frames, cfg.camera, num_primitives=cfg.num_primitives, amplitude=cfg.amplitude
    )
    out = Path(cfg.output_dir)
    path = save_scene(scene, out / cfg.scene_name)
    write_ppm(out / 'frame_0000.ppm', scene.frames[0])
    return path


def cmd_fit(cfg: FitRunConfig) -> FitReport:
    if cfg.scene:
        scene = load_scene(cfg.scene)
    else:
        sc = cfg.scene_config
        scene = make_scene(
            sc.preset, cfg.seed, sc.num_frames, sc.camera, num_primitives=sc.num_primitives, amplitude=sc.amplitude
        )
    report = fit(scene, cfg)

    out = Path(cfg.output_dir)
    meta = provenance(cfg)
    save_scene(scene, out / SCENE_NAME)
    save_checkpoint(report.model, out / CHECKPOINT_NAME, meta)
    losses = [{'iteration': i, 'loss': v} for i, v in enumerate(report.loss_trace)]
    write_csv(out / LOSS_NAME, ('iteration', 'loss'), losses)
    write_csv(out / PSNR_NAME, ('frame', 'psnr'), [{'frame': t, 'psnr': v} for t, v in enumerate(report.psnr)])
    write_json(
        out / SUMMARY_NAME,
        {
            'schema_version': SCHEMA_VERSION,
            'latent_dim': cfg.latent_dim,
            'iterations': cfg.iterations,
            'final_loss': report.final_loss,
            'mean_psnr': float(np.mean(report.psnr)),
            'psnr': report.psnr,
            'eval_trace': [{'iteration': i, 'loss': v} for i, v in report.eval_trace],
            'provenance': meta,
        },
    )
    return report


def _render_inputs(cfg: RenderRunConfig) -> Tuple[ParamSet, Camera]:
    model = load_checkpoint(cfg.checkpoint)
    cam = load_scene(cfg.scene).cam if cfg.scene else camera_from_config(cfg.camera)
    return model, cam


def cmd_render(cfg: RenderRunConfig) -> Path:
    model, cam = _render_inputs(cfg)
    image = render_frame(model, cam, cfg.frame)
    return write_ppm(Path(cfg.output_dir) / cfg.image_name, image)


def cmd_uncertainty(cfg: UncertaintyRunConfig) -> Path:
    model, cam = _render_inputs(cfg)
    image = uncertainty_map(model, cam, cfg.frame)
    sigma = uncertainty(model)
    logger.info(
        'uncertainty rendered',
        **log_extra(frame=cfg.frame, sigma_min=float(sigma.min()), sigma_max=float(sigma.max())),
    )
    return write_ppm(Path(cfg.output_dir) / cfg.image_name, image)


def cmd_gradcheck(cfg: GradcheckRunConfig) -> List[GradReport]:
    reports = []
    for op in cfg.ops:
        for k in range(cfg.seeds):
            seed = cfg.seed + k
            point, batch = random_problem(
                seed,
                num_primitives=cfg.num_primitives,
                image_size=cfg.image_size,
                latent_dim=cfg.latent_dim if op == GradcheckOp.PIPELINE else max(cfg.latent_dim, 1),
                num_frames=cfg.num_frames,
            )
            reports.append(check_gradients(op, point, cfg.eps, batch=batch, max_coords=cfg.max_coords, seed=seed))
    write_csv(
        Path(cfg.output_dir) / cfg.csv_name,
        ('op', 'seed', 'max_rel_error', 'argmax', 'num_coords', 'eps'),
        [
            {
                'op': r.op,
                'seed': r.seed,
                'max_rel_error': r.max_rel_error,
                'argmax': r.argmax,
                'num_coords': r.num_coords,
                'eps': r.eps,
            }
            for r in reports
        ],
    )
    return reports


def cmd_bench(cfg: BenchRunConfig) -> Path:
    records = run_bench(cfg, seed=cfg.seed)
    out = Path(cfg.output_dir)
    path = out / cfg.csv_name
    emit_csv(records, path)
    write_json(
        out / BENCH_SUMMARY_NAME,
        {
            'schema_version': SCHEMA_VERSION,
            'ratios': {str(n): ratios for n, ratios in summarize(records).items()},
            'provenance': provenance(cfg),
        },
    )
    return path

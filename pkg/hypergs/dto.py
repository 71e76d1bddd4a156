from typing import Any, Dict, List, Optional

from pydantic import BaseModel as BM
from pydantic import Field

from .const import BENCH_GAUSSIAN_COUNT, BENCH_LATENT_DIMS, BENCH_RUNS, DEFAULT_LATENT_DIM, SCHEMA_VERSION, StrEnum


class BaseDTO(BM):
    pass


class StrictBaseDTO(BaseDTO):
    class Config:
        extra = 'forbid'


class ScenePreset(StrEnum):
    SWIRL = 'swirl'
    BLINK = 'blink'
    GLINT = 'glint'


class BenchMethod(StrEnum):
    NAIVE = 'naive'
    FAST = 'fast'
    NAIVE_PARALLEL = 'naive_parallel'
    FAST_PARALLEL = 'fast_parallel'


class GradcheckOp(StrEnum):
    QUADRATIC = 'quadratic'
    CONDITION_MEAN = 'condition_mean'
    SIGMA = 'sigma'
    PIPELINE = 'pipeline'


class CameraConfig(StrictBaseDTO):
    width: int = Field(64, ge=1, description='image width in pixels')
    height: int = Field(64, ge=1, description='image height in pixels')
    fx: Optional[float] = Field(None, gt=0, description='focal length in pixels, defaults to width')
    fy: Optional[float] = Field(None, gt=0, description='focal length in pixels, defaults to width')
    cx: Optional[float] = Field(None, description='principal point, defaults to width / 2')
    cy: Optional[float] = Field(None, description='principal point, defaults to height / 2')
    near: float = Field(0.1, gt=0, description='near plane depth')
    distance: float = Field(4.0, gt=0, description='distance from the camera to the world origin along +z')


class SceneConfig(StrictBaseDTO):
    preset: ScenePreset = Field(ScenePreset.BLINK, description='swirl | blink | glint')
    num_frames: int = Field(60, ge=1, description='number of ground-truth frames')
    num_primitives: int = Field(64, ge=1, description='ground-truth Gaussian count')
    amplitude: float = Field(1.0, ge=0, description='strength of the preset deformation, 0 gives a static scene')
    camera: CameraConfig = Field(default_factory=CameraConfig, description='camera of every frame')


class FitConfig(StrictBaseDTO):
    latent_dim: int = Field(DEFAULT_LATENT_DIM, ge=0, description='latent dimension n, 0 fits the static baseline')
    iterations: int = Field(2000, ge=0, description='optimizer steps')
    lr: float = Field(1e-4, gt=0, description='learning rate of the HyperGaussian parameters')
    lr_latent: float = Field(1e-2, gt=0, description='learning rate of the per-frame latent codes')
    lr_base: float = Field(1e-2, gt=0, description='learning rate of base position/rotation/scale/opacity/color')
    beta1: float = Field(0.9, ge=0, lt=1, description='first moment decay')
    beta2: float = Field(0.999, ge=0, lt=1, description='second moment decay')
    adam_eps: float = Field(1e-8, gt=0, description='moment denominator epsilon')
    lr_final_ratio: float = Field(
        0.1, gt=0, le=1, description='every learning rate decays exponentially to this fraction by the last iteration'
    )
    lr_latent_scaling: bool = Field(
        True, description='divide the HyperGaussian and latent learning rates by sqrt(latent_dim)'
    )
    num_primitives: int = Field(64, ge=1, description='primitive count G')
    frames_per_step: int = Field(1, ge=1, description='frames per gradient step')
    coupling_init_std: float = Field(1e-2, ge=0, description='std of the L21 initialization noise')
    latent_init_std: float = Field(1e-1, ge=0, description='std of the latent code initialization noise')
    init_scale: float = Field(0.15, gt=0, description='initial world-space scale of every primitive')
    log_every: int = Field(100, ge=1, description='log the loss every k iterations')
    seed: int = Field(0, description='seed of every random stream')


class BenchConfig(StrictBaseDTO):
    gaussian_count: int = Field(BENCH_GAUSSIAN_COUNT, ge=1, description='number of HyperGaussians G')
    attr_dim: int = Field(3, ge=1, description='attribute dimension m')
    latent_dims: List[int] = Field(list(BENCH_LATENT_DIMS), description='latent dimensions n to sweep')
    runs: int = Field(BENCH_RUNS, ge=1, description='measured passes per cell')
    warmup: int = Field(10, ge=0, description='unmeasured passes per cell')
    methods: List[BenchMethod] = Field([BenchMethod.NAIVE, BenchMethod.FAST], description='methods to measure')
    parallel: bool = Field(False, description='also measure the thread-parallel chunked path')
    workers: int = Field(4, ge=1, description='threads of the parallel path')
    chunk_size: int = Field(1024, ge=1, description='primitives per batched chunk')
    time_budget_s: float = Field(60.0, gt=0, description='wall time cap per cell, fewer runs are recorded when hit')


class GradcheckConfig(StrictBaseDTO):
    ops: List[GradcheckOp] = Field(list(GradcheckOp), description='operations to check')
    seeds: int = Field(20, ge=1, description='random instances per operation')
    eps: float = Field(1e-5, ge=1e-8, le=1e-3, description='central difference step')
    num_primitives: int = Field(4, ge=1, description='primitives of the pipeline model')
    image_size: int = Field(8, ge=1, description='square image side of the pipeline model')
    latent_dim: int = Field(2, ge=0, description='latent dimension of the pipeline model')
    num_frames: int = Field(2, ge=1, description='frames of the pipeline model')
    max_coords: int = Field(500, ge=1, description='coordinates checked, a seeded subsample above this')


class RunConfig(StrictBaseDTO):
    seed: int = Field(0, description='seed of every random stream')
    output_dir: str = Field('out', description='artifact directory')
    schema_version: int = Field(SCHEMA_VERSION, description='config schema version')


class BenchRunConfig(RunConfig, BenchConfig):
    csv_name: str = Field('bench.csv', description='CSV file name inside output_dir')


class FitRunConfig(FitConfig, RunConfig):
    scene: Optional[str] = Field(None, description='scene JSON path, generated from scene_config when absent')
    scene_config: SceneConfig = Field(default_factory=SceneConfig, description='scene to generate')


class RenderRunConfig(RunConfig):
    checkpoint: str = Field(..., description='checkpoint JSON path')
    scene: Optional[str] = Field(None, description='scene JSON path providing camera and frame count')
    camera: CameraConfig = Field(default_factory=CameraConfig, description='camera when no scene is given')
    frame: int = Field(0, ge=0, description='frame index whose latent is used')
    image_name: str = Field('render.ppm', description='PPM file name inside output_dir')


class UncertaintyRunConfig(RenderRunConfig):
    image_name: str = Field('uncertainty.ppm', description='PPM file name inside output_dir')


class GradcheckRunConfig(GradcheckConfig, RunConfig):
    csv_name: str = Field('gradcheck.csv', description='CSV file name inside output_dir')


class SceneRunConfig(SceneConfig, RunConfig):
    scene_name: str = Field('scene.json', description='scene JSON file name inside output_dir')


class PartitionDoc(StrictBaseDTO):
    m: int = Field(..., ge=1)
    n: int = Field(..., ge=0)


class BlockDoc(StrictBaseDTO):
    partition: PartitionDoc
    mu_a: List[float]
    mu_b: List[float]
    raw_L11: List[float]
    L21: List[List[float]]


class PrimitiveDoc(StrictBaseDTO):
    base_mu: List[float]
    base_rot: List[float]
    base_scale: List[float]
    opacity_raw: float
    color: List[float]
    block_pos: BlockDoc
    block_rot: BlockDoc
    block_scale: BlockDoc


class CheckpointDoc(StrictBaseDTO):
    schema_version: int = SCHEMA_VERSION
    latent_dim: int = Field(..., ge=0)
    primitives: List[PrimitiveDoc]
    latents: List[List[float]] = []
    provenance: Dict[str, Any] = {}


class RestGaussianDoc(StrictBaseDTO):
    mu: List[float]
    rot: List[float]
    scale: List[float]
    opacity: float
    color: List[float]


class SceneDoc(StrictBaseDTO):
    schema_version: int = SCHEMA_VERSION
    preset: ScenePreset
    seed: int
    num_frames: int
    amplitude: float
    camera: CameraConfig
    truth: List[RestGaussianDoc]
    anchors: List[List[float]]
    deforming: List[bool]

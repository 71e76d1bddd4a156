from enum import Enum
from typing import Any

SCHEMA_VERSION = 1

# rasterizer
COV2D_LOWPASS = 0.3
TRANSMITTANCE_EPS = 1e-4
ALPHA_MAX = 0.99
# primitives x pixels evaluated at once while blending
RASTER_CHUNK_ELEMENTS = 1 << 20
CULL_SIGMA = 3.0

# metrics
PSNR_CAP = 99.0

# conditioning benchmark defaults
BENCH_GAUSSIAN_COUNT = 14876
BENCH_LATENT_DIMS = (1, 2, 4, 8, 16, 32, 64, 128)
BENCH_RUNS = 1000

DEFAULT_LATENT_DIM = 8

# attribute dimensions of the three blocks of a primitive
POS_DIM = 3
ROT_DIM = 4
SCALE_DIM = 3


class StrEnum(str, Enum):
    def __str__(self) -> Any:
        return self.value


class BlockName(StrEnum):
    POS = 'block_pos'
    ROT = 'block_rot'
    SCALE = 'block_scale'


BLOCK_DIMS = {BlockName.POS: POS_DIM, BlockName.ROT: ROT_DIM, BlockName.SCALE: SCALE_DIM}


class ErrorCode(StrEnum):
    NOT_POSITIVE_DEFINITE = 'not_positive_definite'
    DIMENSION_MISMATCH = 'dimension_mismatch'
    ZERO_QUATERNION = 'zero_quaternion'
    DEGENERATE_ROTATION = 'degenerate_rotation'
    LENGTH_MISMATCH = 'length_mismatch'
    NON_FINITE_LOSS = 'non_finite_loss'
    UNKNOWN_PRESET = 'unknown_preset'
    CONFIG_ERROR = 'config_error'
    ARTIFACT_ERROR = 'artifact_error'
    UNKNOWN = 'unknown'

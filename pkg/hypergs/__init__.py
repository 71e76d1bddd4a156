from .conditioning import condition_batch, condition_fast, condition_naive, condition_primitive
from .const import StrEnum
from .dto import StrictBaseDTO
from .dynafit import evaluate, fit, make_scene, render_frame, uncertainty_map
from .errors import HyperGsError
from .gradients import check_gradients, grad_objective
from .hypergauss import HyperGaussianBlock, HyperPrimitive, Partition, apply_offsets, dump_primitives, load_primitives
from .linalg import cholesky, solve_lower, solve_upper_transposed
from .splat import Camera, project, rasterize

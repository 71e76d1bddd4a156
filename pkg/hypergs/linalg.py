"""
Small dense kernels: Cholesky factors, triangular solves, quaternion rotations, log-determinants.

A "lower triangular" matrix is a dense square ndarray with zeros above the diagonal. Parameters keep
the lower triangle packed row by row (``pack_lower`` / ``unpack_lower``). Everything runs in float64.
The ``*_batched`` variants take a leading primitive axis and loop over the (tiny) matrix dimension
only, numpy has no batched triangular solve.
"""
import logging
from typing import Union

import numpy as np
import numpy.typing as npt
import scipy.linalg

from .errors import DimensionMismatch, NotPositiveDefinite, ZeroQuaternion

logger = logging.getLogger(__name__)

Mat = npt.NDArray[np.float64]
LowerTri = npt.NDArray[np.float64]
ArrayLike = Union[Mat, npt.ArrayLike]

SYMMETRY_RTOL = 1e-12


def tri_size(dim: int) -> int:
    return dim * (dim + 1) // 2


def packed_diag_index(dim: int) -> npt.NDArray[np.int64]:
    rows = np.arange(dim)
    return rows * (rows + 1) // 2 + rows


def pack_lower(lower: Mat) -> Mat:
    lower = np.asarray(lower, dtype=np.float64)
    dim = lower.shape[-1]
    rows, cols = np.tril_indices(dim)
    return lower[..., rows, cols]


def unpack_lower(packed: ArrayLike, dim: int) -> LowerTri:
    packed = np.asarray(packed, dtype=np.float64)
    if packed.shape[-1] != tri_size(dim):
        raise DimensionMismatch(f'packed length {packed.shape[-1]} does not fit dim {dim}')
    rows, cols = np.tril_indices(dim)
    out = np.zeros(packed.shape[:-1] + (dim, dim))
    out[..., rows, cols] = packed
    return out


def cholesky(a: ArrayLike) -> LowerTri:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f'cholesky needs a square matrix, got {a.shape}')
    if a.shape[0] == 0:
        return np.zeros((0, 0))
    scale = max(1.0, float(np.max(np.abs(a))))
    if float(np.max(np.abs(a - a.T))) > SYMMETRY_RTOL * scale:
        raise NotPositiveDefinite('matrix is not symmetric')
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f'non-positive pivot: {exc}') from exc


def cholesky_batched(a: Mat) -> LowerTri:
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f'non-positive pivot in batch: {exc}') from exc


def _check_solve(lower: LowerTri, b: Mat) -> None:
    if lower.ndim != 2 or lower.shape[0] != lower.shape[1]:
        raise DimensionMismatch(f'triangular factor must be square, got {lower.shape}')
    if b.shape[0] != lower.shape[0]:
        raise DimensionMismatch(f'factor dim {lower.shape[0]} != rhs rows {b.shape[0]}')


def solve_lower(lower: ArrayLike, b: ArrayLike) -> Mat:
    """
    X with L X = B
    """
    lower = np.asarray(lower, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_solve(lower, b)
    if lower.shape[0] == 0:
        return b.copy()
    return scipy.linalg.solve_triangular(lower, b, lower=True, check_finite=False)


def solve_upper_transposed(lower: ArrayLike, b: ArrayLike) -> Mat:
    """
    X with Lᵀ X = B, L given lower triangular
    """
    lower = np.asarray(lower, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_solve(lower, b)
    if lower.shape[0] == 0:
        return b.copy()
    return scipy.linalg.solve_triangular(lower, b, trans='T', lower=True, check_finite=False)


def solve_lower_batched(lower: LowerTri, b: Mat) -> Mat:
    # lower (G, m, m), b (G, m) or (G, m, k)
    vec = b.ndim == lower.ndim - 1
    x = np.array(b[..., None] if vec else b, dtype=np.float64)
    dim = lower.shape[-1]
    for i in range(dim):
        if i:
            x[:, i] -= np.einsum('gj,gjk->gk', lower[:, i, :i], x[:, :i])
        x[:, i] /= lower[:, i, i, None]
    return x[..., 0] if vec else x


def solve_upper_transposed_batched(lower: LowerTri, b: Mat) -> Mat:
    vec = b.ndim == lower.ndim - 1
    x = np.array(b[..., None] if vec else b, dtype=np.float64)
    dim = lower.shape[-1]
    for i in reversed(range(dim)):
        if i < dim - 1:
            # row i of Lᵀ is column i of L
            x[:, i] -= np.einsum('gj,gjk->gk', lower[:, i + 1 :, i], x[:, i + 1 :])
        x[:, i] /= lower[:, i, i, None]
    return x[..., 0] if vec else x


def logdet_from_tri(lower: ArrayLike) -> float:
    diag = np.diagonal(np.asarray(lower, dtype=np.float64))
    return float(2.0 * np.sum(np.log(diag)))


def _normalized(q: Mat) -> Mat:
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if not np.all(np.isfinite(norm)) or np.any(norm <= 0.0):
        raise ZeroQuaternion('quaternion has zero norm')
    return q / norm


def _rotmat(q: Mat) -> Mat:
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    out[..., 0, 1] = 2.0 * (x * y - w * z)
    out[..., 0, 2] = 2.0 * (x * z + w * y)
    out[..., 1, 0] = 2.0 * (x * y + w * z)
    out[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    out[..., 1, 2] = 2.0 * (y * z - w * x)
    out[..., 2, 0] = 2.0 * (x * z - w * y)
    out[..., 2, 1] = 2.0 * (y * z + w * x)
    out[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return out


def quat_to_rotmat(q: ArrayLike) -> Mat:
    """
    Rotation matrix of a (w, x, y, z) quaternion; the input is normalized first.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise DimensionMismatch(f'quaternion must have 4 entries, got {q.shape}')
    return _rotmat(_normalized(q))


def quat_to_rotmat_batched(q: Mat) -> Mat:
    # q (G, 4) already unit length
    return _rotmat(q)


def rotmat_quat_jacobian(q: Mat) -> Mat:
    """
    dR/dq of the polynomial map in ``_rotmat``, shape (..., 4, 3, 3).
    """
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    zero = np.zeros_like(w)

    def mat(*rows: Mat) -> Mat:
        return np.stack(rows, axis=-1).reshape(q.shape[:-1] + (3, 3))

    d_w = mat(zero, -2 * z, 2 * y, 2 * z, zero, -2 * x, -2 * y, 2 * x, zero)
    d_x = mat(zero, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x)
    d_y = mat(-4 * y, 2 * x, 2 * w, 2 * x, zero, 2 * z, -2 * w, 2 * z, -4 * y)
    d_z = mat(-4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, zero)
    return np.stack([d_w, d_x, d_y, d_z], axis=-3)

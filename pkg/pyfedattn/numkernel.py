"""Deterministic dense kernels.

    A `Mat` is a two dimensional real64 `numpy.ndarray`. Masks are boolean
    arrays of the same shape where `True` marks a masked (minus infinity)
    entry, so stored values stay finite.

    Reductions over a row run sequentially over the columns and the inner
    dimension of `matmul` is accumulated in ascending order. A row of any
    result therefore depends only on the matching input rows and is bit
    identical no matter how many other rows are computed alongside it.
"""
import math

from typing import Optional, Sequence

import numpy as np

from pyfedattn.errors import ShapeError, DegenerateRowError

Mat = np.ndarray
"""Two dimensional real64 array, row-major."""

DEFAULT_EPS = 1e-5


def as_mat(x, name: str = 'x') -> Mat:
    """Returns *x* as a real64 `Mat`, raising `ShapeError` for other ranks."""
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(
            f'{name} must be two dimensional, got rank {m.ndim}',
            details={name: list(m.shape)}
        )
    return m


def as_vector(x, length: int, name: str = 'v') -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != length:
        raise ShapeError(
            f'{name} must be a vector of length {length}',
            details={name: list(v.shape)}
        )
    return v


def zeros(rows: int, cols: int) -> Mat:
    return np.zeros((rows, cols), dtype=np.float64)


def matmul(a: Mat, b: Mat) -> Mat:
    """ Matrix product with a fixed accumulation order.

        Raises:
            ShapeError: When `a.cols != b.rows`.
    """
    a = as_mat(a, 'a')
    b = as_mat(b, 'b')

    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f'matmul inner dimensions differ: {a.shape[1]} != {b.shape[0]}',
            details={'a': list(a.shape), 'b': list(b.shape)}
        )

    out = zeros(a.shape[0], b.shape[1])
    for k in range(a.shape[1]):
        out += a[:, k, None] * b[None, k, :]

    return out


def row_sum(x: Mat) -> np.ndarray:
    """Per row sum, accumulated left to right."""
    x = as_mat(x)

    s = np.zeros(x.shape[0], dtype=np.float64)
    for j in range(x.shape[1]):
        s += x[:, j]

    return s


def softmax_rows(logits: Mat, mask: Optional[Mat] = None) -> Mat:
    """ Row-wise softmax with optional boolean mask.

        Masked entries get weight exactly zero. The row maximum is taken over
        the unmasked entries only.

        Raises:
            ShapeError:         When the mask shape differs from the logits.
            DegenerateRowError: When a row has every entry masked.
    """
    logits = as_mat(logits, 'logits')

    if mask is None:
        mask = np.zeros(logits.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != logits.shape:
            raise ShapeError(
                'mask shape differs from logits',
                details={'logits': list(logits.shape), 'mask': list(mask.shape)}
            )

    if logits.shape[0] == 0:
        return zeros(0, logits.shape[1])

    open_per_row = np.logical_not(mask).any(axis=1)
    if not open_per_row.all():
        rows = np.flatnonzero(~open_per_row)
        raise DegenerateRowError(
            f'softmax row {int(rows[0])} has every entry masked',
            details={'rows': rows.tolist(), 'shape': list(logits.shape)}
        )

    row_max = np.where(mask, -np.inf, logits).max(axis=1)
    shifted = np.where(mask, 0.0, logits - row_max[:, None])
    weights = np.where(mask, 0.0, np.exp(shifted))

    return weights / row_sum(weights)[:, None]


def layernorm(x: Mat, gamma: Sequence[float], beta: Sequence[float], eps: float = DEFAULT_EPS) -> Mat:
    """Per row standardisation followed by the affine map `gamma * z + beta`."""
    x = as_mat(x)
    d = x.shape[1]

    gamma = as_vector(gamma, d, 'gamma')
    beta = as_vector(beta, d, 'beta')

    if not eps > 0:
        raise ShapeError('layernorm eps must be positive', details={'eps': eps})

    if x.shape[0] == 0:
        return zeros(0, d)

    mean = row_sum(x) / d
    centered = x - mean[:, None]
    var = row_sum(centered * centered) / d

    return centered / np.sqrt(var + eps)[:, None] * gamma[None, :] + beta[None, :]


def frob_norm(a: Mat) -> float:
    a = np.asarray(a, dtype=np.float64)
    return math.sqrt(float(np.sum(a * a)))


def frob_dist(a: Mat, b: Mat) -> float:
    """ Frobenius distance between two equally shaped matrices.

        Raises:
            ShapeError: When the shapes differ.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)

    if a.shape != b.shape:
        raise ShapeError(
            'frob_dist shapes differ',
            details={'a': list(a.shape), 'b': list(b.shape)}
        )

    return frob_norm(a - b)

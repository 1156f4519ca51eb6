"""Separable linear operators on (nz, ny, nx) grids: block-average pooling and trilinear upsampling."""

from typing import Tuple

import numpy as np

from .errors import ConfigError


def pooling_matrix(n_out: int, n_in: int) -> np.ndarray:
    """
    Averaging matrix (n_out, n_in) mapping n_in samples onto n_out contiguous bins.

    Sample i falls in bin floor(i * n_out / n_in), so bins differ in size by at most one.
    """
    if n_out < 1 or n_in < n_out:
        raise ConfigError(f"Cannot pool {n_in} samples into {n_out} bins.")
    bins = (np.arange(n_in) * n_out) // n_in
    matrix = np.zeros((n_out, n_in))
    matrix[bins, np.arange(n_in)] = 1.0
    return matrix / matrix.sum(axis=1, keepdims=True)


def interpolation_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Linear interpolation matrix (n_out, n_in) with aligned corners."""
    if n_in < 1 or n_out < 1:
        raise ConfigError(f"Cannot interpolate {n_in} samples onto {n_out} points.")
    matrix = np.zeros((n_out, n_in))
    if n_in == 1:
        matrix[:, 0] = 1.0
        return matrix
    positions = np.linspace(0.0, n_in - 1, n_out) if n_out > 1 else np.zeros(1)
    low = np.minimum(np.floor(positions).astype(int), n_in - 2)
    frac = positions - low
    rows = np.arange(n_out)
    matrix[rows, low] = 1.0 - frac
    matrix[rows, low + 1] += frac
    return matrix


def separable_apply(grid: np.ndarray, mz: np.ndarray, my: np.ndarray, mx: np.ndarray) -> np.ndarray:
    """Apply one matrix per axis to a (..., nz, ny, nx) array."""
    out = np.einsum("zk,...kji->...zji", mz, grid)
    out = np.einsum("yj,...zji->...zyi", my, out)
    return np.einsum("xi,...zyi->...zyx", mx, out)


def separable_transpose(grid: np.ndarray, mz: np.ndarray, my: np.ndarray, mx: np.ndarray) -> np.ndarray:
    """Adjoint of separable_apply, used to back-propagate through it."""
    return separable_apply(grid, mz.T, my.T, mx.T)


def axis_matrices(kind: str, out_shape: Tuple[int, int, int], in_shape: Tuple[int, int, int]):
    """Per-axis matrices (z, y, x) for shapes given in (nz, ny, nx) order."""
    build = pooling_matrix if kind == "pool" else interpolation_matrix
    return tuple(build(o, i) for o, i in zip(out_shape, in_shape))

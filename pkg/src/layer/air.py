"""Adaptive intensity re-weighting: a learned voxel-wise multiplier applied before classification."""

from typing import Dict, Optional, Tuple

import numpy as np
from scipy.special import expit

from .errors import ShapeError
from .resample import axis_matrices, separable_apply, separable_transpose


class AirWeightGenerator:
    """
    Coarse learnable weight grid per modality, trilinearly upsampled to the input and
    squashed by a sigmoid, so every multiplier lies in (0, 1).

    :param shape: Input array shape (nz, ny, nx).
    :param channels: Number of modalities.
    :param grid: Coarse grid shape (gz, gy, gx).
    :param theta: Coarse weights of shape (channels, gz, gy, gx); zeros if omitted.
    """

    def __init__(self, shape: Tuple[int, int, int], channels: int, grid: Tuple[int, int, int] = (4, 4, 4),
                 theta: Optional[np.ndarray] = None) -> None:
        self.shape = tuple(int(s) for s in shape)
        self.channels = int(channels)
        self.grid = tuple(int(g) for g in grid)
        self._upsample = axis_matrices("interp", self.shape, self.grid)
        if theta is None:
            theta = np.zeros((self.channels,) + self.grid)
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.channels,) + self.grid:
            raise ShapeError(f"Coarse weights must have shape {(self.channels,) + self.grid}, got {theta.shape}.")
        self.theta = theta

    @property
    def params(self) -> Dict[str, np.ndarray]:
        return {"air_theta": self.theta}

    def with_params(self, params: Dict[str, np.ndarray]) -> "AirWeightGenerator":
        return AirWeightGenerator(self.shape, self.channels, self.grid, params["air_theta"])

    def initialized(self, rng: np.random.Generator) -> "AirWeightGenerator":
        """Fresh generator with coarse weights uniform in +-sqrt(6 / (2 * grid size))."""
        size = int(np.prod(self.grid))
        limit = np.sqrt(6.0 / (2 * size))
        return AirWeightGenerator(self.shape, self.channels, self.grid,
                                  rng.uniform(-limit, limit, size=(self.channels,) + self.grid))

    def weights(self) -> np.ndarray:
        """Weight map W of shape (channels, nz, ny, nx), entries in (0, 1)."""
        return expit(separable_apply(self.theta, *self._upsample))

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Re-weight an input stack.

        :param x: Input of shape (channels, nz, ny, nx).
        :return: The re-weighted input and the weight map (kept for the backward pass).
        """
        if x.shape != (self.channels,) + self.shape:
            raise ShapeError(f"AIR input must have shape {(self.channels,) + self.shape}, got {x.shape}.")
        w = self.weights()
        return w * x, w

    def backward(self, x: np.ndarray, w: np.ndarray, grad_out: np.ndarray) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        """Gradients w.r.t. the input and the coarse weights, given the gradient of the re-weighted input."""
        grad_x = w * grad_out
        grad_up = grad_out * x * w * (1.0 - w)
        return grad_x, {"air_theta": separable_transpose(grad_up, *self._upsample)}


def air_forward(generator: AirWeightGenerator, x: np.ndarray) -> np.ndarray:
    """Return sigmoid(upsampled coarse weights) * x."""
    return generator.forward(x)[0]

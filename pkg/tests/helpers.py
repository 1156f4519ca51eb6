"""Small grids, masks and cohorts shared by the test modules."""

import os
import tempfile
from pathlib import Path
from typing import Sequence, Tuple

import numpy as np

from layer.phantom import generate_cohort, make_config
from layer.scorer import ScorerConfig, TrainableScorer
from layer.volume import LayerMaskSet, Modality, VolumeGrid

STUDIES = os.getenv("LAYER_RUN_STUDIES", "").lower() == "true"

# one depth slice per code: background, dermis, SFL, SFM, deep fat, DFM, muscle
SLICE_DIMS = (4, 4, 7)


def slice_masks(dims: Tuple[int, int, int] = SLICE_DIMS, codes: Sequence[int] = tuple(range(7))) -> LayerMaskSet:
    """Masks whose z slice k carries codes[k]; dims[2] must equal len(codes)."""
    nx, ny, nz = dims
    labels = np.broadcast_to(np.asarray(codes, dtype=np.uint8)[:, None, None], (nz, ny, nx))
    return LayerMaskSet(dims, labels)


def layered_volume(masks: LayerMaskSet, values: Sequence[float], modality: Modality = Modality.BMODE,
                   noise: float = 0.0, seed: int = 0) -> VolumeGrid:
    """Volume with value values[code] on every voxel of that code, plus optional Gaussian noise."""
    voxels = np.asarray(values, dtype=np.float64)[masks.labels]
    if noise:
        voxels = voxels + np.random.default_rng(seed).normal(0.0, noise, size=voxels.shape)
    if modality is Modality.SWE:
        voxels = np.maximum(voxels, 0.0)
    return VolumeGrid(masks.dims, voxels.astype(np.float32), modality)


def random_volume(dims: Tuple[int, int, int], seed: int = 0, modality: Modality = Modality.BMODE) -> VolumeGrid:
    rng = np.random.default_rng(seed)
    nx, ny, nz = dims
    voxels = rng.normal(0.0, 1.0, size=(nz, ny, nx))
    if modality is Modality.SWE:
        voxels = np.abs(voxels) + 1.0
    return VolumeGrid(dims, voxels.astype(np.float32), modality)


def small_scorer(dims: Tuple[int, int, int] = (8, 8, 8), seed: int = 0, **kwargs) -> TrainableScorer:
    config = dict(dims=dims, pool=(4, 4, 4), hidden=8, seed=seed)
    config.update(kwargs)
    return TrainableScorer(ScorerConfig(**config))


class CohortDirectory:
    """A phantom cohort generated into a temporary directory; call cleanup() when done."""

    def __init__(self, **overrides) -> None:
        settings = dict(dims=(8, 8, 16), patients=6, bmode_reps=2, swe_reps=1, delta=2.0, seed=3)
        settings.update(overrides)
        self._tmp = tempfile.TemporaryDirectory()
        self.root = Path(self._tmp.name)
        self.config = make_config(**settings)
        self.manifest = generate_cohort(self.config, self.root, threads=1)

    def cleanup(self) -> None:
        self._tmp.cleanup()

"""Synthetic layered cohorts with a planted, layer-specific class signal."""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError, model_validator

from .cohort import CohortManifest, PlantedLayer, ScanLabel, ScanRecord
from .errors import ConfigError, DomainError
from .formats import write_manifest, write_mask, write_volume
from .volume import TISSUE_LAYERS, Layer, LayerMaskSet, Modality, VolumeGrid

logger = logging.getLogger("layer")

SIDES = ("left", "right")
SITES = ("MF", "ES")

# Depth profile, top to bottom: background, dermis, SFL, SFM, deep fat, DFM, muscle.
DEFAULT_SLAB_FRACTIONS = (1 / 16, 1 / 16, 1 / 8, 1 / 16, 3 / 16, 1 / 8, 3 / 8)

# Relative B-mode echogenicity, scaled by layer_contrast.
ECHOGENICITY = (0.0, 1.0, 0.4, 0.9, 0.2, 1.0, 0.5)

# Baseline shear-wave speed per layer in m/s.
SHEAR_SPEED = (3.0, 4.0, 3.5, 5.0, 3.0, 6.0, 4.5)

TISSUE_DENSITY = 1000.0  # kg/m^3


class PhantomConfig(BaseModel):
    """Parameters of a synthetic cohort."""

    dims: Tuple[int, int, int] = (64, 64, 32)
    patients: int = Field(default=40, ge=1)
    visits: int = Field(default=2, ge=1, le=2)
    sides: int = Field(default=2, ge=1, le=2)
    sites: int = Field(default=2, ge=1, le=2)
    bmode_reps: int = Field(default=3, ge=1)
    swe_reps: int = Field(default=2, ge=0)
    planted_layer: int = int(Layer.DFM)
    delta: float = Field(default=2.0, ge=0.0)
    noise: float = Field(default=1.0, gt=0.0)
    jitter: float = Field(default=0.25, ge=0.0, le=1.0)
    layer_contrast: float = 0.0
    side_variability: float = Field(default=0.0, ge=0.0)
    slab_thicknesses: Optional[Tuple[int, int, int, int, int, int, int]] = None
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "PhantomConfig":
        if self.planted_layer not in TISSUE_LAYERS:
            raise ValueError(f"planted_layer must be one of {TISSUE_LAYERS}")
        if any(d <= 0 for d in self.dims):
            raise ValueError("dims must be positive")
        return self


def make_config(**kwargs) -> PhantomConfig:
    """Build a PhantomConfig, turning validation failures into ConfigError."""
    try:
        return PhantomConfig(**kwargs)
    except ValidationError as e:
        raise ConfigError(f"Invalid phantom configuration: {e}") from None


def slab_thicknesses(config: PhantomConfig) -> Tuple[int, ...]:
    """
    Thickness in voxels of the background slab and the six layers along depth.

    :raises ConfigError: If the slabs cannot fit the grid depth with at least one voxel each.
    """
    nz = config.dims[2]
    if config.slab_thicknesses is not None:
        thicknesses = tuple(int(t) for t in config.slab_thicknesses)
        if sum(thicknesses) != nz or min(thicknesses) < 1:
            raise ConfigError(f"Slab thicknesses {thicknesses} must be >= 1 and sum to nz={nz}.")
        return thicknesses
    thicknesses = [int(math.floor(f * nz)) for f in DEFAULT_SLAB_FRACTIONS]
    thicknesses[-1] += nz - sum(thicknesses)
    if min(thicknesses) < 1:
        raise ConfigError(f"nz={nz} is too shallow for seven depth slabs of at least one voxel.")
    return tuple(thicknesses)


def jittered_boundaries(thicknesses: Tuple[int, ...], jitter: float, rng: np.random.Generator) -> np.ndarray:
    """
    Slab start depths for one patient.

    Each internal boundary moves by a rounded Gaussian offset scaled by the thinner of the
    two slabs it separates; every slab keeps at least one voxel.
    """
    starts = np.concatenate([[0], np.cumsum(thicknesses)])
    nz = int(starts[-1])
    moved = starts.copy()
    for b in range(1, len(thicknesses)):
        scale = jitter * min(thicknesses[b - 1], thicknesses[b])
        moved[b] = starts[b] + int(np.rint(rng.normal(0.0, scale))) if scale > 0 else starts[b]
    # restore strict ordering with >= 1 voxel per slab
    for b in range(1, len(thicknesses)):
        low = moved[b - 1] + 1
        high = nz - (len(thicknesses) - b)
        moved[b] = min(max(moved[b], low), high)
    return moved


def layer_labels(dims: Tuple[int, int, int], starts: np.ndarray) -> np.ndarray:
    """Label array (nz, ny, nx) with depth-ordered slabs."""
    nx, ny, nz = dims
    depth_codes = np.zeros(nz, dtype=np.uint8)
    for code in range(len(starts) - 1):
        depth_codes[starts[code]:starts[code + 1]] = code
    return np.broadcast_to(depth_codes[:, None, None], (nz, ny, nx)).copy()


def shear_speed_to_modulus(c: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """
    Convert shear-wave speed to shear modulus, mu = rho * c^2 with rho = 1000 kg/m^3.

    :param c: Speed in m/s, scalar or array.
    :return: Modulus in Pa.
    :raises DomainError: If any speed is negative.
    """
    speed = np.asarray(c, dtype=np.float64)
    if np.any(speed < 0) or not np.all(np.isfinite(speed)):
        raise DomainError("Shear-wave speed must be finite and non-negative.")
    modulus = TISSUE_DENSITY * speed**2
    return float(modulus) if modulus.ndim == 0 else modulus


def _side_status(rng: np.random.Generator, mp_patient: bool, visits: int,
                 sides: int) -> Dict[Tuple[int, str], ScanLabel]:
    status = {}
    for visit in range(1, visits + 1):
        forced = int(rng.integers(sides))
        for s in range(sides):
            positive = mp_patient and (s == forced or rng.random() < 0.5)
            if positive:
                label = ScanLabel.TRIGGER_MP if rng.random() < 0.5 else ScanLabel.TENDER_MP
            else:
                label = ScanLabel.CONTROL
            status[(visit, SIDES[s])] = label
    return status


def _side_offsets(config: PhantomConfig, rng: np.random.Generator) -> Optional[np.ndarray]:
    """Per-layer mean offsets shared by every scan of one side; none without side variability."""
    if config.side_variability == 0.0:
        return None
    offsets = rng.normal(0.0, config.side_variability * config.noise, size=len(TISSUE_LAYERS) + 1)
    offsets[0] = 0.0
    return offsets


def _volume(config: PhantomConfig, labels: np.ndarray, modality: Modality, positive: bool,
            rng: np.random.Generator, offsets: Optional[np.ndarray] = None) -> VolumeGrid:
    if modality is Modality.BMODE:
        base = config.layer_contrast * np.asarray(ECHOGENICITY)
    else:
        base = np.asarray(SHEAR_SPEED)
    base = base.copy()
    if offsets is not None:
        base += offsets
    if positive:
        base[config.planted_layer] += config.delta * config.noise
    voxels = base[labels] + rng.normal(0.0, config.noise, size=labels.shape)
    if modality is Modality.SWE:
        voxels = np.maximum(voxels, 0.0)
    return VolumeGrid(config.dims, voxels.astype(np.float32), modality)


def _generate_patient(config: PhantomConfig, out_dir: Path, patient_id: str, mp_patient: bool,
                      seed_seq: np.random.SeedSequence) -> List[ScanRecord]:
    rng = np.random.default_rng(seed_seq)
    starts = jittered_boundaries(slab_thicknesses(config), config.jitter, rng)
    labels = layer_labels(config.dims, starts)
    masks = LayerMaskSet(config.dims, labels)
    status = _side_status(rng, mp_patient, config.visits, config.sides)
    records = []
    for visit in range(1, config.visits + 1):
        for side in SIDES[:config.sides]:
            label = status[(visit, side)]
            offsets = _side_offsets(config, rng)
            for site in SITES[:config.sites]:
                stem = f"{patient_id}_v{visit}_{side}_{site}"
                mask_file = f"masks/{stem}.lmsk"
                write_mask(out_dir / mask_file, masks)
                for modality, reps in ((Modality.BMODE, config.bmode_reps), (Modality.SWE, config.swe_reps)):
                    for rep in range(1, reps + 1):
                        volume = _volume(config, labels, modality, label.is_mp, rng, offsets)
                        volume_file = f"volumes/{stem}_{modality.slug}_r{rep}.lvol"
                        write_volume(out_dir / volume_file, volume)
                        records.append(ScanRecord(
                            patient_id=patient_id, visit=visit, side=side, site=site, repetition=rep,
                            modality=modality.slug, label=label, volume_file=volume_file, mask_file=mask_file))
    return records


def generate_cohort(config: PhantomConfig, out_dir: Union[str, Path], threads: int = 0) -> CohortManifest:
    """
    Generate a synthetic cohort and write its volumes, masks and manifest.

    Half of the patients (rounded up) are MP patients; each of their visits has at least
    one MP-positive side. On MP-positive sides the planted layer's mean is shifted by
    delta * noise in both modalities. Each patient draws from its own seed substream, so
    the output does not depend on the number of threads.

    :param config: Cohort parameters.
    :param out_dir: Directory receiving volumes/, masks/ and manifest.json.
    :param threads: Worker threads; 0 picks a default.
    :return: The written manifest.
    """
    slab_thicknesses(config)
    out_dir = Path(out_dir)
    (out_dir / "volumes").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    root = np.random.SeedSequence(config.seed)
    order_rng = np.random.default_rng(root.spawn(1)[0])
    mp_flags = np.zeros(config.patients, dtype=bool)
    mp_flags[order_rng.permutation(config.patients)[:(config.patients + 1) // 2]] = True
    streams = root.spawn(config.patients)
    patient_ids = [f"P{index + 1:03d}" for index in range(config.patients)]

    logger.info(f"Generating {config.patients} phantom patients into {out_dir} (seed {config.seed})")
    with ThreadPoolExecutor(max_workers=threads or None) as pool:
        per_patient = list(pool.map(
            lambda i: _generate_patient(config, out_dir, patient_ids[i], bool(mp_flags[i]), streams[i]),
            range(config.patients)))

    manifest = CohortManifest(
        scans=[record for records in per_patient for record in records],
        seed=config.seed,
        dims=config.dims,
        planted=PlantedLayer(layer=config.planted_layer, delta=config.delta, noise=config.noise,
                             layer_contrast=config.layer_contrast, side_variability=config.side_variability),
    )
    write_manifest(out_dir / "manifest.json", manifest)
    logger.info(f"Wrote {len(manifest.scans)} scans for {config.patients} patients")
    return manifest

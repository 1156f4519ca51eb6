"""Voxel grids, layer label masks and the occlusion operator."""

import enum
from dataclasses import dataclass, field
from typing import Dict, Iterable, Sequence, Tuple, Union

import numpy as np

from .errors import DomainError, ShapeError

Dims = Tuple[int, int, int]


class Modality(enum.IntEnum):
    """Imaging modality of a volume; the value is the on-disk code."""

    BMODE = 0
    SWE = 1

    @property
    def slug(self) -> str:
        return "bmode" if self is Modality.BMODE else "swe"

    @classmethod
    def from_slug(cls, slug: str) -> "Modality":
        for modality in cls:
            if modality.slug == slug.lower():
                return modality
        raise DomainError(f"Unknown modality '{slug}'.")


class Layer(enum.IntEnum):
    """Tissue layer codes, ordered from the skin surface downwards."""

    BACKGROUND = 0
    DERMIS = 1
    SFL = 2
    SFM = 3
    DEEP_FAT = 4
    DFM = 5
    MUSCLE = 6

    @property
    def label(self) -> str:
        return _LAYER_LABELS[self]

    @classmethod
    def from_name(cls, name: str) -> "Layer":
        key = name.strip().lower().replace("-", "_").replace(" ", "_")
        for layer in cls:
            if layer.name.lower() == key or layer.label.lower().replace(" ", "_") == key:
                return layer
        raise DomainError(f"Unknown layer '{name}'.")


_LAYER_LABELS = {
    Layer.BACKGROUND: "background",
    Layer.DERMIS: "dermis",
    Layer.SFL: "SFL",
    Layer.SFM: "SFM",
    Layer.DEEP_FAT: "deep fat",
    Layer.DFM: "DFM",
    Layer.MUSCLE: "muscle",
}

TISSUE_LAYERS: Tuple[int, ...] = tuple(int(layer) for layer in Layer if layer is not Layer.BACKGROUND)


def check_layer_code(code: int) -> int:
    """Return the code as int, raising DomainError unless it names one of the six tissue layers."""
    if int(code) != code or int(code) not in TISSUE_LAYERS:
        raise DomainError(f"Unknown layer code {code!r}; expected one of {TISSUE_LAYERS}.")
    return int(code)


def _check_dims(dims: Sequence[int]) -> Dims:
    if len(dims) != 3 or any(int(d) != d or int(d) <= 0 for d in dims):
        raise ShapeError(f"Grid dims must be three positive integers, got {tuple(dims)}.")
    return (int(dims[0]), int(dims[1]), int(dims[2]))


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class VolumeGrid:
    """
    A 3-D voxel field of one modality.

    Voxels are held as a (nz, ny, nx) array so that flattening in C order gives the
    x-fastest ordering used on disk. B-mode values are arbitrary intensities, SWE
    values are shear-wave speeds in m/s.

    :param dims: Voxel counts (nx, ny, nz).
    :param voxels: Array of nx*ny*nz real values, flat (x fastest) or shaped (nz, ny, nx).
        Stored as float32, the on-disk precision, so a grid reads back equal after writing.
    :param modality: The imaging modality.
    """

    dims: Dims
    voxels: np.ndarray
    modality: Modality = Modality.BMODE

    def __post_init__(self) -> None:
        dims = _check_dims(self.dims)
        nx, ny, nz = dims
        voxels = np.asarray(self.voxels)
        if voxels.size != nx * ny * nz:
            raise ShapeError(f"Expected {nx * ny * nz} voxels for dims {dims}, got {voxels.size}.")
        voxels = np.array(voxels.reshape(nz, ny, nx), dtype=np.float32)
        if not np.all(np.isfinite(voxels)):
            raise DomainError("Voxel values must be finite.")
        modality = Modality(self.modality)
        if modality is Modality.SWE and np.any(voxels < 0):
            raise DomainError("SWE shear-wave speeds must be non-negative.")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "modality", modality)
        object.__setattr__(self, "voxels", _frozen(voxels))

    @property
    def shape(self) -> Tuple[int, int, int]:
        """Array shape (nz, ny, nx)."""
        return self.voxels.shape

    def with_voxels(self, voxels: np.ndarray) -> "VolumeGrid":
        return VolumeGrid(self.dims, voxels, self.modality)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VolumeGrid):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.modality == other.modality
            and self.voxels.dtype == other.voxels.dtype
            and np.array_equal(self.voxels, other.voxels)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class LayerMaskSet:
    """
    Per-voxel layer labels shared by co-registered modalities.

    Code 0 is background and codes 1..6 are the tissue layers, so layers are
    disjoint by construction.
    """

    dims: Dims
    labels: np.ndarray
    _counts: Dict[int, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        dims = _check_dims(self.dims)
        nx, ny, nz = dims
        labels = np.asarray(self.labels)
        if labels.size != nx * ny * nz:
            raise ShapeError(f"Expected {nx * ny * nz} labels for dims {dims}, got {labels.size}.")
        if labels.size and (labels.min() < 0 or labels.max() > max(TISSUE_LAYERS)):
            raise DomainError("Mask labels must be layer codes in 0..6.")
        labels = np.array(labels.reshape(nz, ny, nx), dtype=np.uint8, copy=True)
        tally = np.bincount(labels.ravel(), minlength=len(Layer))
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "_counts", {code: int(tally[code]) for code in range(len(Layer))})

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.labels.shape

    def mask(self, layers: Union[int, Iterable[int]]) -> np.ndarray:
        """Boolean (nz, ny, nx) array selecting the given layer code(s)."""
        codes = [layers] if isinstance(layers, (int, np.integer)) else list(layers)
        if not codes:
            return np.zeros(self.shape, dtype=bool)
        return np.isin(self.labels, np.asarray(codes, dtype=np.uint8))

    def counts(self) -> Dict[int, int]:
        """Voxel tally for every code 0..6, background included."""
        return dict(self._counts)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LayerMaskSet):
            return NotImplemented
        return self.dims == other.dims and np.array_equal(self.labels, other.labels)

    __hash__ = None


Sample = Union[VolumeGrid, Sequence[VolumeGrid]]


def as_channels(sample: Sample) -> Tuple[VolumeGrid, ...]:
    """Normalize a single volume or a multimodal pair into a tuple of channels with equal dims."""
    channels = (sample,) if isinstance(sample, VolumeGrid) else tuple(sample)
    if not channels:
        raise ShapeError("A sample needs at least one volume.")
    dims = channels[0].dims
    for channel in channels[1:]:
        if channel.dims != dims:
            raise ShapeError(f"Co-registered volumes disagree on dims: {dims} vs {channel.dims}.")
    return channels


def _same_form(sample: Sample, channels: Sequence[VolumeGrid]) -> Sample:
    if isinstance(sample, VolumeGrid):
        return channels[0]
    return tuple(channels)


def layer_volume(masks: LayerMaskSet, layer: int) -> int:
    """
    Return the voxel count of a tissue layer.

    :param masks: The layer masks.
    :param layer: Layer code in 1..6.
    :return: Exact voxel tally of the layer.
    :raises DomainError: If the code is not a tissue layer.
    """
    return masks.counts()[check_layer_code(layer)]


def occlude(sample: Sample, masks: LayerMaskSet, layers: Iterable[int]) -> Sample:
    """
    Zero every voxel belonging to any selected layer, in every modality of the sample.

    :param sample: A volume or a multimodal tuple of co-registered volumes.
    :param masks: Layer masks with the same dims as the sample.
    :param layers: Layer codes in 1..6; an empty set returns the sample unchanged.
    :return: A sample of the same form as the input.
    """
    channels = as_channels(sample)
    if channels[0].dims != masks.dims:
        raise ShapeError(f"Volume dims {channels[0].dims} do not match mask dims {masks.dims}.")
    codes = sorted({check_layer_code(code) for code in layers})
    if not codes:
        return sample
    keep = ~masks.mask(codes)
    occluded = [channel.with_voxels(np.where(keep, channel.voxels, 0).astype(channel.voxels.dtype))
                for channel in channels]
    return _same_form(sample, occluded)


def layer_means(sample: Sample, masks: LayerMaskSet) -> np.ndarray:
    """Mean value of each tissue layer averaged over channels; an empty layer has mean 0."""
    channels = as_channels(sample)
    if channels[0].dims != masks.dims:
        raise ShapeError(f"Volume dims {channels[0].dims} do not match mask dims {masks.dims}.")
    flat_labels = masks.labels.ravel()
    counts = np.bincount(flat_labels, minlength=len(Layer)).astype(np.float64)
    means = np.zeros(len(TISSUE_LAYERS))
    for channel in channels:
        sums = np.bincount(flat_labels, weights=channel.voxels.ravel().astype(np.float64), minlength=len(Layer))
        with np.errstate(invalid="ignore", divide="ignore"):
            means += np.where(counts[1:] > 0, sums[1:] / np.maximum(counts[1:], 1), 0.0)
    return means / len(channels)

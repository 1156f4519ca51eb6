"""On-disk formats for volumes, masks and cohort manifests."""

import json
import struct
from pathlib import Path
from typing import Tuple, Union

import numpy as np
import pydantic

from .cohort import CohortManifest
from .errors import FormatError, ManifestError
from .volume import LayerMaskSet, Modality, VolumeGrid

PathLike = Union[str, Path]

VOLUME_MAGIC = b"LVOL"
MASK_MAGIC = b"LMSK"
FORMAT_VERSION = 1

# magic, version, nx, ny, nz, modality code
_HEADER = struct.Struct("<4sIIIIB")


def _pack_header(magic: bytes, dims: Tuple[int, int, int], code: int) -> bytes:
    return _HEADER.pack(magic, FORMAT_VERSION, dims[0], dims[1], dims[2], code)


def _unpack_header(data: bytes, magic: bytes) -> Tuple[Tuple[int, int, int], int]:
    if len(data) < _HEADER.size:
        raise FormatError(f"File is truncated inside the {_HEADER.size}-byte header", offset=len(data))
    found, version, nx, ny, nz, code = _HEADER.unpack_from(data)
    if found != magic:
        raise FormatError(f"Bad magic {found!r}, expected {magic!r}", offset=0)
    if version != FORMAT_VERSION:
        raise FormatError(f"Unsupported version {version}", offset=4)
    for offset, value in ((8, nx), (12, ny), (16, nz)):
        if value == 0:
            raise FormatError("Grid dims must be positive", offset=offset)
    return (nx, ny, nz), code


def _payload(data: bytes, count: int, itemsize: int) -> bytes:
    expected = _HEADER.size + count * itemsize
    if len(data) < expected:
        raise FormatError(f"File is truncated: expected {expected} bytes, found {len(data)}", offset=len(data))
    if len(data) > expected:
        raise FormatError(f"Trailing data after {expected} bytes", offset=expected)
    return data[_HEADER.size:]


def write_volume(path: PathLike, volume: VolumeGrid) -> None:
    """
    Write a volume as an LVOL file: header followed by little-endian float32 voxels, x fastest.

    :param path: Destination file.
    :param volume: The volume to write.
    """
    body = np.ascontiguousarray(volume.voxels, dtype="<f4").tobytes()
    with open(path, "wb") as fp:
        fp.write(_pack_header(VOLUME_MAGIC, volume.dims, int(volume.modality)))
        fp.write(body)


def read_volume(path: PathLike) -> VolumeGrid:
    """
    Read an LVOL file.

    :param path: Source file.
    :return: The volume, with float32 voxels.
    :raises FormatError: On bad magic, version, dims, modality code or truncation.
    """
    data = Path(path).read_bytes()
    dims, code = _unpack_header(data, VOLUME_MAGIC)
    try:
        modality = Modality(code)
    except ValueError:
        raise FormatError(f"Unknown modality code {code}", offset=20) from None
    count = dims[0] * dims[1] * dims[2]
    voxels = np.frombuffer(_payload(data, count, 4), dtype="<f4").astype(np.float32)
    return VolumeGrid(dims, voxels, modality)


def write_mask(path: PathLike, masks: LayerMaskSet) -> None:
    """Write layer labels as an LMSK file: the volume header (modality byte 0) then one u8 per voxel."""
    with open(path, "wb") as fp:
        fp.write(_pack_header(MASK_MAGIC, masks.dims, 0))
        fp.write(np.ascontiguousarray(masks.labels, dtype=np.uint8).tobytes())


def read_mask(path: PathLike) -> LayerMaskSet:
    """Read an LMSK file."""
    data = Path(path).read_bytes()
    dims, _ = _unpack_header(data, MASK_MAGIC)
    count = dims[0] * dims[1] * dims[2]
    labels = np.frombuffer(_payload(data, count, 1), dtype=np.uint8)
    if labels.size and labels.max() > 6:
        bad = int(np.argmax(labels > 6))
        raise FormatError(f"Invalid layer code {int(labels[bad])}", offset=_HEADER.size + bad)
    return LayerMaskSet(dims, labels)


def write_manifest(path: PathLike, manifest: CohortManifest) -> None:
    """Write the manifest as an indented JSON document."""
    Path(path).write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")


def read_manifest(path: PathLike, check_files: bool = True) -> CohortManifest:
    """
    Read and validate a manifest.

    :param path: The manifest JSON file.
    :param check_files: Also verify that every referenced file exists next to the manifest.
    :raises FormatError: If the document is not JSON.
    :raises ManifestError: If the document does not describe a valid cohort.
    """
    text = Path(path).read_text(encoding="utf-8")
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise FormatError(f"Manifest is not valid JSON: {e.msg}", offset=e.pos) from None
    try:
        manifest = CohortManifest.model_validate(document)
    except pydantic.ValidationError as e:
        raise ManifestError(f"Manifest failed validation: {e}") from None
    if check_files:
        manifest.check_files(Path(path).parent)
    return manifest

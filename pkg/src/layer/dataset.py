"""Training and analysis samples derived from a cohort manifest."""

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

from .cohort import CohortManifest, ScanLabel, ScanRecord, Scenario, scan_targets, side_labels
from .errors import DomainError
from .formats import read_mask, read_volume
from .volume import LayerMaskSet, VolumeGrid

MODALITY_SETS: Dict[str, Tuple[str, ...]] = {
    "bmode": ("bmode",),
    "swe": ("swe",),
    "both": ("bmode", "swe"),
}


def modality_set(name: str) -> Tuple[str, ...]:
    try:
        return MODALITY_SETS[name]
    except KeyError:
        raise DomainError(f"Unknown modality set '{name}'; expected one of {sorted(MODALITY_SETS)}.") from None


@dataclass(frozen=True)
class SampleRef:
    """One classifier input: a repetition at one site, with one scan per modality."""

    key: str
    scans: Tuple[ScanRecord, ...]
    target: int
    label: ScanLabel

    @property
    def first(self) -> ScanRecord:
        return self.scans[0]

    @property
    def patient_id(self) -> str:
        return self.first.patient_id

    @property
    def side_key(self) -> Tuple[str, int, str]:
        return self.first.side_key

    @property
    def site_key(self) -> Tuple[str, int, str, str]:
        return self.first.site_key


def sample_key(scan: ScanRecord) -> str:
    return f"{scan.patient_id}/v{scan.visit}/{scan.side}/{scan.site}/r{scan.repetition}"


def build_samples(manifest: CohortManifest, scenario: Scenario, modality: str = "bmode",
                  patients: Optional[Iterable[str]] = None) -> List[SampleRef]:
    """
    Samples sorted by key; multimodal samples pair B-mode and SWE scans of the same repetition.

    :param manifest: The cohort.
    :param scenario: Decides the binary target of each sample.
    :param modality: 'bmode', 'swe' or 'both'.
    :param patients: Keep only these patients.
    """
    modalities = modality_set(modality)
    keep = None if patients is None else set(patients)
    targets = dict(zip((s.scan_tuple for s in manifest.scans), scan_targets(manifest.scans, scenario)))
    sides = side_labels(manifest.scans)
    by_key: Dict[str, Dict[str, ScanRecord]] = {}
    for scan in manifest.scans:
        if scan.modality in modalities and (keep is None or scan.patient_id in keep):
            by_key.setdefault(sample_key(scan), {})[scan.modality] = scan
    samples = []
    for key in sorted(by_key):
        group = by_key[key]
        if not all(m in group for m in modalities):
            continue
        scans = tuple(group[m] for m in modalities)
        samples.append(SampleRef(key, scans, targets[scans[0].scan_tuple], sides[scans[0].side_key]))
    return samples


class SampleLoader:
    """Reads sample volumes and masks relative to a data directory; masks are cached."""

    def __init__(self, root: Path) -> None:
        self.root = Path(root)
        self._mask = lru_cache(maxsize=256)(self._read_mask)

    def _read_mask(self, name: str) -> LayerMaskSet:
        return read_mask(self.root / name)

    def volumes(self, ref: SampleRef) -> Tuple[VolumeGrid, ...]:
        return tuple(read_volume(self.root / scan.volume_file) for scan in ref.scans)

    def masks(self, ref: SampleRef) -> LayerMaskSet:
        return self._mask(ref.first.mask_file)

    def load(self, ref: SampleRef) -> Tuple[Tuple[VolumeGrid, ...], LayerMaskSet]:
        return self.volumes(ref), self.masks(ref)

"""Cohort manifest: scan records, clinical labels and scenario targets."""

import enum
from collections import Counter
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

from .errors import ManifestError


class ScanLabel(str, enum.Enum):
    """Scan-level clinical label of the side a scan was acquired on."""

    CONTROL = "control"
    TENDER_MP = "tenderMP"
    TRIGGER_MP = "triggerMP"

    @property
    def is_mp(self) -> bool:
        return self is not ScanLabel.CONTROL


class Scenario(str, enum.Enum):
    """Prediction scenarios: target and aggregation unit."""

    VISIT_MP = "visit-mp"
    SIDE_MP = "side-mp"
    SIDE_TRIGGER = "side-trigger"


class ScanRecord(BaseModel):
    """One acquired volume and the mask it is analysed with."""

    patient_id: str
    visit: int = Field(ge=1, le=2)
    side: str
    site: str
    repetition: int = Field(ge=1)
    modality: str
    label: ScanLabel
    volume_file: str
    mask_file: str

    @field_validator("side")
    @classmethod
    def _side(cls, value: str) -> str:
        if value not in ("left", "right"):
            raise ValueError(f"side must be 'left' or 'right', got '{value}'")
        return value

    @field_validator("site")
    @classmethod
    def _site(cls, value: str) -> str:
        if value not in ("MF", "ES"):
            raise ValueError(f"site must be 'MF' or 'ES', got '{value}'")
        return value

    @field_validator("modality")
    @classmethod
    def _modality(cls, value: str) -> str:
        if value not in ("bmode", "swe"):
            raise ValueError(f"modality must be 'bmode' or 'swe', got '{value}'")
        return value

    @property
    def scan_tuple(self) -> Tuple[str, int, str, str, int, str]:
        return (self.patient_id, self.visit, self.side, self.site, self.repetition, self.modality)

    @property
    def side_key(self) -> Tuple[str, int, str]:
        return (self.patient_id, self.visit, self.side)

    @property
    def site_key(self) -> Tuple[str, int, str, str]:
        return (self.patient_id, self.visit, self.side, self.site)


class PlantedLayer(BaseModel):
    """Ground truth of a synthetic cohort."""

    layer: int
    delta: float
    noise: float
    layer_contrast: float = 0.0
    side_variability: float = 0.0


class CohortManifest(BaseModel):
    """All scans of a cohort plus the metadata needed to reproduce it."""

    scans: List[ScanRecord]
    seed: int
    dims: Tuple[int, int, int]
    planted: Optional[PlantedLayer] = None

    @model_validator(mode="after")
    def _unique_scans(self) -> "CohortManifest":
        duplicates = [key for key, count in Counter(scan.scan_tuple for scan in self.scans).items() if count > 1]
        if duplicates:
            raise ValueError(f"duplicate scan tuples: {duplicates[:5]}")
        return self

    @property
    def patients(self) -> List[str]:
        return sorted({scan.patient_id for scan in self.scans})

    def scans_for(self, modality: str) -> List[ScanRecord]:
        return [scan for scan in self.scans if scan.modality == modality]

    def check_files(self, root: Path) -> None:
        """
        Raise ManifestError if any referenced volume or mask file is missing.

        :param root: Directory the file references are relative to.
        """
        missing = []
        for scan in self.scans:
            for name in (scan.volume_file, scan.mask_file):
                if not (Path(root) / name).is_file():
                    missing.append(name)
        if missing:
            raise ManifestError(f"{len(missing)} referenced files are missing, e.g. {sorted(set(missing))[:3]}")


def side_labels(scans: Iterable[ScanRecord]) -> Dict[Tuple[str, int, str], ScanLabel]:
    """
    Side-level label per (patient, visit, side).

    A side is MP-positive when it carries at least one tender or trigger point; trigger
    points take precedence over tender points.
    """
    labels: Dict[Tuple[str, int, str], ScanLabel] = {}
    for scan in scans:
        current = labels.get(scan.side_key, ScanLabel.CONTROL)
        labels[scan.side_key] = max(current, scan.label, key=_severity)
    return labels


def visit_labels(scans: Iterable[ScanRecord]) -> Dict[Tuple[str, int], bool]:
    """Visit-level MP status: positive when either side is MP-positive."""
    labels: Dict[Tuple[str, int], bool] = {}
    for (patient, visit, _), label in side_labels(scans).items():
        labels[(patient, visit)] = labels.get((patient, visit), False) or label.is_mp
    return labels


def patient_labels(scans: Iterable[ScanRecord]) -> Dict[str, bool]:
    """Patient-level MP status: positive when any visit is MP-positive."""
    labels: Dict[str, bool] = {}
    for (patient, _), positive in visit_labels(scans).items():
        labels[patient] = labels.get(patient, False) or positive
    return labels


def scenario_target(label: ScanLabel, scenario: Scenario) -> int:
    """Binary target of a side label under a scenario; tender points count as negative for trigger prediction."""
    scenario = Scenario(scenario)
    if scenario is Scenario.SIDE_TRIGGER:
        return int(label is ScanLabel.TRIGGER_MP)
    return int(label.is_mp)


def scan_targets(scans: List[ScanRecord], scenario: Scenario) -> List[int]:
    """Binary target of every scan under a scenario; visit-level scenarios use the visit label."""
    scenario = Scenario(scenario)
    if scenario is Scenario.VISIT_MP:
        visits = visit_labels(scans)
        return [int(visits[(scan.patient_id, scan.visit)]) for scan in scans]
    sides = side_labels(scans)
    return [scenario_target(sides[scan.side_key], scenario) for scan in scans]


def _severity(label: ScanLabel) -> int:
    return {ScanLabel.CONTROL: 0, ScanLabel.TENDER_MP: 1, ScanLabel.TRIGGER_MP: 2}[label]

"""Hierarchical averaging of scan probabilities and patient-level cross-validation folds."""

import enum
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Set, Tuple, Union

import numpy as np
from pydantic import BaseModel

from .cohort import CohortManifest, Scenario, patient_labels
from .dataset import build_samples
from .errors import ConfigError, DomainError, FormatError, StructuralError

logger = logging.getLogger("layer")


class Level(str, enum.Enum):
    SCAN = "scan"
    REPETITION = "repetition"
    SITE = "site"
    SIDE = "side"
    VISIT = "visit"
    PATIENT = "patient"


def aggregate(probabilities: Iterable[float]) -> float:
    """
    Arithmetic mean of child probabilities.

    :raises DomainError: If there are no children or a value is outside [0, 1].
    """
    values = np.asarray(list(probabilities), dtype=np.float64)
    if values.size == 0:
        raise DomainError("Cannot aggregate an empty set of predictions.")
    if np.any((values < 0.0) | (values > 1.0)) or not np.all(np.isfinite(values)):
        raise DomainError("Probabilities must lie in [0, 1].")
    return float(values.mean())


@dataclass
class AggregationNode:
    """A node of the prediction hierarchy; leaves are scan samples."""

    level: Level
    key: str
    children: List["AggregationNode"] = field(default_factory=list)
    target: Optional[int] = None
    expected_children: int = 0
    probability: Optional[float] = None

    @property
    def incomplete(self) -> bool:
        """True if this node or a descendant averages over fewer children than declared."""
        if self.level is Level.SCAN:
            return False
        return len(self.children) < self.expected_children or any(c.incomplete for c in self.children)

    def leaves(self) -> List["AggregationNode"]:
        if self.level is Level.SCAN:
            return [self]
        return [leaf for child in self.children for leaf in child.leaves()]

    def evaluate(self, probabilities: Mapping[str, float]) -> float:
        """
        Fill in P for this subtree from scan-level probabilities.

        :raises StructuralError: Listing every scan that has no probability.
        """
        missing = [leaf.key for leaf in self.leaves() if leaf.key not in probabilities]
        if missing:
            raise StructuralError(f"No prediction for {len(missing)} scans under {self.key}: {missing[:10]}")
        return self._evaluate(probabilities)

    def _evaluate(self, probabilities: Mapping[str, float]) -> float:
        if self.level is Level.SCAN:
            self.probability = aggregate([probabilities[self.key]])
        else:
            self.probability = aggregate(child._evaluate(probabilities) for child in self.children)
        return self.probability


def _group(nodes: Iterable[Tuple[tuple, AggregationNode]]) -> Dict[tuple, List[AggregationNode]]:
    groups: Dict[tuple, List[AggregationNode]] = {}
    for key, node in nodes:
        groups.setdefault(key, []).append(node)
    return groups


def build_hierarchy(manifest: CohortManifest, scenario: Scenario, modality: str = "bmode",
                    merge_visits: bool = False, patients: Optional[Iterable[str]] = None) -> List[AggregationNode]:
    """
    Build the aggregation trees of a scenario.

    Visit-level MP: visit <- repetition (scans of one repetition index across sides and
    sites) <- scans. Side-level scenarios: side <- site <- scans; with merge_visits the
    top level is (patient, side) over visits. With patients, only their scans are arranged.

    :raises StructuralError: If a declared site has no scan of the requested modality.
    """
    scenario = Scenario(scenario)
    keep = None if patients is None else set(patients)
    samples = build_samples(manifest, scenario, modality, keep)
    declared_sites = {scan.site_key for scan in manifest.scans if keep is None or scan.patient_id in keep}
    present_sites = {s.site_key for s in samples}
    gaps = sorted(declared_sites - present_sites)
    if gaps:
        raise StructuralError(f"{len(gaps)} declared sites have no {modality} scans, e.g. {gaps[:5]}")
    max_rep = max((s.first.repetition for s in samples), default=0)
    sites_per_side = {}
    for patient, visit, side, site in declared_sites:
        sites_per_side.setdefault((patient, visit, side), set()).add(site)

    leaves = [(s, AggregationNode(Level.SCAN, s.key, target=s.target)) for s in samples]
    if scenario is Scenario.VISIT_MP:
        repetitions = _group(((s.patient_id, s.first.visit, s.first.repetition), leaf) for s, leaf in leaves)
        visits: Dict[tuple, List[AggregationNode]] = {}
        for (patient, visit, rep), children in sorted(repetitions.items()):
            expected = sum(len(v) for k, v in sites_per_side.items() if k[:2] == (patient, visit))
            node = AggregationNode(Level.REPETITION, f"{patient}/v{visit}/r{rep}", children,
                                   children[0].target, expected)
            visits.setdefault((patient, visit), []).append(node)
        return [AggregationNode(Level.VISIT, f"{patient}/v{visit}", children, children[0].target, max_rep)
                for (patient, visit), children in sorted(visits.items())]

    sites = _group((s.site_key, leaf) for s, leaf in leaves)
    sides: Dict[tuple, List[AggregationNode]] = {}
    for (patient, visit, side, site), children in sorted(sites.items()):
        node = AggregationNode(Level.SITE, f"{patient}/v{visit}/{side}/{site}", children, children[0].target, max_rep)
        sides.setdefault((patient, visit, side), []).append(node)
    side_nodes = [
        AggregationNode(Level.SIDE, f"{patient}/v{visit}/{side}", children, children[0].target,
                        len(sites_per_side[(patient, visit, side)]))
        for (patient, visit, side), children in sorted(sides.items())
    ]
    if not merge_visits:
        return side_nodes
    merged = _group(((node.key.split("/")[0], node.key.split("/")[2]), node) for node in side_nodes)
    visits_per_patient = {}
    for patient, visit, _, _ in declared_sites:
        visits_per_patient.setdefault(patient, set()).add(visit)
    return [AggregationNode(Level.SIDE, f"{patient}/{side}", children, max(c.target for c in children),
                            len(visits_per_patient[patient]))
            for (patient, side), children in sorted(merged.items())]


def patient_nodes(nodes: List[AggregationNode], manifest: CohortManifest) -> List[AggregationNode]:
    """Roll visit or side nodes up to one node per patient, targeted by patient-level MP status."""
    status = patient_labels(manifest.scans)
    groups = _group((node.key.split("/")[0], node) for node in nodes)
    return [AggregationNode(Level.PATIENT, patient, children, int(status[patient]), len(children))
            for patient, children in sorted(groups.items())]


def flag_incomplete(nodes: Iterable[AggregationNode]) -> List[str]:
    flagged = [node.key for node in nodes if node.incomplete]
    if flagged:
        logger.warning(f"{len(flagged)} aggregation nodes average over incomplete acquisitions")
    return flagged


# folds


class FoldAssignment(BaseModel):
    """Patient-to-fold map; when holdout is set the last fold is the held-out test fold."""

    seed: int
    k: int
    folds: Dict[str, int]
    holdout: bool = True

    @property
    def test_fold(self) -> Optional[int]:
        return self.k - 1 if self.holdout else None

    @property
    def cv_folds(self) -> List[int]:
        return list(range(self.k - 1 if self.holdout else self.k))

    def patients_in(self, fold: int) -> Set[str]:
        return {patient for patient, f in self.folds.items() if f == fold}

    def split(self, validation_fold: int) -> Tuple[Set[str], Set[str]]:
        """(train patients, validation patients) for a cross-validation fold; the test fold is in neither."""
        if validation_fold not in self.cv_folds:
            raise DomainError(f"Fold {validation_fold} is not a cross-validation fold of {self.cv_folds}.")
        validation = self.patients_in(validation_fold)
        train = {p for p, f in self.folds.items() if f != validation_fold and f != self.test_fold}
        return train, validation

    def check_leakage(self) -> None:
        for fold in self.cv_folds:
            train, validation = self.split(fold)
            shared = train & validation
            if shared:
                raise StructuralError(f"Patients {sorted(shared)} appear in train and validation of fold {fold}.")


def make_folds(manifest: CohortManifest, k: int = 6, seed: int = 0, holdout: bool = True) -> FoldAssignment:
    """
    Seeded patient-level folds stratified by patient MP status.

    Within each stratum patients are shuffled and dealt round-robin; the dealing position
    carries over between strata so total fold sizes stay balanced too.

    :raises ConfigError: If k < 2 or there are fewer patients than folds.
    """
    if k < 2:
        raise ConfigError(f"Need at least two folds, got {k}.")
    status = patient_labels(manifest.scans)
    if len(status) < k:
        raise ConfigError(f"Cannot split {len(status)} patients into {k} folds.")
    rng = np.random.default_rng(seed)
    folds: Dict[str, int] = {}
    position = 0
    for positive in (False, True):
        stratum = sorted(p for p, mp in status.items() if mp == positive)
        for index in rng.permutation(len(stratum)):
            folds[stratum[index]] = position % k
            position += 1
    assignment = FoldAssignment(seed=seed, k=k, folds=dict(sorted(folds.items())), holdout=holdout)
    assignment.check_leakage()
    return assignment


def write_folds(path: Union[str, Path], assignment: FoldAssignment) -> None:
    Path(path).write_text(assignment.model_dump_json(indent=2) + "\n", encoding="utf-8")


def read_folds(path: Union[str, Path]) -> FoldAssignment:
    try:
        return FoldAssignment.model_validate(json.loads(Path(path).read_text(encoding="utf-8")))
    except (ValueError, TypeError) as e:
        raise FormatError(f"Invalid fold file {path}: {e}") from None

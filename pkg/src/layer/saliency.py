"""Layer-wise occlusion saliency: single layers, layer pairs, directional and volume-adjusted scores."""

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from opentelemetry import trace
from pydantic import BaseModel

from .cohort import CohortManifest, ScanLabel, Scenario, scenario_target
from .dataset import SampleLoader, build_samples
from .errors import DomainError
from .scorer import Scorer, score
from .stats import bootstrap_ci, pearson
from .volume import TISSUE_LAYERS, Layer, LayerMaskSet, Sample, check_layer_code, layer_volume, occlude

logger = logging.getLogger("layer")
tracer = trace.get_tracer(__name__)

DEFAULT_EPSILON = 1e-6
LAYER_PAIRS: Tuple[Tuple[int, int], ...] = tuple(itertools.combinations(TISSUE_LAYERS, 2))


def saliency_score(scorer: Scorer, sample: Sample, masks: LayerMaskSet, layer: int,
                   full_logit: Optional[float] = None) -> Tuple[float, float]:
    """
    Logit change from occluding one layer.

    :param full_logit: The un-occluded logit, if already known.
    :return: (delta, SS) with delta = logit(full) - logit(occluded) and SS = |delta|.
    """
    check_layer_code(layer)
    full = score(scorer, sample) if full_logit is None else full_logit
    delta = full - score(scorer, occlude(sample, masks, {layer}))
    return delta, abs(delta)


def multi_layer_saliency(scorer: Scorer, sample: Sample, masks: LayerMaskSet, pair: Tuple[int, int],
                         full_logit: Optional[float] = None) -> float:
    """SS of jointly occluding two distinct layers."""
    i, j = pair
    if i == j:
        raise DomainError(f"A layer pair needs two distinct layers, got ({i}, {j}).")
    full = score(scorer, sample) if full_logit is None else full_logit
    return abs(full - score(scorer, occlude(sample, masks, {i, j})))


def directional_summary(deltas: Sequence[float]) -> Tuple[float, float]:
    """
    (PDSS, NDSS): mean positive part and mean negated negative part of the per-scan deltas.

    :raises DomainError: If there are no deltas.
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.size == 0:
        raise DomainError("Directional scores need at least one scan.")
    return float(np.maximum(deltas, 0.0).mean()), float(-np.minimum(deltas, 0.0).mean())


@dataclass
class VolumeAdjusted:
    ss: float
    pdss: float
    ndss: float
    used: int
    excluded: int
    per_scan: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))


def volume_adjust(deltas: Sequence[float], volumes: Sequence[int]) -> VolumeAdjusted:
    """
    Per-scan delta / layer volume, averaged into adjusted SS, PDSS and NDSS.

    Scans whose layer is empty are left out and counted as excluded; with no scan left
    every adjusted score is nan.
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    volumes = np.asarray(volumes, dtype=np.float64)
    if deltas.shape != volumes.shape:
        raise DomainError("Each delta needs the volume of its layer.")
    keep = volumes > 0
    adjusted = deltas[keep] / volumes[keep]
    excluded = int((~keep).sum())
    if adjusted.size == 0:
        nan = float("nan")
        return VolumeAdjusted(nan, nan, nan, 0, excluded, adjusted)
    pdss, ndss = directional_summary(adjusted)
    return VolumeAdjusted(float(np.abs(adjusted).mean()), pdss, ndss, int(adjusted.size), excluded, adjusted)


def ois(ss_i: float, ss_j: float, ss_ij: float, epsilon: float = DEFAULT_EPSILON) -> float:
    """Occlusion interaction score; positive is synergy, negative redundancy."""
    if epsilon <= 0:
        raise DomainError(f"epsilon must be positive, got {epsilon}.")
    expected = ss_i + ss_j
    return (ss_ij - expected) / max(expected, epsilon)


def saliency_correlation(ss_i: Sequence[float], ss_j: Sequence[float]) -> Optional[float]:
    """
    Pearson correlation of two per-scan SS series; None when undefined (a constant series).

    :raises DomainError: With fewer than two scans.
    """
    if len(ss_i) < 2:
        raise DomainError("Correlation needs at least two scans.")
    return pearson(ss_i, ss_j)


# per-scan analysis


@dataclass
class ScanSaliency:
    """Every occlusion result of one sample."""

    key: str
    label: ScanLabel
    target: int
    side_key: Tuple[str, int, str]
    full_logit: float
    deltas: Dict[int, float]
    volumes: Dict[int, int]
    pair_ss: Dict[Tuple[int, int], float] = field(default_factory=dict)

    def ss(self, layer: int) -> float:
        return abs(self.deltas[layer])

    def ois(self, pair: Tuple[int, int], epsilon: float = DEFAULT_EPSILON) -> float:
        i, j = pair
        return ois(self.ss(i), self.ss(j), self.pair_ss[pair], epsilon)


def analyze_scan(scorer: Scorer, sample: Sample, masks: LayerMaskSet, key: str = "",
                 label: ScanLabel = ScanLabel.CONTROL, target: int = 0,
                 side_key: Tuple[str, int, str] = ("", 0, ""), pairs: bool = True) -> ScanSaliency:
    """Occlude each layer, and each layer pair when requested, against one full logit."""
    full = score(scorer, sample)
    deltas = {layer: saliency_score(scorer, sample, masks, layer, full)[0] for layer in TISSUE_LAYERS}
    volumes = {layer: layer_volume(masks, layer) for layer in TISSUE_LAYERS}
    pair_ss = {pair: multi_layer_saliency(scorer, sample, masks, pair, full) for pair in LAYER_PAIRS} if pairs else {}
    return ScanSaliency(key, label, target, side_key, full, deltas, volumes, pair_ss)


# reports


class LayerSummary(BaseModel):
    layer: int
    name: str
    n: int
    ss: float
    ss_ci: Tuple[float, float]
    mean_delta: float
    pdss: float
    pdss_ci: Tuple[float, float]
    ndss: float
    ndss_ci: Tuple[float, float]
    va_ss: Optional[float]
    va_ss_ci: Optional[Tuple[float, float]]
    va_pdss: Optional[float]
    va_pdss_ci: Optional[Tuple[float, float]]
    va_ndss: Optional[float]
    va_ndss_ci: Optional[Tuple[float, float]]
    va_n: int
    va_excluded: int


class SaliencyReport(BaseModel):
    scenario: str
    modality: str
    seed: int
    n_scans: int
    layers: List[LayerSummary]

    def ranking(self) -> List[int]:
        """Layer codes by descending mean SS, ties by ascending code."""
        return [s.layer for s in sorted(self.layers, key=lambda s: (-s.ss, s.layer))]

    def layer(self, code: int) -> LayerSummary:
        return next(s for s in self.layers if s.layer == code)


class InteractionReport(BaseModel):
    """6x6 tables indexed by layer code - 1; undefined entries are None."""

    epsilon: float
    correlation: List[List[Optional[float]]]
    ois: List[List[Optional[float]]]
    counts: List[List[int]]


@dataclass
class LayerAnalysis:
    saliency: SaliencyReport
    interaction: Optional[InteractionReport]
    scans: List[ScanSaliency]


def _ci(values: np.ndarray, n_boot: int, seed: int) -> Tuple[float, float]:
    return bootstrap_ci(values, n_boot=n_boot, seed=seed)


def _optional(value: float) -> Optional[float]:
    return None if np.isnan(value) else float(value)


def summarize_layers(scans: Sequence[ScanSaliency], scenario: str = "", modality: str = "", seed: int = 0,
                     n_boot: int = 1000) -> SaliencyReport:
    """Per-layer means and percentile bootstrap intervals over the analysed scans."""
    if not scans:
        raise DomainError("No scans to summarize.")
    summaries = []
    for layer in TISSUE_LAYERS:
        deltas = np.array([s.deltas[layer] for s in scans])
        volumes = np.array([s.volumes[layer] for s in scans])
        positive, negative = np.maximum(deltas, 0.0), -np.minimum(deltas, 0.0)
        pdss, ndss = directional_summary(deltas)
        adjusted = volume_adjust(deltas, volumes)
        va = adjusted.per_scan
        has_va = va.size > 0
        summaries.append(LayerSummary(
            layer=layer, name=Layer(layer).label, n=len(scans),
            ss=float(np.abs(deltas).mean()), ss_ci=_ci(np.abs(deltas), n_boot, seed),
            mean_delta=float(deltas.mean()),
            pdss=pdss, pdss_ci=_ci(positive, n_boot, seed),
            ndss=ndss, ndss_ci=_ci(negative, n_boot, seed),
            va_ss=_optional(adjusted.ss), va_ss_ci=_ci(np.abs(va), n_boot, seed) if has_va else None,
            va_pdss=_optional(adjusted.pdss), va_pdss_ci=_ci(np.maximum(va, 0.0), n_boot, seed) if has_va else None,
            va_ndss=_optional(adjusted.ndss), va_ndss_ci=_ci(-np.minimum(va, 0.0), n_boot, seed) if has_va else None,
            va_n=adjusted.used, va_excluded=adjusted.excluded,
        ))
    return SaliencyReport(scenario=scenario, modality=modality, seed=seed, n_scans=len(scans), layers=summaries)


def summarize_interactions(scans: Sequence[ScanSaliency], epsilon: float = DEFAULT_EPSILON) -> InteractionReport:
    """Pairwise SS correlations and per-scan OIS averaged over scans."""
    n = len(TISSUE_LAYERS)
    correlation: List[List[Optional[float]]] = [[None] * n for _ in range(n)]
    mean_ois: List[List[Optional[float]]] = [[None] * n for _ in range(n)]
    counts = [[len(scans)] * n for _ in range(n)]
    series = {layer: [s.ss(layer) for s in scans] for layer in TISSUE_LAYERS}
    for layer in TISSUE_LAYERS:
        if len(scans) >= 2:
            correlation[layer - 1][layer - 1] = saliency_correlation(series[layer], series[layer])
    for i, j in LAYER_PAIRS:
        rho = saliency_correlation(series[i], series[j]) if len(scans) >= 2 else None
        correlation[i - 1][j - 1] = correlation[j - 1][i - 1] = rho
        if scans and all((i, j) in s.pair_ss for s in scans):
            value = float(np.mean([s.ois((i, j), epsilon) for s in scans]))
            mean_ois[i - 1][j - 1] = mean_ois[j - 1][i - 1] = value
    return InteractionReport(epsilon=epsilon, correlation=correlation, ois=mean_ois, counts=counts)


def run_layer_analysis(scorer: Scorer, manifest: CohortManifest, root: Path, scenario: Scenario = Scenario.SIDE_MP,
                       modality: str = "bmode", pairs: bool = True, patients: Optional[Iterable[str]] = None,
                       seed: int = 0, epsilon: float = DEFAULT_EPSILON, n_boot: int = 1000,
                       threads: int = 0) -> LayerAnalysis:
    """
    Occlusion analysis of every sample of a scenario.

    Scans are analysed in parallel; results are assembled in sample-key order.

    :raises DomainError: If the scenario has no eligible scans.
    """
    scenario = Scenario(scenario)
    with tracer.start_as_current_span("run_layer_analysis"):
        samples = build_samples(manifest, scenario, modality, patients)
        if not samples:
            raise DomainError(f"No {modality} scans for scenario {scenario.value}.")
        loader = SampleLoader(root)

        def analyze(ref) -> ScanSaliency:
            volumes, masks = loader.load(ref)
            return analyze_scan(scorer, volumes, masks, ref.key, ref.label, ref.target, ref.side_key, pairs)

        logger.info(f"Occluding {len(samples)} samples ({'single layers and pairs' if pairs else 'single layers'})")
        if threads == 1:
            scans = [analyze(ref) for ref in samples]
        else:
            with ThreadPoolExecutor(max_workers=threads or None) as executor:
                scans = list(executor.map(analyze, samples))
        report = summarize_layers(scans, scenario.value, modality, seed, n_boot)
        interaction = summarize_interactions(scans, epsilon) if pairs else None
        logger.info(f"Layer ranking by mean SS: {[Layer(code).label for code in report.ranking()]}")
        return LayerAnalysis(report, interaction, scans)


@dataclass
class SideScores:
    """Directional scores of every layer over the scans of one (patient, visit, side)."""

    side_key: Tuple[str, int, str]
    label: ScanLabel
    target: int
    n: int
    pdss: Dict[int, float]
    ndss: Dict[int, float]


def side_directional_scores(scans: Sequence[ScanSaliency], scenario: Scenario = Scenario.SIDE_MP) -> List[SideScores]:
    """
    Side-level PDSS and NDSS per layer.

    Targets follow the scenario's side labelling; visit-level analyses use side MP status.
    """
    scenario = Scenario(scenario)
    side_scenario = Scenario.SIDE_MP if scenario is Scenario.VISIT_MP else scenario
    groups: Dict[Tuple[str, int, str], List[ScanSaliency]] = {}
    for scan in scans:
        groups.setdefault(scan.side_key, []).append(scan)
    sides = []
    for side_key in sorted(groups):
        group = groups[side_key]
        pdss, ndss = {}, {}
        for layer in TISSUE_LAYERS:
            pdss[layer], ndss[layer] = directional_summary([s.deltas[layer] for s in group])
        label = group[0].label
        sides.append(SideScores(side_key, label, scenario_target(label, side_scenario), len(group), pdss, ndss))
    return sides

"""Checks that layer saliency reflects the trained model: randomization sanity check and association test."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np
from opentelemetry import trace
from pydantic import BaseModel

from .cohort import CohortManifest, Scenario
from .errors import LayerError
from .saliency import SaliencyReport, SideScores, run_layer_analysis
from .scorer import TrainableScorer, randomize
from .stats import logistic_fit, roc_auc
from .volume import TISSUE_LAYERS, Layer

logger = logging.getLogger("layer")
tracer = trace.get_tracer(__name__)

SIGNIFICANCE = 0.05


class AssociationResult(BaseModel):
    """One univariate fit of side-level label on a directional score; failed fits carry an error."""

    layer: int
    name: str
    kind: str
    n: int
    beta0: Optional[float] = None
    beta1: Optional[float] = None
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None
    p: Optional[float] = None
    auc: Optional[float] = None
    passed: bool = False
    error: Optional[str] = None


def directional_criterion(kind: str, beta1: float, p: float, alpha: float = SIGNIFICANCE) -> bool:
    """PDSS needs a significant positive slope, NDSS a significant negative one."""
    if kind == "PDSS":
        return beta1 > 0 and p < alpha
    return beta1 < 0 and p < alpha


def run_association(sides: Sequence[SideScores], alpha: float = SIGNIFICANCE) -> List[AssociationResult]:
    """
    Fit logit P(MP) = beta0 + beta1 * S for every layer and both directional scores.

    A failed fit is reported on its row and does not stop the remaining rows.
    """
    targets = [side.target for side in sides]
    rows = []
    for layer in TISSUE_LAYERS:
        for kind in ("PDSS", "NDSS"):
            x = [(side.pdss if kind == "PDSS" else side.ndss)[layer] for side in sides]
            row = AssociationResult(layer=layer, name=Layer(layer).label, kind=kind, n=len(sides))
            try:
                fit = logistic_fit(x, targets)
                row = row.model_copy(update={
                    "beta0": fit.beta0, "beta1": fit.beta1, "ci_low": fit.ci_low, "ci_high": fit.ci_high, "p": fit.p,
                    "auc": roc_auc(x, targets).auc, "passed": directional_criterion(kind, fit.beta1, fit.p, alpha),
                })
            except LayerError as e:
                logger.warning(f"Association fit for {Layer(layer).label} {kind} failed: {type(e).__name__}: {e}")
                row = row.model_copy(update={"error": f"{type(e).__name__}: {e}"})
            rows.append(row)
    return rows


class LayerCollapse(BaseModel):
    layer: int
    name: str
    trained: float
    randomized: float
    ratio: Optional[float]


class SanityResult(BaseModel):
    seed: int
    trained_mean_ss: float
    randomized_mean_ss: float
    ratio: Optional[float]
    undefined: bool
    layers: List[LayerCollapse]


@dataclass
class SanityCheck:
    result: SanityResult
    trained: SaliencyReport
    randomized: SaliencyReport


def _ratio(trained: float, randomized: float) -> Optional[float]:
    if trained == 0.0 or randomized == 0.0 or not np.isfinite(trained) or not np.isfinite(randomized):
        return None
    return trained / randomized


def sanity_randomization(scorer: TrainableScorer, manifest: CohortManifest, root: Path, seed: int = 0,
                         scenario: Scenario = Scenario.SIDE_MP, modality: str = "bmode",
                         patients: Optional[Iterable[str]] = None, trained: Optional[SaliencyReport] = None,
                         n_boot: int = 1000, threads: int = 0) -> SanityCheck:
    """
    Compare single-layer saliency of a trained scorer with that of a seed-randomized copy.

    The collapse ratio is trained / randomized mean SS; it is undefined (and flagged) when
    either mean is zero.

    :param trained: A report of the trained scorer on the same scans, reused if given.
    :raises CapabilityError: If the scorer has no trainable parameters.
    """
    with tracer.start_as_current_span("sanity_randomization"):
        randomized_scorer = randomize(scorer, seed)
        patients = None if patients is None else sorted(patients)
        if trained is None:
            trained = run_layer_analysis(scorer, manifest, root, scenario, modality, pairs=False, patients=patients,
                                         seed=seed, n_boot=n_boot, threads=threads).saliency
        randomized = run_layer_analysis(randomized_scorer, manifest, root, scenario, modality, pairs=False,
                                        patients=patients, seed=seed, n_boot=n_boot, threads=threads).saliency
        layers = [LayerCollapse(layer=t.layer, name=t.name, trained=t.ss, randomized=r.ss, ratio=_ratio(t.ss, r.ss))
                  for t, r in zip(trained.layers, randomized.layers)]
        trained_mean = float(np.mean([t.ss for t in trained.layers]))
        randomized_mean = float(np.mean([r.ss for r in randomized.layers]))
        ratio = _ratio(trained_mean, randomized_mean)
        if ratio is None:
            logger.warning("Collapse ratio is undefined: a mean saliency score is zero")
        else:
            logger.info(f"Mean SS trained {trained_mean:.6g}, randomized {randomized_mean:.6g}, ratio {ratio:.3g}")
        result = SanityResult(seed=seed, trained_mean_ss=trained_mean, randomized_mean_ss=randomized_mean, ratio=ratio,
                              undefined=ratio is None, layers=layers)
        return SanityCheck(result, trained, randomized)

"""Insertion/deletion faithfulness of layer rankings, and the attribution methods that produce them."""

import enum
import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from opentelemetry import trace
from pydantic import BaseModel

from .cohort import CohortManifest, Scenario
from .dataset import SampleLoader, build_samples
from .errors import DomainError
from .saliency import DEFAULT_EPSILON, saliency_score
from .scorer import Scorer, input_gradient, score
from .stats import TTestResult, paired_t_test
from .volume import TISSUE_LAYERS, LayerMaskSet, Modality, Sample, as_channels, occlude

logger = logging.getLogger("layer")
tracer = trace.get_tracer(__name__)

METRICS = ("auc_ins", "auc_del", "auc_delta", "irof")


class Method(str, enum.Enum):
    LAYER = "LAYER"
    IG = "IG"
    SMOOTHGRAD = "SmoothGrad"
    RANDOM = "Random"

    @classmethod
    def parse(cls, name: str) -> "Method":
        for method in cls:
            if method.value.lower() == name.strip().lower():
                return method
        raise DomainError(f"Unknown attribution method '{name}'; expected one of {[m.value for m in cls]}.")


@dataclass(frozen=True)
class RankedLayers:
    """Layer codes by descending attribution."""

    order: Tuple[int, ...]
    method: Method

    def __post_init__(self) -> None:
        if sorted(self.order) != list(TISSUE_LAYERS):
            raise DomainError(f"A ranking must be a permutation of {TISSUE_LAYERS}, got {self.order}.")


def rank_by_scores(scores: Mapping[int, float], method: Method) -> RankedLayers:
    """Descending score, ties broken by ascending layer code."""
    return RankedLayers(tuple(sorted(TISSUE_LAYERS, key=lambda layer: (-scores[layer], layer))), method)


# curves and metrics


@dataclass
class Curves:
    insertion: np.ndarray
    deletion: np.ndarray


def insertion_deletion_curves(scorer: Scorer, sample: Sample, masks: LayerMaskSet, ranking: RankedLayers) -> Curves:
    """
    Insertion reveals ranked layers one by one starting from all six layers occluded;
    deletion occludes them one by one starting from the full sample. Both have K + 1 points.
    """
    order = ranking.order
    k = len(order)
    insertion = np.array([score(scorer, occlude(sample, masks, order[step:])) for step in range(k + 1)])
    deletion = np.array([score(scorer, occlude(sample, masks, order[:step])) for step in range(k + 1)])
    return Curves(insertion, deletion)


def _trapezoid(curve: Sequence[float]) -> float:
    curve = np.asarray(curve, dtype=np.float64)
    if curve.ndim != 1 or curve.size < 2:
        raise DomainError("A curve needs at least two points (K >= 1).")
    k = curve.size - 1
    return float(np.sum(0.5 * (curve[:-1] + curve[1:])) / k)


def auc_insertion(curve: Sequence[float]) -> float:
    return _trapezoid(curve)


def auc_deletion(curve: Sequence[float]) -> float:
    return _trapezoid(curve)


def auc_delta(insertion: Sequence[float], deletion: Sequence[float]) -> float:
    return auc_insertion(insertion) - auc_deletion(deletion)


def irof(insertion: Sequence[float], deletion: Sequence[float], epsilon: float = DEFAULT_EPSILON) -> float:
    """max insertion / (min deletion + epsilon), reported as-is even when the denominator is not positive."""
    if epsilon <= 0:
        raise DomainError(f"epsilon must be positive, got {epsilon}.")
    denominator = float(np.min(deletion)) + epsilon
    numerator = float(np.max(insertion))
    if denominator == 0.0:
        return float(np.copysign(np.inf, numerator)) if numerator else float("nan")
    return numerator / denominator


@dataclass
class FaithfulnessResult:
    key: str
    method: Method
    ranking: Tuple[int, ...]
    insertion: np.ndarray
    deletion: np.ndarray
    auc_ins: float
    auc_del: float
    auc_delta: float
    irof: float
    unstable: bool
    epsilon: float
    draws: int = 1


def _result(key: str, method: Method, order: Tuple[int, ...], ins: np.ndarray, dele: np.ndarray, epsilon: float,
            draws: int = 1) -> FaithfulnessResult:
    return FaithfulnessResult(key, method, order, ins, dele, auc_insertion(ins), auc_deletion(dele),
                              auc_delta(ins, dele), irof(ins, dele, epsilon), float(dele.min()) + epsilon <= 0.0,
                              epsilon, draws)


def faithfulness(scorer: Scorer, sample: Sample, masks: LayerMaskSet, ranking: RankedLayers, key: str = "",
                 epsilon: float = DEFAULT_EPSILON) -> FaithfulnessResult:
    """Curves and all four metrics for one ranking; unstable marks min deletion + epsilon <= 0."""
    curves = insertion_deletion_curves(scorer, sample, masks, ranking)
    return _result(key, ranking.method, ranking.order, curves.insertion, curves.deletion, epsilon)


def random_faithfulness(scorer: Scorer, sample: Sample, masks: LayerMaskSet, seed: int, scan_index: int,
                        draws: int = 1, key: str = "", epsilon: float = DEFAULT_EPSILON) -> FaithfulnessResult:
    """
    The random baseline averaged over `draws` permutations of the (seed, scan index) stream.

    The first permutation is rank_layers_random(seed, scan_index) and is the reported ranking. Curves
    are averaged point-wise and every metric is taken on the mean curves, so the AUCs equal the mean
    per-draw AUCs. Occluded scores are cached per layer subset; a scan needs at most 2^K of them.
    """
    if draws < 1:
        raise DomainError(f"The random baseline needs at least one draw, got {draws}.")
    rng = np.random.default_rng([seed, scan_index])
    cache: Dict[frozenset, float] = {}

    def occluded(layers: Iterable[int]) -> float:
        subset = frozenset(layers)
        if subset not in cache:
            cache[subset] = score(scorer, occlude(sample, masks, subset))
        return cache[subset]

    orders = [tuple(int(layer) for layer in rng.permutation(TISSUE_LAYERS)) for _ in range(draws)]
    k = len(TISSUE_LAYERS)
    ins = np.mean([[occluded(order[step:]) for step in range(k + 1)] for order in orders], axis=0)
    dele = np.mean([[occluded(order[:step]) for step in range(k + 1)] for order in orders], axis=0)
    return _result(key, Method.RANDOM, orders[0], ins, dele, epsilon, draws)


# attribution methods


def _per_layer(attribution: Tuple[np.ndarray, ...], masks: LayerMaskSet) -> Dict[int, float]:
    magnitude = sum(np.abs(channel) for channel in attribution)
    totals = np.bincount(masks.labels.ravel(), weights=magnitude.ravel(), minlength=len(TISSUE_LAYERS) + 1)
    return {layer: float(totals[layer]) for layer in TISSUE_LAYERS}


def _rebuild(sample: Sample, arrays: Sequence[np.ndarray]) -> Sample:
    channels = as_channels(sample)
    rebuilt = tuple(channel.with_voxels(array) for channel, array in zip(channels, arrays))
    return rebuilt if isinstance(sample, (tuple, list)) else rebuilt[0]


def integrated_gradients(scorer: Scorer, sample: Sample, steps: int = 32) -> Tuple[np.ndarray, ...]:
    """
    Path integral of the input gradient from the all-zero baseline, midpoint rule with `steps` points.

    :raises CapabilityError: If the scorer cannot differentiate its input.
    """
    if steps < 1:
        raise DomainError(f"Integrated gradients need at least one step, got {steps}.")
    channels = as_channels(sample)
    inputs = [channel.voxels.astype(np.float64) for channel in channels]
    total = [np.zeros_like(x) for x in inputs]
    for step in range(steps):
        alpha = (step + 0.5) / steps
        grads = input_gradient(scorer, _rebuild(sample, [alpha * x for x in inputs]))
        for acc, grad in zip(total, grads):
            acc += grad
    return tuple(x * acc / steps for x, acc in zip(inputs, total))


def smoothgrad(scorer: Scorer, sample: Sample, n: int = 25, sigma_rel: float = 0.1,
               seed: int = 0) -> Tuple[np.ndarray, ...]:
    """
    Mean |input gradient| over n noisy copies; the noise scale is sigma_rel times each channel's value range.

    Noisy SWE copies are clipped at zero to stay valid shear speeds. With sigma_rel = 0 this
    is the plain |gradient|.
    """
    if n < 1 or sigma_rel < 0:
        raise DomainError("SmoothGrad needs n >= 1 and a non-negative noise level.")
    if sigma_rel == 0.0:
        return tuple(np.abs(grad) for grad in input_gradient(scorer, sample))
    channels = as_channels(sample)
    rng = np.random.default_rng(seed)
    inputs = [channel.voxels.astype(np.float64) for channel in channels]
    sigmas = [sigma_rel * float(np.ptp(x)) for x in inputs]
    total = [np.zeros_like(x) for x in inputs]
    for _ in range(n):
        noisy = []
        for channel, x, sigma in zip(channels, inputs, sigmas):
            copy = x + rng.normal(0.0, sigma, size=x.shape) if sigma > 0 else x.copy()
            if channel.modality is Modality.SWE:
                copy = np.maximum(copy, 0.0)
            noisy.append(copy)
        for acc, grad in zip(total, input_gradient(scorer, _rebuild(sample, noisy))):
            acc += np.abs(grad)
    return tuple(acc / n for acc in total)


def rank_layers_layer(scorer: Scorer, sample: Sample, masks: LayerMaskSet) -> RankedLayers:
    """Rank by single-layer occlusion SS."""
    full = score(scorer, sample)
    scores = {layer: saliency_score(scorer, sample, masks, layer, full)[1] for layer in TISSUE_LAYERS}
    return rank_by_scores(scores, Method.LAYER)


def rank_layers_ig(scorer: Scorer, sample: Sample, masks: LayerMaskSet, steps: int = 32) -> RankedLayers:
    """Rank by the summed |IG attribution| of each layer's voxels."""
    return rank_by_scores(_per_layer(integrated_gradients(scorer, sample, steps), masks), Method.IG)


def rank_layers_smoothgrad(scorer: Scorer, sample: Sample, masks: LayerMaskSet, n: int = 25, sigma_rel: float = 0.1,
                           seed: int = 0) -> RankedLayers:
    return rank_by_scores(_per_layer(smoothgrad(scorer, sample, n, sigma_rel, seed), masks), Method.SMOOTHGRAD)


def rank_layers_random(seed: int, scan_index: int) -> RankedLayers:
    """A uniformly random permutation drawn from a stream keyed by (seed, scan index)."""
    rng = np.random.default_rng([seed, scan_index])
    return RankedLayers(tuple(int(layer) for layer in rng.permutation(TISSUE_LAYERS)), Method.RANDOM)


# method comparison


class MethodSummary(BaseModel):
    method: str
    n: int
    auc_ins: float
    auc_del: float
    auc_delta: float
    irof: float
    unstable: int


class PairedComparison(BaseModel):
    method_a: str
    method_b: str
    metric: str
    mean_difference: float
    t: Optional[float]
    df: int
    p: Optional[float]
    degenerate: bool


class FaithfulnessSummary(BaseModel):
    scenario: str
    modality: str
    seed: int
    epsilon: float
    methods: List[MethodSummary]
    tests: List[PairedComparison]


@dataclass
class MethodComparison:
    summary: FaithfulnessSummary
    results: Dict[Method, List[FaithfulnessResult]]


def compare_results(results_a: Sequence[FaithfulnessResult],
                    results_b: Sequence[FaithfulnessResult]) -> Dict[str, TTestResult]:
    """Paired t-test of each metric over scans, a - b."""
    if len(results_a) != len(results_b) or [r.key for r in results_a] != [r.key for r in results_b]:
        raise DomainError("Compared methods must cover the same scans in the same order.")
    if len(results_a) < 2:
        raise DomainError("Comparing methods needs at least two scans.")
    return {metric: paired_t_test([getattr(r, metric) for r in results_a], [getattr(r, metric) for r in results_b])
            for metric in METRICS}


def _summarize(method: Method, results: Sequence[FaithfulnessResult]) -> MethodSummary:
    return MethodSummary(method=method.value, n=len(results),
                         **{metric: float(np.mean([getattr(r, metric) for r in results])) for metric in METRICS},
                         unstable=sum(r.unstable for r in results))


def compare_methods(scorer: Scorer, manifest: CohortManifest, root: Path, methods: Sequence[Method],
                    scenario: Scenario = Scenario.SIDE_MP, modality: str = "bmode", seed: int = 0,
                    patients: Optional[Iterable[str]] = None, epsilon: float = DEFAULT_EPSILON, ig_steps: int = 32,
                    smoothgrad_samples: int = 25, smoothgrad_sigma: float = 0.1, random_draws: int = 32,
                    threads: int = 0) -> MethodComparison:
    """
    Faithfulness of every method on every sample, and paired t-tests between each pair of methods.

    A repeated method is evaluated once; its pairing with itself is still tested and comes out
    degenerate with zero differences. Summaries list each method once, in first-seen order.

    :raises DomainError: With fewer than two methods or fewer than two scans.
    """
    requested = [Method(m) for m in methods]
    if len(requested) < 2:
        raise DomainError("Comparing attribution methods needs at least two methods.")
    if random_draws < 1:
        raise DomainError(f"The random baseline needs at least one draw, got {random_draws}.")
    unique = list(dict.fromkeys(requested))
    scenario = Scenario(scenario)
    with tracer.start_as_current_span("compare_methods"):
        samples = build_samples(manifest, scenario, modality, patients)
        if len(samples) < 2:
            raise DomainError(f"Comparing attribution methods needs at least two scans, got {len(samples)}.")
        loader = SampleLoader(root)

        def run(method: Method, sample: Sample, masks: LayerMaskSet, index: int, key: str) -> FaithfulnessResult:
            if method is Method.RANDOM:
                return random_faithfulness(scorer, sample, masks, seed, index, random_draws, key, epsilon)
            if method is Method.LAYER:
                ranking = rank_layers_layer(scorer, sample, masks)
            elif method is Method.IG:
                ranking = rank_layers_ig(scorer, sample, masks, ig_steps)
            else:
                ranking = rank_layers_smoothgrad(scorer, sample, masks, smoothgrad_samples, smoothgrad_sigma,
                                                 seed + index)
            return faithfulness(scorer, sample, masks, ranking, key, epsilon)

        def evaluate(item) -> List[FaithfulnessResult]:
            index, ref = item
            sample, masks = loader.load(ref)
            return [run(method, sample, masks, index, ref.key) for method in unique]

        logger.info(f"Faithfulness of {[m.value for m in unique]} on {len(samples)} samples")
        with ThreadPoolExecutor(max_workers=threads or None) as executor:
            per_scan = list(executor.map(evaluate, enumerate(samples)))
        results = {method: [row[i] for row in per_scan] for i, method in enumerate(unique)}

        tests = []
        for a, b in itertools.combinations(requested, 2):
            for metric, test in compare_results(results[a], results[b]).items():
                tests.append(PairedComparison(method_a=a.value, method_b=b.value, metric=metric,
                                              mean_difference=test.mean_difference, t=test.t, df=test.df, p=test.p,
                                              degenerate=test.degenerate))
        summary = FaithfulnessSummary(scenario=scenario.value, modality=modality, seed=seed, epsilon=epsilon,
                                      methods=[_summarize(m, results[m]) for m in unique], tests=tests)
        return MethodComparison(summary, results)

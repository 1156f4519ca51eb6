"""
CARN training: curriculum sampling over scan samples, optional AIR re-weighting and joint
Adam updates of every parameter, plus fold-wise evaluation and cross-validation.
"""

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
from opentelemetry import trace
from pydantic import BaseModel, Field, ValidationError
from scipy.special import expit

from .aggregate import FoldAssignment, build_hierarchy, flag_incomplete, make_folds
from .cohort import CohortManifest, Scenario
from .curriculum import CurriculumSchedule, DifficultyTracker, select_epoch_samples
from .dataset import SampleLoader, SampleRef, build_samples, modality_set
from .errors import ConfigError, DomainError, TrainingError
from .scorer import OptimizerState, ScorerConfig, TrainableScorer, adam_step, bce_with_logit
from .stats import ClassificationMetrics, classification_metrics, roc_auc

logger = logging.getLogger("layer")
tracer = trace.get_tracer(__name__)


class TrainConfig(BaseModel):
    """Everything that determines a training run; two runs with equal configs produce equal checkpoints."""

    scenario: Scenario = Scenario.SIDE_MP
    modality: str = "bmode"
    epochs: int = Field(default=30, ge=1)
    batch_size: int = Field(default=16, ge=1)
    lr: float = Field(default=1e-4, gt=0)
    curriculum: bool = True
    air: bool = False
    seed: int = 0
    folds: int = Field(default=6, ge=2)
    validation_fold: int = Field(default=0, ge=0)
    holdout_test: bool = True
    beta: float = Field(default=0.9, ge=0.0, le=1.0)
    f_min: float = Field(default=0.2, gt=0.0, le=1.0)
    pool: Tuple[int, int, int] = (8, 8, 8)
    hidden: int = Field(default=64, ge=1)
    standardize: bool = True
    air_grid: Tuple[int, int, int] = (4, 4, 4)


def make_train_config(**kwargs) -> TrainConfig:
    try:
        config = TrainConfig(**kwargs)
    except ValidationError as e:
        raise ConfigError(f"Invalid training configuration: {e}") from None
    try:
        modality_set(config.modality)
    except DomainError as e:
        raise ConfigError(str(e)) from None
    return config


@dataclass
class EpochRecord:
    epoch: int
    n_e: int
    loss: float
    val_auc: Optional[float]
    selected_hash: str


@dataclass
class TrainResult:
    scorer: TrainableScorer
    log: List[EpochRecord]
    folds: FoldAssignment
    train_keys: List[str] = field(default_factory=list)
    validation_keys: List[str] = field(default_factory=list)


def selection_hash(ids: Iterable[int]) -> str:
    """Short digest of the selected sample ids, in selection order."""
    return hashlib.sha256(",".join(str(i) for i in ids).encode("ascii")).hexdigest()[:16]


def _map(fn, items: List, threads: int) -> List:
    if threads == 1 or len(items) < 2:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads or None) as executor:
        return list(executor.map(fn, items))


def _scorer_config(manifest: CohortManifest, config: TrainConfig) -> ScorerConfig:
    try:
        return ScorerConfig(dims=manifest.dims, modalities=modality_set(config.modality), pool=config.pool,
                            hidden=config.hidden, standardize=config.standardize, air=config.air,
                            air_grid=config.air_grid, seed=config.seed)
    except ValidationError as e:
        raise ConfigError(f"Invalid scorer configuration: {e}") from None


def predict(scorer: TrainableScorer, manifest: CohortManifest, root: Path, scenario: Scenario = Scenario.SIDE_MP,
            modality: str = "bmode", patients: Optional[Iterable[str]] = None, threads: int = 0) -> Dict[str, float]:
    """Scan-level probabilities keyed by sample key."""
    samples = build_samples(manifest, scenario, modality, patients)
    loader = SampleLoader(root)
    values = _map(lambda ref: float(expit(scorer.score(loader.volumes(ref)))), samples, threads)
    return dict(zip((s.key for s in samples), values))


@dataclass
class EvaluationResult:
    scan_auc: Optional[float]
    node_auc: Optional[float]
    metrics: ClassificationMetrics
    scans: int
    nodes: int
    incomplete: List[str] = field(default_factory=list)


def _safe_auc(scores: List[float], targets: List[int]) -> Optional[float]:
    if len(set(targets)) < 2:
        return None
    return roc_auc(scores, targets).auc


def evaluate(scorer: TrainableScorer, manifest: CohortManifest, root: Path, scenario: Scenario, modality: str,
             patients: Optional[Iterable[str]] = None, merge_visits: bool = False,
             threads: int = 0) -> EvaluationResult:
    """
    AUC at scan level and at the scenario's aggregation level (visit or side), plus threshold
    metrics of the aggregated predictions.
    """
    patients = None if patients is None else sorted(patients)
    probabilities = predict(scorer, manifest, root, scenario, modality, patients, threads)
    if not probabilities:
        raise DomainError("No samples to evaluate.")
    samples = build_samples(manifest, scenario, modality, patients)
    scan_auc = _safe_auc([probabilities[s.key] for s in samples], [s.target for s in samples])
    nodes = build_hierarchy(manifest, scenario, modality, merge_visits, patients)
    node_probabilities = [node.evaluate(probabilities) for node in nodes]
    node_targets = [int(node.target) for node in nodes]
    return EvaluationResult(scan_auc, _safe_auc(node_probabilities, node_targets),
                            classification_metrics(node_targets, node_probabilities), len(samples), len(nodes),
                            flag_incomplete(nodes))


def train_carn(manifest: CohortManifest, root: Path, config: TrainConfig, folds: Optional[FoldAssignment] = None,
               threads: int = 0) -> TrainResult:
    """
    Train a scorer on the training patients of one fold split.

    Before the first epoch a no-update pass over the training samples seeds every difficulty.
    Each epoch takes the curriculum's easiest N_e samples (all samples without curriculum),
    shuffles them with a generator seeded by (seed, epoch) and takes one joint Adam step
    per minibatch over the classifier and, when enabled, the AIR generator.

    :param manifest: The cohort.
    :param root: Directory the manifest's file references are relative to.
    :param config: The run configuration.
    :param folds: Patient folds; derived from config.folds and config.seed if omitted.
    :param threads: Workers for the difficulty and validation passes (0 = auto).
    :raises ConfigError: If the training split lacks one of the two classes.
    :raises TrainingError: If a loss becomes non-finite.
    """
    with tracer.start_as_current_span("train_carn"):
        folds = folds or make_folds(manifest, config.folds, config.seed, config.holdout_test)
        train_patients, validation_patients = folds.split(config.validation_fold)
        train = build_samples(manifest, config.scenario, config.modality, train_patients)
        validation = build_samples(manifest, config.scenario, config.modality, validation_patients)
        targets = np.array([s.target for s in train])
        if len(train) == 0 or targets.min() == targets.max():
            raise ConfigError(f"Training split of fold {config.validation_fold} needs samples of both classes "
                              f"for scenario {config.scenario.value}.")

        loader = SampleLoader(root)
        scorer = TrainableScorer(_scorer_config(manifest, config),
                                 metadata={"scenario": config.scenario.value, "modality": config.modality,
                                           "seed": config.seed, "epochs": config.epochs,
                                           "curriculum": config.curriculum, "air": config.air,
                                           "folds": folds.k, "validation_fold": config.validation_fold})

        def stack(ref: SampleRef) -> np.ndarray:
            return scorer.stack(loader.volumes(ref))

        def sample_loss(index: int) -> float:
            cache = scorer.forward(stack(train[index]))
            return bce_with_logit(cache.logit, int(targets[index]))

        tracker = DifficultyTracker(len(train), config.beta)
        initial = _map(sample_loss, list(range(len(train))), threads)
        if not np.all(np.isfinite(initial)):
            raise TrainingError("Non-finite loss in the difficulty initialization pass.")
        tracker.initialize(initial)
        schedule = CurriculumSchedule(config.epochs, len(train), config.f_min)
        state = OptimizerState.zeros_like(scorer.all_params(), lr=config.lr)
        logger.info(f"Training on {len(train)} samples ({len(train_patients)} patients), "
                    f"validating on {len(validation)} samples ({len(validation_patients)} patients)")

        log: List[EpochRecord] = []
        for epoch in range(config.epochs):
            with tracer.start_as_current_span("epoch") as span:
                if config.curriculum:
                    selected = select_epoch_samples(tracker, schedule, epoch)
                else:
                    selected = list(range(len(train)))
                order = np.random.default_rng([config.seed, epoch]).permutation(selected)
                losses = []
                for start in range(0, len(order), config.batch_size):
                    batch = [int(i) for i in order[start:start + config.batch_size]]
                    total: Dict[str, np.ndarray] = {}
                    batch_losses = []
                    for index in batch:
                        loss, logit, grads = scorer.loss_and_gradients(stack(train[index]), int(targets[index]))
                        if not np.isfinite(loss):
                            raise TrainingError(f"Non-finite loss for sample {train[index].key} at epoch {epoch} "
                                                f"(logit {logit}).")
                        batch_losses.append(loss)
                        for name, grad in grads.items():
                            total[name] = total[name] + grad if name in total else grad.copy()
                    mean_grads = {name: grad / len(batch) for name, grad in total.items()}
                    params, state = adam_step(scorer.all_params(), mean_grads, state)
                    scorer = scorer.with_params(params)
                    for index, loss in zip(batch, batch_losses):
                        tracker.update(index, loss)
                    losses.extend(batch_losses)

                val_auc = None
                if validation:
                    scores = _map(lambda ref: scorer.score(loader.volumes(ref)), validation, threads)
                    val_auc = _safe_auc(scores, [s.target for s in validation])
                record = EpochRecord(epoch, len(selected), float(np.mean(losses)), val_auc, selection_hash(selected))
                log.append(record)
                span.set_attribute("epoch", epoch)
                span.set_attribute("n_e", record.n_e)
                auc_text = "n/a" if val_auc is None else f"{val_auc:.4f}"
                logger.info(f"epoch {epoch}: N_e={record.n_e} loss={record.loss:.6f} val_auc={auc_text}")

        return TrainResult(scorer, log, folds, [s.key for s in train], [s.key for s in validation])


@dataclass
class FoldScore:
    fold: int
    evaluation: EvaluationResult
    final_loss: float


@dataclass
class CrossValidationResult:
    folds: FoldAssignment
    scores: List[FoldScore]

    def mean(self, attribute: str) -> Optional[float]:
        values = [getattr(s.evaluation, attribute) for s in self.scores]
        values = [v for v in values if v is not None]
        return float(np.mean(values)) if values else None


def cross_validate(manifest: CohortManifest, root: Path, config: TrainConfig, threads: int = 0,
                   merge_visits: bool = False) -> CrossValidationResult:
    """Train one model per cross-validation fold and score it on that fold's patients."""
    folds = make_folds(manifest, config.folds, config.seed, config.holdout_test)
    scores = []
    for fold in folds.cv_folds:
        fold_config = config.model_copy(update={"validation_fold": fold})
        result = train_carn(manifest, root, fold_config, folds, threads)
        evaluation = evaluate(result.scorer, manifest, root, config.scenario, config.modality,
                              folds.patients_in(fold), merge_visits, threads)
        scores.append(FoldScore(fold, evaluation, result.log[-1].loss))
        logger.info(f"fold {fold}: scan AUC {evaluation.scan_auc}, aggregated AUC {evaluation.node_auc}")
    return CrossValidationResult(folds, scores)

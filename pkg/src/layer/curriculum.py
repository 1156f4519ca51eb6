"""Self-paced curriculum: EMA sample difficulty and a linearly growing exposure schedule."""

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .errors import DomainError


class DifficultyTracker:
    """
    Exponentially smoothed per-sample loss, L_i <- beta * L_i + (1 - beta) * l_i.

    :param size: Number of samples; ids are 0..size-1.
    :param beta: EMA momentum in [0, 1].
    """

    def __init__(self, size: int, beta: float = 0.9) -> None:
        if not 0.0 <= beta <= 1.0:
            raise DomainError(f"EMA momentum must lie in [0, 1], got {beta}.")
        self.beta = float(beta)
        self.difficulty = np.zeros(int(size))
        self.last_loss = np.full(int(size), np.nan)

    def __len__(self) -> int:
        return len(self.difficulty)

    def _check(self, sample_id: int) -> int:
        if not 0 <= sample_id < len(self.difficulty) or int(sample_id) != sample_id:
            raise DomainError(f"Unknown sample id {sample_id}.")
        return int(sample_id)

    def initialize(self, losses: Sequence[float]) -> None:
        """Seed every difficulty with a first observed loss, before any EMA step."""
        losses = np.asarray(losses, dtype=np.float64)
        if losses.shape != self.difficulty.shape or not np.all(np.isfinite(losses)):
            raise DomainError("Initial losses must be finite, one per sample.")
        self.difficulty = losses.copy()
        self.last_loss = losses.copy()

    def update(self, sample_id: int, loss: float) -> float:
        sample_id = self._check(sample_id)
        if not math.isfinite(loss):
            raise DomainError(f"Loss for sample {sample_id} is not finite.")
        self.difficulty[sample_id] = self.beta * self.difficulty[sample_id] + (1.0 - self.beta) * loss
        self.last_loss[sample_id] = loss
        return float(self.difficulty[sample_id])


def update_difficulty(tracker: DifficultyTracker, sample_id: int, loss: float) -> DifficultyTracker:
    """Apply the EMA recurrence for one sample and return the tracker."""
    tracker.update(sample_id, loss)
    return tracker


@dataclass(frozen=True)
class CurriculumSchedule:
    """
    Exposure f_e = f_min + (1 - f_min) * e / (E - 1); pool size N_e = max(1, floor(f_e * N)).

    A single-epoch schedule exposes the whole set.
    """

    epochs: int
    size: int
    f_min: float = 0.2

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.size < 1:
            raise DomainError("A schedule needs at least one epoch and one sample.")
        if not 0.0 < self.f_min <= 1.0:
            raise DomainError(f"Initial exposure must lie in (0, 1], got {self.f_min}.")

    def _check(self, epoch: int) -> None:
        if not 0 <= epoch < self.epochs:
            raise DomainError(f"Epoch {epoch} is outside 0..{self.epochs - 1}.")

    def exposure(self, epoch: int) -> float:
        self._check(epoch)
        if self.epochs == 1 or epoch == self.epochs - 1:
            return 1.0
        return self.f_min + (1.0 - self.f_min) * epoch / (self.epochs - 1)

    def pool_size(self, epoch: int) -> int:
        # the epsilon keeps exact products such as 0.6 * 10 from flooring to 5
        return min(self.size, max(1, math.floor(self.exposure(epoch) * self.size + 1e-9)))


def select_epoch_samples(tracker: DifficultyTracker, schedule: CurriculumSchedule, epoch: int,
                         candidates: Optional[Sequence[int]] = None) -> List[int]:
    """
    The N_e easiest samples, by ascending difficulty with ties broken by ascending id.

    :param candidates: Restrict selection to these ids; all ids by default.
    """
    n_e = schedule.pool_size(epoch)
    ids = np.arange(len(tracker)) if candidates is None else np.asarray(sorted(candidates))
    order = np.lexsort((ids, tracker.difficulty[ids]))
    return [int(i) for i in ids[order[:n_e]]]

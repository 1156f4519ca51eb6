import unittest

from ddt import data, ddt, unpack
from hypothesis import given, settings
from hypothesis import strategies as st

from layer.curriculum import CurriculumSchedule, DifficultyTracker, select_epoch_samples, update_difficulty
from layer.errors import DomainError


@ddt
class TestCurriculum(unittest.TestCase):
    """Tests for difficulty tracking and the exposure schedule."""

    @data((0.9, 1.0, 2.0, 1.1), (0.0, 1.0, 2.0, 2.0), (1.0, 1.0, 2.0, 1.0), (0.5, 4.0, 0.0, 2.0))
    @unpack
    def test_ema_update(self, beta, previous, loss, expected):
        """Test L <- beta L + (1 - beta) l."""
        tracker = DifficultyTracker(1, beta)
        tracker.initialize([previous])
        self.assertAlmostEqual(update_difficulty(tracker, 0, loss).difficulty[0], expected)

    def test_ema_sequence(self):
        """Test a run of updates on one sample."""
        tracker = DifficultyTracker(2, 0.5)
        tracker.initialize([0.0, 1.0])
        for loss in (2.0, 2.0):
            tracker.update(0, loss)
        self.assertAlmostEqual(tracker.difficulty[0], 1.5)
        self.assertAlmostEqual(tracker.difficulty[1], 1.0)

    def test_tracker_errors(self):
        """Test that invalid momentum, ids and losses are refused."""
        with self.assertRaises(DomainError):
            DifficultyTracker(3, 1.5)
        tracker = DifficultyTracker(3)
        with self.assertRaises(DomainError):
            tracker.update(3, 1.0)
        with self.assertRaises(DomainError):
            tracker.update(0, float("nan"))
        with self.assertRaises(DomainError):
            tracker.initialize([1.0, 2.0])

    @data((10, 10, 0.2, [2, 2, 3, 4, 5, 6, 7, 8, 9, 10]), (5, 100, 0.2, [20, 40, 60, 80, 100]),
          (2, 7, 0.2, [1, 7]), (1, 9, 0.2, [9]))
    @unpack
    def test_schedule(self, epochs, size, f_min, expected):
        """Test N_e = max(1, floor(f_e N)) with f_e growing linearly to 1."""
        schedule = CurriculumSchedule(epochs, size, f_min)
        self.assertEqual([schedule.pool_size(e) for e in range(epochs)], expected)

    @data(2, 5, 10)
    def test_schedule_endpoints(self, epochs):
        """Test that the first epoch exposes f_min and the last the whole set."""
        schedule = CurriculumSchedule(epochs, 50, 0.2)
        self.assertAlmostEqual(schedule.exposure(0), 0.2)
        self.assertEqual(schedule.exposure(epochs - 1), 1.0)
        self.assertEqual(schedule.pool_size(epochs - 1), 50)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(min_value=1, max_value=40), st.integers(min_value=1, max_value=500),
           st.floats(min_value=0.01, max_value=1.0))
    def test_schedule_monotone(self, epochs, size, f_min):
        """Test that the pool never shrinks and always holds at least one sample."""
        schedule = CurriculumSchedule(epochs, size, f_min)
        sizes = [schedule.pool_size(e) for e in range(epochs)]
        self.assertTrue(all(1 <= a <= b <= size for a, b in zip(sizes, sizes[1:])))
        self.assertEqual(sizes[-1], size)

    def test_schedule_errors(self):
        """Test that empty schedules and epochs outside the run are refused."""
        with self.assertRaises(DomainError):
            CurriculumSchedule(0, 5)
        with self.assertRaises(DomainError):
            CurriculumSchedule(3, 5, 0.0)
        with self.assertRaises(DomainError):
            CurriculumSchedule(3, 5).pool_size(3)

    def test_select_easiest(self):
        """Test that selection takes the lowest difficulties, ties by ascending id."""
        tracker = DifficultyTracker(6)
        tracker.initialize([0.5, 0.1, 0.5, 0.9, 0.1, 0.3])
        schedule = CurriculumSchedule(2, 6, 0.5)
        self.assertEqual(select_epoch_samples(tracker, schedule, 0), [1, 4, 5])
        self.assertEqual(select_epoch_samples(tracker, schedule, 1), [1, 4, 5, 0, 2, 3])

    def test_select_candidates(self):
        """Test selection restricted to a candidate subset."""
        tracker = DifficultyTracker(5)
        tracker.initialize([0.0, 0.0, 0.0, 0.0, 0.0])
        schedule = CurriculumSchedule(3, 4, 0.5)
        self.assertEqual(select_epoch_samples(tracker, schedule, 0, candidates=[4, 2, 3, 1]), [1, 2])

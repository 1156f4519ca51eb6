import tempfile
import unittest
from pathlib import Path

import numpy as np
from ddt import data, ddt
from helpers import CohortDirectory

from layer.cohort import ScanLabel, Scenario
from layer.curriculum import CurriculumSchedule
from layer.errors import ConfigError
from layer.scorer import save_checkpoint
from layer.training import cross_validate, evaluate, make_train_config, predict, selection_hash, train_carn


def _config(**overrides):
    settings = dict(epochs=3, batch_size=8, lr=1e-2, folds=3, pool=(4, 4, 4), hidden=8, seed=1)
    settings.update(overrides)
    return make_train_config(**settings)


@ddt
class TestTraining(unittest.TestCase):
    """Tests for CARN training and evaluation."""

    @classmethod
    def setUpClass(cls) -> None:
        super(TestTraining, cls).setUpClass()
        cls.cohort = CohortDirectory(patients=6, bmode_reps=2, swe_reps=1)
        cls.manifest = cls.cohort.manifest
        cls.root = cls.cohort.root

    @classmethod
    def tearDownClass(cls) -> None:
        cls.cohort.cleanup()

    def test_curriculum_log(self):
        """Test that each epoch logs the scheduled pool size and a digest of its selection."""
        result = train_carn(self.manifest, self.root, _config(), threads=1)
        self.assertEqual(len(result.log), 3)
        schedule = CurriculumSchedule(3, len(result.train_keys), 0.2)
        self.assertEqual([r.n_e for r in result.log], [schedule.pool_size(e) for e in range(3)])
        self.assertEqual(result.log[-1].n_e, len(result.train_keys))
        self.assertTrue(all(len(r.selected_hash) == 16 for r in result.log))
        self.assertTrue(all(np.isfinite(r.loss) for r in result.log))

    def test_without_curriculum(self):
        """Test that without curriculum every epoch sees the whole training set."""
        result = train_carn(self.manifest, self.root, _config(curriculum=False), threads=1)
        self.assertTrue(all(r.n_e == len(result.train_keys) for r in result.log))
        self.assertEqual(result.log[0].selected_hash, selection_hash(range(len(result.train_keys))))

    def test_patients_do_not_leak(self):
        """Test that training and validation samples come from disjoint patients."""
        result = train_carn(self.manifest, self.root, _config(epochs=1), threads=1)
        train = {key.split("/")[0] for key in result.train_keys}
        validation = {key.split("/")[0] for key in result.validation_keys}
        self.assertFalse(train & validation)
        self.assertFalse((train | validation) & result.folds.patients_in(result.folds.test_fold))

    @data(False, True)
    def test_deterministic(self, air):
        """Test that two runs with the same seed write identical checkpoints."""
        config = _config(air=air, air_grid=(2, 2, 2))
        first = train_carn(self.manifest, self.root, config, threads=1)
        second = train_carn(self.manifest, self.root, config, threads=2)
        with tempfile.TemporaryDirectory() as tmp:
            a, b = Path(tmp) / "a.lckp", Path(tmp) / "b.lckp"
            save_checkpoint(a, first.scorer)
            save_checkpoint(b, second.scorer)
            self.assertEqual(a.read_bytes(), b.read_bytes())
        self.assertEqual([r.loss for r in first.log], [r.loss for r in second.log])

    def test_air_weights_train(self):
        """Test that the AIR coarse weights are updated jointly with the classifier."""
        result = train_carn(self.manifest, self.root, _config(air=True, air_grid=(2, 2, 2), epochs=1), threads=1)
        self.assertIsNotNone(result.scorer.air)
        self.assertGreater(np.abs(result.scorer.air.theta).max(), 0.0)

    def test_loss_decreases(self):
        """Test that plain training lowers the loss on a planted cohort."""
        result = train_carn(self.manifest, self.root, _config(curriculum=False, epochs=8), threads=1)
        self.assertLess(result.log[-1].loss, result.log[0].loss)

    def test_single_class(self):
        """Test that a training split without positives is a configuration error."""
        scans = [s.model_copy(update={"label": ScanLabel.CONTROL}) for s in self.manifest.scans]
        manifest = self.manifest.model_copy(update={"scans": scans})
        with self.assertRaisesRegex(ConfigError, "both classes"):
            train_carn(manifest, self.root, _config(epochs=1), threads=1)

    @data({"epochs": 0}, {"modality": "ct"}, {"lr": -1.0}, {"folds": 1})
    def test_invalid_config(self, override):
        """Test that invalid settings are configuration errors."""
        with self.assertRaises(ConfigError):
            make_train_config(**override)

    def test_predict_and_evaluate(self):
        """Test scan probabilities and aggregated evaluation on the held-out patients."""
        result = train_carn(self.manifest, self.root, _config(epochs=1), threads=1)
        test_patients = result.folds.patients_in(result.folds.test_fold)
        probabilities = predict(result.scorer, self.manifest, self.root, patients=test_patients, threads=1)
        self.assertEqual(len(probabilities), len(test_patients) * 2 * 2 * 2 * 2)
        self.assertTrue(all(0.0 < p < 1.0 for p in probabilities.values()))
        evaluation = evaluate(result.scorer, self.manifest, self.root, Scenario.SIDE_MP, "bmode", test_patients,
                              threads=1)
        self.assertEqual(evaluation.scans, len(probabilities))
        self.assertEqual(evaluation.nodes, len(test_patients) * 2 * 2)
        self.assertEqual(evaluation.incomplete, [])
        if evaluation.node_auc is not None:
            self.assertTrue(0.0 <= evaluation.node_auc <= 1.0)

    def test_multimodal_training(self):
        """Test training on paired B-mode and SWE samples."""
        result = train_carn(self.manifest, self.root, _config(modality="both", epochs=1), threads=1)
        self.assertEqual(result.scorer.config.modalities, ("bmode", "swe"))
        self.assertEqual(result.scorer.config.features, 2 * 64)

    def test_cross_validation(self):
        """Test that cross-validation scores one model per non-test fold."""
        result = cross_validate(self.manifest, self.root, _config(epochs=1), threads=1)
        self.assertEqual([s.fold for s in result.scores], [0, 1])
        self.assertTrue(all(np.isfinite(s.final_loss) for s in result.scores))

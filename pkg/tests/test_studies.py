"""
Planted-truth phantom studies. The cheap ones always run; the ones that train scorers or
generate many cohorts only run with LAYER_RUN_STUDIES=true.
"""

import io
import json
import tempfile
import unittest
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path

import numpy as np
from helpers import STUDIES, layered_volume, slice_masks

from layer.cli import main
from layer.cohort import Scenario
from layer.dataset import build_samples
from layer.faithfulness import Method, compare_methods, compare_results
from layer.formats import read_manifest, read_mask
from layer.phantom import generate_cohort, make_config
from layer.saliency import LAYER_PAIRS, analyze_scan, run_layer_analysis, side_directional_scores, summarize_layers
from layer.scorer import AnalyticScorer, load_checkpoint
from layer.training import evaluate, make_train_config, train_carn
from layer.validation import run_association, sanity_randomization
from layer.volume import Layer

STUDY_DIMS = (16, 16, 16)


def _cohort(root: Path, seed: int, delta: float = 2.0, patients: int = 40, **overrides):
    config = make_config(dims=STUDY_DIMS, patients=patients, delta=delta, planted_layer=int(Layer.DFM), seed=seed,
                         **overrides)
    return generate_cohort(config, root)


def _train(manifest, root: Path, seed: int):
    config = make_train_config(epochs=30, batch_size=16, lr=1e-3, seed=seed, pool=(8, 8, 8), hidden=32)
    return train_carn(manifest, root, config)


class TestAlwaysOn(unittest.TestCase):
    """Closed-form studies that are fast enough for every run."""

    def test_linear_scorer_additivity(self):
        """Test that same-sign pairs of a linear scorer have |OIS| < 1e-9 on 100 random phantoms."""
        rng = np.random.default_rng(0)
        masks = slice_masks()
        for _ in range(100):
            values = np.concatenate([[0.0], rng.uniform(0.1, 3.0, size=6)])
            volume = layered_volume(masks, values, noise=0.05, seed=int(rng.integers(1 << 30)))
            scorer = AnalyticScorer(rng.uniform(0.0, 2.0, size=6), float(rng.normal()), masks)
            scan = analyze_scan(scorer, volume, masks)
            for pair in LAYER_PAIRS:
                i, j = pair
                if scan.deltas[i] * scan.deltas[j] > 0:
                    self.assertLess(abs(scan.ois(pair)), 1e-9)

    def test_directional_identity(self):
        """Test PDSS - NDSS = mean delta to 1e-12 over mixed-sign scans."""
        rng = np.random.default_rng(1)
        masks = slice_masks()
        volume = layered_volume(masks, (0.0, 1.0, 2.0, 0.5, 1.5, 1.0, 0.8))
        scans = [analyze_scan(AnalyticScorer(rng.normal(size=6), 0.0, masks), volume, masks, pairs=False)
                 for _ in range(25)]
        for summary in summarize_layers(scans, n_boot=20).layers:
            self.assertAlmostEqual(summary.pdss - summary.ndss, summary.mean_delta, places=12)


class TestPlantedStudies(unittest.TestCase):
    """Training-based studies on planted-DFM phantoms."""

    @classmethod
    def setUpClass(cls) -> None:
        super(TestPlantedStudies, cls).setUpClass()
        if not STUDIES:
            return
        cls.tmp = tempfile.TemporaryDirectory()
        cls.root = Path(cls.tmp.name)
        cls.manifest = _cohort(cls.root, seed=0)
        cls.result = _train(cls.manifest, cls.root, seed=0)

    @classmethod
    def tearDownClass(cls) -> None:
        if STUDIES:
            cls.tmp.cleanup()

    def setUp(self) -> None:
        if not STUDIES:
            self.skipTest("Only for study runs.")

    def _test_patients(self):
        return self.result.folds.patients_in(self.result.folds.test_fold)

    def test_planted_layer_recovery(self):
        """Test that the planted layer has the top mean SS in at least 9 of 10 seeds."""
        hits = 0
        for seed in range(10):
            with tempfile.TemporaryDirectory() as tmp:
                root = Path(tmp)
                manifest = _cohort(root, seed)
                result = _train(manifest, root, seed)
                analysis = run_layer_analysis(result.scorer, manifest, root, pairs=False, seed=seed, n_boot=100)
                hits += analysis.saliency.ranking()[0] == int(Layer.DFM)
        self.assertGreaterEqual(hits, 9)

    def test_classifier_auc(self):
        """Test side-level AUC of at least 0.9 with a planted effect and near chance without one."""
        planted = evaluate(self.result.scorer, self.manifest, self.root, Scenario.SIDE_MP, "bmode",
                           self._test_patients())
        self.assertGreaterEqual(planted.node_auc, 0.90)
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            manifest = _cohort(root, seed=1, delta=0.0)
            result = _train(manifest, root, seed=1)
            null = evaluate(result.scorer, manifest, root, Scenario.SIDE_MP, "bmode",
                            result.folds.patients_in(result.folds.test_fold))
        self.assertTrue(0.4 <= null.node_auc <= 0.6)

    def test_layer_beats_random(self):
        """Test that on MP-positive sides LAYER beats the averaged random baseline on insertion AUC in 95% of scans."""
        patients = self._test_patients()
        comparison = compare_methods(self.result.scorer, self.manifest, self.root, [Method.LAYER, Method.RANDOM],
                                     patients=patients)
        positive = {ref.key for ref in build_samples(self.manifest, Scenario.SIDE_MP, "bmode", patients)
                    if ref.target == 1}
        layer = [r for r in comparison.results[Method.LAYER] if r.key in positive]
        random = [r for r in comparison.results[Method.RANDOM] if r.key in positive]
        self.assertGreaterEqual(len(layer), 10)
        wins = sum(a.auc_ins > b.auc_ins for a, b in zip(layer, random))
        self.assertGreaterEqual(wins / len(layer), 0.95)
        test = compare_results(layer, random)["auc_ins"]
        self.assertGreater(test.mean_difference, 0)
        self.assertLess(test.p, 0.01)

    def test_sanity_collapse(self):
        """Test that a randomized scorer's mean SS is at most a tenth of the trained one."""
        check = sanity_randomization(self.result.scorer, self.manifest, self.root, seed=7,
                                     patients=self._test_patients(), n_boot=100)
        self.assertLessEqual(check.result.randomized_mean_ss, 0.1 * check.result.trained_mean_ss)

    def test_planted_association(self):
        """Test that the planted layer's PDSS passes the directional criterion on a cohort with side variability."""
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            manifest = _cohort(root, seed=2, bmode_reps=1, swe_reps=0, side_variability=1.0)
            analysis = run_layer_analysis(self.result.scorer, manifest, root, pairs=False, n_boot=100)
        rows = run_association(side_directional_scores(analysis.scans))
        planted = next(r for r in rows if r.layer == int(Layer.DFM) and r.kind == "PDSS")
        self.assertIsNone(planted.error)
        self.assertGreater(planted.beta1, 0)
        self.assertTrue(planted.passed)

    def test_association_false_positives(self):
        """Test a per-row pass rate of at most 7% on null cohorts over 100 replicates."""
        rng = np.random.default_rng(3)
        passed, total = 0, 0
        for replicate in range(100):
            with tempfile.TemporaryDirectory() as tmp:
                root = Path(tmp)
                manifest = _cohort(root, seed=100 + replicate, delta=0.0, bmode_reps=1, swe_reps=0)
                masks = read_mask(root / manifest.scans[0].mask_file)
                scorer = AnalyticScorer(rng.normal(size=6), 0.0, masks)
                analysis = run_layer_analysis(scorer, manifest, root, pairs=False, n_boot=10)
                rows = run_association(side_directional_scores(analysis.scans))
            passed += sum(r.passed for r in rows)
            total += len(rows)
        self.assertLessEqual(passed / total, 0.07)


class TestCommandLineDefaults(unittest.TestCase):
    """
    The planted studies above train on 16^3 grids with lr 1e-3 and a 32-unit hidden layer so that
    the ten-seed recovery study stays affordable. This study runs phantom and train with their
    command-line defaults (64x64x32 grids, lr 1e-4, 64 hidden units) on a smaller cohort and
    checks a reduced criterion: the loss falls and the scorer separates the sides it was fitted on.
    """

    def setUp(self) -> None:
        if not STUDIES:
            self.skipTest("Only for study runs.")

    def test_defaults_learn_the_planted_layer(self):
        """Test that default training lowers the loss and reaches an in-sample side AUC of at least 0.8."""
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            data, model = root / "data", root / "model"
            with redirect_stdout(io.StringIO()), redirect_stderr(io.StringIO()):
                self.assertEqual(main(["phantom", "--out", str(data), "--patients", "12", "--seed", "0"]), 0)
                self.assertEqual(main(["train", "--data", str(data), "--out", str(model), "--seed", "0"]), 0)
            document = json.loads((model / "train.json").read_text())
            self.assertEqual(document["provenance"]["config"]["train"]["lr"], 1e-4)
            losses = [row["loss"] for row in document["log"]]
            self.assertEqual(len(losses), 30)
            self.assertLess(losses[-1], losses[0])
            scorer = load_checkpoint(model / "model.lckp")
            fitted = evaluate(scorer, read_manifest(data / "manifest.json"), data, Scenario.SIDE_MP, "bmode")
        self.assertGreaterEqual(fitted.node_auc, 0.8)

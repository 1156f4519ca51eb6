import tempfile
import unittest
from pathlib import Path

import numpy as np
from ddt import data, ddt, unpack
from helpers import CohortDirectory

from layer.aggregate import (
    Level,
    aggregate,
    build_hierarchy,
    flag_incomplete,
    make_folds,
    patient_nodes,
    read_folds,
    write_folds,
)
from layer.cohort import ScanLabel, Scenario, patient_labels, side_labels
from layer.dataset import build_samples
from layer.errors import ConfigError, DomainError, FormatError, StructuralError


@ddt
class TestAggregate(unittest.TestCase):
    """Tests for hierarchical aggregation of predictions."""

    @classmethod
    def setUpClass(cls) -> None:
        super(TestAggregate, cls).setUpClass()
        cls.cohort = CohortDirectory(patients=6, bmode_reps=3, swe_reps=1)
        cls.manifest = cls.cohort.manifest

    @classmethod
    def tearDownClass(cls) -> None:
        cls.cohort.cleanup()

    def _probabilities(self, scenario=Scenario.SIDE_MP, manifest=None):
        samples = build_samples(manifest or self.manifest, scenario, "bmode")
        rng = np.random.default_rng(0)
        return {s.key: float(rng.random()) for s in samples}

    @data(([0.2, 0.4, 0.6], 0.4), ([0.7], 0.7), ([0.0, 1.0], 0.5))
    @unpack
    def test_aggregate(self, values, expected):
        """Test the arithmetic mean of children."""
        self.assertAlmostEqual(aggregate(values), expected)

    @data([], [0.5, 1.5], [-0.1])
    def test_aggregate_errors(self, values):
        """Test that empty sets and values outside [0, 1] are refused."""
        with self.assertRaises(DomainError):
            aggregate(values)

    def test_side_hierarchy(self):
        """Test one node per (patient, visit, side) with three repetitions per site."""
        nodes = build_hierarchy(self.manifest, Scenario.SIDE_MP)
        self.assertEqual(len(nodes), 6 * 2 * 2)
        sides = side_labels(self.manifest.scans)
        for node in nodes:
            self.assertIs(node.level, Level.SIDE)
            self.assertEqual(len(node.children), 2)
            self.assertTrue(all(len(site.children) == 3 for site in node.children))
            patient, visit, side = node.key.split("/")
            self.assertEqual(node.target, int(sides[(patient, int(visit[1:]), side)].is_mp))
        self.assertEqual(flag_incomplete(nodes), [])

    def test_trigger_targets(self):
        """Test that tender-point sides are negatives in the trigger scenario."""
        nodes = build_hierarchy(self.manifest, Scenario.SIDE_TRIGGER)
        sides = side_labels(self.manifest.scans)
        for node in nodes:
            patient, visit, side = node.key.split("/")
            self.assertEqual(node.target, int(sides[(patient, int(visit[1:]), side)] is ScanLabel.TRIGGER_MP))

    def test_visit_hierarchy(self):
        """Test visit nodes over repetitions that span both sides and sites."""
        nodes = build_hierarchy(self.manifest, Scenario.VISIT_MP)
        self.assertEqual(len(nodes), 6 * 2)
        for node in nodes:
            self.assertIs(node.level, Level.VISIT)
            self.assertEqual(len(node.children), 3)
            self.assertTrue(all(len(rep.children) == 4 for rep in node.children))

    def test_merged_visits(self):
        """Test that merging visits yields one node per (patient, side)."""
        nodes = build_hierarchy(self.manifest, Scenario.SIDE_MP, merge_visits=True)
        self.assertEqual(len(nodes), 6 * 2)
        self.assertTrue(all(len(node.children) == 2 for node in nodes))

    def test_balanced_mean(self):
        """Test that a balanced tree averages to the flat mean of its scans."""
        probabilities = self._probabilities()
        for node in build_hierarchy(self.manifest, Scenario.SIDE_MP):
            flat = np.mean([probabilities[leaf.key] for leaf in node.leaves()])
            self.assertAlmostEqual(node.evaluate(probabilities), flat, places=12)

    def test_missing_repetition(self):
        """Test that a missing repetition averages over the present children and is flagged."""
        dropped = next(s for s in self.manifest.scans if s.modality == "bmode" and s.repetition == 2)
        manifest = self.manifest.model_copy(update={"scans": [s for s in self.manifest.scans if s is not dropped]})
        probabilities = self._probabilities(manifest=manifest)
        nodes = build_hierarchy(manifest, Scenario.SIDE_MP)
        flagged = flag_incomplete(nodes)
        side_key = f"{dropped.patient_id}/v{dropped.visit}/{dropped.side}"
        self.assertEqual(flagged, [side_key])
        node = next(n for n in nodes if n.key == side_key)
        site = next(c for c in node.children if c.key.endswith(dropped.site))
        self.assertEqual(len(site.children), 2)
        node.evaluate(probabilities)
        expected = np.mean([probabilities[leaf.key] for leaf in site.children])
        self.assertAlmostEqual(site.probability, expected, places=12)

    def test_missing_site(self):
        """Test that a declared site without B-mode scans is a structural error."""
        site_key = self.manifest.scans[0].site_key
        scans = [s for s in self.manifest.scans if not (s.site_key == site_key and s.modality == "bmode")]
        manifest = self.manifest.model_copy(update={"scans": scans})
        with self.assertRaisesRegex(StructuralError, "declared sites"):
            build_hierarchy(manifest, Scenario.SIDE_MP)

    def test_missing_prediction(self):
        """Test that evaluating without a scan's probability lists the gap."""
        probabilities = self._probabilities()
        node = build_hierarchy(self.manifest, Scenario.SIDE_MP)[0]
        missing = node.leaves()[0].key
        del probabilities[missing]
        with self.assertRaisesRegex(StructuralError, missing):
            node.evaluate(probabilities)

    def test_patient_nodes(self):
        """Test the roll-up to patients and their MP targets."""
        status = patient_labels(self.manifest.scans)
        nodes = patient_nodes(build_hierarchy(self.manifest, Scenario.VISIT_MP), self.manifest)
        self.assertEqual([n.key for n in nodes], sorted(status))
        for node in nodes:
            self.assertEqual(node.target, int(status[node.key]))
            self.assertEqual(len(node.children), 2)

    def test_patient_subset(self):
        """Test that restricting to some patients reports no false gaps."""
        keep = self.manifest.patients[:2]
        nodes = build_hierarchy(self.manifest, Scenario.SIDE_MP, patients=keep)
        self.assertEqual(len(nodes), 2 * 2 * 2)
        self.assertEqual({n.key.split("/")[0] for n in nodes}, set(keep))


@ddt
class TestFolds(unittest.TestCase):
    """Tests for patient-level fold assignment."""

    @classmethod
    def setUpClass(cls) -> None:
        super(TestFolds, cls).setUpClass()
        cls.cohort = CohortDirectory(patients=6, bmode_reps=1, swe_reps=0)
        cls.manifest = cls.cohort.manifest

    @classmethod
    def tearDownClass(cls) -> None:
        cls.cohort.cleanup()

    def test_every_patient_once(self):
        """Test that each patient belongs to exactly one fold."""
        folds = make_folds(self.manifest, k=3, seed=1)
        self.assertEqual(sorted(folds.folds), self.manifest.patients)
        self.assertEqual(set(folds.folds.values()), {0, 1, 2})

    def test_stratified(self):
        """Test that MP and control patients are spread evenly over folds."""
        status = patient_labels(self.manifest.scans)
        folds = make_folds(self.manifest, k=3, seed=4)
        for fold in range(3):
            members = folds.patients_in(fold)
            self.assertEqual(sum(status[p] for p in members), 1)
            self.assertEqual(len(members), 2)

    @data(0, 1, 2)
    def test_deterministic(self, seed):
        """Test that the same seed gives the same folds."""
        self.assertEqual(make_folds(self.manifest, 3, seed), make_folds(self.manifest, 3, seed))

    def test_split_excludes_test_fold(self):
        """Test that the held-out fold is in neither training nor validation."""
        folds = make_folds(self.manifest, k=3, seed=0)
        self.assertEqual(folds.test_fold, 2)
        self.assertEqual(folds.cv_folds, [0, 1])
        train, validation = folds.split(0)
        self.assertFalse(train & validation)
        self.assertFalse((train | validation) & folds.patients_in(2))
        with self.assertRaises(DomainError):
            folds.split(2)

    def test_without_holdout(self):
        """Test that every fold is a cross-validation fold without a held-out test fold."""
        folds = make_folds(self.manifest, k=3, seed=0, holdout=False)
        self.assertIsNone(folds.test_fold)
        self.assertEqual(folds.cv_folds, [0, 1, 2])

    @data(1, 7)
    def test_invalid_k(self, k):
        """Test that too few folds or too few patients are configuration errors."""
        with self.assertRaises(ConfigError):
            make_folds(self.manifest, k=k)

    def test_fold_file(self):
        """Test that fold assignments are written and read back."""
        folds = make_folds(self.manifest, k=3, seed=2)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "folds.json"
            write_folds(path, folds)
            self.assertEqual(read_folds(path), folds)
            path.write_text("[1, 2")
            with self.assertRaises(FormatError):
                read_folds(path)

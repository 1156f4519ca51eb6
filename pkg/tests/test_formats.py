import json
import tempfile
import unittest
from pathlib import Path

import numpy as np
from ddt import data, ddt
from helpers import layered_volume, random_volume, slice_masks

from layer.cohort import CohortManifest, ScanLabel, ScanRecord
from layer.errors import FormatError, ManifestError
from layer.formats import read_manifest, read_mask, read_volume, write_manifest, write_mask, write_volume
from layer.volume import Modality, VolumeGrid


def _record(**overrides) -> dict:
    record = dict(patient_id="P001", visit=1, side="left", site="MF", repetition=1, modality="bmode",
                  label="control", volume_file="volumes/a.lvol", mask_file="masks/a.lmsk")
    record.update(overrides)
    return record


@ddt
class TestFormats(unittest.TestCase):
    """Tests for the LVOL, LMSK and manifest formats."""

    def setUp(self) -> None:
        self._tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self._tmp.name)
        unittest.TestCase.setUp(self)

    def tearDown(self) -> None:
        self._tmp.cleanup()

    @data(Modality.BMODE, Modality.SWE)
    def test_volume_file_layout(self, modality):
        """Test the header fields and the float32 payload, x fastest."""
        volume = random_volume((3, 2, 4), seed=1, modality=modality)
        path = self.dir / "v.lvol"
        write_volume(path, volume)
        raw = path.read_bytes()
        self.assertEqual(raw[:4], b"LVOL")
        self.assertEqual(len(raw), 21 + 3 * 2 * 4 * 4)
        self.assertEqual(raw[20], int(modality))
        first_row = np.frombuffer(raw, dtype="<f4", count=3, offset=21)
        np.testing.assert_array_equal(first_row, volume.voxels[0, 0, :])
        self.assertEqual(read_volume(path), volume)

    def test_float64_volume_round_trip(self):
        """Test that a grid built from float64 values is held as float32 and reads back equal."""
        values = np.random.default_rng(3).normal(size=(4, 2, 3))
        volume = VolumeGrid((3, 2, 4), values)
        self.assertEqual(volume.voxels.dtype, np.float32)
        path = self.dir / "f64.lvol"
        write_volume(path, volume)
        self.assertEqual(read_volume(path), volume)
        np.testing.assert_array_equal(read_volume(path).voxels, values.astype(np.float32))

    def test_mask_file(self):
        """Test that masks are written one byte per voxel and read back equal."""
        masks = slice_masks()
        path = self.dir / "m.lmsk"
        write_mask(path, masks)
        self.assertEqual(len(path.read_bytes()), 21 + 4 * 4 * 7)
        self.assertEqual(read_mask(path), masks)

    def test_truncated_volume(self):
        """Test that a short payload is reported with its offset."""
        path = self.dir / "v.lvol"
        write_volume(path, layered_volume(slice_masks(), [0, 1, 2, 3, 4, 5, 6]))
        path.write_bytes(path.read_bytes()[:-3])
        with self.assertRaisesRegex(FormatError, "truncated") as ctx:
            read_volume(path)
        self.assertEqual(ctx.exception.offset, 21 + 112 * 4 - 3)

    def test_truncated_header(self):
        """Test that a file shorter than the header is refused."""
        path = self.dir / "v.lvol"
        path.write_bytes(b"LVOL\x01")
        with self.assertRaisesRegex(FormatError, "header"):
            read_volume(path)

    def test_bad_magic(self):
        """Test that a mask file is not accepted as a volume."""
        path = self.dir / "m.lmsk"
        write_mask(path, slice_masks())
        with self.assertRaisesRegex(FormatError, "magic") as ctx:
            read_volume(path)
        self.assertEqual(ctx.exception.offset, 0)

    def test_invalid_mask_code(self):
        """Test that a label above 6 is reported at its byte offset."""
        path = self.dir / "m.lmsk"
        write_mask(path, slice_masks())
        raw = bytearray(path.read_bytes())
        raw[21 + 5] = 9
        path.write_bytes(bytes(raw))
        with self.assertRaisesRegex(FormatError, "Invalid layer code 9") as ctx:
            read_mask(path)
        self.assertEqual(ctx.exception.offset, 26)

    def test_manifest_round_trip(self):
        """Test that a manifest is written and validated back."""
        manifest = CohortManifest(scans=[ScanRecord(**_record())], seed=4, dims=(4, 4, 7))
        path = self.dir / "manifest.json"
        write_manifest(path, manifest)
        self.assertEqual(read_manifest(path, check_files=False), manifest)

    def test_manifest_missing_files(self):
        """Test that referenced files must exist next to the manifest."""
        manifest = CohortManifest(scans=[ScanRecord(**_record())], seed=4, dims=(4, 4, 7))
        path = self.dir / "manifest.json"
        write_manifest(path, manifest)
        with self.assertRaisesRegex(ManifestError, "missing"):
            read_manifest(path)

    def test_manifest_duplicate_scan(self):
        """Test that two scans with the same tuple are refused."""
        path = self.dir / "manifest.json"
        path.write_text(json.dumps({"scans": [_record(), _record(volume_file="volumes/b.lvol")], "seed": 0,
                                    "dims": [4, 4, 7]}))
        with self.assertRaisesRegex(ManifestError, "duplicate"):
            read_manifest(path, check_files=False)

    @data({"side": "middle"}, {"site": "XX"}, {"visit": 3}, {"label": "maybe"}, {"modality": "ct"})
    def test_manifest_invalid_record(self, override):
        """Test that records with values outside their domain are refused."""
        path = self.dir / "manifest.json"
        path.write_text(json.dumps({"scans": [_record(**override)], "seed": 0, "dims": [4, 4, 7]}))
        with self.assertRaises(ManifestError):
            read_manifest(path, check_files=False)

    def test_manifest_not_json(self):
        """Test that a malformed document is a format error."""
        path = self.dir / "manifest.json"
        path.write_text("{\"scans\": [")
        with self.assertRaises(FormatError):
            read_manifest(path, check_files=False)

    def test_scan_label_values(self):
        """Test the manifest spelling of clinical labels."""
        self.assertEqual(ScanRecord(**_record(label="triggerMP")).label, ScanLabel.TRIGGER_MP)

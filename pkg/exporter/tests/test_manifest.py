import json

import numpy as np
import pytest

from sam_export.manifest import (
    ExportManifest,
    ManifestError,
    load_manifest,
    rle_decode,
    rle_encode,
    verify_manifest,
)


class TestRle:
    def test_examples(self):
        assert rle_encode(np.array([[0, 1, 1, 0]], dtype=bool)) == [1, 2, 1]
        assert rle_encode(np.zeros((1, 2), dtype=bool)) == [2]
        assert rle_encode(np.ones((1, 2), dtype=bool)) == [0, 2]

    def test_round_trip_random(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            h, w = rng.integers(1, 24, size=2)
            mask = rng.random((h, w)) < rng.uniform(0.05, 0.95)
            counts = rle_encode(mask)
            np.testing.assert_array_equal(rle_decode(counts, int(w), int(h)), mask)

    def test_sum_mismatch(self):
        with pytest.raises(ManifestError):
            rle_decode([1, 1], 4, 1)


def write_valid_manifest(path, width=6, height=4):
    manifest = ExportManifest(image_id="img0", width=width, height=height)
    mask = np.zeros((height, width), dtype=bool)
    mask[1:3, 2:5] = True
    manifest.add_mask(mask, confidence=0.9, stability=0.97)
    manifest.add_mask(~mask, confidence=0.4, stability=None)
    manifest.write(path)
    return manifest


class TestVerify:
    def test_valid_file_ok(self, tmp_path):
        path = tmp_path / "m.json"
        write_valid_manifest(path)
        assert verify_manifest(path) == []

    def test_rle_sum_off_by_one_names_proposal(self, tmp_path):
        path = tmp_path / "m.json"
        write_valid_manifest(path)
        payload = json.loads(path.read_text())
        payload["proposals"][1]["rle"][-1] += 1
        path.write_text(json.dumps(payload))
        problems = verify_manifest(path)
        assert any(p.startswith("/proposals/1/rle") for p in problems)

    def test_confidence_range_error(self, tmp_path):
        path = tmp_path / "m.json"
        write_valid_manifest(path)
        payload = json.loads(path.read_text())
        payload["proposals"][0]["confidence"] = 1.2
        path.write_text(json.dumps(payload))
        problems = verify_manifest(path)
        assert any("confidence" in p and "outside" in p for p in problems)

    def test_missing_field(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text(json.dumps({"image_id": "x", "width": 2, "proposals": []}))
        assert any(p.startswith("/height") for p in verify_manifest(path))

    def test_load_round_trip(self, tmp_path):
        path = tmp_path / "m.json"
        written = write_valid_manifest(path)
        loaded = load_manifest(path)
        assert loaded.image_id == written.image_id
        assert [p.rle for p in loaded.proposals] == [p.rle for p in written.proposals]
        assert loaded.proposals[1].stability is None

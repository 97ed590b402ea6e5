"""Round trip against the primary pipeline over the file interfaces.

Covers the exporter-side acceptance: exported manifests validate, the
primary's proposals-dir backend decodes bit-identical masks, and the
primary `segment` command runs to completion over the exported proposals.
"""

import shutil
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from sam_export.export import SyntheticPredictor, export_image, export_proposals, point_grid
from sam_export.manifest import verify_manifest

mscl_segmenter = pytest.importorskip(
    "mscl.segmenter", reason="primary package needed for the round-trip check"
)


def save_png(pixels, path):
    levels = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(levels, mode="L").save(path)


def fixture_image(seed, size=48):
    rng = np.random.default_rng(seed)
    canvas = np.full((size, size), 0.06)
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.integers(8, size - 8, size=2)
        r = int(rng.integers(3, 6))
        yy, xx = np.ogrid[:size, :size]
        canvas[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = float(rng.uniform(0.85, 0.97))
    return np.clip(canvas + rng.uniform(-0.01, 0.01, (size, size)), 0, 1)


@pytest.fixture(scope="module")
def exported(tmp_path_factory):
    root = tmp_path_factory.mktemp("roundtrip")
    images = root / "images"
    images.mkdir()
    pixel_maps = {}
    for i in range(5):
        pixels = fixture_image(40 + i)
        name = f"fixture{i}"
        save_png(pixels, images / f"{name}.png")
        pixel_maps[name] = pixels
    out = root / "manifests"
    summary = export_proposals(images, out, SyntheticPredictor(), grid_size=6)
    assert not summary.failures
    return images, out, pixel_maps, summary.manifests


class TestExporterAcceptance:
    def test_manifests_validate(self, exported):
        _, _, _, manifests = exported
        assert len(manifests) == 5
        for manifest in manifests:
            problems = verify_manifest(manifest)
            assert problems == [], problems
        print("[ACCEPT] exporter round trip: manifests pass verify_manifest")

    def test_primary_backend_decodes_bit_identical(self, exported):
        images_dir, manifests_dir, pixel_maps, _ = exported
        predictor = SyntheticPredictor()
        backend = mscl_segmenter.ProposalsDirBackend(manifests_dir)
        for name, pixels in pixel_maps.items():
            # the PNG round trip quantizes intensities; recompute from the file
            image = mscl_segmenter.load_gray_png(images_dir / f"{name}.png")
            replayed = backend.propose(image, [], image_id=name)
            expected = []
            for point in point_grid(image.width, image.height, 6):
                for logits, _ in predictor.predict(image.pixels, point):
                    mask = logits > 0.0
                    if mask.any():
                        expected.append(mask)
            assert len(replayed) == len(expected)
            for got, want in zip(replayed, expected):
                np.testing.assert_array_equal(got.mask, want)
        print("[ACCEPT] exporter round trip: primary decodes bit-identical masks")

    def test_primary_segment_cli_exit_zero(self, exported, tmp_path):
        images_dir, manifests_dir, _, _ = exported
        out_dir = tmp_path / "segmented"
        result = subprocess.run(
            [
                sys.executable, "-m", "mscl.cli", "segment",
                "--images", str(images_dir), "--out", str(out_dir),
                "--backend", "proposals-dir", "--proposals", str(manifests_dir),
            ],
            capture_output=True,
            text=True,
        )
        assert result.returncode == 0, result.stderr
        assert len(list(out_dir.glob("*.png"))) == 5
        print("[ACCEPT] exporter round trip: primary segment exits 0 over exported proposals")

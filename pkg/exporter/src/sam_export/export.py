"""Everything-mode proposal export.

A grid of point prompts covers each image; a mask predictor turns every
prompt into candidate mask logits with confidences. Proposals are exported
raw (no confidence/stability/NMS filtering) so the consumer keeps full
control of the filtering path; stability is precomputed here from the
logits because the manifest format does not carry them.

Two predictors are available: the pretrained interactive segmentation
model (loaded lazily; needs its weights on disk), and a deterministic
synthetic predictor used by the test suite and for dry runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
from PIL import Image

from .manifest import ExportManifest, SetupError

MASK_THRESHOLD = 0.0
STABILITY_OFFSET = 1.0


def load_gray(path: str | Path) -> np.ndarray:
    """8-bit grayscale PNG as float64 intensities in [0, 1]."""
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.float64) / 255.0


def point_grid(width: int, height: int, grid_size: int) -> list[tuple[int, int]]:
    """Cell-center prompts in row-major order, floored to pixel coordinates."""
    points = []
    for j in range(grid_size):
        y = int((j + 0.5) * height / grid_size)
        for i in range(grid_size):
            x = int((i + 0.5) * width / grid_size)
            points.append((x, y))
    return points


def stability_from_logits(logits: np.ndarray, offset: float = STABILITY_OFFSET) -> float:
    """IoU of the masks thresholded at +/- offset around the mask threshold."""
    high = logits > MASK_THRESHOLD + offset
    low = logits > MASK_THRESHOLD - offset
    union = int(np.logical_or(high, low).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(high, low).sum()) / union


class MaskPredictor(Protocol):
    name: str

    def predict(
        self, image: np.ndarray, point: tuple[int, int]
    ) -> list[tuple[np.ndarray, float]]:
        """Mask logits and confidence for one point prompt."""
        ...


class SamPredictor:
    """Adapter over the pretrained promptable segmentation model.

    Imports its dependencies lazily; a missing package or checkpoint is a
    SetupError so callers can distinguish environment problems from
    per-image failures.
    """

    name = "sam"

    def __init__(self, checkpoint: str | Path, model_type: str = "vit_b"):
        checkpoint = Path(checkpoint)
        if not checkpoint.exists():
            raise SetupError(f"model checkpoint not found at {checkpoint}")
        try:
            import torch  # noqa: F401
            from segment_anything import SamPredictor as _Predictor
            from segment_anything import sam_model_registry
        except ImportError as exc:
            raise SetupError(
                f"the pretrained segmentation stack is not installed: {exc}"
            ) from exc
        model = sam_model_registry[model_type](checkpoint=str(checkpoint))
        model.eval()
        self._predictor = _Predictor(model)
        self._cached_shape = None

    def set_image(self, image: np.ndarray) -> None:
        rgb = np.repeat((image * 255.0).astype(np.uint8)[:, :, None], 3, axis=2)
        self._predictor.set_image(rgb)
        self._cached_shape = image.shape

    def predict(self, image: np.ndarray, point: tuple[int, int]):
        if self._cached_shape != image.shape:
            self.set_image(image)
        coords = np.array([[point[0], point[1]]], dtype=np.float64)
        labels = np.ones(1, dtype=np.int64)
        masks, scores, logits = self._predictor.predict(
            point_coords=coords,
            point_labels=labels,
            multimask_output=True,
            return_logits=True,
        )
        out = []
        for k in range(masks.shape[0]):
            out.append((np.asarray(masks[k], dtype=np.float64), float(np.clip(scores[k], 0.0, 1.0))))
        return out


class SyntheticPredictor:
    """Deterministic stand-in predictor for tests and dry runs.

    For each prompt it proposes the bright connected region implied by
    thresholding the image at a few levels, restricted to a disc around
    the prompt; logits fall off with intensity distance from the level.
    """

    name = "synthetic"

    levels = (0.3, 0.5, 0.7)

    def predict(self, image: np.ndarray, point: tuple[int, int]):
        h, w = image.shape
        x, y = point
        yy, xx = np.ogrid[:h, :w]
        reach = (max(h, w) / 4.0) ** 2
        near = ((yy - y) ** 2 + (xx - x) ** 2) <= reach
        out = []
        for level in self.levels:
            region = (image > level) & near
            if not region.any():
                continue
            logits = np.where(region, (image - level) * 10.0, -1e4)
            confidence = float(np.clip(image[region].mean(), 0.0, 1.0))
            out.append((logits, confidence))
        return out


@dataclass
class ExportSummary:
    manifests: list[Path]
    failures: list[tuple[Path, str]]


def export_image(image: np.ndarray, image_id: str, predictor: MaskPredictor, grid_size: int) -> ExportManifest:
    """All raw proposals for one image, one manifest."""
    height, width = image.shape
    manifest = ExportManifest(image_id=image_id, width=width, height=height)
    if hasattr(predictor, "set_image"):
        predictor.set_image(image)
    for point in point_grid(width, height, grid_size):
        for logits, confidence in predictor.predict(image, point):
            mask = logits > MASK_THRESHOLD
            if not mask.any():
                continue
            manifest.add_mask(mask, confidence, stability_from_logits(logits))
    return manifest


def export_proposals(
    image_dir: str | Path,
    out_dir: str | Path,
    predictor: MaskPredictor,
    grid_size: int = 8,
) -> ExportSummary:
    """Export a manifest per PNG; per-image failures are collected, not fatal."""
    image_dir = Path(image_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifests: list[Path] = []
    failures: list[tuple[Path, str]] = []
    for path in sorted(image_dir.glob("*.png")):
        try:
            image = load_gray(path)
            manifest = export_image(image, path.stem, predictor, grid_size)
            target = out_dir / f"{path.stem}.json"
            manifest.write(target)
            manifests.append(target)
        except SetupError:
            raise
        except Exception as exc:  # per-image failure: skip with a warning
            failures.append((path, str(exc)))
    return ExportSummary(manifests=manifests, failures=failures)

"""Everything-mode segmentation preprocessing.

A grid of point prompts covers the image, a pluggable backend proposes
candidate masks, and the proposals are filtered by confidence, threshold-
jitter stability, and mask-level non-maximum suppression. The surviving
regions keep their original intensities while everything else is attenuated,
so downstream feature extraction concentrates on the regions of interest.

Two backends ship with the package: a deterministic multi-level thresholding
backend (connected components touched by a prompt point), and a replay
backend that reads proposal manifests exported by an external segmentation
model. Both feed the same filtering and compositing path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence, runtime_checkable

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import (
    BackendError,
    EmptyInputError,
    FormatError,
    InvalidValueError,
    ShapeError,
)

THRESHOLD_LEVELS = (0.3, 0.5, 0.7)
LOGIT_SCALE = 10.0
_OUTSIDE_LOGIT = -1e4  # pinned far below any plausible jitter threshold


@dataclass(eq=False)
class GrayImage:
    """Grayscale image with row-major intensities in [0, 1]."""

    width: int
    height: int
    pixels: np.ndarray  # shape (height, width), float64

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise EmptyInputError(f"image dimensions must be positive, got {self.width}x{self.height}")
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.shape != (self.height, self.width):
            raise ShapeError(f"pixel buffer {self.pixels.shape} does not match {self.height}x{self.width}")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise InvalidValueError("pixel intensities must lie in [0, 1]")

    @classmethod
    def from_array(cls, pixels: np.ndarray) -> "GrayImage":
        pixels = np.asarray(pixels, dtype=np.float64)
        return cls(width=pixels.shape[1], height=pixels.shape[0], pixels=pixels)


@dataclass(eq=False)
class MaskLogits:
    """Per-pixel mask logits, same size as the source image."""

    width: int
    height: int
    logits: np.ndarray

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.shape != (self.height, self.width):
            raise ShapeError(f"logit buffer {self.logits.shape} does not match {self.height}x{self.width}")


@dataclass(eq=False)
class MaskProposal:
    """A binary mask candidate with its confidence and stability scores."""

    mask: np.ndarray  # bool, shape (height, width)
    confidence: float
    stability: float

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass(frozen=True)
class SegmenterConfig:
    grid_size: int = 8
    conf_threshold: float = 0.8
    stability_threshold: float = 0.85
    stability_offset: float = 1.0
    nms_iou_threshold: float = 0.7
    background_attenuation: float = 0.2

    def __post_init__(self):
        for name in ("conf_threshold", "stability_threshold", "nms_iou_threshold", "background_attenuation"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InvalidValueError(f"{name} must lie in [0, 1], got {value}")
        if self.stability_offset <= 0.0:
            raise InvalidValueError("stability_offset must be positive")
        if self.grid_size < 1:
            raise InvalidValueError("grid_size must be at least 1")


@dataclass(eq=False)
class BackendProposal:
    """Raw backend output: either mask logits, or a decoded binary mask.

    ``stability`` is optional; when absent the pipeline derives it from the
    logits, or uses 1.0 for mask-only proposals (no logits to jitter).
    """

    confidence: float
    logits: MaskLogits | None = None
    mask: np.ndarray | None = None
    stability: float | None = None

    def __post_init__(self):
        if self.logits is None and self.mask is None:
            raise InvalidValueError("a backend proposal needs logits or a mask")


@runtime_checkable
class ProposalBackend(Protocol):
    name: str

    def propose(
        self, image: GrayImage, points: Sequence[tuple[int, int]], image_id: str | None = None
    ) -> list[BackendProposal]:
        ...


# ---------------------------------------------------------------------------
# grid prompting and the builtin thresholding backend
# ---------------------------------------------------------------------------


def generate_point_grid(width: int, height: int, grid_size: int) -> list[tuple[int, int]]:
    """Cell-center prompt points in row-major order, floored to pixels."""
    if width <= 0 or height <= 0:
        raise EmptyInputError(f"cannot place prompts on a {width}x{height} image")
    if grid_size < 1:
        raise InvalidValueError("grid_size must be at least 1")
    points = []
    for j in range(grid_size):
        y = int((j + 0.5) * height / grid_size)
        for i in range(grid_size):
            x = int((i + 0.5) * width / grid_size)
            points.append((x, y))
    return points


class ThresholdBackend:
    """Deterministic stand-in segmenter: multi-level thresholding components.

    For each intensity level, pixels above the level are split into
    4-connected components; a component becomes a proposal when it contains
    at least one prompt point and does not swallow the whole image.
    Confidence is the component's mean intensity contrast against its
    4-neighbor border; logits are (pixel - level) * 10 inside the component
    and pinned far negative outside it.
    """

    name = "builtin"

    def __init__(self, levels: Sequence[float] = THRESHOLD_LEVELS):
        self.levels = tuple(float(v) for v in levels)

    def propose(
        self, image: GrayImage, points: Sequence[tuple[int, int]], image_id: str | None = None
    ) -> list[BackendProposal]:
        pixels = image.pixels
        proposals: list[BackendProposal] = []
        for level in self.levels:
            foreground = pixels > level
            if not foreground.any():
                continue
            labels, _ = ndimage.label(foreground)  # default structure = 4-connectivity
            hit = sorted({int(labels[y, x]) for (x, y) in points if foreground[y, x]})
            for lab in hit:
                component = labels == lab
                border = ndimage.binary_dilation(component) & ~component
                if not border.any():
                    continue  # component fills the image: no contrast to score
                contrast = float(pixels[component].mean() - pixels[border].mean())
                confidence = min(max(contrast, 0.0), 1.0)
                logits = np.where(component, (pixels - level) * LOGIT_SCALE, _OUTSIDE_LOGIT)
                proposals.append(
                    BackendProposal(
                        confidence=confidence,
                        logits=MaskLogits(image.width, image.height, logits),
                    )
                )
        return proposals


# ---------------------------------------------------------------------------
# mask arithmetic
# ---------------------------------------------------------------------------


def binarize(logits: MaskLogits | np.ndarray, threshold: float) -> np.ndarray:
    """Boolean mask of logits strictly above the threshold."""
    values = logits.logits if isinstance(logits, MaskLogits) else np.asarray(logits)
    return values > threshold


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two equal-size binary masks; 1.0 if both empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask sizes differ: {a.shape} vs {b.shape}")
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(a, b).sum()) / union


def stability_score(logits: MaskLogits | np.ndarray, threshold: float, offset: float) -> float:
    """IoU of the masks binarized at threshold +/- offset; 1.0 when both are empty."""
    if offset <= 0.0:
        raise InvalidValueError("stability offset must be positive")
    return mask_iou(binarize(logits, threshold + offset), binarize(logits, threshold - offset))


def mask_nms(proposals: Sequence[MaskProposal], iou_threshold: float) -> list[MaskProposal]:
    """Greedy suppression: keep a proposal iff its IoU with every kept one is <= threshold.

    Candidates are visited by confidence descending, ties broken by larger
    area and then input order; the output preserves the kept order.
    """
    order = sorted(range(len(proposals)), key=lambda i: (-proposals[i].confidence, -proposals[i].area, i))
    kept: list[MaskProposal] = []
    for i in order:
        candidate = proposals[i]
        if all(mask_iou(candidate.mask, k.mask) <= iou_threshold for k in kept):
            kept.append(candidate)
    return kept


def filter_masks(proposals: Sequence[MaskProposal], config: SegmenterConfig) -> list[MaskProposal]:
    """Confidence gate, stability gate, then mask NMS. May return nothing."""
    survivors = [
        p
        for p in proposals
        if p.confidence >= config.conf_threshold and p.stability >= config.stability_threshold
    ]
    return mask_nms(survivors, config.nms_iou_threshold)


def composite_roi(image: GrayImage, kept: Sequence[MaskProposal], attenuation: float) -> GrayImage:
    """Keep pixels under any kept mask; scale everything else by ``attenuation``."""
    if not 0.0 <= attenuation <= 1.0:
        raise InvalidValueError(f"attenuation must lie in [0, 1], got {attenuation}")
    union = np.zeros((image.height, image.width), dtype=bool)
    for p in kept:
        if p.mask.shape != union.shape:
            raise ShapeError(f"mask {p.mask.shape} does not match image {union.shape}")
        union |= p.mask
    out = np.where(union, image.pixels, image.pixels * attenuation)
    return GrayImage(image.width, image.height, out)


# ---------------------------------------------------------------------------
# the full pipeline
# ---------------------------------------------------------------------------


def propose_masks(
    image: GrayImage,
    backend: ProposalBackend,
    config: SegmenterConfig,
    image_id: str | None = None,
) -> list[MaskProposal]:
    """Grid prompts -> backend proposals -> scored MaskProposals (unfiltered).

    Empty masks are dropped here; every surviving proposal has area >= 1.
    """
    points = generate_point_grid(image.width, image.height, config.grid_size)
    try:
        raw = backend.propose(image, points, image_id=image_id)
    except BackendError:
        raise
    except Exception as exc:
        raise BackendError(f"backend '{backend.name}' failed: {exc}") from exc
    proposals = []
    for bp in raw:
        if bp.logits is not None:
            mask = binarize(bp.logits, 0.0)
            stability = bp.stability
            if stability is None:
                stability = stability_score(bp.logits, 0.0, config.stability_offset)
        else:
            mask = np.asarray(bp.mask, dtype=bool)
            stability = 1.0 if bp.stability is None else float(bp.stability)
        if mask.shape != (image.height, image.width):
            raise BackendError(
                f"backend '{backend.name}' returned a {mask.shape} mask for a "
                f"{image.height}x{image.width} image"
            )
        if not mask.any():
            continue
        proposals.append(MaskProposal(mask=mask, confidence=float(bp.confidence), stability=float(stability)))
    return proposals


def segment_with_proposals(
    image: GrayImage,
    backend: ProposalBackend,
    config: SegmenterConfig,
    image_id: str | None = None,
) -> tuple[GrayImage, list[MaskProposal]]:
    """Run the full pipeline, returning the processed image and kept masks."""
    kept = filter_masks(propose_masks(image, backend, config, image_id=image_id), config)
    return composite_roi(image, kept, config.background_attenuation), kept


def segment_image(
    image: GrayImage,
    backend: ProposalBackend,
    config: SegmenterConfig,
    image_id: str | None = None,
) -> GrayImage:
    """ROI-preserving, background-attenuated version of the input image."""
    processed, _ = segment_with_proposals(image, backend, config, image_id=image_id)
    return processed


# ---------------------------------------------------------------------------
# run-length encoding and the proposal interchange format
# ---------------------------------------------------------------------------


def rle_encode(mask: np.ndarray) -> list[int]:
    """Row-major run lengths, background first ([0,1,1,0] -> [1,2,1]).

    A mask starting with foreground gets an explicit leading zero run.
    """
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    if flat.size == 0:
        return []
    counts = []
    if flat[0]:
        counts.append(0)
    boundaries = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    previous = 0
    for b in boundaries:
        counts.append(int(b - previous))
        previous = int(b)
    counts.append(int(flat.size - previous))
    return counts


def rle_decode(counts: Sequence[int], width: int, height: int) -> np.ndarray:
    """Inverse of rle_encode; the counts must sum to width * height."""
    counts = [int(c) for c in counts]
    if any(c < 0 for c in counts):
        raise FormatError("run lengths must be nonnegative")
    total = sum(counts)
    if total != width * height:
        raise FormatError(f"run lengths sum to {total}, expected {width * height}")
    flat = np.zeros(total, dtype=bool)
    position = 0
    value = False
    for c in counts:
        if value:
            flat[position:position + c] = True
        position += c
        value = not value
    return flat.reshape(height, width)


def write_proposal_manifest(
    path: str | Path,
    image_id: str,
    width: int,
    height: int,
    proposals: Iterable[MaskProposal],
) -> None:
    """Write the JSON interchange manifest for one image's proposals."""
    payload = {
        "image_id": image_id,
        "width": width,
        "height": height,
        "proposals": [
            {
                "confidence": float(p.confidence),
                "stability": float(p.stability),
                "rle": rle_encode(p.mask),
            }
            for p in proposals
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=1) + "\n")


def read_proposal_manifest(path: str | Path) -> tuple[str, int, int, list[BackendProposal]]:
    """Load an interchange manifest; null stability is treated as 1.0."""
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    try:
        image_id = payload["image_id"]
        width = int(payload["width"])
        height = int(payload["height"])
        entries = payload["proposals"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: missing manifest field: {exc}") from exc
    proposals = []
    for entry in entries:
        stability = entry.get("stability", None)
        proposals.append(
            BackendProposal(
                confidence=float(entry["confidence"]),
                mask=rle_decode(entry["rle"], width, height),
                stability=1.0 if stability is None else float(stability),
            )
        )
    return image_id, width, height, proposals


class ProposalsDirBackend:
    """Replays proposals exported to a directory of interchange manifests.

    Each image is matched to ``<image_id>.json`` in the directory; the
    image id is supplied by the caller (the CLI uses the PNG stem).
    """

    name = "proposals-dir"

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)

    def propose(
        self, image: GrayImage, points: Sequence[tuple[int, int]], image_id: str | None = None
    ) -> list[BackendProposal]:
        if image_id is None:
            raise BackendError(f"backend '{self.name}' needs an image id to look up proposals")
        manifest = self.directory / f"{image_id}.json"
        if not manifest.exists():
            raise BackendError(f"backend '{self.name}': no manifest at {manifest}")
        try:
            manifest_id, width, height, proposals = read_proposal_manifest(manifest)
        except FormatError as exc:
            raise BackendError(f"backend '{self.name}': {exc}") from exc
        if (width, height) != (image.width, image.height):
            raise BackendError(
                f"backend '{self.name}': manifest {manifest} is {width}x{height}, "
                f"image is {image.width}x{image.height}"
            )
        return proposals


# ---------------------------------------------------------------------------
# 8-bit grayscale PNG I/O
# ---------------------------------------------------------------------------


def load_gray_png(path: str | Path) -> GrayImage:
    """Load an 8-bit grayscale PNG; intensity i maps to i / 255."""
    with Image.open(path) as img:
        gray = img.convert("L")
        arr = np.asarray(gray, dtype=np.float64) / 255.0
    return GrayImage.from_array(arr)


def save_gray_png(image: GrayImage, path: str | Path) -> None:
    """Write an 8-bit grayscale PNG; intensities round to the nearest level."""
    levels = np.clip(np.rint(image.pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(levels, mode="L").save(path, format="PNG")

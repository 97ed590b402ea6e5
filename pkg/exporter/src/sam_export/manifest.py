"""Proposal manifest interchange: RLE masks plus schema validation.

One JSON manifest per image:

    {"image_id": str, "width": int, "height": int,
     "proposals": [{"confidence": float, "stability": float|null,
                    "rle": [int, ...]}, ...]}

Masks are run-length encoded row-major with alternating background-first
runs; a mask that starts with foreground carries an explicit leading zero
run. The consumer treats a null stability as 1.0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class SetupError(RuntimeError):
    """The export environment is unusable (missing weights or dependencies)."""


class ManifestError(ValueError):
    """A manifest is structurally invalid."""


def rle_encode(mask: np.ndarray) -> list[int]:
    """Row-major background-first run lengths of a binary mask."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    if flat.size == 0:
        return []
    counts = [0] if flat[0] else []
    boundaries = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    previous = 0
    for b in boundaries:
        counts.append(int(b - previous))
        previous = int(b)
    counts.append(int(flat.size - previous))
    return counts


def rle_decode(counts: Sequence[int], width: int, height: int) -> np.ndarray:
    counts = [int(c) for c in counts]
    total = sum(counts)
    if total != width * height:
        raise ManifestError(f"run lengths sum to {total}, expected {width * height}")
    flat = np.zeros(total, dtype=bool)
    position = 0
    value = False
    for c in counts:
        if value:
            flat[position:position + c] = True
        position += c
        value = not value
    return flat.reshape(height, width)


@dataclass
class ProposalRecord:
    confidence: float
    stability: float | None
    rle: list[int]


@dataclass
class ExportManifest:
    image_id: str
    width: int
    height: int
    proposals: list[ProposalRecord] = field(default_factory=list)

    def add_mask(self, mask: np.ndarray, confidence: float, stability: float | None) -> None:
        self.proposals.append(
            ProposalRecord(
                confidence=float(confidence),
                stability=None if stability is None else float(stability),
                rle=rle_encode(mask),
            )
        )

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "width": self.width,
            "height": self.height,
            "proposals": [
                {"confidence": p.confidence, "stability": p.stability, "rle": p.rle}
                for p in self.proposals
            ],
        }

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")


def verify_manifest(path: str | Path) -> list[str]:
    """Validate one manifest file; returns a list of problems (empty = ok).

    Each problem is prefixed with a JSON-pointer-style path into the file.
    """
    path = Path(path)
    problems: list[str] = []
    try:
        payload = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        return [f"/: unreadable manifest: {exc}"]
    if not isinstance(payload, dict):
        return ["/: manifest must be a JSON object"]
    for key, kind in (("image_id", str), ("width", int), ("height", int), ("proposals", list)):
        if key not in payload:
            problems.append(f"/{key}: missing")
        elif not isinstance(payload[key], kind):
            problems.append(f"/{key}: expected {kind.__name__}")
    if problems:
        return problems
    width, height = payload["width"], payload["height"]
    if width < 1 or height < 1:
        problems.append("/width: image dimensions must be positive")
    for index, entry in enumerate(payload["proposals"]):
        pointer = f"/proposals/{index}"
        if not isinstance(entry, dict):
            problems.append(f"{pointer}: expected an object")
            continue
        confidence = entry.get("confidence")
        if not isinstance(confidence, (int, float)):
            problems.append(f"{pointer}/confidence: missing or not a number")
        elif not 0.0 <= float(confidence) <= 1.0:
            problems.append(f"{pointer}/confidence: {confidence} outside [0, 1]")
        stability = entry.get("stability", None)
        if stability is not None:
            if not isinstance(stability, (int, float)):
                problems.append(f"{pointer}/stability: not a number or null")
            elif not 0.0 <= float(stability) <= 1.0:
                problems.append(f"{pointer}/stability: {stability} outside [0, 1]")
        rle = entry.get("rle")
        if not isinstance(rle, list) or not all(isinstance(c, int) for c in rle):
            problems.append(f"{pointer}/rle: missing or not a list of integers")
            continue
        if any(c < 0 for c in rle):
            problems.append(f"{pointer}/rle: negative run length")
        elif sum(rle) != width * height:
            problems.append(
                f"{pointer}/rle: run lengths sum to {sum(rle)}, expected {width * height}"
            )
    return problems


def load_manifest(path: str | Path) -> ExportManifest:
    problems = verify_manifest(path)
    if problems:
        raise ManifestError(f"{path}: " + "; ".join(problems))
    payload = json.loads(Path(path).read_text())
    manifest = ExportManifest(
        image_id=payload["image_id"], width=payload["width"], height=payload["height"]
    )
    for entry in payload["proposals"]:
        manifest.proposals.append(
            ProposalRecord(
                confidence=entry["confidence"],
                stability=entry.get("stability"),
                rle=list(entry["rle"]),
            )
        )
    return manifest

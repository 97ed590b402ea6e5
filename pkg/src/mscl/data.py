"""Dataset loading, tokenization, splitting, and the synthetic corpus.

The synthetic generator is the desk-scale stand-in for a real chest X-ray
corpus. Each study gets per-topic states, one or two rendered grayscale
views, an indication sentence naming the queried topics, and a report
composed from fixed per-topic templates. Positive topics appear as bright
discs at topic-specific canvas positions and uncertain ones as bright
rings with a hollow core, so a contrast-based segmenter can genuinely
isolate them from background clutter and a linear patch extractor can
tell both the topics and their states apart.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError, InvalidValueError, SchemaError
from .segmenter import GrayImage, load_gray_png, save_gray_png

STATES = ("positive", "negative", "uncertain", "unmentioned")

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^a-z0-9\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace; punctuation becomes its own token."""
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


class Vocabulary:
    """Token/id bijection with fixed special slots PAD=0, BOS=1, EOS=2, UNK=3."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:4]) != SPECIAL_TOKENS:
            tokens = list(SPECIAL_TOKENS) + [t for t in tokens if t not in SPECIAL_TOKENS]
        self.id_to_token = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise InputError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.token_to_id.get(t, UNK) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def strip_specials(self, ids: Sequence[int]) -> list[int]:
        return [i for i in ids if i not in (PAD, BOS, EOS)]


def build_vocab(corpus: Iterable[str], min_freq: int = 1) -> Vocabulary:
    """Vocabulary of tokens with count >= min_freq, ordered by count then token."""
    if min_freq < 1:
        raise InvalidValueError("min_freq must be at least 1")
    counts: Counter = Counter()
    texts = 0
    for text in corpus:
        texts += 1
        counts.update(tokenize(text))
    if texts == 0 or not counts:
        raise InputError("cannot build a vocabulary from an empty corpus")
    kept = sorted(
        (t for t, c in counts.items() if c >= min_freq),
        key=lambda t: (-counts[t], t),
    )
    return Vocabulary(list(SPECIAL_TOKENS) + kept)


@dataclass(eq=False)
class Study:
    """One training example: views, indication, target report, topic states."""

    id: str
    indication: str
    report: str
    topic_states: list[str]
    image_paths: list[str] = field(default_factory=list)
    images: list[GrayImage] = field(default_factory=list)

    def __post_init__(self):
        for state in self.topic_states:
            if state not in STATES:
                raise SchemaError(f"study {self.id}: unknown state '{state}'")
        if not self.image_paths and not self.images:
            raise SchemaError(f"study {self.id}: needs at least one view")


def split_dataset(studies: Sequence[Study], seed: int) -> tuple[list[Study], list[Study], list[Study]]:
    """Deterministic 7:1:2 split: floor(0.7 M) / floor(0.1 M) / remainder."""
    total = len(studies)
    if total < 10:
        raise InputError(f"need at least 10 studies to split, got {total}")
    order = np.random.default_rng(seed).permutation(total)
    n_train = int(0.7 * total)
    n_val = int(0.1 * total)
    train = [studies[i] for i in order[:n_train]]
    val = [studies[i] for i in order[n_train:n_train + n_val]]
    test = [studies[i] for i in order[n_train + n_val:]]
    return train, val, test


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

DEFAULT_TOPICS = ("cardiomegaly", "effusion", "pneumonia", "edema", "atelectasis", "fracture")

DEFAULT_NORMAL_TEMPLATES = (
    "the cardiac silhouette is normal in size .",
    "no pleural effusion is seen .",
    "the lungs are clear of consolidation .",
    "no pulmonary edema is identified .",
    "lung volumes are well expanded .",
    "the visualized bones are intact .",
)

DEFAULT_ABNORMAL_TEMPLATES = (
    "the cardiac silhouette is enlarged .",
    "a pleural effusion is present .",
    "focal consolidation suggests pneumonia .",
    "diffuse pulmonary edema is identified .",
    "basilar atelectasis is noted .",
    "an acute rib fracture is noted .",
)

# topic disc centers as fractions of the canvas; at the default 64x64 canvas
# with the default 32-pixel patches, every topic's disc (radius + jitter)
# occupies its own disjoint window in the 32x32 within-patch offset space,
# so a shared linear patch projection followed by mean pooling over patches
# sees near-orthogonal per-topic signatures
_TOPIC_ROW_FRAC = (0.078125, 0.578125, 0.078125, 0.75, 0.25, 0.75)
_TOPIC_COL_FRAC = (0.078125, 0.25, 0.921875, 0.578125, 0.75, 0.421875)


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic corpus generator."""

    count: int = 200
    topics: tuple[str, ...] = DEFAULT_TOPICS
    normal_templates: tuple[str, ...] = DEFAULT_NORMAL_TEMPLATES
    abnormal_templates: tuple[str, ...] = DEFAULT_ABNORMAL_TEMPLATES
    abnormality_rate: float = 0.35
    image_size: int = 64
    background: float = 0.05
    blob_intensity: float = 0.9
    blob_intensity_step: float = 0.015
    positive_radius: int = 4
    uncertain_radius: int = 2
    pixel_noise: float = 0.01
    distractor_count: int = 0
    distractor_intensity: tuple[float, float] = (0.3, 0.5)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.abnormality_rate <= 1.0:
            raise InvalidValueError("abnormality_rate must lie in [0, 1]")
        if not (len(self.topics) == len(self.normal_templates) == len(self.abnormal_templates)):
            raise InputError("each topic needs one normal and one abnormal template")
        if self.count < 1:
            raise InputError("count must be positive")
        if self.image_size < 16:
            raise InputError("image_size must be at least 16")

    @property
    def n_topics(self) -> int:
        return len(self.topics)


def _sample_state(rng: np.random.Generator, rate: float) -> str:
    if rng.random() < rate:
        return "positive"
    # the side states scale with the rate so that rate 0 is all-negative
    # and rate 1 is all-positive
    side = 0.2 * min(1.0, 4.0 * rate)
    draw = rng.random()
    if draw < side:
        return "uncertain"
    if draw < 2.0 * side:
        return "unmentioned"
    return "negative"


def _paint_disc(canvas: np.ndarray, cy: int, cx: int, radius: float, intensity: float, hole: float = 0.0) -> None:
    size = canvas.shape[0]
    yy, xx = np.ogrid[:size, :size]
    dist2 = (yy - cy) ** 2 + (xx - cx) ** 2
    disc = dist2 <= radius ** 2
    if hole > 0.0:
        disc &= dist2 > hole ** 2
    canvas[disc] = np.maximum(canvas[disc], intensity)


def _paint_soft_blob(canvas: np.ndarray, cy: int, cx: int, radius: float, peak: float) -> None:
    size = canvas.shape[0]
    yy, xx = np.ogrid[:size, :size]
    dist2 = (yy - cy) ** 2 + (xx - cx) ** 2
    bump = peak * np.exp(-dist2 / (2.0 * (radius / 1.5) ** 2))
    np.maximum(canvas, bump, out=canvas)


def _render_view(spec: SynthSpec, states: Sequence[str], rng: np.random.Generator) -> GrayImage:
    size = spec.image_size
    canvas = np.full((size, size), spec.background)
    for t, state in enumerate(states):
        if state not in ("positive", "uncertain"):
            continue
        cy = int(round(_TOPIC_ROW_FRAC[t % 6] * size)) + int(rng.integers(-1, 2))
        cx = int(round(_TOPIC_COL_FRAC[t % 6] * size)) + int(rng.integers(-1, 2))
        intensity = min(spec.blob_intensity + spec.blob_intensity_step * t, 0.98)
        # positive findings render as filled discs, uncertain ones as rings
        # with a hollow core: same location, distinguishable shape
        hole = 0.0 if state == "positive" else spec.uncertain_radius
        _paint_disc(canvas, cy, cx, spec.positive_radius, intensity, hole=hole)
    for _ in range(spec.distractor_count):
        cy, cx = rng.integers(0, size, size=2)
        radius = float(rng.uniform(2.0, 4.5))
        peak = float(rng.uniform(*spec.distractor_intensity))
        _paint_soft_blob(canvas, int(cy), int(cx), radius, peak)
    if spec.pixel_noise > 0.0:
        canvas = canvas + rng.uniform(-spec.pixel_noise, spec.pixel_noise, size=(size, size))
    return GrayImage.from_array(np.clip(canvas, 0.0, 1.0))


def synth_corpus(spec: SynthSpec) -> list[Study]:
    """Fully seeded synthetic studies with consistent reports, states, and images."""
    rng = np.random.default_rng(spec.seed)
    studies = []
    for index in range(spec.count):
        states = [_sample_state(rng, spec.abnormality_rate) for _ in range(spec.n_topics)]
        queried = [t for t, s in enumerate(states) if s != "unmentioned"]
        if queried:
            names = [spec.topics[t] for t in queried]
            indication = "evaluate for " + " , ".join(names) + " ."
        else:
            indication = "routine evaluation ."
        sentences = []
        for t, state in enumerate(states):
            if state == "unmentioned":
                continue
            if state == "positive":
                sentences.append(spec.abnormal_templates[t])
            else:
                sentences.append(spec.normal_templates[t])
        report = " ".join(sentences) if sentences else "no findings to report ."
        n_views = 2 if rng.random() < 0.6 else 1
        images = [_render_view(spec, states, rng) for _ in range(n_views)]
        studies.append(
            Study(
                id=f"synth{index:05d}",
                indication=indication,
                report=report,
                topic_states=states,
                images=images,
            )
        )
    return studies


# ---------------------------------------------------------------------------
# manifest I/O
# ---------------------------------------------------------------------------


def save_corpus(studies: Sequence[Study], out_dir: str | Path) -> Path:
    """Write view PNGs plus a JSONL manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w") as handle:
        for study in studies:
            if not study.images:
                raise InputError(f"study {study.id} has no loaded images to save")
            paths = []
            for k, image in enumerate(study.images):
                rel = f"images/{study.id}_{k}.png"
                save_gray_png(image, out_dir / rel)
                paths.append(rel)
            study.image_paths = paths
            record = {
                "id": study.id,
                "images": paths,
                "indication": study.indication,
                "report": study.report,
                "topic_states": study.topic_states,
            }
            handle.write(json.dumps(record) + "\n")
    return manifest


def load_dataset(manifest_path: str | Path, n_topics: int | None = None) -> list[Study]:
    """Parse a JSONL manifest and eagerly load every referenced view."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest at {manifest_path}")
    base = manifest_path.parent
    studies = []
    with open(manifest_path, "r") as handle:
        for number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"line {number}: not valid JSON: {exc}") from exc
            for key in ("id", "images", "indication", "report", "topic_states"):
                if key not in record:
                    raise SchemaError(f"line {number}: missing field '{key}'")
            states = record["topic_states"]
            for state in states:
                if state not in STATES:
                    raise SchemaError(
                        f"line {number}: state '{state}' is not one of {', '.join(STATES)}"
                    )
            if n_topics is not None and len(states) != n_topics:
                raise SchemaError(
                    f"line {number}: expected {n_topics} topic states, got {len(states)}"
                )
            if not record["images"]:
                raise SchemaError(f"line {number}: study lists no images")
            images = []
            for rel in record["images"]:
                path = base / rel
                if not path.exists():
                    raise FileNotFoundError(f"study {record['id']}: missing image {path}")
                images.append(load_gray_png(path))
            studies.append(
                Study(
                    id=record["id"],
                    indication=record["indication"],
                    report=record["report"],
                    topic_states=list(states),
                    image_paths=list(record["images"]),
                    images=images,
                )
            )
    if not studies:
        raise InputError(f"{manifest_path}: manifest holds no studies")
    return studies

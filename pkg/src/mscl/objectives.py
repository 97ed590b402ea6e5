"""Training objectives: classification, generation, and contrastive losses.

The contrastive term is image-anchored: each projected image is contrasted
against every projected report in the batch. The matching report is the
positive; reports whose abnormality label equals the anchor's are
semantically-close negatives and their contribution to the denominator is
weighted by theta. With theta = 1 the loss reduces exactly to standard
image-to-text InfoNCE, which the tests pin down.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

from . import autodiff as ad
from .data import PAD
from .errors import EmptyTargetError, InputError, ParameterError, ShapeError

LABEL_MODES = ("exact", "overlap")


def one_hot(indices: Sequence[int], depth: int) -> np.ndarray:
    """Dense one-hot rows for a sequence of class indices."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= depth):
        raise ShapeError(f"index out of range for depth {depth}")
    out = np.zeros((indices.size, depth))
    out[np.arange(indices.size), indices] = 1.0
    return out


def classification_loss(state_probs: ad.Tensor, state_targets: ad.Tensor) -> ad.Tensor:
    """Mean cross entropy of the per-topic state distributions."""
    return ad.cross_entropy_rows(state_probs, state_targets)


def generation_loss(word_probs: ad.Tensor, word_targets: ad.Tensor) -> ad.Tensor:
    """Cross entropy over non-PAD target positions only.

    Positions whose target row is one-hot at PAD are excluded from the
    average, so appending padding never changes the loss.
    """
    targets = word_targets.data
    if targets.ndim != 2 or word_probs.shape != word_targets.shape:
        raise ShapeError(
            f"prediction/label shapes differ: {word_probs.shape} vs {word_targets.shape}"
        )
    keep = [i for i in range(targets.shape[0]) if targets[i, PAD] != 1.0]
    if not keep:
        raise EmptyTargetError("every target position is padding")
    if len(keep) == targets.shape[0]:
        return ad.cross_entropy_rows(word_probs, word_targets)
    kept_probs = ad.gather_rows(word_probs, keep)
    kept_targets = ad.Tensor(targets[keep])
    return ad.cross_entropy_rows(kept_probs, kept_targets)


class ContrastiveHead:
    """Two projection MLPs (linear, ReLU, linear) for images and reports."""

    def __init__(self, dim: int, proj_dim: int | None = None, seed: int = 0):
        proj_dim = proj_dim or dim
        rng = np.random.default_rng(seed)
        self.named_params: dict[str, ad.Tensor] = {}

        def xavier(name, d_in, d_out):
            bound = math.sqrt(6.0 / (d_in + d_out))
            t = ad.Tensor(rng.uniform(-bound, bound, size=(d_in, d_out)), requires_grad=True)
            self.named_params[name] = t
            return t

        def zeros(name, size):
            t = ad.Tensor(np.zeros(size), requires_grad=True)
            self.named_params[name] = t
            return t

        self.weights = {}
        for side in ("img", "txt"):
            self.weights[side] = (
                xavier(f"contrastive.{side}.fc1.w", dim, dim),
                zeros(f"contrastive.{side}.fc1.b", dim),
                xavier(f"contrastive.{side}.fc2.w", dim, proj_dim),
                zeros(f"contrastive.{side}.fc2.b", proj_dim),
            )

    def _project(self, side: str, pooled: ad.Tensor) -> ad.Tensor:
        w1, b1, w2, b2 = self.weights[side]
        row = ad.reshape(pooled, (1, pooled.shape[0]))
        hidden = ad.relu(ad.add(ad.matmul(row, w1), b1))
        out = ad.add(ad.matmul(hidden, w2), b2)
        return ad.reshape(out, (out.shape[1],))

    def project(self, pooled_image: ad.Tensor, pooled_text: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
        """Project mean-pooled image and text states into the contrast space."""
        return self._project("img", pooled_image), self._project("txt", pooled_text)


def contrastive_project(
    pooled_image: ad.Tensor, pooled_text: ad.Tensor, head: ContrastiveHead
) -> tuple[ad.Tensor, ad.Tensor]:
    return head.project(pooled_image, pooled_text)


def report_label(topic_states: Sequence[str]) -> frozenset:
    """A report's label: the set of topics whose state is positive."""
    return frozenset(t for t, s in enumerate(topic_states) if s == "positive")


def same_label(a: Hashable, b: Hashable, mode: str = "exact") -> bool:
    """Label equality for the contrastive grouping.

    ``exact`` compares labels directly. ``overlap`` treats two abnormality
    sets as the same group when they intersect (or are both empty, so
    all-normal reports still group together).
    """
    if mode == "exact":
        return a == b
    if mode == "overlap":
        sa, sb = frozenset(a), frozenset(b)
        if not sa and not sb:
            return True
        return bool(sa & sb)
    raise ParameterError(f"unknown label mode '{mode}'")


@dataclass(eq=False)
class ContrastiveBatch:
    """Projected pairs, their labels, and the loss temperature/weighting."""

    z_img: list[ad.Tensor]
    z_txt: list[ad.Tensor]
    labels: list[Hashable]
    tau: float = 0.5
    theta: float = 2.0
    label_mode: str = "exact"

    def __post_init__(self):
        if not self.z_img:
            raise InputError("contrastive batch must hold at least one pair")
        if not (len(self.z_img) == len(self.z_txt) == len(self.labels)):
            raise ShapeError("z_img, z_txt, and labels must have equal lengths")
        if self.tau <= 0.0:
            raise ParameterError(f"temperature must be positive, got {self.tau}")
        if self.theta < 0.0:
            raise ParameterError(f"theta must be nonnegative, got {self.theta}")
        if self.label_mode not in LABEL_MODES:
            raise ParameterError(f"unknown label mode '{self.label_mode}'")


def contrastive_loss(batch: ContrastiveBatch) -> ad.Tensor:
    """Sum over image anchors of -log(exp(s_ii) / denominator).

    The denominator holds the positive term with weight 1, plain negatives
    with weight 1, and same-label negatives (j != i) scaled by theta; the
    positive pair never gets the theta weighting, so theta = 1 recovers
    InfoNCE and a single-pair batch has loss 0.
    """
    n = len(batch.z_img)
    inv_tau = 1.0 / batch.tau
    total: ad.Tensor | None = None
    for i in range(n):
        positive = ad.scale(ad.cosine_sim(batch.z_img[i], batch.z_txt[i]), inv_tau)
        denominator = ad.exp(positive)
        same_group: ad.Tensor | None = None
        for j in range(n):
            if j == i:
                continue
            s_ij = ad.scale(ad.cosine_sim(batch.z_img[i], batch.z_txt[j]), inv_tau)
            e_ij = ad.exp(s_ij)
            if same_label(batch.labels[i], batch.labels[j], batch.label_mode):
                same_group = e_ij if same_group is None else ad.add(same_group, e_ij)
            else:
                denominator = ad.add(denominator, e_ij)
        if same_group is not None:
            denominator = ad.add(denominator, ad.scale(same_group, batch.theta))
        term = ad.sub(ad.log(denominator), positive)
        total = term if total is None else ad.add(total, term)
    return total


def total_loss(l_c: ad.Tensor, l_ce: ad.Tensor, l_cl: ad.Tensor, lam: float) -> ad.Tensor:
    """The mixed objective: lam * (L_C + L_CE) + (1 - lam) * L_CL."""
    if not 0.0 <= lam <= 1.0:
        raise ParameterError(f"lambda must lie in [0, 1], got {lam}")
    return ad.add(ad.scale(ad.add(l_c, l_ce), lam), ad.scale(l_cl, 1.0 - lam))


@dataclass(eq=False)
class LossBundle:
    """One training step's loss terms and their exact mixture."""

    l_c: ad.Tensor
    l_ce: ad.Tensor
    l_cl: ad.Tensor
    lam: float
    l_total: ad.Tensor = field(init=False)

    def __post_init__(self):
        self.l_total = total_loss(self.l_c, self.l_ce, self.l_cl, self.lam)

    def values(self) -> dict[str, float]:
        return {
            "l_c": self.l_c.item(),
            "l_ce": self.l_ce.item(),
            "l_cl": self.l_cl.item(),
            "l_total": self.l_total.item(),
        }

"""Corpus-level BLEU-1..4, ROUGE-L, and an exact-match METEOR variant.

The METEOR here is deliberately simplified: no stemming or synonym tables,
only exact unigram matches. Scores are therefore not comparable to METEOR
numbers produced by the standard resource-backed implementations; the
metric is kept because its fragment-ordering penalty still distinguishes
scrambled from fluent output.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .errors import InputError, SchemaError

Tokens = Sequence[str]


@dataclass(frozen=True)
class EvalPair:
    """One candidate/reference pair of lowercased, pre-tokenized texts."""

    candidate: tuple[str, ...]
    reference: tuple[str, ...]

    @classmethod
    def of(cls, candidate: Tokens, reference: Tokens) -> "EvalPair":
        return cls(tuple(candidate), tuple(reference))


@dataclass(frozen=True)
class MetricReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    meteor: float

    def as_dict(self) -> dict[str, float]:
        return {
            "bleu1": self.bleu1,
            "bleu2": self.bleu2,
            "bleu3": self.bleu3,
            "bleu4": self.bleu4,
            "rouge_l": self.rouge_l,
            "meteor": self.meteor,
        }


def _ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(pairs: Sequence[EvalPair], max_n: int) -> float:
    """Corpus BLEU: clipped n-gram precisions, geometric mean, brevity penalty.

    No smoothing: a zero precision at any order makes the score 0.
    """
    if not 1 <= max_n <= 4:
        raise InputError(f"max_n must be in [1, 4], got {max_n}")
    if not pairs:
        raise InputError("bleu needs at least one pair")
    import math

    cand_total = sum(len(p.candidate) for p in pairs)
    ref_total = sum(len(p.reference) for p in pairs)
    if cand_total == 0:
        return 0.0
    log_precision_sum = 0.0
    for n in range(1, max_n + 1):
        matched = 0
        possible = 0
        for p in pairs:
            cand_counts = _ngrams(p.candidate, n)
            ref_counts = _ngrams(p.reference, n)
            possible += sum(cand_counts.values())
            matched += sum(min(count, ref_counts[gram]) for gram, count in cand_counts.items())
        if matched == 0 or possible == 0:
            return 0.0
        log_precision_sum += math.log(matched / possible)
    brevity = 1.0 if cand_total >= ref_total else math.exp(1.0 - ref_total / cand_total)
    return brevity * math.exp(log_precision_sum / max_n)


def _lcs_length(a: Tokens, b: Tokens) -> int:
    """Dynamic-programming longest common subsequence length."""
    if not a or not b:
        return 0
    previous = [0] * (len(b) + 1)
    for x in a:
        current = [0]
        for j, y in enumerate(b, start=1):
            if x == y:
                current.append(previous[j - 1] + 1)
            else:
                current.append(max(previous[j], current[j - 1]))
        previous = current
    return previous[-1]


def rouge_l(pairs: Sequence[EvalPair]) -> float:
    """Mean over pairs of the LCS-based F1 score."""
    if not pairs:
        raise InputError("rouge_l needs at least one pair")
    total = 0.0
    for p in pairs:
        lcs = _lcs_length(p.candidate, p.reference)
        if lcs == 0 or not p.candidate or not p.reference:
            continue
        precision = lcs / len(p.candidate)
        recall = lcs / len(p.reference)
        total += 2.0 * precision * recall / (precision + recall)
    return total / len(pairs)


def _align_unigrams(candidate: Tokens, reference: Tokens) -> list[tuple[int, int]]:
    """Leftmost-greedy exact matching; every token participates at most once."""
    used = [False] * len(reference)
    alignment = []
    for ci, token in enumerate(candidate):
        for ri, ref_token in enumerate(reference):
            if not used[ri] and ref_token == token:
                used[ri] = True
                alignment.append((ci, ri))
                break
    return alignment


def _count_chunks(alignment: list[tuple[int, int]]) -> int:
    """Number of maximal runs adjacent in both candidate and reference."""
    chunks = 0
    prev_ci = prev_ri = None
    for ci, ri in alignment:
        if prev_ci is None or ci != prev_ci + 1 or ri != prev_ri + 1:
            chunks += 1
        prev_ci, prev_ri = ci, ri
    return chunks


def meteor_lite(pairs: Sequence[EvalPair]) -> float:
    """Exact-match METEOR: recall-weighted F-mean with a fragmentation penalty."""
    if not pairs:
        raise InputError("meteor_lite needs at least one pair")
    total = 0.0
    for p in pairs:
        alignment = _align_unigrams(p.candidate, p.reference)
        matches = len(alignment)
        if matches == 0:
            continue
        precision = matches / len(p.candidate)
        recall = matches / len(p.reference)
        f_mean = 10.0 * precision * recall / (recall + 9.0 * precision)
        chunks = _count_chunks(alignment)
        penalty = 0.5 * (chunks / matches) ** 3
        total += f_mean * (1.0 - penalty)
    return total / len(pairs)


def evaluate_corpus(pairs: Sequence[EvalPair]) -> MetricReport:
    """All six scores for one corpus of candidate/reference pairs."""
    if not pairs:
        raise InputError("evaluate_corpus needs at least one pair")
    return MetricReport(
        bleu1=bleu(pairs, 1),
        bleu2=bleu(pairs, 2),
        bleu3=bleu(pairs, 3),
        bleu4=bleu(pairs, 4),
        rouge_l=rouge_l(pairs),
        meteor=meteor_lite(pairs),
    )


def read_generations(path: str | Path) -> list[dict]:
    """Read `{id, candidate, reference}` JSONL lines, validating each one."""
    records = []
    with open(path, "r") as handle:
        for number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"line {number}: not valid JSON: {exc}") from exc
            for key in ("id", "candidate", "reference"):
                if key not in record:
                    raise SchemaError(f"line {number}: missing field '{key}'")
            if not isinstance(record["candidate"], str) or not isinstance(record["reference"], str):
                raise SchemaError(f"line {number}: candidate and reference must be strings")
            records.append(record)
    if not records:
        raise InputError(f"{path}: no generation records")
    return records


def write_metric_report(report: MetricReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.as_dict(), indent=1) + "\n")

import itertools
import math
from collections import Counter

import pytest

from mscl import metrics
from mscl.errors import InputError, SchemaError
from mscl.metrics import EvalPair


def pair(cand, ref):
    return EvalPair.of(cand.split(), ref.split())


# --- independent references ------------------------------------------------


def naive_bleu(pairs, max_n):
    """Plain-loop corpus BLEU used as an oracle."""
    c = sum(len(p.candidate) for p in pairs)
    r = sum(len(p.reference) for p in pairs)
    if c == 0:
        return 0.0
    precisions = []
    for n in range(1, max_n + 1):
        num = 0
        den = 0
        for p in pairs:
            cgrams = [tuple(p.candidate[i:i + n]) for i in range(len(p.candidate) - n + 1)]
            rgrams = Counter(tuple(p.reference[i:i + n]) for i in range(len(p.reference) - n + 1))
            den += len(cgrams)
            counted = Counter(cgrams)
            num += sum(min(v, rgrams[g]) for g, v in counted.items())
        if den == 0 or num == 0:
            return 0.0
        precisions.append(num / den)
    geo = math.exp(sum(math.log(x) for x in precisions) / max_n)
    bp = 1.0 if c >= r else math.exp(1 - r / c)
    return bp * geo


def lcs_by_enumeration(a, b):
    """Exponential oracle: longest subsequence of a that is also in b."""
    best = 0
    for size in range(len(a), best, -1):
        for combo in itertools.combinations(range(len(a)), size):
            sub = [a[i] for i in combo]
            it = iter(b)
            if all(tok in it for tok in sub):
                return size
    return 0


def naive_rouge_l(pairs):
    total = 0.0
    for p in pairs:
        lcs = lcs_by_enumeration(list(p.candidate), list(p.reference))
        if lcs == 0:
            continue
        prec = lcs / len(p.candidate)
        rec = lcs / len(p.reference)
        total += 2 * prec * rec / (prec + rec)
    return total / len(pairs)


class TestBleu:
    def test_identical_is_one(self):
        pairs = [pair("the cat sat on the mat", "the cat sat on the mat")]
        for n in range(1, 5):
            assert metrics.bleu(pairs, n) == pytest.approx(1.0)

    def test_clipping(self):
        # reference holds a single "the", so the clipped count is 1 of 4
        pairs = [pair("the the the the", "the cat")]
        assert metrics.bleu(pairs, 1) == pytest.approx(0.25)
        assert metrics.bleu(pairs, 1) == pytest.approx(naive_bleu(pairs, 1))

    def test_disjoint_is_zero(self):
        assert metrics.bleu([pair("a b c", "x y z")], 4) == 0.0

    def test_brevity_penalty(self):
        pairs = [pair("the cat", "the cat sat")]
        expected = math.exp(1 - 3 / 2) * 1.0  # precisions are 1 at n=1
        assert metrics.bleu(pairs, 1) == pytest.approx(expected)

    def test_monotone_in_order(self):
        pairs = [pair("a b c d e", "a b x d e"), pair("m n o", "m o n")]
        assert metrics.bleu(pairs, 1) >= metrics.bleu(pairs, 4)

    def test_invariant_under_prepending_to_both_sides(self):
        base = [pair("the lungs are clear", "the lungs are clear")]
        prepended = [pair("report : the lungs are clear", "report : the lungs are clear")]
        assert metrics.bleu(base, 1) == metrics.bleu(prepended, 1) == 1.0
        report = metrics.evaluate_corpus(prepended)
        assert all(0.0 <= v <= 1.0 for v in report.as_dict().values())

    def test_empty_corpus_rejected(self):
        with pytest.raises(InputError):
            metrics.bleu([], 4)


class TestRougeL:
    def test_identical(self):
        assert metrics.rouge_l([pair("a b c", "a b c")]) == pytest.approx(1.0)

    def test_hand_value(self):
        # LCS("the cat sat", "the cat") = 2; P=2/3, R=1, F=0.8
        assert metrics.rouge_l([pair("the cat sat", "the cat")]) == pytest.approx(0.8)

    def test_disjoint(self):
        assert metrics.rouge_l([pair("a b", "x y")]) == 0.0

    def test_lcs_matches_enumeration(self):
        import random

        rng = random.Random(5)
        alphabet = list("abcd")
        for _ in range(40):
            a = [rng.choice(alphabet) for _ in range(rng.randint(0, 8))]
            b = [rng.choice(alphabet) for _ in range(rng.randint(0, 8))]
            assert metrics._lcs_length(a, b) == lcs_by_enumeration(a, b)


class TestMeteorLite:
    def test_identical_three_tokens(self):
        score = metrics.meteor_lite([pair("a b c", "a b c")])
        assert score == pytest.approx(1.0 - 0.5 / 27)

    def test_disjoint(self):
        assert metrics.meteor_lite([pair("a b", "x y")]) == 0.0

    def test_reversed_two_tokens(self):
        # two matches in two chunks: penalty = 0.5, F_mean = 1
        assert metrics.meteor_lite([pair("b a", "a b")]) == pytest.approx(0.5)

    def test_penalty_bounds(self):
        import random

        rng = random.Random(11)
        alphabet = list("abcdef")
        for _ in range(50):
            cand = [rng.choice(alphabet) for _ in range(rng.randint(1, 10))]
            ref = [rng.choice(alphabet) for _ in range(rng.randint(1, 10))]
            alignment = metrics._align_unigrams(cand, ref)
            if not alignment:
                continue
            chunks = metrics._count_chunks(alignment)
            penalty = 0.5 * (chunks / len(alignment)) ** 3
            assert 0.0 <= penalty <= 0.5


class TestEvaluateCorpus:
    def test_all_identical_corpus(self):
        pairs = [pair("no acute disease .", "no acute disease .")] * 3
        report = metrics.evaluate_corpus(pairs)
        assert report.bleu1 == report.bleu4 == report.rouge_l == pytest.approx(1.0)
        assert report.meteor == pytest.approx(1.0 - 0.5 / 64)  # 4 tokens, 1 chunk

    def test_single_pair_equals_per_pair_values(self):
        pairs = [pair("the lungs are clear", "the lungs are clear today")]
        report = metrics.evaluate_corpus(pairs)
        assert report.bleu2 == pytest.approx(metrics.bleu(pairs, 2))
        assert report.rouge_l == pytest.approx(metrics.rouge_l(pairs))

    def test_matches_naive_references_on_random_pairs(self):
        import random

        rng = random.Random(3)
        vocab = "the cat dog lung heart clear mild acute no severe is are".split()
        pairs = []
        for _ in range(20):
            cand = [rng.choice(vocab) for _ in range(rng.randint(1, 12))]
            ref = [rng.choice(vocab) for _ in range(rng.randint(1, 12))]
            pairs.append(EvalPair.of(cand, ref))
        for n in range(1, 5):
            assert metrics.bleu(pairs, n) == pytest.approx(naive_bleu(pairs, n), abs=1e-9)
        assert metrics.rouge_l(pairs) == pytest.approx(naive_rouge_l(pairs), abs=1e-9)
        report = metrics.evaluate_corpus(pairs)
        for value in report.as_dict().values():
            assert 0.0 <= value <= 1.0


class TestGenerationsIo:
    def test_round_trip(self, tmp_path):
        lines = [
            '{"id": "s1", "candidate": "a b", "reference": "a b"}',
            '{"id": "s2", "candidate": "c", "reference": "c d"}',
        ]
        path = tmp_path / "gen.jsonl"
        path.write_text("\n".join(lines) + "\n")
        records = metrics.read_generations(path)
        assert [r["id"] for r in records] == ["s1", "s2"]

    def test_malformed_line_number_reported(self, tmp_path):
        path = tmp_path / "gen.jsonl"
        path.write_text('{"id": "a", "candidate": "x", "reference": "y"}\nnot json\n')
        with pytest.raises(SchemaError, match="line 2"):
            metrics.read_generations(path)

    def test_missing_field_reported(self, tmp_path):
        path = tmp_path / "gen.jsonl"
        path.write_text('{"id": "a", "candidate": "x"}\n')
        with pytest.raises(SchemaError, match="reference"):
            metrics.read_generations(path)

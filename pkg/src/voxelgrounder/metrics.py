"""Evaluation metrics: Dice, BLEU-1, ROUGE-L, CIDEr-D, choice accuracy.

Text metrics operate on the shared word segmentation from
:mod:`voxelgrounder.textproc` so scores do not depend on model vocabulary.
All functions are pure; a :class:`MetricReport` carries per-example values
next to the corpus aggregate so the aggregation is auditable.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputValidationError, InsufficientCorpusError, ShapeMismatchError
from .textproc import word_tokenize
from .volume import MaskVolume


def _as_bool(mask: MaskVolume | np.ndarray) -> np.ndarray:
    if isinstance(mask, MaskVolume):
        return mask.labels > 0
    return np.asarray(mask) > 0


def dice_coefficient(pred: MaskVolume | np.ndarray, gt: MaskVolume | np.ndarray) -> float:
    """Overlap score ``2|A∩B| / (|A|+|B|)`` in [0, 1]; both empty scores 1.0."""
    a, b = _as_bool(pred), _as_bool(gt)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def bleu1(candidate: str, references: list[str]) -> float:
    """Clipped unigram precision times brevity penalty, scaled to 0-100."""
    cand = word_tokenize(candidate)
    if not cand or not references:
        return 0.0
    refs = [word_tokenize(r) for r in references]
    cand_counts = Counter(cand)
    max_ref = Counter()
    for r in refs:
        for tok, n in Counter(r).items():
            max_ref[tok] = max(max_ref[tok], n)
    clipped = sum(min(n, max_ref[tok]) for tok, n in cand_counts.items())
    precision = clipped / len(cand)
    # closest reference length (ties resolved toward the shorter reference)
    c = len(cand)
    r = min((abs(len(r) - c), len(r)) for r in refs)[1]
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return 100.0 * precision * bp


def _lcs_length(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for tok in a:
        cur = [0]
        for j, other in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if tok == other else max(prev[j], cur[-1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, reference: str, beta: float = 1.2) -> float:
    """Longest-common-subsequence F-measure, scaled to 0-100."""
    cand, ref = word_tokenize(candidate), word_tokenize(reference)
    if not cand or not ref:
        return 0.0
    lcs = _lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    f = (1 + beta**2) * p * r / (r + beta**2 * p)
    return 100.0 * f


def _ngram_counts(tokens: list[str], max_n: int = 4) -> list[Counter]:
    return [
        Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))
        for n in range(1, max_n + 1)
    ]


def cider(
    candidates: list[str],
    references: list[list[str]],
    max_n: int = 4,
    sigma: float = 6.0,
) -> list[float]:
    """Consensus captioning score per candidate (TF-IDF n-gram cosine).

    Document frequencies come from the reference sets themselves: an n-gram's
    DF is the number of examples whose references contain it, and
    ``idf = log(N) - log(max(1, DF))``. Per n (1..4) the candidate/reference
    vectors are compared with a min-clipped dot product over their norms,
    damped by a Gaussian penalty on the length difference, averaged over
    references and over n, then scaled by 10.
    """
    if len(candidates) != len(references):
        raise InputValidationError("candidates and references must align one-to-one")
    n_docs = len(candidates)
    if n_docs < 2:
        raise InsufficientCorpusError("consensus scoring needs a corpus of at least 2 documents")

    ref_tokens = [[word_tokenize(r) for r in refs] for refs in references]
    doc_freq: list[Counter] = [Counter() for _ in range(max_n)]
    for refs in ref_tokens:
        seen: list[set] = [set() for _ in range(max_n)]
        for toks in refs:
            for n_idx, counts in enumerate(_ngram_counts(toks, max_n)):
                seen[n_idx] |= set(counts)
        for n_idx, grams in enumerate(seen):
            for g in grams:
                doc_freq[n_idx][g] += 1

    log_n = math.log(n_docs)

    def to_vec(tokens: list[str]):
        vecs, norms = [], []
        for n_idx, counts in enumerate(_ngram_counts(tokens, max_n)):
            vec = {
                g: c * (log_n - math.log(max(1.0, doc_freq[n_idx][g])))
                for g, c in counts.items()
            }
            vecs.append(vec)
            norms.append(math.sqrt(sum(v * v for v in vec.values())))
        return vecs, norms

    scores = []
    for cand, refs in zip(candidates, ref_tokens):
        cand_toks = word_tokenize(cand)
        c_vecs, c_norms = to_vec(cand_toks)
        per_n = np.zeros(max_n)
        for ref_toks in refs:
            r_vecs, r_norms = to_vec(ref_toks)
            delta = float(len(cand_toks) - len(ref_toks))
            penalty = math.exp(-(delta**2) / (2 * sigma**2))
            for n_idx in range(max_n):
                dot = sum(
                    min(v, r_vecs[n_idx].get(g, 0.0)) * r_vecs[n_idx].get(g, 0.0)
                    for g, v in c_vecs[n_idx].items()
                )
                if c_norms[n_idx] > 0 and r_norms[n_idx] > 0:
                    per_n[n_idx] += penalty * dot / (c_norms[n_idx] * r_norms[n_idx])
        scores.append(10.0 * float(per_n.mean()) / max(len(refs), 1))
    return scores


def _normalize_answer(text: str) -> str:
    return " ".join(text.lower().split())


def accuracy_mc(predictions: list[str], gold: list[str]) -> float:
    """Percent exact-match after case/whitespace normalization."""
    if len(predictions) != len(gold):
        raise InputValidationError(
            f"predictions ({len(predictions)}) and gold ({len(gold)}) differ in length"
        )
    if not gold:
        return 0.0
    hits = sum(_normalize_answer(p) == _normalize_answer(g) for p, g in zip(predictions, gold))
    return 100.0 * hits / len(gold)


@dataclass
class MetricReport:
    """Per-example metric values plus their corpus aggregates."""

    per_example: dict[str, list[float]] = field(default_factory=dict)
    aggregate: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    def add(self, metric: str, values: list[float], aggregate: float | None = None):
        values = [float(v) for v in values]
        self.per_example[metric] = values
        self.aggregate[metric] = (
            float(aggregate) if aggregate is not None else float(np.mean(values)) if values else 0.0
        )
        self.counts[metric] = len(values)

    def to_json(self, path: str | Path | None = None) -> str:
        payload = json.dumps(
            {"per_example": self.per_example, "aggregate": self.aggregate, "counts": self.counts},
            indent=2,
            sort_keys=True,
        )
        if path is not None:
            Path(path).write_text(payload)
        return payload

    @classmethod
    def from_json(cls, raw: str) -> "MetricReport":
        data = json.loads(raw)
        return cls(
            per_example=data["per_example"],
            aggregate=data["aggregate"],
            counts=data["counts"],
        )

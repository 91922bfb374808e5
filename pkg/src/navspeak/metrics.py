"""Captioning metrics over token sequences, in their standard formula forms.

Inputs are plain token sequences (any hashable tokens); candidates and
references are compared verbatim with no normalization. The corpus-level
entry point averages per-item scores, except for the TF-IDF metric whose
document frequencies couple the items by construction.

The scene-tuple metric substitutes the closed-grammar parser for a
dependency parse: landmark clauses yield object, attribute, and relation
tuples; motion clauses yield nothing. Unigram matching has no synonym or
stemming stages because the vocabulary has no morphology.
"""
from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass

from . import grammar as G
from .errors import ValidationError

__all__ = [
    "bleu",
    "rouge_l",
    "meteor_lite",
    "cider",
    "tuple_set",
    "spice_lite",
    "MetricReport",
    "evaluate_all",
]


def _ngrams(tokens, n: int) -> Counter:
    toks = list(tokens)
    return Counter(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))


def _check_references(references) -> list[list]:
    refs = [list(r) for r in references]
    if not refs:
        raise ValidationError("every item needs at least one reference")
    return refs


# -- n-gram precision ---------------------------------------------------------


def bleu(candidate, references, n: int = 4) -> float:
    """Clipped n-gram precision, geometric mean over orders 1..n, with the
    closest-reference brevity penalty. Empty candidates score 0."""
    if not 1 <= n <= 4:
        raise ValidationError(f"bleu order must be in 1..4, got {n}")
    cand = list(candidate)
    refs = _check_references(references)
    if not cand:
        return 0.0
    log_sum = 0.0
    for k in range(1, n + 1):
        counts = _ngrams(cand, k)
        total = sum(counts.values())
        if total == 0:
            return 0.0
        clipped = 0
        for gram, c in counts.items():
            best = max(_ngrams(r, k)[gram] for r in refs)
            clipped += min(c, best)
        if clipped == 0:
            return 0.0
        log_sum += math.log(clipped / total)
    c_len = len(cand)
    r_len = min((abs(len(r) - c_len), len(r)) for r in refs)[1]
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_sum / n)


# -- longest common subsequence -----------------------------------------------


def lcs_length(a, b) -> int:
    a, b = list(a), list(b)
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, references, beta: float = 1.2) -> float:
    """LCS F-measure, maximum over references."""
    cand = list(candidate)
    refs = _check_references(references)
    best = 0.0
    for ref in refs:
        if not cand or not ref:
            continue
        lcs = lcs_length(cand, ref)
        if lcs == 0:
            continue
        p = lcs / len(cand)
        r = lcs / len(ref)
        f = (1.0 + beta * beta) * p * r / (r + beta * beta * p)
        best = max(best, f)
    return best


# -- unigram alignment ----------------------------------------------------------


def _align(cand: list, ref: list) -> tuple[int, int]:
    """Greedy in-order exact matching; returns (matches, chunks).

    Each candidate token, left to right, claims the first unclaimed equal
    reference token. A chunk is a maximal run of matches contiguous in both
    sequences.
    """
    taken = [False] * len(ref)
    pairs: list[tuple[int, int]] = []
    for ci, tok in enumerate(cand):
        for ri, rt in enumerate(ref):
            if not taken[ri] and rt == tok:
                taken[ri] = True
                pairs.append((ci, ri))
                break
    chunks = 0
    prev = None
    for ci, ri in pairs:
        if prev is None or (ci, ri) != (prev[0] + 1, prev[1] + 1):
            chunks += 1
        prev = (ci, ri)
    return len(pairs), chunks


def meteor_lite(candidate, references, alpha: float = 0.9, gamma: float = 0.5,
                beta: float = 3.0) -> float:
    """Unigram-alignment F_alpha with a fragmentation penalty, max over
    references."""
    cand = list(candidate)
    refs = _check_references(references)
    best = 0.0
    for ref in refs:
        if not cand or not ref:
            continue
        m, chunks = _align(cand, ref)
        if m == 0:
            continue
        p = m / len(cand)
        r = m / len(ref)
        f = p * r / (alpha * p + (1.0 - alpha) * r)
        penalty = gamma * (chunks / m) ** beta
        best = max(best, f * (1.0 - penalty))
    return best


# -- TF-IDF consensus -------------------------------------------------------------


def cider(items, sigma: float = 6.0, n_max: int = 4) -> tuple[list[float], float]:
    """Per-item and mean TF-IDF n-gram consensus, with count clipping, a
    Gaussian length penalty, and the conventional x10 scale.

    items: list of (candidate, references) pairs. Document frequencies come
    from the reference sets, one count per item; a single-item corpus makes
    every IDF zero, which is reported as a warning rather than an error.
    """
    pairs = [(list(c), _check_references(r)) for c, r in items]
    if not pairs:
        raise ValidationError("cider needs a nonempty corpus")
    n_items = len(pairs)
    if n_items == 1:
        warnings.warn("single-item corpus: IDF table is degenerate, scores are 0")
    df: list[Counter] = [Counter() for _ in range(n_max)]
    for _, refs in pairs:
        seen: set = set()
        for ref in refs:
            for k in range(1, n_max + 1):
                seen.update(_ngrams(ref, k))
        for gram in seen:
            df[len(gram) - 1][gram] += 1
    log_n = math.log(n_items)

    def weigh(tokens):
        vecs, norms = [], []
        for k in range(1, n_max + 1):
            vec = {g: c * (log_n - math.log(max(df[k - 1][g], 1)))
                   for g, c in _ngrams(tokens, k).items()}
            vecs.append(vec)
            norms.append(math.sqrt(sum(w * w for w in vec.values())))
        return vecs, norms

    scores = []
    for cand, refs in pairs:
        cvecs, cnorms = weigh(cand)
        item = 0.0
        for ref in refs:
            rvecs, rnorms = weigh(ref)
            shrink = math.exp(-((len(cand) - len(ref)) ** 2) / (2.0 * sigma * sigma))
            sim = 0.0
            for k in range(n_max):
                if cnorms[k] == 0.0 or rnorms[k] == 0.0:
                    continue
                num = sum(min(w, rvecs[k].get(g, 0.0)) * rvecs[k].get(g, 0.0)
                          for g, w in cvecs[k].items())
                sim += num / (cnorms[k] * rnorms[k])
            item += shrink * sim / n_max
        scores.append(10.0 * item / len(refs))
    return scores, sum(scores) / n_items


# -- scene tuples ------------------------------------------------------------------


def tuple_set(tokens) -> set:
    """Object/attribute/relation tuples of the landmark clauses in a
    sequence. Unparseable chunks and motion clauses contribute nothing."""
    clauses, _ = G.parse_clauses(tokens)
    out: set = set()
    for clause in clauses:
        if clause.is_motion:
            continue
        out.add(("object", clause.category))
        out.add(("attribute", clause.category, clause.color))
        out.add(("relation", clause.kind, clause.category))
    return out


def spice_lite(candidate, references) -> float:
    """F1 over exact tuple matches against the union of reference tuples.

    Two empty tuple sets count as agreement (1.0): motion-only instructions
    can legitimately mention nothing.
    """
    refs = _check_references(references)
    cand_tuples = tuple_set(candidate)
    ref_tuples: set = set()
    for ref in refs:
        ref_tuples |= tuple_set(ref)
    if not cand_tuples and not ref_tuples:
        return 1.0
    if not cand_tuples or not ref_tuples:
        return 0.0
    inter = len(cand_tuples & ref_tuples)
    if inter == 0:
        return 0.0
    p = inter / len(cand_tuples)
    r = inter / len(ref_tuples)
    return 2.0 * p * r / (p + r)


# -- corpus report -------------------------------------------------------------------


@dataclass
class MetricReport:
    split: str
    n_items: int
    spice: float
    bleu1: float
    bleu4: float
    cider: float
    meteor: float
    rouge: float

    def format(self) -> str:
        return (
            f"split={self.split} n_items={self.n_items} "
            f"spice={self.spice:.4f} bleu1={self.bleu1:.4f} bleu4={self.bleu4:.4f} "
            f"cider={self.cider:.4f} meteor={self.meteor:.4f} rouge={self.rouge:.4f}"
        )


def evaluate_all(items, split: str = "") -> MetricReport:
    """All six corpus scores; per-item metrics are averaged, the TF-IDF
    metric is computed corpus-wide."""
    pairs = [(list(c), _check_references(r)) for c, r in items]
    if not pairs:
        raise ValidationError("evaluate_all needs a nonempty corpus")
    n = len(pairs)
    _, cider_mean = cider(pairs)
    return MetricReport(
        split=split,
        n_items=n,
        spice=sum(spice_lite(c, r) for c, r in pairs) / n,
        bleu1=sum(bleu(c, r, 1) for c, r in pairs) / n,
        bleu4=sum(bleu(c, r, 4) for c, r in pairs) / n,
        cider=cider_mean,
        meteor=sum(meteor_lite(c, r) for c, r in pairs) / n,
        rouge=sum(rouge_l(c, r) for c, r in pairs) / n,
    )

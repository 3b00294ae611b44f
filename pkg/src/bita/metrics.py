"""Caption metrics: BLEU@1-4, ROUGE-L and CIDEr on word-level tokens.

Scores are reported on a [0, 1] scale (CIDEr on [0, 10]); multiply by 100
to compare with tables that report percentages.
"""
from __future__ import annotations

import math
from collections import Counter
from typing import Sequence

import numpy as np

from .vocab import normalize_words

__all__ = ["bleu", "corpus_bleu", "rouge_l", "cider", "lcs_length", "ngrams"]


def _words(text) -> list[str]:
    if isinstance(text, str):
        return normalize_words(text)
    if hasattr(text, "text"):
        return normalize_words(text.text)
    return list(text)


def ngrams(words: Sequence[str], n: int) -> Counter:
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


def _closest_ref_len(c: int, ref_lens: Sequence[int]) -> int:
    return min(ref_lens, key=lambda r: (abs(r - c), r))


def _bleu_stats(cand: list[str], refs: list[list[str]], max_n: int):
    matches, totals = [], []
    for n in range(1, max_n + 1):
        cand_counts = ngrams(cand, n)
        max_ref: Counter = Counter()
        for r in refs:
            for g, k in ngrams(r, n).items():
                max_ref[g] = max(max_ref[g], k)
        matches.append(sum(min(k, max_ref[g]) for g, k in cand_counts.items()))
        totals.append(max(len(cand) - n + 1, 0))
    return matches, totals, len(cand), _closest_ref_len(len(cand), [len(r) for r in refs])


def _combine(matches, totals, c: int, r: int) -> float:
    if c == 0:
        return 0.0
    if any(m == 0 for m in matches) or any(t == 0 for t in totals):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / len(matches)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p)


def bleu(candidate, refs, max_n: int = 4) -> float:
    """Sentence BLEU: clipped n-gram precisions, geometric mean, brevity penalty.

    An empty candidate scores 0.  No smoothing: any zero precision gives 0.
    """
    if not 1 <= max_n <= 4:
        raise ValueError("max_n must be in 1..4")
    ref_words = [_words(r) for r in refs]
    if not ref_words:
        raise ValueError("bleu needs at least one reference")
    matches, totals, c, r = _bleu_stats(_words(candidate), ref_words, max_n)
    return _combine(matches, totals, c, r)


def corpus_bleu(candidates, refs_per_candidate, max_n: int = 4) -> float:
    """Corpus BLEU: counts and lengths pooled over all candidates before combining."""
    if len(candidates) != len(refs_per_candidate):
        raise ValueError("candidates and reference lists differ in length")
    m_sum = [0] * max_n
    t_sum = [0] * max_n
    c_sum = r_sum = 0
    for cand, refs in zip(candidates, refs_per_candidate):
        matches, totals, c, r = _bleu_stats(_words(cand), [_words(x) for x in refs], max_n)
        m_sum = [a + b for a, b in zip(m_sum, matches)]
        t_sum = [a + b for a, b in zip(t_sum, totals)]
        c_sum += c
        r_sum += r
    return _combine(m_sum, t_sum, c_sum, r_sum)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, refs, beta: float = 1.2) -> float:
    """Max over references of the LCS F-measure."""
    cand = _words(candidate)
    best = 0.0
    for ref in refs:
        r = _words(ref)
        lcs = lcs_length(cand, r)
        if lcs == 0:
            continue
        prec, rec = lcs / len(cand), lcs / len(r)
        f = (1 + beta**2) * prec * rec / (rec + beta**2 * prec)
        best = max(best, f)
    return best


def cider(candidates, refs_per_candidate, n: int = 4, scale: float = 10.0):
    """CIDEr without the Gaussian length penalty.

    Per n-gram order: TF-IDF vectors (raw counts times log(N / df), df over
    the reference sets), cosine with the candidate's counts clipped to each
    reference, averaged over references; then averaged over orders and
    scaled by ``scale``.  A single-image corpus has an identically zero IDF,
    so unit weights are used there.

    Returns ``(per_candidate_scores, corpus_mean)``.
    """
    if len(candidates) == 0:
        raise ValueError("cider needs at least one candidate")
    if len(candidates) != len(refs_per_candidate):
        raise ValueError("candidates and reference lists differ in length")
    cands = [_words(c) for c in candidates]
    refs = [[_words(r) for r in rs] for rs in refs_per_candidate]
    n_docs = len(refs)
    df: list[Counter] = []
    for k in range(1, n + 1):
        counts: Counter = Counter()
        for rs in refs:
            counts.update(set(g for r in rs for g in ngrams(r, k)))
        df.append(counts)

    def weights(counts: Counter, k: int) -> dict:
        if n_docs == 1:
            return {g: float(v) for g, v in counts.items()}
        return {g: v * math.log(n_docs / max(1.0, df[k - 1][g])) for g, v in counts.items()}

    def norm(vec: dict) -> float:
        return math.sqrt(sum(v * v for v in vec.values()))

    scores = []
    for cand, rs in zip(cands, refs):
        per_order = []
        for k in range(1, n + 1):
            vc = weights(ngrams(cand, k), k)
            nc = norm(vc)
            sims = []
            for r in rs:
                vr = weights(ngrams(r, k), k)
                nr = norm(vr)
                if nc == 0.0 or nr == 0.0:
                    sims.append(0.0)
                    continue
                dot = sum(min(v, vr[g]) * vr[g] for g, v in vc.items() if g in vr)
                sims.append(dot / (nc * nr))
            per_order.append(float(np.mean(sims)) if sims else 0.0)
        scores.append(scale * float(np.mean(per_order)))
    return scores, float(np.mean(scores))

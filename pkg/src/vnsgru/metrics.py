"""Corpus-level BLEU-4, ROUGE-L, CIDEr and an exact-match METEOR variant.

Inputs are a list of candidates and an aligned list of reference sets.
Strings are tokenised with :func:`vnsgru.data.tokenize`; token lists are used
as given. Per-sentence scores are combined with ``math.fsum`` so corpus
values do not depend on corpus order.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .data import tokenize
from .errors import DomainError

BLEU_EPSILON = 1e-9
ROUGE_BETA = 1.2
METEOR_ALPHA = 0.9


@dataclass(frozen=True)
class MetricReport:
    """Scores on the x100 scale used in captioning tables."""

    B4: float
    C: float
    M: float
    R: float
    count: int

    def values(self) -> dict[str, float]:
        return {"B4": self.B4, "C": self.C, "M": self.M, "R": self.R}

    def to_json(self) -> dict:
        return {**self.values(), "count": self.count}


def _tokens(x) -> list[str]:
    return tokenize(x) if isinstance(x, str) else list(x)


def _prepare(candidates, references):
    if len(candidates) == 0:
        raise DomainError("empty candidate list")
    if len(candidates) != len(references):
        raise DomainError(f"{len(candidates)} candidates but {len(references)} reference sets")
    cands = [_tokens(c) for c in candidates]
    refs = []
    for i, rs in enumerate(references):
        if isinstance(rs, str) or len(rs) == 0:
            raise DomainError(f"reference set {i} must be a non-empty list of references")
        refs.append([_tokens(r) for r in rs])
    return cands, refs


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------- BLEU

def bleu4(candidates, references) -> float:
    """Corpus BLEU with clipped 1..4-gram precision and brevity penalty, in [0, 1].

    A zero precision is replaced by 1e-9 before taking logs.
    """
    cands, refs = _prepare(candidates, references)
    clipped, totals = [0] * 4, [0] * 4
    cand_len = ref_len = 0
    for cand, rs in zip(cands, refs):
        cand_len += len(cand)
        ref_len += min((len(r) for r in rs), key=lambda L: (abs(L - len(cand)), L))
        for n in range(1, 5):
            counts = ngrams(cand, n)
            max_ref: Counter = Counter()
            for r in rs:
                max_ref |= ngrams(r, n)
            clipped[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            totals[n - 1] += max(len(cand) - n + 1, 0)
    if cand_len == 0:
        return 0.0
    log_p = 0.0
    for c, t in zip(clipped, totals):
        log_p += math.log(c / t if c > 0 else BLEU_EPSILON)
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_p / 4.0)


# ---------------------------------------------------------------- ROUGE-L

def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_sentence(cand, refs, beta: float = ROUGE_BETA) -> float:
    best = 0.0
    for r in refs:
        lcs = lcs_length(cand, r)
        if lcs == 0:
            continue
        p, rec = lcs / len(cand), lcs / len(r)
        best = max(best, (1 + beta ** 2) * p * rec / (rec + beta ** 2 * p))
    return best


def rouge_l(candidates, references) -> float:
    cands, refs = _prepare(candidates, references)
    return math.fsum(rouge_l_sentence(c, rs) for c, rs in zip(cands, refs)) / len(cands)


# ---------------------------------------------------------------- CIDEr

def _tfidf(tokens, n, doc_freq, log_n):
    vec = {g: c * (log_n - math.log(max(1, doc_freq[g]))) for g, c in ngrams(tokens, n).items()}
    return vec, math.sqrt(math.fsum(x * x for x in vec.values()))


def cider_scores(candidates, references) -> list[float]:
    """Per-video CIDEr (no length penalty), scaled by 10 like the reference scorer."""
    cands, refs = _prepare(candidates, references)
    if len(cands) < 2:
        raise DomainError("CIDEr needs a corpus of at least 2 videos for document frequencies")
    log_n = math.log(len(cands))
    scores = []
    doc_freq = []
    for n in range(1, 5):
        df: Counter = Counter()
        for rs in refs:
            df.update(set().union(*(ngrams(r, n) for r in rs)))
        doc_freq.append(df)
    for cand, rs in zip(cands, refs):
        per_n = []
        for n in range(1, 5):
            cv, cnorm = _tfidf(cand, n, doc_freq[n - 1], log_n)
            sims = []
            for r in rs:
                rv, rnorm = _tfidf(r, n, doc_freq[n - 1], log_n)
                if cnorm == 0.0 or rnorm == 0.0:
                    sims.append(0.0)
                    continue
                num = math.fsum(w * rv[g] for g, w in cv.items() if g in rv)
                sims.append(num / (cnorm * rnorm))
            per_n.append(math.fsum(sims) / len(sims))
        scores.append(10.0 * math.fsum(per_n) / 4.0)
    return scores


def cider(candidates, references) -> float:
    scores = cider_scores(candidates, references)
    return math.fsum(scores) / len(scores)


# ---------------------------------------------------------------- METEOR (exact match only)

def align(cand: Sequence[str], ref: Sequence[str]) -> list[tuple[int, int]]:
    """Exact unigram alignment, preferring to extend the current chunk."""
    used = [False] * len(ref)
    pairs = []
    prev = None
    for i, tok in enumerate(cand):
        j = None
        if prev is not None and prev + 1 < len(ref) and not used[prev + 1] and ref[prev + 1] == tok:
            j = prev + 1
        else:
            j = next((k for k, r in enumerate(ref) if r == tok and not used[k]), None)
        if j is None:
            prev = None
            continue
        used[j] = True
        pairs.append((i, j))
        prev = j
    return pairs


def count_chunks(pairs: Sequence[tuple[int, int]]) -> int:
    chunks = 0
    last = None
    for i, j in pairs:
        if last is None or (i, j) != (last[0] + 1, last[1] + 1):
            chunks += 1
        last = (i, j)
    return chunks


def meteor_sentence(cand, refs, alpha: float = METEOR_ALPHA) -> float:
    best = 0.0
    for r in refs:
        pairs = align(cand, r)
        m = len(pairs)
        if m == 0:
            continue
        p, rec = m / len(cand), m / len(r)
        f_mean = p * rec / (alpha * p + (1 - alpha) * rec)
        penalty = 0.5 * (count_chunks(pairs) / m) ** 3
        best = max(best, f_mean * (1 - penalty))
    return best


def meteor_lite(candidates, references) -> float:
    cands, refs = _prepare(candidates, references)
    return math.fsum(meteor_sentence(c, rs) for c, rs in zip(cands, refs)) / len(cands)


def evaluate_corpus(candidates, references) -> MetricReport:
    cands, refs = _prepare(candidates, references)
    return MetricReport(
        B4=100.0 * bleu4(cands, refs),
        C=100.0 * cider(cands, refs),
        M=100.0 * meteor_lite(cands, refs),
        R=100.0 * rouge_l(cands, refs),
        count=len(cands),
    )

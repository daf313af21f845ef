"""Corpus-level caption metrics: BLEU-1..4, ROUGE-L and CIDEr.

Inputs are whitespace-tokenized lowercase strings or token lists. No
stemming or punctuation handling is applied, so scores are only comparable
to other runs of this module, not to the COCO toolkit.
"""
from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence

Tokens = Sequence[str]


@dataclass
class EvalPair:
    candidate: list[str]
    references: list[list[str]]

    def __post_init__(self) -> None:
        if not self.references:
            raise ValueError("every candidate needs at least one reference")

    @classmethod
    def from_strings(cls, candidate: str, references: Sequence[str]) -> "EvalPair":
        return cls(candidate.split(), [r.split() for r in references])


def _as_pairs(corpus: Sequence[EvalPair | tuple]) -> list[EvalPair]:
    out = []
    for item in corpus:
        if isinstance(item, EvalPair):
            out.append(item)
        else:
            cand, refs = item
            cand = cand.split() if isinstance(cand, str) else list(cand)
            refs = [r.split() if isinstance(r, str) else list(r) for r in refs]
            out.append(EvalPair(cand, refs))
    return out


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# ------------------------------------------------------------------------ BLEU

def bleu(corpus: Sequence[EvalPair | tuple], n: int = 4) -> float:
    """Corpus BLEU-n: clipped n-gram precisions for orders 1..n, uniform
    geometric mean, brevity penalty against the closest reference length."""
    if n < 1:
        raise ValueError("BLEU order must be >= 1")
    pairs = _as_pairs(corpus)
    matched = [0] * n
    total = [0] * n
    cand_len = ref_len = 0
    for pair in pairs:
        c = pair.candidate
        cand_len += len(c)
        ref_len += min((abs(len(r) - len(c)), len(r)) for r in pair.references)[1]
        for k in range(1, n + 1):
            counts = ngrams(c, k)
            max_ref: Counter = Counter()
            for r in pair.references:
                max_ref |= ngrams(r, k)
            matched[k - 1] += sum(min(v, max_ref[g]) for g, v in counts.items())
            total[k - 1] += sum(counts.values())
    if cand_len == 0 or any(m == 0 for m in matched):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_p)


# --------------------------------------------------------------------- ROUGE-L

def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_pair(candidate: Tokens, reference: Tokens, beta: float = 1.2) -> float:
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(candidate), lcs / len(reference)
    return (1 + beta**2) * p * r / (r + beta**2 * p)


def rouge_l(corpus: Sequence[EvalPair | tuple], beta: float = 1.2) -> float:
    """Mean over pairs of the best LCS F-measure against any reference."""
    pairs = _as_pairs(corpus)
    if not pairs:
        return 0.0
    return sum(max(rouge_l_pair(p.candidate, r, beta) for r in p.references) for p in pairs) / len(pairs)


# ----------------------------------------------------------------------- CIDEr

def _tfidf(counts: Counter, idf: Mapping[tuple, float]) -> dict[tuple, float]:
    return {g: c * idf.get(g, 0.0) for g, c in counts.items()}


def _norm(vec: Mapping[tuple, float]) -> float:
    return math.sqrt(sum(v * v for v in vec.values()))


def cider(corpus: Sequence[EvalPair | tuple], n: int = 4, variant: str = "cider",
          sigma: float = 6.0) -> float:
    """CIDEr ×10, averaged over images.

    Document frequencies come from the references: an n-gram's df is the
    number of images with at least one reference containing it, and its
    weight is ``log(num_images / max(1, df))``. ``variant="cider-d"`` adds
    clipping of candidate counts and the Gaussian length penalty.
    """
    if variant not in ("cider", "cider-d"):
        raise ValueError(f"unknown CIDEr variant {variant!r}")
    pairs = _as_pairs(corpus)
    if not pairs:
        return 0.0
    if len(pairs) == 1:
        warnings.warn("CIDEr on a single image: every reference n-gram gets idf 0", stacklevel=2)
    num_images = len(pairs)
    df: list[Counter] = [Counter() for _ in range(n)]
    for p in pairs:
        for k in range(n):
            seen = set()
            for r in p.references:
                seen.update(ngrams(r, k + 1))
            df[k].update(seen)
    idf = [{g: math.log(num_images / max(1.0, d)) for g, d in df[k].items()} for k in range(n)]
    default_idf = math.log(num_images)

    total = 0.0
    for p in pairs:
        score = 0.0
        for k in range(n):
            weights = idf[k]
            cand_counts = ngrams(p.candidate, k + 1)
            vc = {g: c * weights.get(g, default_idf) for g, c in cand_counts.items()}
            nc = _norm(vc)
            acc = 0.0
            for r in p.references:
                vr = _tfidf(ngrams(r, k + 1), weights)
                nr = _norm(vr)
                if nc == 0.0 or nr == 0.0:
                    continue
                if variant == "cider":
                    dot = sum(v * vr.get(g, 0.0) for g, v in vc.items())
                    acc += dot / (nc * nr)
                else:
                    dot = sum(min(v, vr.get(g, 0.0)) * vr.get(g, 0.0) for g, v in vc.items())
                    delta = len(p.candidate) - len(r)
                    acc += dot / (nc * nr) * math.exp(-(delta**2) / (2 * sigma**2))
            score += acc / len(p.references)
        total += score / n
    return 10.0 * total / num_images


def evaluate(candidates: Mapping[str, str], references: Mapping[str, Sequence[str]],
             cider_variant: str = "cider") -> dict[str, float]:
    """Flat report ``{bleu1..bleu4, rougeL, cider}`` over the ids of ``candidates``."""
    missing = sorted(set(candidates) - set(references))
    if missing:
        raise KeyError(f"no references for ids {missing[:5]}")
    ids = sorted(candidates)
    pairs = [EvalPair.from_strings(candidates[i], references[i]) for i in ids]
    report = {f"bleu{k}": bleu(pairs, k) for k in range(1, 5)}
    report["rougeL"] = rouge_l(pairs)
    report["cider"] = cider(pairs, variant=cider_variant)
    return report

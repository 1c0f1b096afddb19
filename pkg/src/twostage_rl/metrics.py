"""Surface metrics over integer token sequences.

Tokens play the role of characters. For the "word" n-grams of chrF++ the
sequence is cut into non-overlapping pairs of tokens (the last word may be a
single token). All scores live in [0, 1].
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Mapping, Sequence

Tokens = Sequence[int]


class Recipe(str, Enum):
    PROXY_PLUS_CHRF = "proxy_plus_chrf"
    PROXY_PLUS_BLEU = "proxy_plus_bleu"


@dataclass(frozen=True)
class NGramProfile:
    counts: Mapping[tuple, int]
    n_max: int

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def order(self, n: int) -> Counter:
        return Counter({g: c for g, c in self.counts.items() if len(g) == n})


@dataclass(frozen=True)
class MetricScore:
    value: float
    components: dict = field(default_factory=dict)


def ngram_profile(seq: Tokens, n_max: int) -> NGramProfile:
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    seq = tuple(seq)
    counts: Counter = Counter()
    for n in range(1, n_max + 1):
        for i in range(len(seq) - n + 1):
            counts[seq[i:i + n]] += 1
    return NGramProfile(counts=dict(counts), n_max=n_max)


def _ngrams(seq: tuple, n: int) -> Counter:
    return Counter(seq[i:i + n] for i in range(len(seq) - n + 1))


def _words(seq: tuple) -> tuple:
    return tuple(seq[i:i + 2] for i in range(0, len(seq), 2))


def _f_beta(p: float, r: float, beta: float) -> float:
    b2 = beta * beta
    denom = b2 * p + r
    return (1 + b2) * p * r / denom if denom > 0 else 0.0


def chrf_pp(hypothesis: Tokens, reference: Tokens, char_order: int = 6,
            word_order: int = 2, beta: float = 2.0) -> MetricScore:
    """chrF++ with precision and recall averaged over the effective orders.

    An order is effective when both sides have at least one n-gram of that
    length; with no effective order the score is 0.
    """
    if char_order < 1 or word_order < 0:
        raise ValueError("char_order must be >= 1 and word_order >= 0")
    hyp, ref = tuple(hypothesis), tuple(reference)
    if not hyp and not ref:
        raise ValueError("undefined metric input")

    streams = [("chr", hyp, ref, char_order), ("word", _words(hyp), _words(ref), word_order)]
    components: dict[str, float] = {}
    sum_p = sum_r = 0.0
    effective = 0
    for name, h, r, order in streams:
        for n in range(1, order + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            n_hyp, n_ref = sum(hc.values()), sum(rc.values())
            if n_hyp == 0 or n_ref == 0:
                continue
            match = sum((hc & rc).values())
            p, rec = match / n_hyp, match / n_ref
            components[f"{name}{n}_P"] = p
            components[f"{name}{n}_R"] = rec
            sum_p += p
            sum_r += rec
            effective += 1
    if effective == 0:
        return MetricScore(0.0, {"precision": 0.0, "recall": 0.0, "effective_order": 0})
    p, r = sum_p / effective, sum_r / effective
    components.update(precision=p, recall=r, effective_order=effective)
    return MetricScore(_f_beta(p, r, beta), components)


def bleu(hypothesis: Tokens, reference: Tokens, max_order: int = 4,
         smoothing: str = "add_k", k: float = 1.0) -> MetricScore:
    """Sentence BLEU with brevity penalty.

    Orders longer than the hypothesis are dropped (effective order).
    ``add_k`` adds ``k`` to matches and totals of orders >= 2; ``exp_decay``
    replaces each zero-match precision by ``1 / (2**z * total)`` where ``z``
    counts the zero-match orders seen so far.
    """
    if max_order < 1:
        raise ValueError("max_order must be >= 1")
    if smoothing not in ("add_k", "exp_decay"):
        raise ValueError(f"unknown smoothing {smoothing!r}")
    hyp, ref = tuple(hypothesis), tuple(reference)
    if not hyp and not ref:
        raise ValueError("undefined metric input")
    if not hyp:
        return MetricScore(0.0, {"bp": 0.0})

    components: dict[str, float] = {}
    log_sum = 0.0
    effective = 0
    decay = 1.0
    zero = False
    for n in range(1, max_order + 1):
        total = len(hyp) - n + 1
        if total <= 0:
            break
        match = sum((_ngrams(hyp, n) & _ngrams(ref, n)).values())
        if smoothing == "add_k":
            p = (match + k) / (total + k) if n > 1 else match / total
        elif match == 0:
            decay *= 2.0
            p = 1.0 / (decay * total)
        else:
            p = match / total
        components[f"p{n}"] = p
        effective += 1
        if p <= 0.0:
            zero = True
        else:
            log_sum += math.log(p)

    c, r = len(hyp), len(ref)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    components.update(bp=bp, effective_order=effective)
    if zero:
        return MetricScore(0.0, components)
    return MetricScore(min(1.0, bp * math.exp(log_sum / effective)), components)


def semantic_proxy(hypothesis: Tokens, reference: Tokens) -> MetricScore:
    """Position-independent token F1 (multiset intersection)."""
    ref = tuple(reference)
    if not ref:
        raise ValueError("reference must be non-empty")
    hyp = tuple(hypothesis)
    overlap = sum((Counter(hyp) & Counter(ref)).values())
    if overlap == 0:
        return MetricScore(0.0, {"precision": 0.0, "recall": 0.0, "overlap": 0})
    p, r = overlap / len(hyp), overlap / len(ref)
    return MetricScore(2 * p * r / (p + r), {"precision": p, "recall": r, "overlap": overlap})


@lru_cache(maxsize=1 << 18)
def _components(pe: tuple, tgt: tuple, recipe: str) -> tuple[float, float]:
    semantic = semantic_proxy(pe, tgt).value
    if recipe == Recipe.PROXY_PLUS_CHRF.value:
        surface = chrf_pp(pe, tgt).value
    elif recipe == Recipe.PROXY_PLUS_BLEU.value:
        surface = bleu(pe, tgt).value
    else:
        raise ValueError(f"unknown recipe {recipe!r}")
    return semantic, surface


def quality_components(pe: Tokens, tgt: Tokens,
                       recipe: str | Recipe = Recipe.PROXY_PLUS_CHRF) -> tuple[float, float]:
    """Return ``(semantic, surface)``; their sum is :func:`quality_f`."""
    return _components(tuple(pe), tuple(tgt), Recipe(recipe).value)


def quality_f(pe: Tokens, src: Tokens, tgt: Tokens,
              recipe: str | Recipe = Recipe.PROXY_PLUS_CHRF) -> float:
    # src is unused by the surface proxies; kept for the reward signature
    semantic, surface = quality_components(pe, tgt, recipe)
    return semantic + surface


def score_line(hypothesis: Tokens, reference: Tokens) -> dict:
    """One row of the ``score`` subcommand output."""
    return {
        "chrf_pp": chrf_pp(hypothesis, reference).value,
        "bleu": bleu(hypothesis, reference).value,
        "proxy": semantic_proxy(hypothesis, reference).value,
        "quality_f": quality_f(hypothesis, (), reference),
    }

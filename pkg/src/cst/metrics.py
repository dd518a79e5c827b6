"""Sentence-level caption metrics used as rewards: CIDEr-D, BLEU and ROUGE-L.

All scorers take token-id tuples.  A trailing EOS on the inputs is ignored by
BLEU and ROUGE-L.  CIDEr-D normalises every sequence to end in exactly one EOS
token before extracting n-grams (``include_eos=True``), so that sentence
endings are rewarded like any other n-gram; pass ``include_eos=False`` for the
plain word-level score.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

from .data import EOS_ID

METRICS = ("cider", "bleu4", "rougeL")
CIDER_N = 4
CIDER_SIGMA = 6.0
ROUGE_BETA = 1.2


def _words(seq: Sequence[int], eos_id: int = EOS_ID) -> tuple:
    seq = tuple(seq)
    while seq and seq[-1] == eos_id:
        seq = seq[:-1]
    return seq


def _with_eos(seq: Sequence[int], include_eos: bool, eos_id: int = EOS_ID) -> tuple:
    words = _words(seq, eos_id)
    return words + (eos_id,) if include_eos else words


def ngram_counts(seq: Sequence[int], n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


@dataclass(frozen=True)
class DocFreq:
    """Per-order document frequencies; one reference set counts as one document."""

    counts: tuple  # one dict per n-gram order, ngram tuple -> df
    num_docs: int
    include_eos: bool = True

    @property
    def max_n(self) -> int:
        return len(self.counts)

    def __getitem__(self, ngram: tuple) -> int:
        return self.counts[len(ngram) - 1].get(ngram, 0)


def build_doc_freq(reference_sets: Sequence[Sequence[Sequence[int]]], n: int = CIDER_N,
                   include_eos: bool = True) -> DocFreq:
    if not reference_sets or not any(len(refs) for refs in reference_sets):
        raise ValueError("document frequencies need at least one reference")
    counts = [Counter() for _ in range(n)]
    for refs in reference_sets:
        seen = [set() for _ in range(n)]
        for ref in refs:
            ref = _with_eos(ref, include_eos)
            for k in range(n):
                seen[k].update(ngram_counts(ref, k + 1))
        for k in range(n):
            counts[k].update(seen[k])
    return DocFreq(tuple(dict(c) for c in counts), len(reference_sets), include_eos)


class _TfIdf:
    __slots__ = ("vecs", "norms", "length")

    def __init__(self, seq: tuple, df: DocFreq):
        log_docs = math.log(df.num_docs)
        self.vecs, self.norms = [], []
        for k in range(df.max_n):
            table = df.counts[k]
            vec = {g: tf * (log_docs - math.log(max(1, table.get(g, 0))))
                   for g, tf in ngram_counts(seq, k + 1).items()}
            self.vecs.append(vec)
            self.norms.append(math.sqrt(sum(v * v for v in vec.values())))
        self.length = len(seq)


def _cider_from_vectors(cand: _TfIdf, refs: Sequence[_TfIdf], sigma: float) -> float:
    total = 0.0
    for ref in refs:
        delta = cand.length - ref.length
        penalty = math.exp(-(delta * delta) / (2.0 * sigma * sigma))
        for k, cvec in enumerate(cand.vecs):
            rvec = ref.vecs[k]
            num = 0.0
            for g, w in cvec.items():
                r = rvec.get(g)
                if r is not None:
                    num += min(w, r) * r
            denom = cand.norms[k] * ref.norms[k]
            if denom != 0.0:
                total += penalty * num / denom
    return 10.0 * total / (len(cand.vecs) * len(refs))


def cider_d(candidate: Sequence[int], references: Sequence[Sequence[int]], df: DocFreq,
            sigma: float = CIDER_SIGMA) -> float:
    """CIDEr-D of one candidate against its references, in [0, 10]."""
    if len(candidate) == 0:
        raise ValueError("empty candidate")
    if not references:
        raise ValueError("no references")
    cand = _TfIdf(_with_eos(candidate, df.include_eos), df)
    refs = [_TfIdf(_with_eos(r, df.include_eos), df) for r in references]
    return _cider_from_vectors(cand, refs, sigma)


def bleu(candidate: Sequence[int], references: Sequence[Sequence[int]], max_n: int = 4) -> float:
    """Sentence BLEU with add-one smoothing of the n>1 precisions."""
    if len(candidate) == 0:
        raise ValueError("empty candidate")
    if not references:
        raise ValueError("no references")
    cand = _words(candidate)
    refs = [_words(r) for r in references]
    if not cand:
        return 0.0
    log_p = 0.0
    for n in range(1, max_n + 1):
        counts = ngram_counts(cand, n)
        max_ref: Counter = Counter()
        for r in refs:
            max_ref |= ngram_counts(r, n)
        matched = sum(min(c, max_ref[g]) for g, c in counts.items())
        total = max(len(cand) - n + 1, 0)
        if n == 1:
            if matched == 0:
                return 0.0
            log_p += math.log(matched / total)
        else:
            log_p += math.log((matched + 1) / (total + 1))
    c = len(cand)
    r = min((abs(len(ref) - c), len(ref)) for ref in refs)[1]
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_p / max_n)


def lcs_length(a: Sequence[int], b: Sequence[int]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[int], references: Sequence[Sequence[int]], beta: float = ROUGE_BETA) -> float:
    """LCS-based F-measure, maximised over references."""
    if len(candidate) == 0:
        raise ValueError("empty candidate")
    if not references:
        raise ValueError("no references")
    cand = _words(candidate)
    best = 0.0
    for ref in references:
        ref = _words(ref)
        lcs = lcs_length(cand, ref)
        if lcs == 0:
            continue
        p, r = lcs / len(cand), lcs / len(ref)
        best = max(best, (1 + beta ** 2) * p * r / (r + beta ** 2 * p))
    return best


class CountingScorer:
    """A reward function bound to one reference set that counts its calls.

    Reference TF-IDF vectors are computed once at construction, so repeated
    CIDEr rewards against the same item only pay for the candidate.
    """

    def __init__(self, metric: str, references: Sequence[Sequence[int]], df: DocFreq | None = None,
                 counter: list | None = None):
        if metric not in METRICS:
            raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
        if not references:
            raise ValueError("no references")
        self.metric = metric
        self.references = [tuple(r) for r in references]
        self.counter = counter if counter is not None else [0]
        if metric == "cider":
            if df is None:
                raise ValueError("CIDEr needs document frequencies")
            self.df = df
            self._refs = [_TfIdf(_with_eos(r, df.include_eos), df) for r in self.references]

    @property
    def calls(self) -> int:
        return self.counter[0]

    def __call__(self, candidate: Sequence[int]) -> float:
        self.counter[0] += 1
        if self.metric == "cider":
            if len(candidate) == 0:
                raise ValueError("empty candidate")
            cand = _TfIdf(_with_eos(candidate, self.df.include_eos), self.df)
            return _cider_from_vectors(cand, self._refs, CIDER_SIGMA)
        if self.metric == "bleu4":
            return bleu(candidate, self.references, 4)
        return rouge_l(candidate, self.references)


def sentence_scorer(metric: str) -> Callable:
    """Map a metric name (cider, bleu1..bleu4, rougeL) to ``f(cand, refs, df)``."""
    if metric == "cider":
        return lambda c, refs, df: cider_d(c, refs, df)
    if metric.startswith("bleu") and metric[4:].isdigit():
        n = int(metric[4:])
        return lambda c, refs, df: bleu(c, refs, n)
    if metric == "rougeL":
        return lambda c, refs, df: rouge_l(c, refs)
    raise ValueError(f"unknown metric {metric!r}")


@dataclass
class CorpusScore:
    value: float
    per_item: dict


def corpus_score(candidates: Mapping[str, Sequence[int]], dataset, metric: str = "cider",
                 df: DocFreq | None = None) -> CorpusScore:
    """Mean sentence score over the candidates' items.

    For CIDEr the document frequencies default to the dataset's references.
    """
    for item_id in candidates:
        if item_id not in dataset:
            raise KeyError(f"candidate for unknown item {item_id!r}")
    if not candidates:
        raise ValueError("no candidates")
    score = sentence_scorer(metric)
    if metric == "cider" and df is None:
        df = build_doc_freq(dataset.references())
    per_item = {k: score(c, dataset[k].captions, df) for k, c in candidates.items()}
    return CorpusScore(math.fsum(per_item.values()) / len(per_item), per_item)

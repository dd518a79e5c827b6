"""Beam-decode a dataset split and score it with BLEU-1..4, ROUGE-L and CIDEr-D."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

from .data import DEFAULT_MAX_LEN, Dataset, decode_caption
from .metrics import DocFreq, bleu, build_doc_freq, cider_d, rouge_l
from .model import ModelParams, beam_search

REPORT_METRICS = ("BLEU_1", "BLEU_2", "BLEU_3", "BLEU_4", "ROUGE_L", "CIDEr")


@dataclass
class EvalReport:
    scores: dict           # corpus score per metric in REPORT_METRICS
    candidates: dict       # item_id -> caption text
    per_item_cider: dict   # item_id -> CIDEr-D
    beam: int
    max_len: int

    def to_json(self) -> dict:
        return {
            "scores": self.scores,
            "decode": {"beam": self.beam, "max_len": self.max_len},
            "per_item": {k: {"caption": self.candidates[k], "CIDEr": self.per_item_cider[k]}
                         for k in self.candidates},
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")


def decode_dataset(params: ModelParams, dataset: Dataset, beam: int = 5,
                   max_len: int = DEFAULT_MAX_LEN) -> dict:
    return {it.item_id: beam_search(params, it.features, beam, max_len) for it in dataset}


def score_candidates(candidates: dict, dataset: Dataset, df: DocFreq | None = None,
                     include_eos: bool = False) -> tuple[dict, dict]:
    """Corpus scores per metric plus per-item CIDEr for already-decoded candidates."""
    if df is None:
        df = build_doc_freq(dataset.references(), include_eos=include_eos)
    per_metric = {m: {} for m in REPORT_METRICS}
    for item_id, cand in candidates.items():
        refs = dataset[item_id].captions
        for n in range(1, 5):
            per_metric[f"BLEU_{n}"][item_id] = bleu(cand, refs, n)
        per_metric["ROUGE_L"][item_id] = rouge_l(cand, refs)
        per_metric["CIDEr"][item_id] = cider_d(cand, refs, df)
    scores = {m: math.fsum(v.values()) / len(v) for m, v in per_metric.items()}
    return scores, per_metric["CIDEr"]


def evaluate(params: ModelParams, dataset: Dataset, beam: int = 5, max_len: int = DEFAULT_MAX_LEN,
             df: DocFreq | None = None, include_eos: bool = False) -> EvalReport:
    """Decode every item with beam search and report corpus metrics.

    CIDEr document frequencies come from ``dataset``'s own references unless
    ``df`` is given (e.g. built from the training split).  Scores are
    word-level by default, as in the usual evaluation toolkit.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if dataset.vocab is not None and len(dataset.vocab) != params.V:
        raise ValueError(f"vocabulary size {len(dataset.vocab)} does not match model V={params.V}")
    candidates = decode_dataset(params, dataset, beam, max_len)
    scores, per_item = score_candidates(candidates, dataset, df, include_eos)
    if dataset.vocab is not None:
        texts = {k: decode_caption(c, dataset.vocab) for k, c in candidates.items()}
    else:
        texts = {k: " ".join(map(str, c)) for k, c in candidates.items()}
    return EvalReport(scores, texts, per_item, beam, max_len)

"""Caption datasets: vocabulary, caption encoding, JSON-lines I/O, synthetic data.

Captions are handled as tuples of token ids that end with the EOS id.  BOS is
never stored inside a caption; the decoder feeds it implicitly.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BOS, EOS, UNK = "<bos>", "<eos>", "<unk>"
BOS_ID, EOS_ID, UNK_ID = 0, 1, 2
SPECIALS = (BOS, EOS, UNK)

DEFAULT_MAX_LEN = 20
DEFAULT_MIN_COUNT = 3
SPLITS = ("train", "val", "test")

TokenSequence = tuple  # tuple[int, ...]

_PUNCT = re.compile(r"[.,!?;:\"()]")


def tokenize(text: str) -> list[str]:
    """Lowercase, turn ``.,!?;:"()`` into spaces and split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    min_count: int = 0
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.tokens[:3]) != SPECIALS:
            raise ValueError(f"vocabulary must start with {SPECIALS}")
        index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        object.__setattr__(self, "index", index)

    bos_id = BOS_ID
    eos_id = EOS_ID
    unk_id = UNK_ID

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def to_json(self) -> dict:
        return {"tokens": list(self.tokens), "min_count": self.min_count}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(tuple(obj["tokens"]), int(obj.get("min_count", 0)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text()))


def build_vocab(raw_corpus: Iterable[tuple[str, Sequence[str]]], min_count: int = DEFAULT_MIN_COUNT) -> Vocabulary:
    """Keep every token seen more than ``min_count`` times.

    Tokens are ordered by descending count, ties broken lexicographically, so
    the result does not depend on corpus order.
    """
    if min_count < 0:
        raise ValueError("min_count must be >= 0")
    counts: Counter = Counter()
    n_captions = 0
    for _item_id, captions in raw_corpus:
        for caption in captions:
            n_captions += 1
            counts.update(tokenize(caption))
    if n_captions == 0:
        raise ValueError("empty corpus")
    kept = sorted(
        (tok for tok, n in counts.items() if n > min_count and tok not in SPECIALS),
        key=lambda tok: (-counts[tok], tok),
    )
    return Vocabulary(SPECIALS + tuple(kept), min_count)


def encode_caption(text: str, vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN) -> TokenSequence:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    words = tokenize(text)
    if not words:
        raise ValueError("empty caption")
    ids = [vocab.id(w) for w in words[: max_len - 1]]
    return tuple(ids) + (EOS_ID,)


def decode_caption(ids: Sequence[int], vocab: Vocabulary) -> str:
    """Render ids as text, stopping at the first EOS."""
    words = []
    for i in ids:
        if i == EOS_ID:
            break
        words.append(vocab.tokens[i])
    return " ".join(words)


@dataclass
class DatasetItem:
    item_id: str
    features: np.ndarray
    captions: list
    texts: list = field(default_factory=list)
    split: str = "train"

    @property
    def n_captions(self) -> int:
        return len(self.captions)


@dataclass
class Dataset:
    items: list
    feature_dim: int
    split: str = "train"
    vocab: Vocabulary | None = None

    def __post_init__(self):
        ids = [it.item_id for it in self.items]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate item ids")
        for it in self.items:
            if it.features.shape != (self.feature_dim,):
                raise ValueError(
                    f"item {it.item_id!r}: feature dimension {it.features.shape[0]} != {self.feature_dim}"
                )
        self._by_id = {it.item_id: it for it in self.items}

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, item_id: str) -> DatasetItem:
        return self._by_id[item_id]

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._by_id

    def subset(self, split: str) -> "Dataset":
        return Dataset([it for it in self.items if it.split == split], self.feature_dim, split, self.vocab)

    def splits(self) -> list[str]:
        return sorted({it.split for it in self.items}, key=SPLITS.index)

    def references(self) -> list[list]:
        return [it.captions for it in self.items]


def _split_tag(items) -> str:
    tags = {it.split for it in items}
    return tags.pop() if len(tags) == 1 else "mixed"


def dataset_from_records(records: Sequence[dict], vocab: Vocabulary | str = "build",
                         min_count: int = DEFAULT_MIN_COUNT, max_len: int = DEFAULT_MAX_LEN):
    """Encode already-parsed records; see :func:`load_dataset`."""
    if not records:
        raise ValueError("empty corpus")
    if isinstance(vocab, str):
        if vocab != "build":
            raise ValueError(f"vocab must be a Vocabulary or 'build', got {vocab!r}")
        train = [r for r in records if r.get("split", "train") == "train"] or records
        vocab = build_vocab(((r["id"], r["captions"]) for r in train), min_count)
    dim = len(records[0]["features"])
    items = []
    for rec in records:
        feats = np.asarray(rec["features"], dtype=np.float64)
        if feats.shape != (dim,):
            raise ValueError(f"item {rec['id']!r}: feature dimension {feats.shape[0]} != {dim}")
        items.append(DatasetItem(
            rec["id"], feats,
            [encode_caption(c, vocab, max_len) for c in rec["captions"]],
            list(rec["captions"]), rec.get("split", "train"),
        ))
    return Dataset(items, dim, _split_tag(items), vocab), vocab


def read_records(path) -> list[dict]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            problem = _check_record(rec)
            if problem:
                raise ValueError(f"line {lineno}: {problem}")
            records.append(rec)
    return records


def _check_record(rec) -> str | None:
    if not isinstance(rec, dict):
        return "record is not an object"
    if not isinstance(rec.get("id"), str):
        return "missing string field 'id'"
    feats = rec.get("features")
    if not isinstance(feats, list) or not feats or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) for x in feats):
        return "'features' must be a non-empty list of numbers"
    caps = rec.get("captions")
    if not isinstance(caps, list) or not caps or not all(isinstance(c, str) for c in caps):
        return "'captions' must be a non-empty list of strings"
    if rec.get("split", "train") not in SPLITS:
        return f"'split' must be one of {SPLITS}"
    return None


def load_dataset(path, vocab: Vocabulary | str = "build", min_count: int = DEFAULT_MIN_COUNT,
                 max_len: int = DEFAULT_MAX_LEN):
    """Read a JSON-lines dataset and return ``(dataset, vocab)``.

    With ``vocab="build"`` the vocabulary is built from the file's train-split
    captions (all captions if the file has no train split).
    """
    return dataset_from_records(read_records(path), vocab, min_count, max_len)


def save_dataset(dataset: Dataset, path) -> None:
    with open(path, "w") as fh:
        for it in dataset.items:
            if not it.texts:
                raise ValueError(f"item {it.item_id!r} has no caption texts to write")
            rec = {"id": it.item_id, "features": [float(x) for x in it.features],
                   "captions": list(it.texts), "split": it.split}
            fh.write(json.dumps(rec) + "\n")


def generate_synthetic(seed: int, n_items: int, vocab_size: int, captions_per_item: int,
                       consensus_noise: float, *, n_topics: int | None = None,
                       val_fraction: float = 0.0, test_fraction: float = 0.0,
                       min_words: int = 4, max_words: int = 8, feature_noise: float = 0.1,
                       max_len: int = DEFAULT_MAX_LEN) -> Dataset:
    """Topic-template captioning data with controllable disagreement between captions.

    Every item belongs to a latent topic.  Its feature vector is the topic's
    one-hot code plus Gaussian noise, and each of its captions is the topic's
    template sentence with every word independently replaced by a random word
    with probability ``consensus_noise``.  Items are split into
    train/val/test by the given fractions; the vocabulary is built from the
    train captions with ``min_count=0``.
    """
    if min(n_items, captions_per_item) < 1:
        raise ValueError("n_items and captions_per_item must be >= 1")
    if vocab_size < 5:
        raise ValueError("vocab_size must be >= 5")
    if not 0.0 <= consensus_noise <= 1.0:
        raise ValueError("consensus_noise must lie in [0, 1]")
    if not 1 <= min_words <= max_words:
        raise ValueError("need 1 <= min_words <= max_words")
    rng = np.random.default_rng(seed)
    n_topics = n_topics or max(2, min(20, n_items // 10))
    words = [f"w{i}" for i in range(vocab_size)]

    templates = []
    for _ in range(n_topics):
        length = int(rng.integers(min_words, max_words + 1))
        picks = rng.choice(vocab_size, size=length, replace=length > vocab_size)
        templates.append([words[i] for i in picks])

    topics = rng.integers(0, n_topics, size=n_items)
    n_val = int(round(val_fraction * n_items))
    n_test = int(round(test_fraction * n_items))
    if n_val + n_test > n_items:
        raise ValueError("val_fraction + test_fraction exceeds 1")
    split_of = ["train"] * (n_items - n_val - n_test) + ["val"] * n_val + ["test"] * n_test

    width = len(str(n_items - 1))
    records = []
    for k in range(n_items):
        topic = int(topics[k])
        feats = np.zeros(n_topics)
        feats[topic] = 1.0
        feats += feature_noise * rng.standard_normal(n_topics)
        captions = []
        for _ in range(captions_per_item):
            corrupt = rng.random(len(templates[topic])) < consensus_noise
            fillers = rng.integers(0, vocab_size, size=len(templates[topic]))
            captions.append(" ".join(
                words[f] if c else w for w, c, f in zip(templates[topic], corrupt, fillers)))
        records.append({"id": f"item{k:0{width}d}", "features": [float(x) for x in feats],
                        "captions": captions, "split": split_of[k]})
    dataset, _ = dataset_from_records(records, "build", min_count=0, max_len=max_len)
    return dataset

"""Triple ingestion, vocabularies, reciprocal augmentation, filter indexes,
quiz sampling, long-tail relation selection and deterministic batching.

Triple lists are ``(n, 3)`` int64 arrays of ``(head, rel, tail)`` ids.
"""
from __future__ import annotations

import hashlib
import logging
import os
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

log = logging.getLogger(__name__)

SPLIT_FILES = ("train.txt", "valid.txt", "test.txt")


class TripleParseError(ValueError):
    pass


class VocabularyError(KeyError):
    pass


@dataclass(frozen=True)
class Vocab:
    entities: Tuple[str, ...] = ()
    relations: Tuple[str, ...] = ()
    entity_to_id: Dict[str, int] = field(default_factory=dict, compare=False, repr=False)
    relation_to_id: Dict[str, int] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "entity_to_id", {n: i for i, n in enumerate(self.entities)})
        object.__setattr__(self, "relation_to_id", {n: i for i, n in enumerate(self.relations)})
        if len(self.entity_to_id) != len(self.entities) or \
                len(self.relation_to_id) != len(self.relations):
            raise ValueError("vocabulary names must be unique")

    @property
    def entity_count(self) -> int:
        return len(self.entities)

    @property
    def relation_count(self) -> int:
        return len(self.relations)

    def extended(self, entities, relations) -> "Vocab":
        new_e = list(self.entities)
        seen_e = set(new_e)
        for name in entities:
            if name not in seen_e:
                seen_e.add(name)
                new_e.append(name)
        new_r = list(self.relations)
        seen_r = set(new_r)
        for name in relations:
            if name not in seen_r:
                seen_r.add(name)
                new_r.append(name)
        return Vocab(tuple(new_e), tuple(new_r))


def empty_triples() -> np.ndarray:
    return np.zeros((0, 3), dtype=np.int64)


def read_triple_names(path) -> List[Tuple[str, str, str]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise TripleParseError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            rows.append((parts[0], parts[1], parts[2]))
    return rows


def load_triples(path, vocab: Optional[Vocab] = None, strict: bool = False):
    """Parse a triple file into ids, extending ``vocab`` with unseen names.

    In strict mode an unseen name raises :class:`VocabularyError` instead.
    Returns ``(triples, vocab)``; triples keep file order.
    """
    vocab = vocab or Vocab()
    rows = read_triple_names(path)
    if strict:
        for h, r, t in rows:
            for name, table in ((h, vocab.entity_to_id), (r, vocab.relation_to_id),
                                (t, vocab.entity_to_id)):
                if name not in table:
                    raise VocabularyError(f"{path}: unseen name {name!r}")
    else:
        ents = [x for h, _, t in rows for x in (h, t)]
        vocab = vocab.extended(ents, [r for _, r, _ in rows])
    e, rel = vocab.entity_to_id, vocab.relation_to_id
    triples = np.array([(e[h], rel[r], e[t]) for h, r, t in rows], dtype=np.int64)
    return triples.reshape(-1, 3), vocab


def deduplicate(triples: np.ndarray, name: str = "split") -> np.ndarray:
    """Drop repeated triples, keeping first occurrences in order."""
    if len(triples) == 0:
        return triples
    _, first = np.unique(triples, axis=0, return_index=True)
    if len(first) < len(triples):
        log.warning("%s: dropped %d duplicate triples (%d -> %d)", name,
                    len(triples) - len(first), len(triples), len(first))
    return triples[np.sort(first)]


def augment_reciprocal(triples, relation_count: int) -> np.ndarray:
    """Append ``(t, r + relation_count, h)`` for every ``(h, r, t)``."""
    triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
    if len(triples) and triples[:, 1].max() >= relation_count:
        raise ValueError("relation id >= relation_count; already augmented?")
    inverse = np.stack([triples[:, 2], triples[:, 1] + relation_count, triples[:, 0]], axis=1)
    return np.concatenate([triples, inverse])


@dataclass(frozen=True)
class SplitData:
    train: np.ndarray
    valid: np.ndarray = field(default_factory=empty_triples)
    test: np.ndarray = field(default_factory=empty_triples)
    quiz: np.ndarray = field(default_factory=empty_triples)
    entity_count: int = 0
    relation_count: int = 0
    augmented: bool = False

    def augment(self) -> "SplitData":
        if self.augmented:
            return self
        r = self.relation_count
        return replace(self, train=augment_reciprocal(self.train, r),
                       valid=augment_reciprocal(self.valid, r),
                       test=augment_reciprocal(self.test, r),
                       quiz=augment_reciprocal(self.quiz, r), augmented=True)

    def split(self, name: str) -> np.ndarray:
        return getattr(self, name)


class FilterIndex:
    """Known-true tails for each ``(head, rel)`` query over train, valid and test."""

    def __init__(self, answers: Dict[Tuple[int, int], frozenset]):
        self.answers = answers

    def __getitem__(self, key) -> frozenset:
        return self.answers.get((int(key[0]), int(key[1])), frozenset())

    def __len__(self):
        return len(self.answers)


def build_filter_index(splits) -> FilterIndex:
    """``splits`` is a :class:`SplitData` or any iterable of triple arrays."""
    if isinstance(splits, SplitData):
        arrays = [splits.train, splits.valid, splits.test]
        if len(splits.quiz):
            arrays.append(splits.quiz)  # held-out quiz triples are still true facts
    else:
        arrays = list(splits)
    acc: Dict[Tuple[int, int], set] = {}
    for arr in arrays:
        for h, r, t in np.asarray(arr, dtype=np.int64).reshape(-1, 3).tolist():
            acc.setdefault((h, r), set()).add(t)
    return FilterIndex({k: frozenset(v) for k, v in acc.items()})


def sample_quiz(train, size: int, seed: int, overlap: bool = False) -> SplitData:
    """Draw a fixed quiz set of ``size`` distinct training triples.

    Without ``overlap`` the quiz triples leave the training stream.
    """
    train = np.asarray(train, dtype=np.int64).reshape(-1, 3)
    if size < 0 or size > len(train):
        raise ValueError(f"quiz size {size} exceeds training set size {len(train)}")
    rng = np.random.default_rng([seed, 0x9_1121])
    picked = np.sort(rng.choice(len(train), size=size, replace=False))
    quiz = train[picked]
    if overlap:
        stream = train
    else:
        keep = np.ones(len(train), dtype=bool)
        keep[picked] = False
        stream = train[keep]
    return SplitData(train=stream, quiz=quiz)


def relation_counts(train, relation_count: Optional[int] = None) -> Counter:
    rels = np.asarray(train, dtype=np.int64).reshape(-1, 3)[:, 1]
    if relation_count is not None:
        rels = rels[rels < relation_count]
    return Counter(rels.tolist())


def long_tail_relations(train, threshold: int, relation_count: Optional[int] = None) -> set:
    """Relations with fewer than ``threshold`` training triples.

    Counts use original relations only; with ``relation_count`` given,
    reciprocal rows are ignored and relations absent from train are included.
    """
    counts = relation_counts(train, relation_count)
    ids = range(relation_count) if relation_count is not None else counts.keys()
    return {r for r in ids if counts.get(r, 0) < threshold}


def batches(triples, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    triples = np.asarray(triples).reshape(-1, 3)
    order = np.random.default_rng([seed, epoch]).permutation(len(triples))
    for start in range(0, len(triples), batch_size):
        yield triples[order[start:start + batch_size]]


@dataclass(frozen=True)
class Dataset:
    """Deduplicated original (non-augmented) splits of one dataset directory."""

    vocab: Vocab
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    digest: str = ""

    @property
    def entity_count(self):
        return self.vocab.entity_count

    @property
    def relation_count(self):
        return self.vocab.relation_count

    def splits(self, quiz_size: int = 0, seed: int = 0, overlap: bool = False) -> SplitData:
        """Quiz-sampled and reciprocal-augmented splits ready for training."""
        base = sample_quiz(self.train, quiz_size, seed, overlap)
        return SplitData(train=base.train, valid=self.valid, test=self.test, quiz=base.quiz,
                         entity_count=self.entity_count,
                         relation_count=self.relation_count).augment()


BUNDLED_DIR = Path(__file__).parent / "data"


def resolve_dataset_dir(path) -> Path:
    """``path`` itself, else ``$METASD_DATA_DIR/path``, else a bundled dataset name."""
    p = Path(path)
    if not p.is_dir():
        root = os.environ.get("METASD_DATA_DIR")
        if root and (Path(root) / p).is_dir():
            return Path(root) / p
        if (BUNDLED_DIR / p).is_dir():
            return BUNDLED_DIR / p
    return p


def dataset_digest(directory) -> str:
    h = hashlib.sha256()
    for name in SPLIT_FILES:
        h.update(name.encode())
        h.update((Path(directory) / name).read_bytes())
    return h.hexdigest()


def load_dataset(directory, dedupe: bool = True) -> Dataset:
    """Load ``train.txt``, ``valid.txt`` and ``test.txt``.

    Ids are assigned in first-appearance order over train, then valid, then test.
    """
    directory = resolve_dataset_dir(directory)
    missing = [n for n in SPLIT_FILES if not (directory / n).is_file()]
    if missing:
        raise FileNotFoundError(f"{directory}: missing {', '.join(missing)}")
    vocab = Vocab()
    out = {}
    for name in SPLIT_FILES:
        triples, vocab = load_triples(directory / name, vocab)
        out[name] = deduplicate(triples, name) if dedupe else triples
    return Dataset(vocab, out["train.txt"], out["valid.txt"], out["test.txt"],
                   dataset_digest(directory))


def write_triples(path, triples, vocab: Vocab):
    with open(path, "w", encoding="utf-8") as fh:
        for h, r, t in np.asarray(triples).reshape(-1, 3).tolist():
            fh.write(f"{vocab.entities[h]}\t{vocab.relations[r]}\t{vocab.entities[t]}\n")


def write_dataset(directory, dataset: Dataset):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, triples in zip(SPLIT_FILES, (dataset.train, dataset.valid, dataset.test)):
        write_triples(directory / name, triples, dataset.vocab)

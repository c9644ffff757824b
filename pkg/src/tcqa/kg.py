"""Knowledge graph container, vocabulary interning and TSV loaders."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
INVERSE_SUFFIX = "_inv"


class ParseError(ValueError):
    """Malformed line in an input TSV file."""

    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


class Vocab:
    """Bijective name <-> dense id table, ids assigned in insertion order."""

    def __init__(self, names=()):
        self._ids: dict[str, int] = {}
        self._names: list[str] = []
        for name in names:
            self.add(name)

    def add(self, name: str) -> int:
        idx = self._ids.get(name)
        if idx is None:
            idx = len(self._names)
            self._ids[name] = idx
            self._names.append(name)
        return idx

    def id(self, name: str) -> int:
        return self._ids[name]

    def name(self, idx: int) -> str:
        return self._names[idx]

    def get(self, name, default=None):
        return self._ids.get(name, default)

    def __contains__(self, name) -> bool:
        return name in self._ids

    def __len__(self) -> int:
        return len(self._names)

    def __iter__(self):
        return iter(self._names)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self._names == other._names

    @property
    def names(self) -> list[str]:
        return list(self._names)

    def copy(self) -> "Vocab":
        return Vocab(self._names)

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for idx, name in enumerate(self._names):
                fh.write(f"{name}\t{idx}\n")


def _dedup(triples: np.ndarray) -> np.ndarray:
    """Drop repeated rows, keeping the first occurrence order."""
    if len(triples) == 0:
        return triples.reshape(0, 3)
    _, first = np.unique(triples, axis=0, return_index=True)
    return triples[np.sort(first)]


@dataclass
class TripleFragment:
    entities: Vocab
    relations: Vocab
    triples: np.ndarray  # (n, 3) int64 rows of (head, relation, tail)
    split: str = "train"


def load_triples(path, split="train", entities=None, relations=None) -> TripleFragment:
    """Read ``head<TAB>relation<TAB>tail`` lines.

    Unseen names extend ``entities``/``relations`` (new vocabularies when not
    given) in order of first appearance. Duplicate lines collapse to one triple.
    """
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    entities = Vocab() if entities is None else entities
    relations = Vocab() if relations is None else relations
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(path, lineno, f"expected 3 tab-separated fields, got {len(parts)}")
            h, r, t = parts
            rows.append((entities.add(h), relations.add(r), entities.add(t)))
    triples = _dedup(np.array(rows, dtype=np.int64).reshape(-1, 3))
    return TripleFragment(entities, relations, triples, split)


@dataclass
class KnowledgeGraph:
    """Entities, relations and per-split triples.

    With ``inverse=True`` relation ``r + num_base_relations`` is the reciprocal
    of ``r`` and every split carries the reversed copy of each triple.
    """

    entities: Vocab
    relations: Vocab
    splits: dict = field(default_factory=dict)
    num_base_relations: int = 0
    inverse: bool = False

    @classmethod
    def from_fragments(cls, fragments, inverse=True) -> "KnowledgeGraph":
        fragments = list(fragments)
        entities, relations = Vocab(), Vocab()
        # re-intern so ids stay dense in first-appearance order across fragments
        remapped = {s: [] for s in SPLITS}
        for frag in fragments:
            ent_map = np.array([entities.add(n) for n in frag.entities], dtype=np.int64)
            rel_map = np.array([relations.add(n) for n in frag.relations], dtype=np.int64)
            t = frag.triples
            if len(t):
                t = np.stack([ent_map[t[:, 0]], rel_map[t[:, 1]], ent_map[t[:, 2]]], axis=1)
            remapped[frag.split].append(t.reshape(-1, 3))
        return cls.from_arrays(entities, relations,
                               {s: np.concatenate(v) if v else None for s, v in remapped.items()},
                               inverse=inverse)

    @classmethod
    def from_arrays(cls, entities, relations, splits, inverse=True) -> "KnowledgeGraph":
        """Build from id triples; ``splits`` maps split name to (n, 3) arrays."""
        if not isinstance(entities, Vocab):
            entities = Vocab(entities)
        if not isinstance(relations, Vocab):
            relations = Vocab(relations)
        n_base = len(relations)
        if inverse:
            relations = relations.copy()
            for name in list(relations)[:n_base]:
                relations.add(name + INVERSE_SUFFIX)
        out = {}
        for s in SPLITS:
            t = splits.get(s)
            t = np.zeros((0, 3), np.int64) if t is None else np.asarray(t, dtype=np.int64).reshape(-1, 3)
            if len(t) and (t[:, [0, 2]].max() >= len(entities) or t[:, 1].max() >= n_base or t.min() < 0):
                raise ValueError(f"{s} split references ids outside the vocabularies")
            t = _dedup(t)
            if inverse:
                t = np.concatenate([t, np.stack([t[:, 2], t[:, 1] + n_base, t[:, 0]], axis=1)])
                t = _dedup(t)
            out[s] = t
        return cls(entities, relations, out, n_base, inverse)

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    def inverse_of(self, r: int) -> int:
        if not self.inverse:
            raise ValueError("graph has no reciprocal relations")
        n = self.num_base_relations
        return r + n if r < n else r - n

    def triples(self, upto="train") -> np.ndarray:
        return np.concatenate([self.splits[s] for s in _splits_upto(upto)])

    def entity_id(self, key) -> int:
        return _resolve(self.entities, key, "entity")

    def relation_id(self, key) -> int:
        return _resolve(self.relations, key, "relation")


def _resolve(vocab, key, kind) -> int:
    if isinstance(key, (int, np.integer)) and not isinstance(key, bool):
        if not 0 <= key < len(vocab):
            raise KeyError(f"{kind} id {key} out of range")
        return int(key)
    idx = vocab.get(key)
    if idx is None:
        raise KeyError(f"unknown {kind} {key!r}")
    return idx


def _splits_upto(upto) -> tuple:
    aliases = {
        "train": ("train",),
        "valid": ("train", "valid"),
        "train+valid": ("train", "valid"),
        "test": SPLITS,
        "train+valid+test": SPLITS,
        "all": SPLITS,
    }
    try:
        return aliases[upto]
    except KeyError:
        raise ValueError(f"unknown graph view {upto!r}") from None


def load_kg(path, inverse=True) -> KnowledgeGraph:
    """Load a dataset directory (``train.tsv``, optional ``valid.tsv``/``test.tsv``) or a single train file."""
    path = Path(path)
    files = {"train": path} if path.is_file() else {s: path / f"{s}.tsv" for s in SPLITS}
    if not files["train"].exists():
        raise FileNotFoundError(files["train"])
    entities, relations = Vocab(), Vocab()
    frags = []
    for split, f in files.items():
        if f.exists():
            frags.append(load_triples(f, split, entities, relations))
    return KnowledgeGraph.from_fragments(frags, inverse=inverse)


@dataclass
class TypeAnnotations:
    types: Vocab
    pairs: np.ndarray  # (n, 2) int64 rows of (entity, type)
    skipped: int = 0

    def entity_types(self, num_entities) -> list[frozenset]:
        acc = [set() for _ in range(num_entities)]
        for e, tp in self.pairs:
            acc[e].add(int(tp))
        return [frozenset(s) for s in acc]


def load_types(path, kg: KnowledgeGraph) -> TypeAnnotations:
    """Read ``entity<TAB>type`` lines; entities unknown to ``kg`` are skipped."""
    types = Vocab()
    pairs = []
    skipped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(path, lineno, f"expected 2 tab-separated fields, got {len(parts)}")
            ent, tp = parts
            e = kg.entities.get(ent)
            if e is None:
                skipped += 1
                continue
            pairs.append((e, types.add(tp)))
    if skipped:
        logger.warning("%s: skipped %d type lines for unknown entities", path, skipped)
    arr = np.array(sorted(set(pairs)), dtype=np.int64).reshape(-1, 2)
    return TypeAnnotations(types, arr, skipped)


def graph_view(kg: KnowledgeGraph, upto="train") -> dict:
    """Map ``(head, relation)`` to the sorted tail array over the chosen splits."""
    t = kg.triples(upto)
    if len(t) == 0:
        return {}
    t = np.unique(t, axis=0)  # lexicographic, so tails come out sorted per (h, r)
    keys, starts = np.unique(t[:, :2], axis=0, return_index=True)
    bounds = np.append(starts, len(t))
    return {(int(h), int(r)): t[bounds[k]:bounds[k + 1], 2] for k, (h, r) in enumerate(keys)}

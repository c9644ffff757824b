"""Type-based head/tail entity-relation compatibility graphs."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .kg import KnowledgeGraph, TypeAnnotations

logger = logging.getLogger(__name__)


@dataclass
class TypedEntityRelationGraphs:
    """Compatibility of (entity, relation) pairs derived from entity types.

    ``head_mask[r, e]`` marks ``(e, r)`` in the head graph, ``tail_mask``
    likewise for the tail graph. ``head_types[r]`` is the union of the types
    of every observed head of ``r``; ``tail_types[r]`` the intersection over
    observed tails.
    """

    head_types: list
    tail_types: list
    head_mask: np.ndarray
    tail_mask: np.ndarray
    report: dict = field(default_factory=dict)

    @property
    def num_relations(self) -> int:
        return self.head_mask.shape[0]

    @property
    def num_entities(self) -> int:
        return self.head_mask.shape[1]

    @property
    def head_compat(self) -> set:
        return {(int(e), int(r)) for r, e in zip(*np.nonzero(self.head_mask))}

    @property
    def tail_compat(self) -> set:
        return {(int(e), int(r)) for r, e in zip(*np.nonzero(self.tail_mask))}

    def compat_mask(self, r: int, side: str = "head") -> np.ndarray:
        if side == "head":
            return self.head_mask[r]
        if side == "tail":
            return self.tail_mask[r]
        raise ValueError(f"side must be 'head' or 'tail', not {side!r}")

    @classmethod
    def full(cls, num_entities, num_relations) -> "TypedEntityRelationGraphs":
        """Every pair compatible; the ablation without type skipping."""
        ones = np.ones((num_relations, num_entities), dtype=bool)
        empty = [frozenset()] * num_relations
        return cls(empty, empty, ones, ones.copy(), {"full": True})

    @classmethod
    def empty(cls, num_entities, num_relations) -> "TypedEntityRelationGraphs":
        zeros = np.zeros((num_relations, num_entities), dtype=bool)
        empty = [frozenset()] * num_relations
        return cls(empty, empty, zeros, zeros.copy(), {})

    def dump(self, path, kg: KnowledgeGraph | None = None) -> None:
        ename = kg.entities.name if kg else str
        rname = kg.relations.name if kg else str
        with open(path, "w", encoding="utf-8") as fh:
            for side, mask in (("head", self.head_mask), ("tail", self.tail_mask)):
                for r, e in zip(*np.nonzero(mask)):
                    fh.write(f"{rname(int(r))}\t{side}\t{ename(int(e))}\n")


def build_type_graphs(kg: KnowledgeGraph, types: TypeAnnotations) -> TypedEntityRelationGraphs:
    """Build both compatibility graphs from the train split.

    Observed heads of ``r`` are always head-compatible, whatever their types.
    When the tail type intersection of ``r`` is empty (e.g. one observed tail
    is untyped), the tail graph falls back to the observed tails of ``r``.
    """
    train = kg.splits["train"]
    if len(train) == 0:
        raise ValueError("train split is empty")
    n_ent, n_rel = kg.num_entities, kg.num_relations
    ent_types = types.entity_types(n_ent)
    n_types = len(types.types)

    # entity x type incidence
    type_matrix = np.zeros((n_ent, max(n_types, 1)), dtype=bool)
    if len(types.pairs):
        type_matrix[types.pairs[:, 0], types.pairs[:, 1]] = True

    head_types, tail_types = [], []
    head_mask = np.zeros((n_rel, n_ent), dtype=bool)
    tail_mask = np.zeros((n_rel, n_ent), dtype=bool)
    order = np.argsort(train[:, 1], kind="stable")
    rel_sorted = train[order]
    bounds = np.searchsorted(rel_sorted[:, 1], np.arange(n_rel + 1))
    no_triples, fallback = [], []
    for r in range(n_rel):
        tr = rel_sorted[bounds[r]:bounds[r + 1]]
        if len(tr) == 0:
            head_types.append(frozenset())
            tail_types.append(frozenset())
            no_triples.append(r)
            continue
        heads = np.unique(tr[:, 0])
        tails = np.unique(tr[:, 2])
        hd = frozenset().union(*(ent_types[h] for h in heads))
        tl = frozenset.intersection(*(ent_types[t] for t in tails))
        head_types.append(hd)
        tail_types.append(tl)
        if hd:
            head_mask[r] = type_matrix[:, sorted(hd)].any(axis=1)
        head_mask[r, heads] = True
        if tl:
            tail_mask[r] = type_matrix[:, sorted(tl)].any(axis=1)
        else:
            tail_mask[r, tails] = True
            fallback.append(r)

    report = {
        "relations_without_triples": no_triples,
        "tail_fallback_relations": fallback,
        "head_pairs": int(head_mask.sum()),
        "tail_pairs": int(tail_mask.sum()),
    }
    if no_triples:
        logger.warning("%d relations have no training triples", len(no_triples))
    if fallback:
        logger.info("%d relations use observed tails as tail graph (empty type intersection)",
                    len(fallback))
    return TypedEntityRelationGraphs(head_types, tail_types, head_mask, tail_mask, report)


def compat_mask(graphs: TypedEntityRelationGraphs, r: int, side: str = "head") -> np.ndarray:
    return graphs.compat_mask(r, side)

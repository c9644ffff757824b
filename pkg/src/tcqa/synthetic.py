"""Synthetic typed knowledge graphs with learnable community structure."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np

from .kg import KnowledgeGraph, TypeAnnotations, Vocab, load_kg, load_types


def make_typed_kg(n_entities=200, n_relations=8, n_types=4, n_communities=3, subtypes=True,
                  head_activity=0.7, max_tails=3, noise=0.1, valid_fraction=0.0,
                  test_fraction=0.1, seed=0, inverse=True):
    """Random KG where each relation links one head type to one tail type.

    Entities get one primary type (an equal partition) and, with ``subtypes``,
    one of two subtypes of it. Inside a type entities fall into communities;
    relation ``r`` maps the head's community to a tail community, which makes
    held-out edges predictable from the rest. Held-out edges keep both
    endpoints present in train.

    Returns (KnowledgeGraph, TypeAnnotations).
    """
    rng = np.random.default_rng(seed)
    ent_type = np.arange(n_entities) % n_types
    rng.shuffle(ent_type)
    community = rng.integers(n_communities, size=n_entities)
    subtype = rng.integers(2, size=n_entities)

    triples = set()
    for r in range(n_relations):
        a, b = rng.integers(n_types, size=2)
        mapping = rng.permutation(n_communities)
        heads = np.flatnonzero(ent_type == a)
        tails_all = np.flatnonzero(ent_type == b)
        for h in heads:
            if rng.random() > head_activity:
                continue
            pool = tails_all[community[tails_all] == mapping[community[h]]]
            for _ in range(rng.integers(1, max_tails + 1)):
                src = tails_all if (rng.random() < noise or len(pool) == 0) else pool
                t = int(rng.choice(src))
                if t != h:
                    triples.add((int(h), r, t))
    triples = np.array(sorted(triples), dtype=np.int64)
    triples = triples[rng.permutation(len(triples))]

    # hold out edges only while both endpoints keep another train edge
    degree = np.bincount(triples[:, [0, 2]].ravel(), minlength=n_entities)
    rel_count = np.bincount(triples[:, 1], minlength=n_relations)
    want = {"valid": int(round(valid_fraction * len(triples))), "test": int(round(test_fraction * len(triples)))}
    split = np.zeros(len(triples), dtype=np.int64)  # 0 train, 1 valid, 2 test
    for code, name in ((2, "test"), (1, "valid")):
        taken = 0
        for k, (h, r, t) in enumerate(triples):
            if taken >= want[name]:
                break
            if split[k] or degree[h] < 2 or degree[t] < 2 or rel_count[r] < 2:
                continue
            split[k] = code
            degree[h] -= 1
            degree[t] -= 1
            rel_count[r] -= 1
            taken += 1

    entities = [f"e{i}" for i in range(n_entities)]
    relations = [f"r{i}" for i in range(n_relations)]
    kg = KnowledgeGraph.from_arrays(entities, relations,
                                    {"train": triples[split == 0], "valid": triples[split == 1],
                                     "test": triples[split == 2]}, inverse=inverse)
    types = Vocab()
    pairs = []
    for e in range(n_entities):
        pairs.append((e, types.add(f"t{ent_type[e]}")))
        if subtypes:
            pairs.append((e, types.add(f"t{ent_type[e]}.s{subtype[e]}")))
    ann = TypeAnnotations(types, np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2))
    return kg, ann


def write_dataset(kg: KnowledgeGraph, types: TypeAnnotations, directory) -> Path:
    """Write ``train/valid/test.tsv`` (base relations only) and ``types.tsv``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ename, rname = kg.entities.name, kg.relations.name
    for split in ("train", "valid", "test"):
        t = kg.splits[split]
        t = t[t[:, 1] < kg.num_base_relations] if kg.inverse else t
        with open(d / f"{split}.tsv", "w", encoding="utf-8") as fh:
            for h, r, x in t:
                fh.write(f"{ename(h)}\t{rname(r)}\t{ename(x)}\n")
    present = np.zeros(kg.num_entities, bool)
    for t in kg.splits.values():
        present[t[:, [0, 2]].ravel()] = True
    with open(d / "types.tsv", "w", encoding="utf-8") as fh:
        for e, tp in types.pairs[present[types.pairs[:, 0]]]:
            fh.write(f"{ename(e)}\t{types.types.name(tp)}\n")
    return d


def bundled_dataset_path() -> Path:
    """Directory of the 50-entity synthetic dataset shipped with the package."""
    return Path(str(resources.files("tcqa") / "data" / "synthetic50"))


def load_bundled():
    path = bundled_dataset_path()
    kg = load_kg(path)
    return kg, load_types(path / "types.tsv", kg)

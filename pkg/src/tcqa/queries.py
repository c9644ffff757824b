"""Query trees, the 14 benchmark structures, JSON I/O, exact answers and sampling."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .kg import KnowledgeGraph, graph_view

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Anchor:
    entity: int


@dataclass(frozen=True)
class Projection:
    relation: int
    child: "Node"
    negated: bool = False


@dataclass(frozen=True)
class And:
    children: tuple

    def __post_init__(self):
        if len(self.children) < 2:
            raise ValueError("And needs at least two children")


@dataclass(frozen=True)
class Or:
    children: tuple

    def __post_init__(self):
        if len(self.children) < 2:
            raise ValueError("Or needs at least two children")


Node = Union[Anchor, Projection, And, Or]


@dataclass(frozen=True)
class Query:
    root: Node
    label: str | None = None


@dataclass
class LabeledQuery:
    query: Query
    easy: frozenset = field(default_factory=frozenset)
    hard: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        self.easy = frozenset(int(a) for a in self.easy)
        self.hard = frozenset(int(a) for a in self.hard)
        if self.easy & self.hard:
            raise ValueError("easy and hard answers overlap")

    @property
    def label(self):
        return self.query.label

    @property
    def answers(self) -> frozenset:
        return self.easy | self.hard


# --- structures ---------------------------------------------------------------

def _p(child, neg=False):
    return ("n" if neg else "p", child)


_E = ("e",)
# shape of each structure; built from 'e' (anchor), 'p'/'n' (projection), 'i', 'u'
_SHAPES = {
    "1p": _p(_E),
    "2p": _p(_p(_E)),
    "3p": _p(_p(_p(_E))),
    "2i": ("i", _p(_E), _p(_E)),
    "3i": ("i", _p(_E), _p(_E), _p(_E)),
    "pi": ("i", _p(_p(_E)), _p(_E)),
    "ip": _p(("i", _p(_E), _p(_E))),
    "2u": ("u", _p(_E), _p(_E)),
    "up": _p(("u", _p(_E), _p(_E))),
    "2in": ("i", _p(_E), _p(_E, True)),
    "3in": ("i", _p(_E), _p(_E), _p(_E, True)),
    "inp": _p(("i", _p(_E), _p(_E, True))),
    "pin": ("i", _p(_p(_E)), _p(_E, True)),
    "pni": ("i", _p(_p(_E), True), _p(_E)),
}
STRUCTURES = tuple(_SHAPES)
EPFO_STRUCTURES = ("1p", "2p", "3p", "2i", "3i", "pi", "ip", "2u", "up")
NEGATION_STRUCTURES = ("2in", "3in", "inp", "pin", "pni")


def _signature(shape) -> str:
    head = shape[0]
    if head == "e":
        return "e"
    if head in ("p", "n"):
        return f"{head}({_signature(shape[1])})"
    return f"{head}(" + ",".join(sorted(_signature(c) for c in shape[1:])) + ")"


_LABEL_BY_SIGNATURE = {_signature(s): label for label, s in _SHAPES.items()}


def node_signature(node: Node) -> str:
    if isinstance(node, Anchor):
        return "e"
    if isinstance(node, Projection):
        return f"{'n' if node.negated else 'p'}({node_signature(node.child)})"
    op = "i" if isinstance(node, And) else "u"
    return f"{op}(" + ",".join(sorted(node_signature(c) for c in node.children)) + ")"


def structure_of(node: Node) -> str | None:
    """Label of the benchmark structure ``node`` instantiates, if any."""
    return _LABEL_BY_SIGNATURE.get(node_signature(node))


def structure_arity(label: str) -> tuple[int, int]:
    """Number of anchors and relations a structure needs."""
    sig = _signature(_SHAPES[label])
    return sig.count("e"), sig.count("p") + sig.count("n")


def build_structure(label: str, anchors, relations) -> Query:
    """Instantiate ``label``, filling anchors and relations in post-order (path order along each branch)."""
    anchors, relations = list(anchors), list(relations)
    n_a, n_r = structure_arity(label)
    if len(anchors) != n_a or len(relations) != n_r:
        raise ValueError(f"{label} needs {n_a} anchors and {n_r} relations")
    a_it, r_it = iter(anchors), iter(relations)

    def make(shape):
        head = shape[0]
        if head == "e":
            return Anchor(int(next(a_it)))
        if head in ("p", "n"):
            child = make(shape[1])
            return Projection(int(next(r_it)), child, head == "n")
        children = tuple(make(c) for c in shape[1:])
        return And(children) if head == "i" else Or(children)

    return Query(make(_SHAPES[label]), label)


def iter_nodes(node: Node):
    yield node
    if isinstance(node, Projection):
        yield from iter_nodes(node.child)
    elif isinstance(node, (And, Or)):
        for c in node.children:
            yield from iter_nodes(c)


def relations_of(node: Node) -> set:
    return {n.relation for n in iter_nodes(node) if isinstance(n, Projection)}


# --- JSON ---------------------------------------------------------------------

class QueryFormatError(ValueError):
    pass


def node_to_dict(node: Node, kg: KnowledgeGraph | None = None) -> dict:
    if isinstance(node, Anchor):
        return {"op": "anchor", "entity": kg.entities.name(node.entity) if kg else node.entity}
    if isinstance(node, Projection):
        return {"op": "proj", "rel": kg.relations.name(node.relation) if kg else node.relation,
                "neg": node.negated, "child": node_to_dict(node.child, kg)}
    op = "and" if isinstance(node, And) else "or"
    return {"op": op, "children": [node_to_dict(c, kg) for c in node.children]}


def node_from_dict(d: dict, kg: KnowledgeGraph | None = None) -> Node:
    try:
        op = d["op"]
        if op == "anchor":
            return Anchor(_resolve(d["entity"], kg, "entity"))
        if op == "proj":
            return Projection(_resolve(d["rel"], kg, "relation"),
                              node_from_dict(d["child"], kg), bool(d.get("neg", False)))
        if op in ("and", "or"):
            children = tuple(node_from_dict(c, kg) for c in d["children"])
            if len(children) < 2:
                raise QueryFormatError(f"'{op}' needs at least two children")
            return And(children) if op == "and" else Or(children)
    except (KeyError, TypeError) as exc:
        if isinstance(exc, KeyError) and exc.args and str(exc.args[0]).startswith("unknown"):
            raise QueryFormatError(exc.args[0]) from None
        raise QueryFormatError(f"malformed query node {d!r}: {exc}") from None
    raise QueryFormatError(f"unknown op {op!r}")


def _resolve(value, kg, kind) -> int:
    if kg is None:
        if isinstance(value, bool) or not isinstance(value, int):
            raise QueryFormatError(f"{kind} must be an integer id without a vocabulary, got {value!r}")
        return value
    try:
        return kg.entity_id(value) if kind == "entity" else kg.relation_id(value)
    except KeyError as exc:
        raise QueryFormatError(str(exc.args[0])) from None


def parse_query(text, kg: KnowledgeGraph | None = None) -> LabeledQuery:
    """Parse one JSON query record (a JSONL line or a bare AST object)."""
    d = json.loads(text) if isinstance(text, (str, bytes)) else text
    if "ast" in d:
        ast, label = d["ast"], d.get("label")
    else:
        ast, label = d, None
    root = node_from_dict(ast, kg)
    if label is not None:
        if label not in _SHAPES:
            raise QueryFormatError(f"unknown structure label {label!r}")
        if structure_of(root) != label:
            raise QueryFormatError(f"query shape {node_signature(root)} does not match label {label!r}")
    ids = (lambda xs: [_resolve(x, kg, "entity") for x in xs])
    return LabeledQuery(Query(root, label), ids(d.get("easy", [])), ids(d.get("hard", [])))


def serialize_query(q: LabeledQuery, kg: KnowledgeGraph | None = None) -> str:
    name = (lambda e: kg.entities.name(e)) if kg else (lambda e: e)
    d = {"label": q.query.label, "ast": node_to_dict(q.query.root, kg),
         "easy": [name(e) for e in sorted(q.easy)], "hard": [name(e) for e in sorted(q.hard)]}
    return json.dumps(d, ensure_ascii=False)


def load_queries(path, kg: KnowledgeGraph | None = None) -> list[LabeledQuery]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(parse_query(line, kg))
                except (QueryFormatError, json.JSONDecodeError) as exc:
                    raise QueryFormatError(f"{path}:{lineno}: {exc}") from None
    return out


def save_queries(queries, path, kg: KnowledgeGraph | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in queries:
            fh.write(serialize_query(q, kg) + "\n")


# --- exact answers ------------------------------------------------------------

def symbolic_answers(node: Node | Query, edges: dict, num_entities: int) -> set:
    """Exact answer set under crisp semantics on an edge index from ``graph_view``.

    A negated projection keeps the targets ``y`` for which some source ``x``
    lacks the edge ``(x, r, y)``: negation binds to the atom, with the source
    variable existentially quantified. For a single source this is the
    complement of its image.
    """
    if isinstance(node, Query):
        node = node.root
    return set(np.flatnonzero(_eval(node, edges, num_entities)).tolist())


def _eval(node, edges, n) -> np.ndarray:
    if isinstance(node, Anchor):
        out = np.zeros(n, bool)
        out[node.entity] = True
        return out
    if isinstance(node, Projection):
        src = np.flatnonzero(_eval(node.child, edges, n))
        out = np.zeros(n, bool)
        empty = np.zeros(0, np.int64)
        if not node.negated:
            for x in src:
                out[edges.get((int(x), node.relation), empty)] = True
            return out
        for x in src:
            row = np.ones(n, bool)
            row[edges.get((int(x), node.relation), empty)] = False
            out |= row
        return out
    parts = [_eval(c, edges, n) for c in node.children]
    if isinstance(node, And):
        return np.logical_and.reduce(parts)
    return np.logical_or.reduce(parts)


# --- generation ---------------------------------------------------------------

_VIEWS = {"train": ("train", "train"), "valid": ("train", "valid"), "test": ("valid", "test")}


class _Sampler:
    def __init__(self, kg, edges, rng):
        self.kg, self.edges, self.rng = kg, edges, rng
        t = np.array([(h, r, x) for (h, r), ts in edges.items() for x in ts], dtype=np.int64).reshape(-1, 3)
        self.triples = t
        order = np.argsort(t[:, 2], kind="stable")
        self.by_tail = t[order]
        self.tail_bounds = np.searchsorted(self.by_tail[:, 2], np.arange(kg.num_entities + 1))
        self.has_incoming = np.flatnonzero(np.diff(self.tail_bounds) > 0)

    def incoming(self, y):
        return self.by_tail[self.tail_bounds[y]:self.tail_bounds[y + 1]]

    def ground(self, shape, target):
        """Instantiate ``shape`` so that ``target`` is an answer; None on a dead end."""
        head = shape[0]
        if head == "e":
            return Anchor(int(target))
        if head == "p":
            inc = self.incoming(target)
            if len(inc) == 0:
                return None
            h, r, _ = inc[self.rng.integers(len(inc))]
            child = self.ground(shape[1], h)
            return None if child is None else Projection(int(r), child)
        if head == "n":
            return self._ground_negated(shape, target)
        if head == "i":
            children = [self.ground(c, target) for c in shape[1:]]
            if any(c is None for c in children) or len(set(children)) < len(children):
                return None
            return And(tuple(children))
        # union: one branch reaches the target, the others a random entity
        first = self.ground(shape[1], target)
        others = [self.ground(c, self.rng.choice(self.has_incoming)) for c in shape[2:]]
        children = [first] + others
        if any(c is None for c in children) or len(set(children)) < len(children):
            return None
        return Or(tuple(children))

    def _ground_negated(self, shape, target):
        # source u reached by the child, relation r with (u, r, target) missing
        for _ in range(10):
            h, r, x = self.triples[self.rng.integers(len(self.triples))]
            if x == target or target in self.edges.get((int(h), int(r)), ()):
                continue
            child = self.ground(shape[1], h)
            if child is not None:
                return Projection(int(r), child, True)
        return None


def generate_queries(kg: KnowledgeGraph, structure: str, count: int, seed: int = 0,
                     split: str = "test", max_answers: int | None = None,
                     retry_factor: int = 100) -> list[LabeledQuery]:
    """Sample ``count`` queries of one structure with easy/hard answer labels.

    ``split`` selects the graph pair: ``train`` labels every answer easy on the
    train graph; ``valid`` compares train against train+valid; ``test``
    compares train+valid against the full graph. Outside ``train`` queries
    without hard answers are rejected.
    """
    if structure not in _SHAPES:
        raise ValueError(f"unknown structure {structure!r}")
    small_name, full_name = _VIEWS[split]
    rng = np.random.default_rng(seed)
    full = graph_view(kg, full_name)
    small = full if small_name == full_name else graph_view(kg, small_name)
    n = kg.num_entities
    if not full:
        logger.warning("graph view %r is empty; no %s queries generated", full_name, structure)
        return []
    sampler = _Sampler(kg, full, rng)
    seen, out = set(), []
    shape = _SHAPES[structure]
    for _ in range(retry_factor * count):
        if len(out) >= count:
            break
        target = rng.choice(sampler.has_incoming)
        root = sampler.ground(shape, target)
        if root is None or root in seen:
            continue
        answers = symbolic_answers(root, full, n)
        if not answers or len(answers) >= n or (max_answers and len(answers) > max_answers):
            continue
        easy = answers if small is full else symbolic_answers(root, small, n) & answers
        hard = answers - easy
        if split != "train" and not hard:
            continue
        seen.add(root)
        out.append(LabeledQuery(Query(root, structure), easy, hard))
    if len(out) < count:
        logger.warning("generated %d/%d %s queries for split %r", len(out), count, structure, split)
    return out

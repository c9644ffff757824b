"""Fuzzy-set query execution over the neural adjacency matrix.

Projections take the max-product of the input fuzzy set with the calibrated
matrix rows (``1 - entry`` for negated atoms), then the per-relation adapter
rescales type-compatible tails. Conjunction and disjunction use the product
t-norm and its conorm. With recording on, :func:`backward` runs reverse-mode
accumulation over the trace, routing gradients through the recorded argmax
source of every max.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adjacency import CalibrationParams, NeuralAdjacencyMatrix
from .queries import And, Anchor, Node, Or, Projection, Query
from .typegraphs import TypedEntityRelationGraphs

ADAPTER_HOPS = ("all", "anchor", "none")
_BLOCK_LIMIT = 1 << 22


class TraceError(ValueError):
    """Trace does not match the query it is replayed against."""


@dataclass
class AdapterParams:
    gamma: np.ndarray
    mu: np.ndarray

    @classmethod
    def zeros(cls, num_relations) -> "AdapterParams":
        return cls(np.zeros(num_relations), np.zeros(num_relations))

    def copy(self) -> "AdapterParams":
        return AdapterParams(self.gamma.copy(), self.mu.copy())


@dataclass
class ProjectionTrace:
    x: np.ndarray            # input fuzzy set
    pre: np.ndarray          # max-product output before the adapter
    sources: np.ndarray      # argmax source per target, -1 where the output is zero
    edge: np.ndarray         # calibrated entry at (source, target)
    adapted: np.ndarray      # targets the adapter was applied to
    affine: np.ndarray | None = None  # unclamped adapter output


@dataclass
class Trace:
    node: Node
    value: np.ndarray
    children: list = field(default_factory=list)
    projection: ProjectionTrace | None = None

    def witnesses(self):
        """Argmax source entity per target for every projection, outermost first."""
        out = []
        if self.projection is not None:
            out.append((self.node, self.projection.sources))
        for c in self.children:
            out.extend(c.witnesses())
        return out


@dataclass
class Gradients:
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    mu: np.ndarray

    @classmethod
    def zeros(cls, num_keys, num_relations) -> "Gradients":
        return cls(np.zeros(num_keys), np.zeros(num_keys), np.zeros(num_relations), np.zeros(num_relations))

    def __iadd__(self, other):
        self.alpha += other.alpha
        self.beta += other.beta
        self.gamma += other.gamma
        self.mu += other.mu
        return self

    def scaled(self, k) -> "Gradients":
        return Gradients(self.alpha * k, self.beta * k, self.gamma * k, self.mu * k)


def t_and(xs) -> np.ndarray:
    """Product t-norm, componentwise."""
    xs = list(xs)
    if len(xs) < 2:
        raise ValueError("t_and needs at least two vectors")
    out = np.asarray(xs[0], dtype=np.float64).copy()
    for x in xs[1:]:
        out = out * x
    return out


def t_or(xs) -> np.ndarray:
    """Product t-conorm ``a + b - ab``, folded left."""
    xs = list(xs)
    if len(xs) < 2:
        raise ValueError("t_or needs at least two vectors")
    out = np.asarray(xs[0], dtype=np.float64).copy()
    for x in xs[1:]:
        out = out + x - out * x
    return out


def max_product(x, r, negated, matrix, calibration=None):
    """Max over sources of ``x_i * M[i, j]`` (or ``x_i * (1 - M[i, j])``).

    Returns (values, argmax sources, entry at the argmax). Ties go to the
    lowest source id; targets with value zero get source -1.
    """
    n = matrix.num_entities
    active = np.flatnonzero(x > 0)
    best = np.zeros(n)
    src = np.full(n, -1, dtype=np.int64)
    edge = np.zeros(n)
    if len(active) == 0:
        return best, src, edge
    step = max(1, _BLOCK_LIMIT // max(n, 1))
    cols = np.arange(n)
    for start in range(0, len(active), step):
        rows = active[start:start + step]
        block = matrix.calibrated_rows(r, rows, calibration)
        cand = x[rows, None] * ((1.0 - block) if negated else block)
        k = np.argmax(cand, axis=0)
        val = cand[k, cols]
        better = val > best if start else np.ones(n, bool)
        best = np.where(better, val, best)
        src = np.where(better, rows[k], src)
        edge = np.where(better, block[k, cols], edge)
    dead = best == 0.0
    src[dead] = -1
    edge[dead] = 0.0
    return best, src, edge


def project(x, r, negated, matrix: NeuralAdjacencyMatrix, calibration: CalibrationParams | None,
            adapter: AdapterParams | None, graphs: TypedEntityRelationGraphs | None,
            use_adapter=True):
    """One projection hop; returns (output, ProjectionTrace)."""
    x = np.asarray(x, dtype=np.float64)
    pre, src, edge = max_product(x, r, negated, matrix, calibration)
    n = len(pre)
    if use_adapter and adapter is not None and graphs is not None:
        adapted = graphs.tail_mask[r].copy()
    else:
        adapted = np.zeros(n, bool)
    out = pre.copy()
    affine = None
    if adapted.any():
        affine = pre * (1.0 + adapter.gamma[r]) + adapter.mu[r]
        out[adapted] = np.clip(affine[adapted], 0.0, 1.0)
    return out, ProjectionTrace(x, pre, src, edge, adapted, affine)


class Executor:
    """Evaluates query trees against a matrix plus calibration and adapter parameters."""

    def __init__(self, matrix: NeuralAdjacencyMatrix, graphs: TypedEntityRelationGraphs | None = None,
                 calibration: CalibrationParams | None = None, adapter: AdapterParams | None = None,
                 adapter_hops: str = "all"):
        if adapter_hops not in ADAPTER_HOPS:
            raise ValueError(f"adapter_hops must be one of {ADAPTER_HOPS}")
        self.matrix = matrix
        self.graphs = graphs
        self.calibration = calibration if calibration is not None else CalibrationParams.zeros(matrix)
        self.adapter = adapter if adapter is not None else AdapterParams.zeros(matrix.num_relations)
        self.adapter_hops = adapter_hops

    @property
    def num_entities(self) -> int:
        return self.matrix.num_entities

    def execute(self, query, record=False):
        """Fuzzy answer vector for ``query``; with ``record`` also the Trace."""
        root = query.root if isinstance(query, Query) else query
        trace = self._forward(root)
        return (trace.value, trace) if record else trace.value

    __call__ = execute

    def _forward(self, node) -> Trace:
        n = self.num_entities
        if isinstance(node, Anchor):
            v = np.zeros(n)
            v[node.entity] = 1.0
            return Trace(node, v)
        if isinstance(node, Projection):
            child = self._forward(node.child)
            hop = self.adapter_hops == "all" or (
                self.adapter_hops == "anchor" and isinstance(node.child, Anchor))
            out, pt = project(child.value, node.relation, node.negated, self.matrix,
                              self.calibration, self.adapter, self.graphs, use_adapter=hop)
            return Trace(node, out, [child], pt)
        if isinstance(node, (And, Or)):
            children = [self._forward(c) for c in node.children]
            combine = t_and if isinstance(node, And) else t_or
            return Trace(node, combine([c.value for c in children]), children)
        raise TypeError(f"not a query node: {node!r}")

    def backward(self, trace: Trace, grad_out) -> Gradients:
        grads = Gradients.zeros(len(self.calibration), self.matrix.num_relations)
        grad_out = np.asarray(grad_out, dtype=np.float64)
        if grad_out.shape != (self.num_entities,):
            raise TraceError(f"gradient has shape {grad_out.shape}, expected ({self.num_entities},)")
        self._backward(trace, grad_out, grads)
        return grads

    def _backward(self, trace: Trace, g, grads: Gradients):
        node = trace.node
        if isinstance(node, Anchor):
            if trace.children or trace.projection is not None:
                raise TraceError("anchor trace carries children")
            return
        if isinstance(node, Projection):
            if trace.projection is None or len(trace.children) != 1:
                raise TraceError("projection trace is missing its record")
            g_x = self._backward_projection(node, trace.projection, g, grads)
            self._backward(trace.children[0], g_x, grads)
            return
        if isinstance(node, (And, Or)):
            if len(trace.children) != len(node.children):
                raise TraceError("trace arity does not match the query")
            vals = [c.value for c in trace.children]
            for k, child in enumerate(trace.children):
                others = [v for i, v in enumerate(vals) if i != k]
                if isinstance(node, And):
                    local = np.prod(others, axis=0)
                else:
                    local = np.prod([1.0 - v for v in others], axis=0)
                self._backward(child, g * local, grads)
            return
        raise TraceError(f"unexpected node {node!r}")

    def _backward_projection(self, node: Projection, pt: ProjectionTrace, g, grads: Gradients):
        r = node.relation
        g_pre = g.copy()
        if pt.adapted.any():
            a = pt.affine
            live = pt.adapted & (a > 0.0) & (a < 1.0)
            g_pre[pt.adapted] = 0.0
            g_pre[live] = g[live] * (1.0 + self.adapter.gamma[r])
            grads.gamma[r] += np.sum(g[live] * pt.pre[live])
            grads.mu[r] += np.sum(g[live])
        g_x = np.zeros_like(g)
        js = np.flatnonzero((pt.sources >= 0) & (g_pre != 0.0))
        if len(js) == 0:
            return g_x
        s = pt.sources[js]
        c = pt.edge[js]
        factor = (1.0 - c) if node.negated else c
        np.add.at(g_x, s, g_pre[js] * factor)
        g_c = g_pre[js] * pt.x[s] * (-1.0 if node.negated else 1.0)

        # entries that depend on alpha/beta: stored, unobserved, unclamped
        pos = self.matrix.find(r, s, js)
        hit = pos >= 0
        if not hit.any():
            return g_x
        block = self.matrix.blocks[r]
        s, g_c, pos = s[hit], g_c[hit], pos[hit]
        keep = ~block.observed[pos]
        s, g_c, pos = s[keep], g_c[keep], pos[keep]
        slots = self.calibration.slots(r, s)
        keep = slots >= 0
        s, g_c, pos, slots = s[keep], g_c[keep], pos[keep], slots[keep]
        base = block.values[pos].astype(np.float64)
        phi = base * (1.0 + self.calibration.alpha[slots]) + self.calibration.beta[slots]
        delta = self.matrix.delta
        live = (phi > delta) & (phi < 1.0 - delta)
        np.add.at(grads.alpha, slots[live], g_c[live] * base[live])
        np.add.at(grads.beta, slots[live], g_c[live])
        return g_x


def execute(query, matrix, graphs=None, calibration=None, adapter=None, adapter_hops="all", record=False):
    return Executor(matrix, graphs, calibration, adapter, adapter_hops).execute(query, record=record)

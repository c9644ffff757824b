"""Sparse neural adjacency matrix with lazy affine calibration and clamping.

Each relation keeps a compressed-row block over (head, tail). Stored values
are the softmax probabilities scaled by the observed tail count; the learnable
per-(head, relation) affine map and the clamp into ``[delta, 1 - delta]`` are
applied when entries are read, so the matrix never needs rebuilding while
calibration parameters train.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from .kg import KnowledgeGraph
from .kge import KgeModel, score_rows
from .typegraphs import TypedEntityRelationGraphs

DEFAULT_DELTA = 1e-4
DEFAULT_EPS = 2e-4
MATRIX_MAGIC = b"TADJ"
MATRIX_VERSION = 1
_HEADER = struct.Struct("<4sBIIdd")


@dataclass
class RelationBlock:
    indptr: np.ndarray    # (E + 1,) uint64
    indices: np.ndarray   # (nnz,) uint32, sorted within each row
    values: np.ndarray    # (nnz,) float32 base probabilities
    observed: np.ndarray  # (nnz,) bool
    tail_count: np.ndarray  # (E,) uint32
    computed: np.ndarray  # (E,) bool, rows scored by the link predictor

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def row(self, i):
        a, b = int(self.indptr[i]), int(self.indptr[i + 1])
        return self.indices[a:b], self.values[a:b], self.observed[a:b]


class NeuralAdjacencyMatrix:
    def __init__(self, blocks, num_entities, delta=DEFAULT_DELTA, eps=DEFAULT_EPS):
        if not 0 < delta < 0.5:
            raise ValueError("delta must lie in (0, 0.5)")
        self.blocks = list(blocks)
        self.num_entities = num_entities
        self.delta = float(delta)
        self.eps = float(eps)
        self._keys = {}

    @property
    def num_relations(self) -> int:
        return len(self.blocks)

    @property
    def nnz(self) -> int:
        return sum(b.nnz for b in self.blocks)

    def entry_keys(self, r) -> np.ndarray:
        """Flat ``row * E + col`` key per stored entry; ascending."""
        keys = self._keys.get(r)
        if keys is None:
            b = self.blocks[r]
            rows = np.repeat(np.arange(self.num_entities), np.diff(b.indptr).astype(np.int64))
            keys = rows * self.num_entities + b.indices.astype(np.int64)
            self._keys[r] = keys
        return keys

    def find(self, r, heads, tails) -> np.ndarray:
        """Position of each (head, tail) entry in block ``r``, or -1 when absent."""
        keys = self.entry_keys(r)
        want = np.asarray(heads, dtype=np.int64) * self.num_entities + np.asarray(tails, dtype=np.int64)
        pos = np.searchsorted(keys, want)
        pos = np.minimum(pos, max(len(keys) - 1, 0))
        hit = (keys[pos] == want) if len(keys) else np.zeros(len(want), bool)
        return np.where(hit, pos, -1)

    def gather(self, r, heads):
        """Stored entries of the given rows: (row position, column, entry index)."""
        b = self.blocks[r]
        heads = np.asarray(heads, dtype=np.int64)
        starts = b.indptr[heads].astype(np.int64)
        lens = b.indptr[heads + 1].astype(np.int64) - starts
        rowpos = np.repeat(np.arange(len(heads)), lens)
        offsets = np.cumsum(lens) - lens
        idx = starts[rowpos] + (np.arange(lens.sum()) - offsets[rowpos])
        return rowpos, b.indices[idx].astype(np.int64), idx

    def calibrated_rows(self, r, heads, calibration=None) -> np.ndarray:
        """Dense calibrated block of shape (len(heads), E)."""
        heads = np.asarray(heads, dtype=np.int64)
        b = self.blocks[r]
        out = np.zeros((len(heads), self.num_entities))
        rowpos, cols, idx = self.gather(r, heads)
        out[rowpos, cols] = self._calibrate(b, r, heads, rowpos, idx, calibration)
        return out

    def _calibrate(self, b, r, heads, rowpos, idx, calibration):
        base = b.values[idx].astype(np.float64)
        if calibration is not None:
            alpha, beta = calibration.lookup(r, heads)
            phi = base * (1.0 + alpha[rowpos]) + beta[rowpos]
        else:
            phi = base
        vals = np.clip(phi, self.delta, 1.0 - self.delta)
        vals[b.observed[idx]] = 1.0
        return vals

    def calibrated_entry(self, calibration, i, r, j) -> float:
        pos = self.find(r, [i], [j])[0]
        if pos < 0:
            return 0.0
        b = self.blocks[r]
        if b.observed[pos]:
            return 1.0
        base = float(b.values[pos])
        if calibration is not None:
            alpha, beta = calibration.lookup(r, np.array([i]))
            phi = base * (1.0 + alpha[0]) + beta[0]
        else:
            phi = base
        return float(min(max(phi, self.delta), 1.0 - self.delta))

    def dense(self, r, calibration=None) -> np.ndarray:
        return self.calibrated_rows(r, np.arange(self.num_entities), calibration)

    def storage_report(self) -> dict:
        computed = sum(int(b.computed.sum()) for b in self.blocks)
        return {
            "stored_entries": self.nnz,
            "observed_entries": sum(int(b.observed.sum()) for b in self.blocks),
            "computed_rows": computed,
            "skipped_rows": self.num_relations * self.num_entities - computed,
            "bytes": len(self.to_bytes()),
        }

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(_HEADER.pack(MATRIX_MAGIC, MATRIX_VERSION, self.num_entities,
                               self.num_relations, self.delta, self.eps))
        for b in self.blocks:
            buf.write(struct.pack("<Q", b.nnz))
            buf.write(b.indptr.astype("<u8").tobytes())
            buf.write(b.indices.astype("<u4").tobytes())
            buf.write(b.values.astype("<f4").tobytes())
            buf.write(np.packbits(b.observed, bitorder="little").tobytes())
            buf.write(b.tail_count.astype("<u4").tobytes())
            buf.write(np.packbits(b.computed, bitorder="little").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "NeuralAdjacencyMatrix":
        if len(data) < _HEADER.size:
            raise ValueError("truncated matrix file")
        magic, version, n_ent, n_rel, delta, eps = _HEADER.unpack_from(data)
        if magic != MATRIX_MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        if version != MATRIX_VERSION:
            raise ValueError(f"unsupported matrix version {version}")
        off = _HEADER.size

        def take(nbytes):
            nonlocal off
            if off + nbytes > len(data):
                raise ValueError("truncated matrix file")
            chunk = data[off:off + nbytes]
            off += nbytes
            return chunk

        blocks = []
        for _ in range(n_rel):
            (nnz,) = struct.unpack("<Q", take(8))
            indptr = np.frombuffer(take(8 * (n_ent + 1)), "<u8").astype(np.uint64)
            indices = np.frombuffer(take(4 * nnz), "<u4").astype(np.uint32)
            values = np.frombuffer(take(4 * nnz), "<f4").astype(np.float32)
            observed = np.unpackbits(np.frombuffer(take((nnz + 7) // 8), np.uint8),
                                     count=nnz, bitorder="little").astype(bool)
            tail_count = np.frombuffer(take(4 * n_ent), "<u4").astype(np.uint32)
            computed = np.unpackbits(np.frombuffer(take((n_ent + 7) // 8), np.uint8),
                                     count=n_ent, bitorder="little").astype(bool)
            if indptr[-1] != nnz:
                raise ValueError("corrupt row offsets")
            blocks.append(RelationBlock(indptr, indices, values, observed, tail_count, computed))
        if off != len(data):
            raise ValueError("trailing bytes after matrix data")
        return cls(blocks, n_ent, delta, eps)

    @classmethod
    def from_entries(cls, num_entities, num_relations, heads, relations, tails, values,
                     observed=None, computed=None, delta=DEFAULT_DELTA, eps=DEFAULT_EPS):
        """Assemble a matrix from explicit entries.

        ``computed`` is an optional (num_relations, num_entities) mask of scored
        rows; it defaults to the rows holding at least one entry.
        """
        heads, relations, tails = (np.asarray(a, dtype=np.int64) for a in (heads, relations, tails))
        values = np.asarray(values, dtype=np.float32)
        observed = np.zeros(len(heads), bool) if observed is None else np.asarray(observed, bool)
        blocks = []
        for r in range(num_relations):
            sel = relations == r
            tail_count = np.bincount(heads[sel & observed], minlength=num_entities).astype(np.uint32)
            comp = np.zeros(num_entities, bool)
            if computed is None:
                comp[heads[sel]] = True
            else:
                comp = np.asarray(computed[r], bool)
            blocks.append(_assemble(num_entities, [heads[sel]], [tails[sel]], [values[sel]],
                                    [observed[sel]], tail_count, comp))
        return cls(blocks, num_entities, delta, eps)

    def equals(self, other) -> bool:
        if (self.num_entities, self.num_relations, self.delta, self.eps) != (
                other.num_entities, other.num_relations, other.delta, other.eps):
            return False
        fields = ("indptr", "indices", "values", "observed", "tail_count", "computed")
        return all(
            np.array_equal(getattr(a, f), getattr(b, f))
            for a, b in zip(self.blocks, other.blocks) for f in fields)


def load_matrix(path) -> NeuralAdjacencyMatrix:
    with open(path, "rb") as fh:
        return NeuralAdjacencyMatrix.from_bytes(fh.read())


def save_matrix(matrix: NeuralAdjacencyMatrix, path) -> None:
    matrix.save(path)


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def base_probabilities(scores, tail_count) -> np.ndarray:
    """Row softmax scaled by the observed tail count (at least 1) of each row."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    return softmax_rows(scores) * np.maximum(np.asarray(tail_count).reshape(-1, 1), 1)


def build_base_matrix(model: KgeModel, kg: KnowledgeGraph, graphs: TypedEntityRelationGraphs | None,
                      eps=DEFAULT_EPS, delta=DEFAULT_DELTA, chunk_rows=1024) -> NeuralAdjacencyMatrix:
    """Score every head-compatible (head, relation) row and store the sparse result.

    ``graphs=None`` computes every row (no type skipping).
    """
    if eps < 0:
        raise ValueError("eps must be >= 0")
    n_ent = kg.num_entities
    if model.num_entities != n_ent or model.num_relations != kg.num_relations:
        raise ValueError("model dimensions do not match the knowledge graph")
    train = np.unique(kg.splits["train"], axis=0)
    blocks = []
    for r in range(kg.num_relations):
        tr = train[train[:, 1] == r]
        tail_count = np.bincount(tr[:, 0], minlength=n_ent).astype(np.uint32)
        computed = np.ones(n_ent, bool) if graphs is None else graphs.head_mask[r].copy()
        heads = np.flatnonzero(computed)
        row_ids, cols, vals, flags = [], [], [], []
        for start in range(0, len(heads), chunk_rows):
            hs = heads[start:start + chunk_rows]
            p = base_probabilities(score_rows(model, hs, r), tail_count[hs])
            p32 = p.astype(np.float32)
            obs = np.zeros(p.shape, bool)
            sel = np.isin(tr[:, 0], hs)
            obs[np.searchsorted(hs, tr[sel, 0]), tr[sel, 2]] = True
            keep = ((p32 >= eps) & (p32 > 0)) | obs
            ri, ci = np.nonzero(keep)
            row_ids.append(hs[ri])
            cols.append(ci)
            vals.append(p32[ri, ci])
            flags.append(obs[ri, ci])
        # observed edges on skipped rows are still stored; they read as exactly 1
        skipped = ~computed[tr[:, 0]]
        if skipped.any():
            row_ids.append(tr[skipped, 0])
            cols.append(tr[skipped, 2])
            vals.append(np.ones(int(skipped.sum()), np.float32))
            flags.append(np.ones(int(skipped.sum()), bool))
        blocks.append(_assemble(n_ent, row_ids, cols, vals, flags, tail_count, computed))
    return NeuralAdjacencyMatrix(blocks, n_ent, delta, eps)


def _assemble(n_ent, row_ids, cols, vals, flags, tail_count, computed) -> RelationBlock:
    rows = np.concatenate(row_ids).astype(np.int64) if row_ids else np.zeros(0, np.int64)
    cols = np.concatenate(cols).astype(np.int64) if cols else np.zeros(0, np.int64)
    vals = np.concatenate(vals).astype(np.float32) if vals else np.zeros(0, np.float32)
    flags = np.concatenate(flags).astype(bool) if flags else np.zeros(0, bool)
    order = np.lexsort((cols, rows))
    rows, cols, vals, flags = rows[order], cols[order], vals[order], flags[order]
    indptr = np.zeros(n_ent + 1, np.uint64)
    indptr[1:] = np.cumsum(np.bincount(rows, minlength=n_ent))
    return RelationBlock(indptr, cols.astype(np.uint32), vals, flags,
                         np.asarray(tail_count, np.uint32), np.asarray(computed, bool))


def exact_matrix(kg: KnowledgeGraph, upto="train", delta=DEFAULT_DELTA) -> NeuralAdjacencyMatrix:
    """Matrix holding only the observed edges of a graph view, each reading 1."""
    n_ent = kg.num_entities
    triples = np.unique(kg.triples(upto), axis=0)
    blocks = []
    for r in range(kg.num_relations):
        tr = triples[triples[:, 1] == r]
        tail_count = np.bincount(tr[:, 0], minlength=n_ent).astype(np.uint32)
        computed = tail_count > 0
        blocks.append(_assemble(n_ent, [tr[:, 0]], [tr[:, 2]], [np.ones(len(tr), np.float32)],
                                [np.ones(len(tr), bool)], tail_count, computed))
    return NeuralAdjacencyMatrix(blocks, n_ent, delta, 0.0)


def storage_report(matrix: NeuralAdjacencyMatrix) -> dict:
    return matrix.storage_report()


class CalibrationParams:
    """Per-(head, relation) scale ``alpha`` and shift ``beta``.

    Keys are the matrix rows scored by the link predictor; every other pair is
    implicitly zero.
    """

    def __init__(self, keys, alpha=None, beta=None, num_entities=None):
        keys = np.asarray(keys, dtype=np.int64).reshape(-1, 2)  # rows of (relation, entity)
        self.keys = keys
        self.alpha = np.zeros(len(keys)) if alpha is None else np.asarray(alpha, dtype=np.float64)
        self.beta = np.zeros(len(keys)) if beta is None else np.asarray(beta, dtype=np.float64)
        if self.alpha.shape != (len(keys),) or self.beta.shape != (len(keys),):
            raise ValueError("alpha/beta must have one value per key")
        n_rel = int(keys[:, 0].max()) + 1 if len(keys) else 0
        n_ent = num_entities if num_entities is not None else (int(keys[:, 1].max()) + 1 if len(keys) else 0)
        order = np.lexsort((keys[:, 1], keys[:, 0]))
        if not np.array_equal(order, np.arange(len(keys))):
            raise ValueError("calibration keys must be sorted by (relation, entity)")
        self._bounds = np.searchsorted(keys[:, 0], np.arange(n_rel + 1)) if len(keys) else np.zeros(1, np.int64)
        self.num_entities = n_ent

    @classmethod
    def zeros(cls, matrix: NeuralAdjacencyMatrix) -> "CalibrationParams":
        keys = [(r, e) for r, b in enumerate(matrix.blocks) for e in np.flatnonzero(b.computed)]
        return cls(np.array(keys, dtype=np.int64).reshape(-1, 2), num_entities=matrix.num_entities)

    def __len__(self) -> int:
        return len(self.keys)

    def slots(self, r, heads) -> np.ndarray:
        """Key index for each (head, r), -1 for pairs outside the key set."""
        heads = np.asarray(heads, dtype=np.int64)
        if r + 1 >= len(self._bounds):
            return np.full(len(heads), -1)
        lo, hi = int(self._bounds[r]), int(self._bounds[r + 1])
        ents = self.keys[lo:hi, 1]
        pos = np.searchsorted(ents, heads)
        pos_c = np.minimum(pos, max(len(ents) - 1, 0))
        hit = (ents[pos_c] == heads) if len(ents) else np.zeros(len(heads), bool)
        return np.where(hit, lo + pos_c, -1)

    def lookup(self, r, heads):
        s = self.slots(r, heads)
        ok = s >= 0
        alpha = np.where(ok, self.alpha[np.maximum(s, 0)] if len(self.alpha) else 0.0, 0.0)
        beta = np.where(ok, self.beta[np.maximum(s, 0)] if len(self.beta) else 0.0, 0.0)
        return alpha, beta

    def copy(self) -> "CalibrationParams":
        return CalibrationParams(self.keys.copy(), self.alpha.copy(), self.beta.copy(), self.num_entities)


def calibrated_entry(matrix: NeuralAdjacencyMatrix, params: CalibrationParams | None, i, r, j) -> float:
    return matrix.calibrated_entry(params, i, r, j)

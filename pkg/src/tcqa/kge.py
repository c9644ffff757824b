"""ComplEx link predictor trained with full softmax cross-entropy and N3 regularization.

Embeddings are kept as real arrays of shape ``(n, 2 * dim)``: the first
``dim`` columns hold real parts, the last ``dim`` imaginary parts.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .kg import KnowledgeGraph

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"TKGE"
_HEADER = struct.Struct("<4sIII")


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class KgeConfig:
    dim: int = 32
    epochs: int = 200
    batch_size: int = 128
    learning_rate: float = 0.5
    n3_weight: float = 1e-3
    init_scale: float = 1e-3
    seed: int = 0


@dataclass
class KgeModel:
    entity_embeddings: np.ndarray
    relation_embeddings: np.ndarray

    @property
    def dim(self) -> int:
        return self.entity_embeddings.shape[1] // 2

    @property
    def num_entities(self) -> int:
        return self.entity_embeddings.shape[0]

    @property
    def num_relations(self) -> int:
        return self.relation_embeddings.shape[0]

    def score(self, h, r, t):
        """Re(<e_h, w_r, conj(e_t)>), broadcasting over index arrays."""
        q = _compose(self.entity_embeddings[h], self.relation_embeddings[r])
        return np.sum(q * self.entity_embeddings[t], axis=-1)

    def score_row(self, h: int, r: int) -> np.ndarray:
        return score_rows(self, np.array([h]), r)[0]

    def save(self, path) -> None:
        save_model(self, path)


def _compose(ent, rel):
    """Complex product e_h * w_r in split real layout."""
    d = ent.shape[-1] // 2
    hr, hi = ent[..., :d], ent[..., d:]
    wr, wi = rel[..., :d], rel[..., d:]
    return np.concatenate([hr * wr - hi * wi, hr * wi + hi * wr], axis=-1)


def score_rows(model: KgeModel, heads, r) -> np.ndarray:
    """Scores against every entity for each head in ``heads`` under relation ``r``."""
    ent = model.entity_embeddings.astype(np.float64)
    q = _compose(ent[heads], model.relation_embeddings[r].astype(np.float64))
    return q @ ent.T


def score_row(model: KgeModel, h: int, r: int) -> np.ndarray:
    return model.score_row(h, r)


def _modulus(x):
    d = x.shape[-1] // 2
    return np.sqrt(x[..., :d] ** 2 + x[..., d:] ** 2)


def loss_and_grad(ent, rel, batch, n3_weight):
    """Mean softmax cross-entropy over tails plus N3 penalty, with gradients.

    ``batch`` is an (n, 3) array of (head, relation, tail).
    """
    h, r, t = batch[:, 0], batch[:, 1], batch[:, 2]
    n = len(batch)
    d = ent.shape[1] // 2
    eh, wr_ = ent[h], rel[r]
    q = _compose(eh, wr_)
    logits = q @ ent.T
    logits -= logits.max(axis=1, keepdims=True)
    expl = np.exp(logits)
    z = expl.sum(axis=1, keepdims=True)
    ce = np.log(z[:, 0]) - logits[np.arange(n), t]
    g = expl / z
    g[np.arange(n), t] -= 1.0
    g /= n

    grad_ent = g.T @ q
    gq = g @ ent
    gre, gim = gq[:, :d], gq[:, d:]
    hr, hi = eh[:, :d], eh[:, d:]
    wr, wi = wr_[:, :d], wr_[:, d:]
    g_h = np.concatenate([gre * wr + gim * wi, -gre * wi + gim * wr], axis=1)
    g_r = np.concatenate([gre * hr + gim * hi, -gre * hi + gim * hr], axis=1)

    loss = ce.mean()
    if n3_weight:
        et = ent[t]
        for emb in (eh, wr_, et):
            loss += n3_weight / n * np.sum(_modulus(emb) ** 3)
        # d|z|^3 / d(re) = 3 |z| re
        def n3_grad(x):
            m = np.tile(_modulus(x), 2)
            return 3.0 * n3_weight / n * m * x

        g_h += n3_grad(eh)
        g_r += n3_grad(wr_)
        np.add.at(grad_ent, t, n3_grad(et))
    np.add.at(grad_ent, h, g_h)
    grad_rel = np.zeros_like(rel)
    np.add.at(grad_rel, r, g_r)
    return float(loss), grad_ent, grad_rel


def train_kge(kg: KnowledgeGraph, config: KgeConfig | None = None, callback=None) -> KgeModel:
    """Fit ComplEx embeddings on the train split with Adagrad.

    Reciprocal relations in ``kg`` turn head prediction into tail prediction,
    so only tails are scored. ``callback(epoch, mean_loss)`` is called per epoch.
    """
    config = config or KgeConfig()
    if config.dim < 1:
        raise ValueError("dim must be >= 1")
    train = kg.splits["train"]
    if len(train) == 0:
        raise ValueError("train split is empty")
    rng = np.random.default_rng(config.seed)
    s = config.init_scale
    ent = rng.uniform(-s, s, (kg.num_entities, 2 * config.dim))
    rel = rng.uniform(-s, s, (kg.num_relations, 2 * config.dim))
    acc_ent = np.zeros_like(ent)
    acc_rel = np.zeros_like(rel)
    lr, eps = config.learning_rate, 1e-10

    for epoch in range(config.epochs):
        perm = rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(train), config.batch_size):
            batch = train[perm[start:start + config.batch_size]]
            loss, g_ent, g_rel = loss_and_grad(ent, rel, batch, config.n3_weight)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}; learning rate {lr} is likely too high")
            acc_ent += g_ent ** 2
            acc_rel += g_rel ** 2
            ent -= lr * g_ent / (np.sqrt(acc_ent) + eps)
            rel -= lr * g_rel / (np.sqrt(acc_rel) + eps)
            total += loss * len(batch)
        mean = total / len(train)
        logger.debug("kge epoch %d loss %.6f", epoch, mean)
        if callback is not None:
            callback(epoch, mean)
    return KgeModel(ent.astype(np.float32), rel.astype(np.float32))


def save_model(model: KgeModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MODEL_MAGIC, model.num_entities, model.num_relations, model.dim))
        fh.write(np.ascontiguousarray(model.entity_embeddings, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(model.relation_embeddings, dtype="<f4").tobytes())


def load_model(path) -> KgeModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated model file")
    magic, n_ent, n_rel, dim = _HEADER.unpack_from(data)
    if magic != MODEL_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    n_vals = (n_ent + n_rel) * 2 * dim
    if len(data) != _HEADER.size + 4 * n_vals:
        raise ValueError(f"{path}: size does not match header")
    vals = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
    ent = vals[:n_ent * 2 * dim].reshape(n_ent, 2 * dim).astype(np.float32)
    rel = vals[n_ent * 2 * dim:].reshape(n_rel, 2 * dim).astype(np.float32)
    return KgeModel(ent, rel)

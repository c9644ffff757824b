"""Joint training of calibration and adapter parameters on complex queries."""

from __future__ import annotations

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .adjacency import CalibrationParams, NeuralAdjacencyMatrix
from .executor import AdapterParams, Executor, Gradients
from .queries import STRUCTURES, LabeledQuery
from .typegraphs import TypedEntityRelationGraphs

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-9
PARAMS_MAGIC = b"TPRM"
PARAMS_VERSION = 1
_HEADER = struct.Struct("<4sBIIQ")
TRAIN_STRUCTURES = ("2i", "3i", "2in", "3in")


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    epochs: int = 10
    batch_size: int = 64
    structures: tuple = TRAIN_STRUCTURES
    lr_decay: float = 0.9
    adagrad_eps: float = 1e-10
    seed: int = 0
    train_calibration: bool = True
    train_adapter: bool = True
    adapter_hops: str = "all"
    threads: int = 1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        unknown = set(self.structures) - set(STRUCTURES)
        if unknown:
            raise ValueError(f"unknown structures {sorted(unknown)}")


@dataclass
class TrainState:
    calibration: CalibrationParams
    adapter: AdapterParams
    accum: Gradients
    loss_history: list = field(default_factory=list)


def _check_answers(answers, n):
    answers = np.asarray(sorted(answers), dtype=np.int64)
    if len(answers) == 0:
        raise ValueError("answer set is empty")
    if len(answers) >= n:
        raise ValueError("answer set covers every entity")
    return answers


def bce_loss(output, answers) -> float:
    """Mean -log p over answers plus mean -log(1 - p) over all other entities."""
    p = np.clip(np.asarray(output, dtype=np.float64), PROB_FLOOR, 1.0 - PROB_FLOOR)
    ans = _check_answers(answers, len(p))
    mask = np.zeros(len(p), bool)
    mask[ans] = True
    return float(-np.mean(np.log(p[mask])) - np.mean(np.log1p(-p[~mask])))


def bce_grad(output, answers):
    """Loss and its gradient with respect to ``output`` (zero where clamped)."""
    raw = np.asarray(output, dtype=np.float64)
    p = np.clip(raw, PROB_FLOOR, 1.0 - PROB_FLOOR)
    ans = _check_answers(answers, len(p))
    mask = np.zeros(len(p), bool)
    mask[ans] = True
    n_pos, n_neg = mask.sum(), (~mask).sum()
    loss = float(-np.mean(np.log(p[mask])) - np.mean(np.log1p(-p[~mask])))
    grad = np.where(mask, -1.0 / (n_pos * p), 1.0 / (n_neg * (1.0 - p)))
    grad[(raw < PROB_FLOOR) | (raw > 1.0 - PROB_FLOOR)] = 0.0
    return loss, grad


def query_loss_grad(executor: Executor, query: LabeledQuery, answers=None):
    out, trace = executor.execute(query.query, record=True)
    loss, g = bce_grad(out, query.easy if answers is None else answers)
    return loss, executor.backward(trace, g)


def train_adapter(matrix: NeuralAdjacencyMatrix, graphs: TypedEntityRelationGraphs, queries,
                  config: TrainConfig | None = None, callback=None) -> TrainState:
    """Adagrad on the mean query BCE, answers taken from each query's easy set.

    ``callback(epoch, mean_loss)`` fires after every epoch.
    """
    config = config or TrainConfig()
    queries = [q for q in queries if q.label in config.structures]
    state = TrainState(CalibrationParams.zeros(matrix), AdapterParams.zeros(matrix.num_relations),
                       Gradients.zeros(len(CalibrationParams.zeros(matrix)), matrix.num_relations))
    if not queries:
        logger.warning("no training queries with structures %s", config.structures)
        return state
    executor = Executor(matrix, graphs, state.calibration, state.adapter, config.adapter_hops)
    rng = np.random.default_rng(config.seed)
    lr = config.learning_rate
    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    try:
        for epoch in range(config.epochs):
            order = rng.permutation(len(queries))
            total = 0.0
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                batch = [queries[i] for i in idx]
                mapper = pool.map if pool else map
                results = list(mapper(lambda q: query_loss_grad(executor, q), batch))
                grads = Gradients.zeros(len(state.calibration), matrix.num_relations)
                for i, (loss, g) in zip(idx, results):
                    if not np.isfinite(loss):
                        raise TrainingDivergedError(f"non-finite loss on training query {i}")
                    total += loss
                    grads += g
                _adagrad_step(state, grads.scaled(1.0 / len(batch)), lr, config)
            mean = total / len(queries)
            state.loss_history.append(mean)
            logger.info("epoch %d loss %.6f", epoch, mean)
            if callback is not None:
                callback(epoch, mean)
            lr *= config.lr_decay
    finally:
        if pool:
            pool.shutdown()
    return state


def _adagrad_step(state: TrainState, g: Gradients, lr, config: TrainConfig):
    acc, eps = state.accum, config.adagrad_eps
    pairs = []
    if config.train_calibration:
        pairs += [(state.calibration.alpha, g.alpha, acc.alpha), (state.calibration.beta, g.beta, acc.beta)]
    if config.train_adapter:
        pairs += [(state.adapter.gamma, g.gamma, acc.gamma), (state.adapter.mu, g.mu, acc.mu)]
    for param, grad, hist in pairs:
        hist += grad ** 2
        touched = grad != 0.0
        param[touched] -= lr * grad[touched] / (np.sqrt(hist[touched]) + eps)


def save_params(path, calibration: CalibrationParams, adapter: AdapterParams) -> None:
    n_rel = len(adapter.gamma)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(PARAMS_MAGIC, PARAMS_VERSION, n_rel,
                              calibration.num_entities, len(calibration)))
        fh.write(calibration.keys.astype("<u4").tobytes())
        for arr in (calibration.alpha, calibration.beta, adapter.gamma, adapter.mu):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_params(path, matrix: NeuralAdjacencyMatrix | None = None):
    """Read (CalibrationParams, AdapterParams); validated against ``matrix`` when given."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated params file")
    magic, version, n_rel, n_ent, n_keys = _HEADER.unpack_from(data)
    if magic != PARAMS_MAGIC or version != PARAMS_VERSION:
        raise ValueError(f"{path}: not a params file")
    expected = _HEADER.size + 8 * n_keys + 8 * (2 * n_keys + 2 * n_rel)
    if len(data) != expected:
        raise ValueError(f"{path}: size does not match header")
    off = _HEADER.size
    keys = np.frombuffer(data, "<u4", 2 * n_keys, off).reshape(-1, 2).astype(np.int64)
    off += 8 * n_keys
    vals = np.frombuffer(data, "<f8", offset=off).astype(np.float64)
    alpha, beta = vals[:n_keys], vals[n_keys:2 * n_keys]
    gamma, mu = vals[2 * n_keys:2 * n_keys + n_rel], vals[2 * n_keys + n_rel:]
    if matrix is not None:
        if n_rel != matrix.num_relations or n_ent != matrix.num_entities:
            raise ValueError(
                f"{path}: params are for {n_rel} relations/{n_ent} entities, matrix has "
                f"{matrix.num_relations}/{matrix.num_entities}")
        expected_keys = CalibrationParams.zeros(matrix).keys
        if not np.array_equal(keys, expected_keys):
            raise ValueError(f"{path}: calibration keys do not match the matrix rows")
    return CalibrationParams(keys, alpha.copy(), beta.copy(), n_ent), AdapterParams(gamma.copy(), mu.copy())

"""Filtered ranking of hard answers with MRR / Hits@K aggregation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .queries import EPFO_STRUCTURES, NEGATION_STRUCTURES, STRUCTURES

logger = logging.getLogger(__name__)

HITS_AT = (1, 3, 10)
OOD_STRUCTURES = ("pi", "ip", "2u", "up")
AGGREGATES = {"avg_p": EPFO_STRUCTURES, "avg_ood": OOD_STRUCTURES, "avg_n": NEGATION_STRUCTURES}


def rank_hard_answer(scores, a, easy, hard) -> int:
    """1-based rank of ``a`` among itself and all non-answers; ties count against ``a``."""
    if a not in hard:
        raise ValueError(f"entity {a} is not a hard answer")
    return int(filtered_ranks(scores, [a], set(easy) | set(hard))[0])


def filtered_ranks(scores, targets, answers) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    keep = np.ones(len(scores), bool)
    keep[list(answers)] = False
    others = np.sort(scores[keep])
    targets = np.asarray(list(targets), dtype=np.int64)
    # non-answers scoring >= the target
    ahead = len(others) - np.searchsorted(others, scores[targets], side="left")
    return ahead + 1


def metrics_from_ranks(ranks) -> dict:
    ranks = np.asarray(ranks, dtype=np.float64)
    out = {"mrr": float(np.mean(1.0 / ranks))}
    for k in HITS_AT:
        out[f"hits@{k}"] = float(np.mean(ranks <= k))
    return out


@dataclass
class EvalReport:
    per_structure: dict = field(default_factory=dict)  # label -> metric dict
    counts: dict = field(default_factory=dict)
    aggregates: dict = field(default_factory=dict)     # name -> metric dict

    def mrr(self, key) -> float:
        src = self.aggregates if key in AGGREGATES else self.per_structure
        return src[key]["mrr"]

    def to_json(self) -> str:
        return json.dumps({"per_structure": self.per_structure, "counts": self.counts,
                           "aggregates": self.aggregates}, indent=2, sort_keys=True)

    def to_tsv(self) -> str:
        metrics = ["mrr"] + [f"hits@{k}" for k in HITS_AT]
        cols = [s for s in STRUCTURES if s in self.per_structure] + [a for a in AGGREGATES if a in self.aggregates]
        lines = ["metric\t" + "\t".join(cols)]
        for m in metrics:
            vals = [(self.per_structure.get(c) or self.aggregates.get(c))[m] for c in cols]
            lines.append(m + "\t" + "\t".join(f"{v:.6f}" for v in vals))
        lines.append("queries\t" + "\t".join(str(self.counts.get(c, "")) for c in cols))
        return "\n".join(lines) + "\n"


def evaluate(executor, queries, flat_average=False, threads=1) -> EvalReport:
    """Rank every hard answer of every query and aggregate per structure.

    By default reciprocal ranks are averaged within a query and then across
    queries; ``flat_average`` averages over all answers of a structure at once.
    """
    by_label: dict = {}

    def one(q):
        if not q.hard:
            raise ValueError("evaluation query without hard answers")
        out = executor.execute(q.query)
        hard = sorted(q.hard)
        return q.label, filtered_ranks(out, hard, q.easy | q.hard)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, queries))
    else:
        results = [one(q) for q in queries]
    for label, ranks in results:
        by_label.setdefault(label, []).append(ranks)

    report = EvalReport()
    for label in [s for s in STRUCTURES if s in by_label] + sorted(set(by_label) - set(STRUCTURES), key=str):
        rank_lists = by_label[label]
        report.counts[label] = len(rank_lists)
        if flat_average:
            report.per_structure[label] = metrics_from_ranks(np.concatenate(rank_lists))
        else:
            per_q = [metrics_from_ranks(r) for r in rank_lists]
            report.per_structure[label] = {k: float(np.mean([m[k] for m in per_q])) for k in per_q[0]}
    report.aggregates = aggregate(report.per_structure)
    return report


def aggregate(per_structure: dict) -> dict:
    """Unweighted means over the EPFO, out-of-distribution and negation groups."""
    out = {}
    for name, group in AGGREGATES.items():
        present = [s for s in group if s in per_structure]
        missing = [s for s in group if s not in per_structure]
        if missing and present:
            logger.warning("%s computed without %s", name, ",".join(missing))
        if not present:
            continue
        keys = per_structure[present[0]].keys()
        out[name] = {k: float(np.mean([per_structure[s][k] for s in present])) for k in keys}
    return out

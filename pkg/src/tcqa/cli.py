"""Command line pipeline: train-kge, build-adjacency, gen-queries, train-adapter, answer, evaluate."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import adjacency, evaluation, kge, queries, trainer
from .executor import ADAPTER_HOPS, Executor
from .kg import load_kg, load_types
from .typegraphs import build_type_graphs

logger = logging.getLogger("tcqa")


def _structures(text):
    labels = tuple(s.strip() for s in text.split(",") if s.strip())
    bad = [s for s in labels if s not in queries.STRUCTURES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown structures: {','.join(bad)}")
    return labels


def _delta(text):
    v = float(text)
    if not 0 < v < 0.5:
        raise argparse.ArgumentTypeError("delta must lie in (0, 0.5)")
    return v


def _nonneg(text):
    v = float(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _positive_float(text):
    v = float(text)
    if v <= 0:
        raise argparse.ArgumentTypeError("must be > 0")
    return v


def _positive_int(text):
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError("must be > 0")
    return v


def _graphs(kg, types_path):
    if types_path is None:
        return None
    return build_type_graphs(kg, load_types(types_path, kg))


def _params(path, matrix):
    if path is None:
        return None, None
    return trainer.load_params(path, matrix)


def cmd_train_kge(args):
    kg = load_kg(args.triples)
    cfg = kge.KgeConfig(dim=args.dim, epochs=args.epochs, batch_size=args.batch,
                        learning_rate=args.lr, n3_weight=args.n3, seed=args.seed)
    model = kge.train_kge(kg, cfg, callback=lambda e, loss: print(f"{e}\t{loss:.6f}"))
    model.save(args.out)
    return 0


def cmd_build_adjacency(args):
    kg = load_kg(args.triples)
    model = kge.load_model(args.model)
    graphs = None if args.no_type_skip else _graphs(kg, args.types)
    matrix = adjacency.build_base_matrix(model, kg, graphs, eps=args.eps, delta=args.delta)
    matrix.save(args.out)
    for k, v in matrix.storage_report().items():
        print(f"{k}\t{v}")
    return 0


def cmd_gen_queries(args):
    kg = load_kg(args.triples)
    out = []
    for k, label in enumerate(args.structures):
        out += queries.generate_queries(kg, label, args.count, seed=args.seed + k, split=args.split,
                                        max_answers=args.max_answers)
    queries.save_queries(out, args.out, kg)
    print(f"queries\t{len(out)}")
    return 0


def cmd_train_adapter(args):
    kg = load_kg(args.triples)
    matrix = adjacency.load_matrix(args.matrix)
    graphs = _graphs(kg, args.types)
    qs = queries.load_queries(args.queries, kg)
    cfg = trainer.TrainConfig(learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch,
                              structures=args.structures, lr_decay=args.lr_decay, seed=args.seed,
                              train_calibration=not args.no_calibration, train_adapter=not args.no_adapter,
                              adapter_hops=args.adapter_hops, threads=args.threads)
    state = trainer.train_adapter(matrix, graphs, qs, cfg, callback=lambda e, loss: print(f"{e}\t{loss:.6f}"))
    trainer.save_params(args.out, state.calibration, state.adapter)
    return 0


def _witness(trace, entity, kg):
    """Per-hop (relation, source, target) chain explaining ``entity``."""
    from .queries import Projection
    hops = []
    if isinstance(trace.node, Projection):
        src = int(trace.projection.sources[entity])
        if src >= 0:
            hops.append({"relation": kg.relations.name(trace.node.relation), "negated": trace.node.negated,
                         "source": kg.entities.name(src), "target": kg.entities.name(entity)})
            hops += _witness(trace.children[0], src, kg)
        return hops
    for child in trace.children:
        hops += _witness(child, entity, kg)
    return hops


def cmd_answer(args):
    kg = load_kg(args.triples)
    matrix = adjacency.load_matrix(args.matrix)
    cal, adapter = _params(args.params, matrix)
    ex = Executor(matrix, _graphs(kg, args.types), cal, adapter, args.adapter_hops)
    for i, q in enumerate(queries.load_queries(args.query, kg)):
        out, trace = ex.execute(q.query, record=True)
        top = np.argsort(-out, kind="stable")[:args.topk]
        rec = {"query": i, "label": q.label,
               "answers": [{"entity": kg.entities.name(int(e)), "score": round(float(out[e]), 8)} for e in top]}
        if args.trace:
            rec["witnesses"] = {kg.entities.name(int(e)): _witness(trace, int(e), kg) for e in top}
        print(json.dumps(rec, ensure_ascii=False))
    return 0


def cmd_evaluate(args):
    kg = load_kg(args.triples)
    matrix = adjacency.load_matrix(args.matrix)
    cal, adapter = _params(args.params, matrix)
    ex = Executor(matrix, _graphs(kg, args.types), cal, adapter, args.adapter_hops)
    qs = [q for q in queries.load_queries(args.queries, kg) if q.hard]
    report = evaluation.evaluate(ex, qs, flat_average=args.flat_average, threads=args.threads)
    tsv = report.to_tsv()
    sys.stdout.write(tsv)
    if args.report:
        base = Path(args.report)
        base = base.with_suffix("") if base.suffix in (".tsv", ".json") else base
        Path(f"{base}.tsv").write_text(tsv, encoding="utf-8")
        Path(f"{base}.json").write_text(report.to_json() + "\n", encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=_positive_int, default=os.cpu_count() or 1)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tcqa", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train-kge", parents=[common], help="train ComplEx-N3 embeddings")
    s.add_argument("--triples", required=True, help="dataset directory or train TSV")
    s.add_argument("--dim", type=_positive_int, default=32)
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--batch", type=_positive_int, default=128)
    s.add_argument("--lr", type=_positive_float, default=0.5)
    s.add_argument("--n3", type=_nonneg, default=1e-3)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_kge)

    s = sub.add_parser("build-adjacency", parents=[common], help="precompute the sparse neural adjacency matrix")
    s.add_argument("--model", required=True)
    s.add_argument("--triples", required=True)
    s.add_argument("--types")
    s.add_argument("--eps", type=_nonneg, default=adjacency.DEFAULT_EPS)
    s.add_argument("--delta", type=_delta, default=adjacency.DEFAULT_DELTA)
    s.add_argument("--no-type-skip", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_adjacency)

    s = sub.add_parser("gen-queries", parents=[common], help="sample labeled queries")
    s.add_argument("--triples", required=True)
    s.add_argument("--structures", type=_structures, default=queries.STRUCTURES)
    s.add_argument("--count", type=_positive_int, default=100)
    s.add_argument("--split", choices=("train", "valid", "test"), default="test")
    s.add_argument("--max-answers", type=_positive_int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_queries)

    s = sub.add_parser("train-adapter", parents=[common], help="train calibration and adapter parameters")
    s.add_argument("--matrix", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--triples", required=True)
    s.add_argument("--types")
    s.add_argument("--lr", type=_positive_float, default=1e-5)
    s.add_argument("--lr-decay", type=_positive_float, default=0.9)
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--batch", type=_positive_int, default=64)
    s.add_argument("--structures", type=_structures, default=trainer.TRAIN_STRUCTURES)
    s.add_argument("--adapter-hops", choices=ADAPTER_HOPS, default="all")
    s.add_argument("--no-calibration", action="store_true", help="freeze alpha/beta at zero")
    s.add_argument("--no-adapter", action="store_true", help="freeze gamma/mu at zero")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_adapter)

    for name, fn, qflag in (("answer", cmd_answer, "--query"), ("evaluate", cmd_evaluate, "--queries")):
        s = sub.add_parser(name, parents=[common])
        s.add_argument("--matrix", required=True)
        s.add_argument("--params")
        s.add_argument(qflag, required=True)
        s.add_argument("--triples", required=True)
        s.add_argument("--types")
        s.add_argument("--adapter-hops", choices=ADAPTER_HOPS, default="all")
        s.set_defaults(func=fn)
    answer, evaluate = sub.choices["answer"], sub.choices["evaluate"]
    answer.add_argument("--topk", type=_positive_int, default=10)
    answer.add_argument("--trace", action="store_true")
    evaluate.add_argument("--report")
    evaluate.add_argument("--flat-average", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    env_threads = os.environ.get("TCQA_THREADS")
    if env_threads:
        args.threads = max(1, int(env_threads))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"tcqa {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

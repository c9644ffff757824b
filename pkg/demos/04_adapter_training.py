"""
Training calibration and adapter parameters
===========================================

Calibration rescales each scored row, the adapter rescales the tails a relation
is type-compatible with. Both start at zero, where they change nothing, and are
trained on intersection queries with and without negation.
"""

# %%
from tcqa import (Executor, KgeConfig, TrainConfig, build_base_matrix, build_type_graphs, evaluate,
                  generate_queries, train_adapter, train_kge)
from tcqa.queries import STRUCTURES
from tcqa.synthetic import make_typed_kg

kg, types = make_typed_kg(n_entities=200, n_relations=8, test_fraction=0.1, seed=0)
graphs = build_type_graphs(kg, types)
matrix = build_base_matrix(train_kge(kg, KgeConfig(dim=32, epochs=200, seed=0)), kg, graphs)

train_q = []
for k, label in enumerate(("2i", "3i", "2in", "3in")):
    train_q += generate_queries(kg, label, 125, seed=100 + k, split="train")
test_q = []
for k, label in enumerate(STRUCTURES):
    test_q += generate_queries(kg, label, 40, seed=200 + k, split="test")

# %%
base = evaluate(Executor(matrix, graphs), test_q)

# %%
# Three variants: both parameter groups, calibration only, adapter only.
for name, cal, ada in (("joint", True, True), ("calibration", True, False), ("adapter", False, True)):
    state = train_adapter(matrix, graphs, train_q,
                          TrainConfig(epochs=20, train_calibration=cal, train_adapter=ada))
    report = evaluate(Executor(matrix, graphs, state.calibration, state.adapter), test_q)
    print(f"{name:12s}", {k: f"{base.mrr(k):.3f} -> {report.mrr(k):.3f}" for k in ("avg_p", "avg_ood", "avg_n")})

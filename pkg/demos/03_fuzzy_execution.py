"""
Answering a query with fuzzy sets
=================================

Queries are trees of projections, intersections, unions and negated atoms.
Execution turns each node into a vector of memberships in [0, 1].
"""

# %%
import numpy as np

from tcqa import Executor, build_structure, exact_matrix, symbolic_answers
from tcqa.kg import graph_view
from tcqa.synthetic import load_bundled

kg, _ = load_bundled()
q = build_structure("2in", anchors=[3, 7], relations=[0, 1])
print(q.root)

# %%
# With an exact matrix (observed edges only) the fuzzy engine is crisp and
# agrees with set semantics.
crisp = Executor(exact_matrix(kg, "train"))
out = crisp.execute(q)
print(set(np.flatnonzero(out > 0.5)) == symbolic_answers(q, graph_view(kg, "train"), kg.num_entities))

# %%
# Each projection remembers which source produced each target's score, so an
# answer can be explained hop by hop.
edges = graph_view(kg, "train")
a, r1, mid = map(int, kg.splits["train"][0])
r2 = next(r for (h, r) in edges if h == mid)
p2 = build_structure("2p", anchors=[a], relations=[r1, r2])  # path order, anchor side first
out, trace = crisp.execute(p2, record=True)
for node, sources in trace.witnesses():
    hits = np.flatnonzero(sources >= 0)[:5]
    print(kg.relations.name(node.relation), [(kg.entities.name(int(sources[j])), kg.entities.name(int(j))) for j in hits])

"""
Which entities can a relation touch?
====================================

Every relation gets two compatibility sets. A head is allowed when it carries
any type seen on an observed head. A tail is allowed only when it carries every
type shared by all observed tails.
"""

# %%
# Load the small dataset that ships with the package.
import numpy as np

from tcqa import build_type_graphs
from tcqa.synthetic import load_bundled

kg, types = load_bundled()
print(kg.num_entities, "entities,", kg.num_base_relations, "relations plus inverses")

# %%
graphs = build_type_graphs(kg, types)
for r in range(kg.num_relations):
    print(f"{kg.relations.name(r):8s} heads {graphs.head_mask[r].sum():3d}   tails {graphs.tail_mask[r].sum():3d}")

# %%
# Heads of an observed triple are always compatible, by construction.
train = kg.splits["train"]
assert graphs.head_mask[train[:, 1], train[:, 0]].all()

# %%
# Tail sets shrink as types get more specific: tails carry a primary type and a
# subtype, and the intersection keeps the primary type only when observed tails
# mix subtypes.
share = graphs.tail_mask.mean(axis=1)
print("tail-compatible share per relation:", np.round(share, 2))

"""
Filtered ranking in a few lines
===============================

Only hard answers are ranked. Other known answers are removed from the
competition, and ties count against the answer being ranked.
"""

# %%
import numpy as np

from tcqa.evaluation import aggregate, metrics_from_ranks, rank_hard_answer

scores = np.array([0.95, 0.90, 0.90, 0.40, 0.10])
easy, hard = {0}, {2}
print("rank of entity 2:", rank_hard_answer(scores, 2, easy, hard))  # entity 1 ties, entity 0 is filtered

# %%
print(metrics_from_ranks([1, 2, 4]))

# %%
# Group averages are unweighted over structures.
per = {s: {"mrr": v} for s, v in zip(("2in", "3in", "inp", "pin", "pni"), (0.1, 0.2, 0.3, 0.4, 0.5))}
print(aggregate(per))

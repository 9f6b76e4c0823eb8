"""Why the aggregation divides by a redundancy rate.

Three orthogonal "cohorts" of early features are shown to a fixed guidance
vector.  Replicating one cohort several times shifts a plain linear-attention
blend toward it; the rate-normalized blend does not move.

Run: python3 demos/02_redundancy_rate.py
"""

import numpy as np

from sherl import autograph as ag
from sherl import mtsa

rng = np.random.default_rng(0)
q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
guidance = np.abs(rng.normal(size=4)) @ q.T


def blend(counts, aggregator):
    rows = np.concatenate([np.repeat(q[:, i][None], c, axis=0) for i, c in enumerate(counts)])
    g, e = ag.constant(guidance[None]), ag.constant(rows)
    if aggregator == "MTSA":
        rate = mtsa.redundancy_rate(e).rate
        print(f"  counts {counts}: redundancy rates {np.round(rate.data, 3)}")
        return mtsa.aggregate(g, e, rate).blended.data.ravel()
    return mtsa.aggregate_variant(aggregator, g, e, None).data.ravel()


for aggregator in ("MTSA", "LinearA"):
    print(aggregator)
    base = blend((1, 1, 1), aggregator)
    for counts in [(1, 4, 1), (3, 1, 5)]:
        moved = np.max(np.abs(blend(counts, aggregator) - base))
        print(f"  counts {counts}: blend moved by {moved:.2e}")

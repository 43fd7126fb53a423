"""
Recall at k and sentence similarity scores
==========================================

"""

import numpy as np

from diverse_vse.evaluation import pearson, rank_retrieval, sts_predict

# queries that are noisy copies of their targets
rng = np.random.default_rng(1)
targets = rng.standard_normal((50, 8))
queries = targets + 0.8 * rng.standard_normal((50, 8))
report = rank_retrieval(queries, targets, [[i] for i in range(50)], direction="demo")
print(f"R@1 {report.r1:.0f}  R@5 {report.r5:.0f}  R@10 {report.r10:.0f}  median rank {report.median_rank}")

# a query may have several correct targets; the best ranked one counts
report = rank_retrieval(queries[:10], targets, [[i, i + 10, i + 20] for i in range(10)])
print("with three gold targets per query, R@1 =", report.r1)

# similarity scores on a 0..5 scale from cosines, compared with gold by Pearson r
a, b = rng.standard_normal((20, 8)), rng.standard_normal((20, 8))
gold = np.array([sts_predict(x, y) for x, y in zip(a, b)]) + 0.3 * rng.standard_normal(20)
pred = np.array([sts_predict(x, y) for x, y in zip(a, b)])
print("cosine 0.6 maps to", sts_predict([1.0, 0.0], [0.6, 0.8]))
print(f"pearson r = {pearson(pred, gold):.3f}")

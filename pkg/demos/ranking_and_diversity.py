"""
Triplet ranking with hard negatives and the two diversity penalties
===================================================================

"""

import math

import numpy as np

from diverse_vse.objectives import diversity_pair, triplet_hn

# five aligned image/sentence vectors; each row is a positive pair
rng = np.random.default_rng(0)
images = rng.standard_normal((5, 4))
sentences = images + 0.3 * rng.standard_normal((5, 4))
print("triplet loss, noisy pairs:   ", float(triplet_hn(images, sentences, 0.2).value))
print("triplet loss, all identical: ", float(triplet_hn(np.ones((5, 4)), np.ones((5, 4)), 0.2).value))

# two heads of one instance at a chosen cosine similarity
def heads_at(s):
    return np.array([[[1.0, 0.0], [s, math.sqrt(1 - s * s)]]])

# "intent" charges heads that are too similar, "literal" charges heads that are too different
print(" cosine   intent  literal")
for s in (-0.5, 0.0, 0.5, 0.85, 0.95, 1.0):
    x = heads_at(s)
    print(f"{s:7.2f} {float(diversity_pair(x, x, 0.1).value):8.3f} "
          f"{float(diversity_pair(x, x, 0.1, mode='literal').value):8.3f}")

"""
Encoding a caption and pooling it with several attention heads
==============================================================

"""

import numpy as np

from diverse_vse import RunConfig, SyntheticSpec, generate_synthetic, init_params
from diverse_vse.model import encode_text, stream_weights
from diverse_vse.attention import attend_all
from diverse_vse.training import build_vocabs

# a small bilingual corpus and an untrained three-head model
corpus = generate_synthetic(SyntheticSpec(n_images=20, n_concepts=10, vocab_per_language=16, d_v=8))
vocabs = build_vocabs(corpus, corpus.image_ids())
cfg = RunConfig(k=3, hidden=16, d_w=8)
params = init_params(cfg, {s: len(vocabs[s]) for s in "EG"}, corpus.d_v)

# one caption in the first language, padded to twice its length
tokens = corpus.captions["en"]["img00000"][0]
ids = np.array(vocabs["E"].encode(tokens) + [0] * len(tokens))
print("caption:", " ".join(tokens))

# token states from the bidirectional LSTM; padded rows stay zero
states = encode_text(params, "E", ids)
print("states", states.states.shape, "padded rows all zero:", not states.states.value[len(tokens):].any())

# each head is a convex combination of the token states
rep = attend_all(states, params.heads["E"])
for k, w in enumerate(stream_weights(params, "E", states)):
    print(f"head {k} weights", np.round(w.value[:len(tokens)], 3))
print("concatenated representation length:", rep.concat.shape[0])

"""Parameter container and the encode-then-attend forward pass for all streams."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import attend_all, attention_weights, init_head
from .data import pad_ids
from .errors import ContractError
from .encoders import (bilstm_encode, embed_tokens, encode_visual, init_text_encoder,
                       init_visual_encoder)
from .objectives import EncodedBatch

STREAMS = ("V", "E", "G")
TEXT_STREAMS = ("E", "G")


@dataclass
class ModelParams:
    """All trainable weights: two text encoders, the visual projector and 3*K heads."""

    text: dict  # "E"/"G" -> TextEncoderParams
    visual: object  # VisualEncoderParams
    heads: dict  # "V"/"E"/"G" -> list of AttentionHeadParams

    def named(self):
        """(name, tensor) pairs in a fixed order; this is the checkpoint manifest."""
        for s in TEXT_STREAMS:
            for name, t in self.text[s].named():
                yield f"text.{s}.{name}", t
        for name, t in self.visual.named():
            yield f"visual.{name}", t
        for s in STREAMS:
            for k, head in enumerate(self.heads[s]):
                for name, t in head.named():
                    yield f"heads.{s}.{k}.{name}", t

    def trainable(self):
        for name, t in self.named():
            if name.endswith(".embedding") and self.text[name.split(".")[1]].frozen_embedding:
                continue
            yield name, t

    def zero_grad(self):
        for _, t in self.named():
            t.zero_grad()

    def state(self):
        return {name: t.value.copy() for name, t in self.named()}

    def load_state(self, state):
        for name, t in self.named():
            if state[name].shape != t.shape:
                raise ValueError(f"{name}: stored shape {state[name].shape} != {t.shape}")
            t.value[...] = state[name]

    @property
    def k(self):
        return len(self.heads["V"])


def init_params(cfg, vocab_sizes, d_v, rng=None):
    """Random initialization; ``vocab_sizes`` maps ``"E"``/``"G"`` to sizes."""
    rng = np.random.default_rng(cfg.seed if rng is None else rng)
    text = {s: init_text_encoder(rng, vocab_sizes[s], cfg.d_w, cfg.hidden) for s in TEXT_STREAMS}
    for s in TEXT_STREAMS:
        text[s].frozen_embedding = cfg.freeze_embeddings
    visual = init_visual_encoder(rng, d_v, cfg.hidden)
    heads = {s: [init_head(rng, cfg.hidden) for _ in range(cfg.k)] for s in STREAMS}
    return ModelParams(text, visual, heads)


@dataclass
class TripleBatch:
    """Aligned images and one caption per language for each of B images."""

    image_ids: list
    objects: np.ndarray  # (B, M, D_v)
    object_mask: np.ndarray  # (B, M)
    ids: dict  # "E"/"G" -> (B, N) token ids
    masks: dict  # "E"/"G" -> (B, N) bool
    external: dict | None = None  # "E"/"G" -> (B, N, D_w) precomputed token features

    def __len__(self):
        return len(self.image_ids)


def pack_objects(rows_list, max_objects=36):
    m = max(1, max(r.shape[0] for r in rows_list))
    if m > max_objects:
        raise ContractError(f"{m} objects exceeds max_objects={max_objects}")
    d_v = rows_list[0].shape[1]
    objects = np.zeros((len(rows_list), m, d_v))
    mask = np.zeros((len(rows_list), m), dtype=bool)
    for i, r in enumerate(rows_list):
        objects[i, :r.shape[0]] = r
        mask[i, :r.shape[0]] = True
    return objects, mask


def collate(corpus, vocabs, image_ids, caption_choice, max_len=100):
    """Build a TripleBatch; ``caption_choice[s][i]`` indexes image i's captions."""
    objects, object_mask = pack_objects([corpus.features[i] for i in image_ids], corpus.max_objects)
    ids, masks = {}, {}
    for s, lang in zip(TEXT_STREAMS, corpus.languages):
        seqs = [vocabs[s].encode(corpus.captions[lang][img][c][:max_len])
                for img, c in zip(image_ids, caption_choice[s])]
        ids[s], masks[s] = pad_ids(seqs)
    return TripleBatch(list(image_ids), objects, object_mask, ids, masks)


def encode_text(params, stream, ids, mask=None, external=None):
    ids = np.asarray(ids)
    mask = ids != 0 if mask is None else mask
    states = bilstm_encode(embed_tokens(ids, params.text[stream], external), mask, params.text[stream])
    return states


def encode_image(params, objects, mask, max_objects=36):
    return encode_visual(objects, mask, params.visual, max_objects)


def encode_batch(params, batch, max_objects=36):
    """Forward pass for a TripleBatch producing the EncodedBatch of V, E and G."""
    external = batch.external or {}
    reps = {"V": attend_all(encode_image(params, batch.objects, batch.object_mask, max_objects),
                            params.heads["V"])}
    for s in TEXT_STREAMS:
        states = encode_text(params, s, batch.ids[s], batch.masks[s], external.get(s))
        reps[s] = attend_all(states, params.heads[s])
    return EncodedBatch(reps)


def stream_weights(params, stream, states):
    """Attention distributions of every head of ``stream`` over ``states``."""
    return [attention_weights(states, h) for h in params.heads[stream]]

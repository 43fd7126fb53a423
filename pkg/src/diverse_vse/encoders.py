"""Token and visual-object encoders mapping inputs into the shared H-dim space."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, ParseError, VocabularyError
from .tensor import Tensor


@dataclass
class TokenStates:
    """Per-position hidden states with a validity mask.

    ``states`` is (N, H) for one sequence or (B, N, H) for a batch; rows where
    ``mask`` is false are zero.
    """

    states: Tensor
    mask: np.ndarray

    @property
    def batched(self):
        return self.states.ndim == 3


@dataclass
class TextEncoderParams:
    embedding: Tensor  # (|V|, D_w)
    fwd_wx: Tensor  # (D_w, 4h); gate blocks ordered input, forget, candidate, output
    fwd_wh: Tensor  # (h, 4h)
    fwd_b: Tensor  # (4h,)
    bwd_wx: Tensor
    bwd_wh: Tensor
    bwd_b: Tensor
    frozen_embedding: bool = False

    @property
    def hidden(self):
        return self.fwd_wh.shape[0]

    @property
    def input_width(self):
        return self.fwd_wx.shape[0]

    def named(self):
        for name in ("embedding", "fwd_wx", "fwd_wh", "fwd_b", "bwd_wx", "bwd_wh", "bwd_b"):
            yield name, getattr(self, name)


@dataclass
class VisualEncoderParams:
    weight: Tensor  # (D_v, H)
    bias: Tensor  # (H,)

    def named(self):
        yield "weight", self.weight
        yield "bias", self.bias


def xavier_uniform(rng, fan_in, fan_out, shape=None):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def init_text_encoder(rng, vocab_size, d_w, hidden_size):
    """Fresh bidirectional encoder; ``hidden_size`` is H, split H/2 per direction."""
    if hidden_size % 2:
        raise ContractError(f"hidden size must be even, got {hidden_size}")
    h = hidden_size // 2
    emb = rng.uniform(-0.1, 0.1, size=(vocab_size, d_w))
    emb[0] = 0.0
    parts = {"embedding": Tensor(emb, requires_grad=True)}
    for d in ("fwd", "bwd"):
        b = np.zeros(4 * h)
        b[h:2 * h] = 1.0  # forget gate
        parts[f"{d}_wx"] = Tensor(xavier_uniform(rng, d_w, 4 * h), requires_grad=True)
        parts[f"{d}_wh"] = Tensor(xavier_uniform(rng, h, 4 * h), requires_grad=True)
        parts[f"{d}_b"] = Tensor(b, requires_grad=True)
    return TextEncoderParams(**parts)


def init_visual_encoder(rng, d_v, hidden_size):
    return VisualEncoderParams(
        Tensor(xavier_uniform(rng, d_v, hidden_size), requires_grad=True),
        Tensor(np.zeros(hidden_size), requires_grad=True),
    )


def load_pretrained(path, vocab):
    """Read FastText-style text vectors for the words of ``vocab``.

    Returns ``(rows, coverage)``: ``rows`` maps vocabulary index to vector, and
    ``coverage`` is the percentage of non-special vocabulary entries found. A
    leading ``count dim`` header line is accepted.
    """
    rows, dim = {}, None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").rstrip(" ").split(" ")
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue
            if len(parts) < 2:
                continue
            word, values = parts[0], parts[1:]
            if dim is None:
                dim = len(values)
            elif len(values) != dim:
                raise ParseError(f"vector for {word!r} has {len(values)} values, expected {dim}",
                                 f"line {lineno}")
            if word in vocab:
                try:
                    rows[vocab.index(word)] = np.array([float(v) for v in values])
                except ValueError:
                    raise ParseError(f"non-numeric value in vector for {word!r}", f"line {lineno}") from None
    n_words = max(len(vocab) - 2, 1)
    return rows, 100.0 * len(rows) / n_words


def apply_pretrained(params, rows):
    width = params.embedding.shape[1]
    for idx, vec in rows.items():
        if vec.shape[0] != width:
            raise DimensionError(f"pretrained width {vec.shape[0]} != embedding width {width}")
        params.embedding.value[idx] = vec


def embed_tokens(ids, params, external=None):
    """Embedding rows for ``ids`` ((N,) or (B, N)); padding rows are zero.

    ``external`` replaces the table lookup with precomputed per-token features
    of shape ``ids.shape + (D_w,)``.
    """
    ids = np.asarray(ids, dtype=np.int64)
    mask = (ids != 0)[..., None].astype(np.float64)
    if external is not None:
        external = np.asarray(external, dtype=np.float64)
        if external.shape[:-1] != ids.shape or external.shape[-1] != params.input_width:
            raise DimensionError(
                f"external features {external.shape} do not match ids {ids.shape} "
                f"and input width {params.input_width}")
        return Tensor(external * mask)
    vocab_size = params.embedding.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise VocabularyError(f"token index out of range [0, {vocab_size})")
    table = params.embedding
    if params.frozen_embedding:
        table = Tensor(table.value)
    return T.getitem(table, ids) * mask


def _check_left_aligned(mask):
    lengths = mask.sum(axis=-1)
    expected = np.arange(mask.shape[-1]) < lengths[..., None]
    if not np.array_equal(mask, expected):
        raise ContractError("sequence masks must be left-aligned (no valid token after padding)")
    return lengths


def _run_direction(xw, step_masks, wh, b, h, order):
    """Unroll one LSTM direction; returns per-step outputs indexed by position."""
    batch = xw.shape[0]
    hid = Tensor(np.zeros((batch, h)))
    cell = Tensor(np.zeros((batch, h)))
    outs = [None] * len(order)
    for t in order:
        m = step_masks[t]
        gates = xw[:, t, :] + hid @ wh + b
        i = T.sigmoid(gates[:, :h])
        f = T.sigmoid(gates[:, h:2 * h])
        g = T.tanh_ew(gates[:, 2 * h:3 * h])
        o = T.sigmoid(gates[:, 3 * h:])
        c_new = f * cell + i * g
        h_new = o * T.tanh_ew(c_new)
        if m.all():
            cell, hid = c_new, h_new
            outs[t] = h_new
        else:
            # padded steps carry the state through unchanged and emit zeros
            keep = 1.0 - m
            cell = m * c_new + keep * cell
            hid = m * h_new + keep * hid
            outs[t] = m * h_new
    return outs


def bilstm_encode(inputs, mask, params):
    """Bidirectional LSTM over left-aligned sequences.

    Row n of the output is ``[forward_n ; backward_n]`` (H/2 each). Only the
    first ``max(length)`` steps are unrolled; later rows are zero.
    """
    inputs = T.as_tensor(inputs)
    mask = np.asarray(mask, dtype=bool)
    single = inputs.ndim == 2
    if single:
        inputs = inputs.reshape((1,) + inputs.shape)
        mask = mask[None]
    batch, n, d_w = inputs.shape
    if mask.shape != (batch, n):
        raise DimensionError(f"mask {mask.shape} does not match inputs {inputs.shape}")
    if d_w != params.input_width:
        raise DimensionError(f"input width {d_w} != encoder input width {params.input_width}")
    lengths = _check_left_aligned(mask)
    steps = int(lengths.max()) if lengths.size else 0
    h = params.hidden
    if steps == 0:
        out = Tensor(np.zeros((batch, n, 2 * h)))
    else:
        x = inputs if steps == n else inputs[:, :steps, :]
        step_masks = [mask[:, t:t + 1].astype(np.float64) for t in range(steps)]
        fwd = _run_direction(x @ params.fwd_wx, step_masks, params.fwd_wh, params.fwd_b, h,
                             range(steps))
        bwd = _run_direction(x @ params.bwd_wx, step_masks, params.bwd_wh, params.bwd_b, h,
                             range(steps - 1, -1, -1))
        out = T.concat([T.stack(fwd, axis=1), T.stack(bwd, axis=1)], axis=-1)
        if steps < n:
            out = T.concat([out, Tensor(np.zeros((batch, n - steps, 2 * h)))], axis=1)
    if single:
        return TokenStates(out.reshape(out.shape[1:]), mask[0])
    return TokenStates(out, mask)


def encode_visual(objects, mask, params, max_objects=36):
    """Affine projection of object features; padded object rows are zero."""
    objects = T.as_tensor(objects)
    mask = np.asarray(mask, dtype=bool)
    if objects.shape[-2] > max_objects:
        raise ContractError(f"{objects.shape[-2]} objects exceeds max_objects={max_objects}")
    if objects.shape[:-1] != mask.shape:
        raise DimensionError(f"mask {mask.shape} does not match objects {objects.shape}")
    if objects.shape[-1] != params.weight.shape[0]:
        raise DimensionError(f"feature width {objects.shape[-1]} != projector input {params.weight.shape[0]}")
    out = (objects @ params.weight + params.bias) * mask[..., None].astype(np.float64)
    return TokenStates(out, mask)

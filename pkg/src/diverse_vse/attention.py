"""Context-vector attention pooling with K independent heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, InvalidMaskError
from .tensor import Tensor


@dataclass
class AttentionHeadParams:
    w_in: Tensor  # (H, H_attn), applied to token states
    w_ctx: Tensor  # (H_c, H_attn), applied to the context vector
    ctx: Tensor  # (H_c,)

    def named(self):
        yield "w_in", self.w_in
        yield "w_ctx", self.w_ctx
        yield "ctx", self.ctx


@dataclass
class HeadedRepresentation:
    heads: list  # K tensors, each (H,) or (B, H)
    concat: Tensor  # (K*H,) or (B, K*H)

    @property
    def k(self):
        return len(self.heads)


def init_head(rng, hidden_size, attn_size=None, ctx_size=None):
    from .encoders import xavier_uniform

    attn_size = attn_size or hidden_size
    ctx_size = ctx_size or hidden_size
    return AttentionHeadParams(
        Tensor(xavier_uniform(rng, hidden_size, attn_size), requires_grad=True),
        Tensor(xavier_uniform(rng, ctx_size, attn_size), requires_grad=True),
        Tensor(rng.uniform(-0.1, 0.1, size=ctx_size), requires_grad=True),
    )


def _scores(states, head):
    """Trimmed (B, T, H) states, (B, T) mask and (B, T) attention weights."""
    x, mask = states.states, np.asarray(states.mask, dtype=bool)
    if x.ndim == 2:
        x, mask = x.reshape((1,) + x.shape), mask[None]
    valid = mask.sum(axis=-1)
    if (valid == 0).any():
        raise InvalidMaskError("attention needs at least one valid position")
    # positions past the longest valid prefix are dropped so that extra padding
    # cannot change reduction order
    steps = int(np.max(np.nonzero(mask.any(axis=0))[0])) + 1
    if steps < x.shape[1]:
        x, mask = x[:, :steps, :], mask[:, :steps]
    query = T.tanh_ew(head.ctx.reshape(1, -1) @ head.w_ctx)  # (1, H_attn)
    keys = T.tanh_ew(x @ head.w_in)  # (B, T, H_attn)
    scores = (keys * query).sum(axis=-1)
    return x, mask, T.masked_softmax(scores, mask)


def attend_head(states, head):
    """Weighted sum of the raw token states under one head's attention."""
    x, _, w = _scores(states, head)
    b, steps, hid = x.shape
    out = (w.reshape(b, steps, 1) * x).sum(axis=1)
    return out.reshape(hid) if not states.batched else out


def attention_weights(states, head):
    """The head's attention distribution over all N positions (masked = 0)."""
    x, _, w = _scores(states, head)
    n = states.mask.shape[-1]
    if w.shape[-1] < n:
        w = T.concat([w, Tensor(np.zeros((w.shape[0], n - w.shape[-1])))], axis=-1)
    return w.reshape(n) if not states.batched else w


def attend_all(states, heads):
    if not heads:
        raise ContractError("at least one attention head is required")
    outs = [attend_head(states, h) for h in heads]
    concat = outs[0] if len(outs) == 1 else T.concat(outs, axis=-1)
    return HeadedRepresentation(outs, concat)

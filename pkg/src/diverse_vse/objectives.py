"""
Ranking and head-diversity objectives.

Streams are keyed ``"V"`` (images), ``"E"`` (language A) and ``"G"``
(language B). All similarities are cosines; a zero vector has cosine 0 with
everything and receives no gradient through the similarity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor

DIVERSITY_PAIRS = (("V", "V"), ("G", "G"), ("E", "E"), ("V", "E"), ("V", "G"), ("G", "E"))
DIVERSITY_MODES = ("intent", "literal")


def cosine(a, b):
    """Cosine similarity of two vectors as a scalar tensor."""
    a, b = T.as_tensor(a), T.as_tensor(b)
    if a.shape != b.shape or a.size < 1:
        raise ContractError(f"cosine needs equal non-empty shapes, got {a.shape} and {b.shape}")
    return (T.l2_normalize(a.reshape(-1)) * T.l2_normalize(b.reshape(-1))).sum()


def similarity_matrix(a, b):
    """(B, B) cosine matrix between the rows of ``a`` and ``b``."""
    return T.l2_normalize(a) @ T.swap_last(T.l2_normalize(b))


def _as_rows(x):
    if isinstance(x, (list, tuple)):
        return T.stack([T.as_tensor(v).reshape(-1) for v in x], axis=0)
    return T.as_tensor(x)


def hardest_negatives(sim):
    """Column of the hardest negative per row and row of the hardest per column."""
    s = np.array(sim, dtype=np.float64)
    np.fill_diagonal(s, -np.inf)
    return s.argmax(axis=1), s.argmax(axis=0)


def triplet_hn(a, b, margin):
    """Hinge triplet loss using the single hardest in-batch negative.

    ``a[p]`` and ``b[p]`` are a positive pair; for each p both directions are
    penalized: ``[m - s(a_p,b_p) + max_q s(a_p,b_q)]_+`` and
    ``[m - s(a_p,b_p) + max_q s(a_q,b_p)]_+`` with q != p.
    """
    a, b = _as_rows(a), _as_rows(b)
    if a.shape != b.shape:
        raise ContractError(f"paired batches differ in shape: {a.shape} vs {b.shape}")
    n = a.shape[0]
    if n < 2:
        raise ContractError("triplet_hn needs a batch of at least 2 (no negatives otherwise)")
    if margin <= 0:
        raise ContractError("margin must be positive")
    sim = similarity_matrix(a, b)
    rows = np.arange(n)
    pos = sim[rows, rows]
    neg_col, neg_row = hardest_negatives(sim.value)
    cost_b = T.hinge(margin - pos + sim[rows, neg_col])
    cost_a = T.hinge(margin - pos + sim[neg_row, rows])
    return cost_b.sum() + cost_a.sum()


@dataclass
class EncodedBatch:
    """Per-head and concatenated representations of V, E and G for one batch."""

    streams: dict  # stream -> HeadedRepresentation with (B, H) heads

    def __post_init__(self):
        sizes = {s: (r.concat.shape[0], r.k) for s, r in self.streams.items()}
        if len(set(sizes.values())) != 1:
            raise ContractError(f"streams disagree on (batch, heads): {sizes}")

    def __getitem__(self, stream):
        return self.streams[stream]

    @property
    def batch_size(self):
        return next(iter(self.streams.values())).concat.shape[0]

    @property
    def k(self):
        return next(iter(self.streams.values())).k

    @cached_property
    def unit_heads(self):
        """stream -> (B, K, H) unit-normalized head outputs."""
        return {s: T.l2_normalize(T.stack(r.heads, axis=1)) for s, r in self.streams.items()}


def ranking_loss(batch, margin, gamma):
    """``l(V,G) + l(V,E) + gamma * l(G,E)``; returns ``(total, components)``."""
    parts = {
        "l_VG": triplet_hn(batch["V"].concat, batch["G"].concat, margin),
        "l_VE": triplet_hn(batch["V"].concat, batch["E"].concat, margin),
        "l_GE": triplet_hn(batch["G"].concat, batch["E"].concat, margin),
    }
    total = parts["l_VG"] + parts["l_VE"] + gamma * parts["l_GE"]
    return total, parts


def _unit_stack(heads):
    if isinstance(heads, (list, tuple)):
        heads = T.stack([T.as_tensor(h) for h in heads], axis=-2)
    heads = T.as_tensor(heads)
    if heads.ndim == 2:
        heads = heads.reshape((1,) + heads.shape)
    return T.l2_normalize(heads)


def diversity_pair(x_heads, y_heads, margin, mode="intent", normalized=False):
    """Hinge penalty over ordered pairs of distinct heads (k != r) per instance.

    ``x_heads``/``y_heads`` are (B, K, H) stacks (or lists of K (B, H) tensors).
    In ``intent`` mode a pair costs ``[margin - (1 - s)]_+``, pushing the cosine
    distance between distinct heads up to ``margin``. ``literal`` mode uses
    ``[margin - s]_+``, which instead rewards similarity.
    """
    if mode not in DIVERSITY_MODES:
        raise ContractError(f"unknown diversity mode {mode!r}; expected one of {DIVERSITY_MODES}")
    if not 0 < margin < 2:
        raise ContractError("diversity margin must lie in (0, 2)")
    x = x_heads if normalized else _unit_stack(x_heads)
    y = y_heads if normalized else _unit_stack(y_heads)
    if x.shape != y.shape:
        raise ContractError(f"head stacks differ: {x.shape} vs {y.shape}")
    k = x.shape[-2]
    if k == 1:
        return T.Tensor(0.0)
    sim = x @ T.swap_last(y)  # (B, K, K)
    off_diag = 1.0 - np.eye(k)
    if mode == "intent":
        cost = T.hinge(sim - (1.0 - margin))
    else:
        cost = T.hinge(margin - sim)
    return (cost * off_diag).sum()


def diversity_total(batch, margin, mode="intent"):
    """Sum of the three intra-stream and three cross-stream diversity terms."""
    unit = batch.unit_heads
    parts = {f"d_{x}{y}": diversity_pair(unit[x], unit[y], margin, mode, normalized=True)
             for x, y in DIVERSITY_PAIRS}
    total = parts["d_VV"]
    for name in list(parts)[1:]:
        total = total + parts[name]
    return total, parts


@dataclass
class LossBreakdown:
    total: Tensor
    ranking: Tensor
    diversity: Tensor
    components: dict = field(default_factory=dict)  # name -> scalar tensor

    COLUMNS = ("l_VG", "l_VE", "l_GE", "d_VV", "d_GG", "d_EE", "d_VE", "d_VG", "d_GE")

    def values(self):
        row = {name: float(self.components[name].value) for name in self.COLUMNS}
        row["total"] = float(self.total.value)
        return row

    def is_finite(self):
        return all(np.isfinite(v) for v in self.values().values())


def total_loss(batch, cfg):
    """Ranking loss plus ``beta`` times the diversity loss."""
    ranking, rparts = ranking_loss(batch, cfg.alpha, cfg.gamma)
    diversity, dparts = diversity_total(batch, cfg.alpha_d, cfg.diversity_mode)
    total = ranking + cfg.beta * diversity
    return LossBreakdown(total, ranking, diversity, {**rparts, **dparts})

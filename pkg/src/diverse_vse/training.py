"""
Batch sampling, Adam with coupled L2 weight decay, global-norm clipping,
the epoch loop with validation-based model selection, and checkpoints.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import RunConfig, config_from_text
from .data import Vocabulary, build_vocab
from .errors import ContractError, NumericError, ParseError
from .evaluation import encode_split, retrieval_reports, validation_score
from .model import TEXT_STREAMS, ModelParams, collate, encode_batch, init_params
from .objectives import LossBreakdown, total_loss

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step",) + LossBreakdown.COLUMNS + ("total", "epoch", "lr", "clip_scale")


# sampling

def _choose_captions(corpus, rng, image_ids):
    choice = {}
    for s, lang in zip(TEXT_STREAMS, corpus.languages):
        choice[s] = [int(rng.integers(len(corpus.captions[lang][i]))) for i in image_ids]
    return choice


def sample_batch(corpus, vocabs, rng, size, ids=None, max_len=100):
    """``size`` distinct images with one uniformly drawn caption per language."""
    ids = corpus.split("train") if ids is None else ids
    if size < 2:
        raise ContractError("batch size must be >= 2")
    if size > len(ids):
        raise ContractError(f"batch size {size} exceeds the {len(ids)} available images")
    chosen = [ids[j] for j in rng.choice(len(ids), size, replace=False)]
    return collate(corpus, vocabs, chosen, _choose_captions(corpus, rng, chosen), max_len)


def epoch_batches(corpus, vocabs, rng, size, ids=None, max_len=100):
    """One epoch: ceil(n / size) batches over a fresh permutation of ``ids``.

    The last batch is topped up with images from the start of the permutation
    so every batch has ``min(size, n)`` distinct images.
    """
    ids = corpus.split("train") if ids is None else ids
    size = min(size, len(ids))
    if size < 2:
        raise ContractError("need at least two images per batch")
    perm = [ids[j] for j in rng.permutation(len(ids))]
    for start in range(0, len(perm), size):
        chunk = perm[start:start + size]
        if len(chunk) < size:
            chunk = chunk + perm[:size - len(chunk)]
        yield collate(corpus, vocabs, chunk, _choose_captions(corpus, rng, chunk), max_len)


# optimization

@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def copy(self):
        return OptimizerState({k: a.copy() for k, a in self.m.items()},
                              {k: a.copy() for k, a in self.v.items()},
                              self.step, self.beta1, self.beta2, self.eps)


def _named(params):
    if hasattr(params, "trainable"):
        return list(params.trainable())
    if isinstance(params, dict):
        return list(params.items())
    return [(f"p{i}", p) for i, p in enumerate(params)]


def global_grad_norm(params):
    return math.sqrt(sum(float((p.grad * p.grad).sum()) for _, p in _named(params)))


def clip_gradients(params, max_norm):
    """Rescale all gradients together if their joint L2 norm exceeds ``max_norm``.

    Returns the applied scale (1.0 when untouched).
    """
    if max_norm <= 0:
        raise ContractError("max_norm must be positive")
    norm = global_grad_norm(params)
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    for _, p in _named(params):
        p.grad *= scale
    return scale


def adam_step(params, state, lr, weight_decay=0.0, decoupled=False):
    """One bias-corrected Adam update in place.

    Weight decay is added to the gradient (L2) unless ``decoupled``, in which
    case it shrinks the weights directly.
    """
    named = _named(params)
    for name, p in named:
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in named:
        g = p.grad if decoupled or not weight_decay else p.grad + weight_decay * p.value
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if decoupled and weight_decay:
            update = update + lr * weight_decay * p.value
        p.value -= update


# checkpoints

CHECKPOINT_MAGIC = b"VSEDIV01"


@dataclass
class Checkpoint:
    params: dict  # name -> array, manifest order
    optimizer: OptimizerState
    config: RunConfig
    epoch: int
    val_score: float
    vocabs: dict  # "E"/"G" -> Vocabulary
    d_v: int = 0

    def model(self):
        sizes = {s: len(self.vocabs[s]) for s in TEXT_STREAMS}
        params = init_params(self.config, sizes, self.d_v, rng=0)
        params.load_state(self.params)
        return params


def _block(text):
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_checkpoint(path, ckpt):
    """Binary little-endian checkpoint.

    Layout: magic, then length-prefixed UTF-8 blocks (config ``key = value``
    lines, metadata lines, manifest lines ``name dims...``, language-A vocab,
    language-B vocab), then float64 blobs for every manifest entry: parameter
    values, Adam first moments, Adam second moments.
    """
    opt = ckpt.optimizer
    meta = (f"epoch = {ckpt.epoch}\nval_score = {ckpt.val_score!r}\nd_v = {ckpt.d_v}\n"
            f"adam_step = {opt.step}\nadam_beta1 = {opt.beta1!r}\nadam_beta2 = {opt.beta2!r}\n"
            f"adam_eps = {opt.eps!r}\nhas_moments = {int(bool(opt.m))}\n")
    manifest = "".join(f"{name} {' '.join(map(str, a.shape))}\n" for name, a in ckpt.params.items())
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for text in (ckpt.config.to_text(), meta, manifest,
                     "\n".join(ckpt.vocabs["E"].itos[2:]), "\n".join(ckpt.vocabs["G"].itos[2:])):
            fh.write(_block(text))
        for name, a in ckpt.params.items():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
        if opt.m:
            for store in (opt.m, opt.v):
                for name, a in ckpt.params.items():
                    moment = store.get(name, np.zeros_like(a))
                    fh.write(np.ascontiguousarray(moment, dtype="<f8").tobytes())


def load_checkpoint(path):
    data = open(path, "rb").read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ParseError("not a checkpoint file", "byte 0")
    pos = 8
    blocks = []
    for _ in range(5):
        if pos + 4 > len(data):
            raise ParseError("truncated checkpoint header", f"byte {pos}")
        (n,) = struct.unpack_from("<I", data, pos)
        blocks.append(data[pos + 4:pos + 4 + n].decode("utf-8"))
        pos += 4 + n
    config_text, meta_text, manifest, vocab_e, vocab_g = blocks
    cfg = config_from_text(config_text)
    meta = dict(line.split(" = ", 1) for line in meta_text.splitlines() if line)
    shapes = []
    for line in manifest.splitlines():
        name, *dims = line.split(" ")
        shapes.append((name, tuple(int(d) for d in dims)))

    def read_all():
        nonlocal pos
        out = {}
        for name, shape in shapes:
            count = int(np.prod(shape)) if shape else 1
            if pos + 8 * count > len(data):
                raise ParseError(f"truncated blob for {name}", f"byte {pos}")
            out[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
            pos += 8 * count
        return out

    params = read_all()
    opt = OptimizerState(step=int(meta["adam_step"]), beta1=float(meta["adam_beta1"]),
                         beta2=float(meta["adam_beta2"]), eps=float(meta["adam_eps"]))
    if int(meta["has_moments"]):
        opt.m = read_all()
        opt.v = read_all()
    vocabs = {"E": Vocabulary(vocab_e.split("\n") if vocab_e else []),
              "G": Vocabulary(vocab_g.split("\n") if vocab_g else [])}
    return Checkpoint(params, opt, cfg, int(meta["epoch"]), float(meta["val_score"]), vocabs,
                      int(meta["d_v"]))


# training loop

@dataclass
class TrainResult:
    best: Checkpoint
    log: list  # one dict per step, keys LOG_COLUMNS
    epoch_scores: list  # validation score after each epoch (index 0: before training)
    params: ModelParams  # final (not necessarily best) parameters
    optimizer: OptimizerState


def write_log_csv(path_or_file, rows):
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="", encoding="utf-8") if own else path_or_file
    try:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    finally:
        if own:
            fh.close()


def build_vocabs(corpus, ids, min_count=1):
    """Per-language vocabularies over the captions of ``ids``."""
    return {s: build_vocab([c for i in ids for c in corpus.captions[lang].get(i, [])], min_count)
            for s, lang in zip(TEXT_STREAMS, corpus.languages)}


def train_step(params, opt, batch, cfg, lr):
    """Forward, backward, clip, update. Returns (LossBreakdown, clip scale)."""
    params.zero_grad()
    with T.Tape() as tape:
        enc = encode_batch(params, batch, cfg.max_objects)
        losses = total_loss(enc, cfg)
    if not losses.is_finite():
        raise NumericError(f"non-finite loss: {losses.values()}")
    T.backward(losses.total, tape)
    scale = clip_gradients(params, cfg.clip_norm)
    adam_step(params, opt, lr, cfg.weight_decay, cfg.decoupled_weight_decay)
    return losses, scale


def evaluate_params(params, corpus, vocabs, ids, cfg):
    return retrieval_reports(encode_split(params, corpus, vocabs, ids, cfg.max_len))


def train(cfg, corpus, vocabs=None, train_ids=None, val_ids=None, params=None, on_epoch=None):
    """Train with per-epoch validation and keep the best-scoring checkpoint.

    Model selection uses the sum of R@1, R@5 and R@10 over the four retrieval
    directions on ``val_ids``.
    """
    train_ids = list(corpus.split("train") if train_ids is None else train_ids)
    val_ids = list(corpus.split("val") if val_ids is None else val_ids)
    if set(train_ids) & set(val_ids):
        raise ContractError("validation images overlap the training images")
    vocabs = vocabs or build_vocabs(corpus, train_ids, cfg.min_count)
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = init_params(cfg, {s: len(vocabs[s]) for s in TEXT_STREAMS}, corpus.d_v, rng)
    opt = OptimizerState(beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)

    def snapshot(epoch, score):
        return Checkpoint(params.state(), opt.copy(), cfg, epoch, score, vocabs, corpus.d_v)

    score = validation_score(evaluate_params(params, corpus, vocabs, val_ids, cfg)) if val_ids else 0.0
    best = snapshot(0, score)
    scores = [score]
    rows = []
    step = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        for batch in epoch_batches(corpus, vocabs, rng, cfg.batch, train_ids, cfg.max_len):
            losses, scale = train_step(params, opt, batch, cfg, lr)
            step += 1
            rows.append({"step": step, **losses.values(), "epoch": epoch, "lr": lr, "clip_scale": scale})
        score = validation_score(evaluate_params(params, corpus, vocabs, val_ids, cfg)) if val_ids else 0.0
        scores.append(score)
        log.info("epoch %d: last loss %.4f, validation %.2f", epoch, rows[-1]["total"], score)
        if score > best.val_score:
            best = snapshot(epoch + 1, score)
        if on_epoch is not None:
            on_epoch(epoch, params, score)
    return TrainResult(best, rows, scores, params, opt)

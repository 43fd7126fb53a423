"""
Retrieval (R@k) in four directions, STS correlation and head-diversity
diagnostics, plus the tab-separated embedding dump.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import pad_ids
from .errors import ContractError
from .model import TEXT_STREAMS, encode_image, encode_text, pack_objects, stream_weights
from .attention import attend_all

DIRECTIONS = ("G->I", "I->G", "E->I", "I->E")


@dataclass
class RetrievalReport:
    direction: str
    recall: dict  # k -> percentage of queries with a gold target in the top k
    median_rank: float
    ranks: np.ndarray = field(default=None, repr=False)  # 1-based best gold rank per query

    @property
    def r1(self):
        return self.recall[1]

    @property
    def r5(self):
        return self.recall[5]

    @property
    def r10(self):
        return self.recall[10]

    def row(self):
        return {"direction": self.direction, **{f"R@{k}": v for k, v in self.recall.items()},
                "median_rank": self.median_rank}


def _unit_rows(x):
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    return np.where(norm > 0, x / np.where(norm > 0, norm, 1.0), 0.0)


def _best_ranks(qn, tn, gold):
    sim = qn @ tn.T
    order = np.argsort(-sim, axis=1, kind="stable")
    pos = np.empty_like(order)
    rows = np.arange(order.shape[0])[:, None]
    pos[rows, order] = np.arange(order.shape[1])
    return np.array([pos[i, list(g)].min() + 1 for i, g in enumerate(gold)])


def rank_retrieval(queries, targets, gold, ks=(1, 5, 10), direction="", threads=1):
    """Rank targets by cosine to each query; ties go to the lower target index.

    ``gold[i]`` is the collection of target indices counted as correct for
    query i; success at k means the best-ranked gold target is in the top k.
    """
    gold = [sorted(set(g)) for g in (gold.values() if isinstance(gold, dict) else gold)]
    qn, tn = _unit_rows(queries), _unit_rows(targets)
    if len(gold) != qn.shape[0]:
        raise ContractError(f"{len(gold)} gold sets for {qn.shape[0]} queries")
    for i, g in enumerate(gold):
        if not g:
            raise ContractError(f"query {i} has an empty gold set")
        if g[0] < 0 or g[-1] >= tn.shape[0]:
            raise ContractError(f"query {i} has a gold target outside [0, {tn.shape[0]})")
    if threads > 1 and qn.shape[0] > threads:
        shards = np.array_split(np.arange(qn.shape[0]), threads)
        with ThreadPoolExecutor(threads) as pool:
            parts = pool.map(lambda idx: _best_ranks(qn[idx], tn, [gold[i] for i in idx]), shards)
            ranks = np.concatenate(list(parts))
    else:
        ranks = _best_ranks(qn, tn, gold)
    recall = {k: 100.0 * int(np.count_nonzero(ranks <= k)) / len(ranks) for k in ks}
    return RetrievalReport(direction, recall, float(np.median(ranks)), ranks)


@dataclass
class SplitEmbeddings:
    image_ids: list
    images: np.ndarray  # (n_images, K*H)
    image_heads: np.ndarray  # (n_images, K, H)
    captions: dict  # stream -> (n_captions, K*H)
    caption_heads: dict  # stream -> (n_captions, K, H)
    caption_owner: dict  # stream -> image row of each caption


def _encode_texts(params, stream, vocab, sentences, chunk):
    concat, heads = [], []
    for start in range(0, len(sentences), chunk):
        ids, mask = pad_ids([vocab.encode(s) for s in sentences[start:start + chunk]])
        rep = attend_all(encode_text(params, stream, ids, mask), params.heads[stream])
        concat.append(rep.concat.value)
        heads.append(np.stack([h.value for h in rep.heads], axis=1))
    return np.concatenate(concat), np.concatenate(heads)


def encode_sentences(params, stream, vocab, sentences, chunk=256):
    """Concatenated multi-head embeddings for tokenized sentences."""
    if not sentences:
        return np.zeros((0, params.k * params.visual.weight.shape[1]))
    with T.no_grad():
        return _encode_texts(params, stream, vocab, sentences, chunk)[0]


def encode_split(params, corpus, vocabs, image_ids, max_len=100, chunk=256):
    with T.no_grad():
        concat, heads = [], []
        for start in range(0, len(image_ids), chunk):
            rows = [corpus.features[i] for i in image_ids[start:start + chunk]]
            objects, mask = pack_objects(rows, corpus.max_objects)
            rep = attend_all(encode_image(params, objects, mask, corpus.max_objects), params.heads["V"])
            concat.append(rep.concat.value)
            heads.append(np.stack([h.value for h in rep.heads], axis=1))
        captions, caption_heads, owner = {}, {}, {}
        for s, lang in zip(TEXT_STREAMS, corpus.languages):
            sents, own = [], []
            for row, img in enumerate(image_ids):
                for tokens in corpus.captions[lang].get(img, []):
                    sents.append(tokens[:max_len])
                    own.append(row)
            captions[s], caption_heads[s] = _encode_texts(params, s, vocabs[s], sents, chunk)
            owner[s] = np.array(own, dtype=np.int64)
    return SplitEmbeddings(list(image_ids), np.concatenate(concat), np.concatenate(heads),
                           captions, caption_heads, owner)


def retrieval_reports(emb, ks=(1, 5, 10), threads=1):
    """Sentence-to-image and image-to-sentence reports for both languages.

    Image queries count as correct when any of the image's captions is in the
    top k.
    """
    reports = []
    for s in ("G", "E"):
        owner = emb.caption_owner[s]
        reports.append(rank_retrieval(emb.captions[s], emb.images, [[o] for o in owner], ks,
                                      f"{s}->I", threads))
        per_image = [np.nonzero(owner == row)[0] for row in range(len(emb.image_ids))]
        reports.append(rank_retrieval(emb.images, emb.captions[s], per_image, ks, f"I->{s}", threads))
    return reports


def validation_score(reports):
    """Sum of R@1, R@5 and R@10 over all reports."""
    return float(sum(r.recall[1] + r.recall[5] + r.recall[10] for r in reports))


def write_reports_csv(path, reports):
    rows = [r.row() for r in reports]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else ["direction"])
        writer.writeheader()
        writer.writerows(rows)


def format_reports(reports):
    lines = [f"{'direction':<10}{'R@1':>8}{'R@5':>8}{'R@10':>8}{'medR':>8}"]
    for r in reports:
        lines.append(f"{r.direction:<10}{r.r1:8.1f}{r.r5:8.1f}{r.r10:8.1f}{r.median_rank:8.1f}")
    return "\n".join(lines)


# semantic textual similarity

def sts_predict(sent_a, sent_b):
    """Map the cosine of two sentence embeddings onto [0, 5]."""
    a, b = np.asarray(sent_a, dtype=np.float64), np.asarray(sent_b, dtype=np.float64)
    denom = float(np.sqrt((a @ a) * (b @ b)))
    cos = float(a @ b) / denom if denom > 0 else 0.0
    return 2.5 * (min(1.0, max(-1.0, cos)) + 1.0)


def pearson(pred, gold):
    """Product-moment correlation coefficient."""
    x, y = np.asarray(pred, dtype=np.float64), np.asarray(gold, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ContractError("pearson needs two equal-length score vectors of length >= 2")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ContractError("correlation undefined: zero variance")
    return float(dx @ dy) / np.sqrt(sxx * syy)


@dataclass
class StsReport:
    r: float
    predictions: np.ndarray


def evaluate_sts(params, pairs, gold, vocab, stream="E"):
    left = encode_sentences(params, stream, vocab, [a for a, _ in pairs])
    right = encode_sentences(params, stream, vocab, [b for _, b in pairs])
    pred = np.array([sts_predict(a, b) for a, b in zip(left, right)])
    return StsReport(pearson(pred, gold), pred)


# diagnostics

def head_diversity_report(batch):
    """Mean cosine over instances and unordered head pairs, per stream.

    ``batch`` is an EncodedBatch or a mapping of stream to (B, K, H) arrays.
    """
    if hasattr(batch, "streams"):
        stacks = {s: np.stack([h.value for h in r.heads], axis=1) for s, r in batch.streams.items()}
    else:
        stacks = {s: np.asarray(v, dtype=np.float64) for s, v in batch.items()}
    out = {}
    for s, x in stacks.items():
        k = x.shape[1]
        if k < 2:
            raise ContractError("head diversity needs at least two heads")
        norm = np.linalg.norm(x, axis=-1, keepdims=True)
        unit = np.where(norm > 0, x / np.where(norm > 0, norm, 1.0), 0.0)
        sim = np.einsum("bkh,brh->bkr", unit, unit)
        iu = np.triu_indices(k, 1)
        out[s] = float(sim[:, iu[0], iu[1]].mean())
    return out


def split_diversity(emb):
    """head_diversity_report over a split, pairing each image with its first captions."""
    first = {s: np.array([np.nonzero(emb.caption_owner[s] == row)[0][0]
                          for row in range(len(emb.image_ids))]) for s in TEXT_STREAMS}
    return head_diversity_report({"V": emb.image_heads,
                                  "E": emb.caption_heads["E"][first["E"]],
                                  "G": emb.caption_heads["G"][first["G"]]})


# embedding dump

def _fmt(vec):
    return ",".join(f"{v:.9g}" for v in np.asarray(vec).reshape(-1))


def export_embeddings(path, params, corpus, vocabs, image_ids, max_len=100):
    """Write one record per instance and stream (V, E, G) as tab-separated text.

    Columns: id, stream, concat vector, per-head vectors (``|``-separated) and
    per-head attention weights over objects/tokens (``|``-separated). Text
    streams use the first caption of each image.
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("id\tstream\tconcat\theads\tattention\n")
        if not image_ids:
            return 0
        records = 0
        with T.no_grad():
            for img in image_ids:
                objects, mask = pack_objects([corpus.features[img]], corpus.max_objects)
                states = encode_image(params, objects[0], mask[0], corpus.max_objects)
                records += _write_record(fh, img, "V", params, states)
                for s, lang in zip(TEXT_STREAMS, corpus.languages):
                    ids = np.array(vocabs[s].encode(corpus.captions[lang][img][0][:max_len]))
                    states = encode_text(params, s, ids)
                    records += _write_record(fh, img, s, params, states)
    return records


def _write_record(fh, image_id, stream, params, states):
    rep = attend_all(states, params.heads[stream])
    weights = stream_weights(params, stream, states)
    fh.write("\t".join([
        image_id, stream, _fmt(rep.concat.value),
        "|".join(_fmt(h.value) for h in rep.heads),
        "|".join(_fmt(w.value) for w in weights),
    ]) + "\n")
    return 1


def read_embeddings(path):
    def vec(text):
        return np.array([float(v) for v in text.split(",")]) if text else np.zeros(0)

    records = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        for line in fh:
            cols = dict(zip(header, line.rstrip("\n").split("\t")))
            records.append({
                "id": cols["id"],
                "stream": cols["stream"],
                "concat": vec(cols["concat"]),
                "heads": [vec(h) for h in cols["heads"].split("|")],
                "attention": [vec(a) for a in cols["attention"].split("|")],
            })
    return records

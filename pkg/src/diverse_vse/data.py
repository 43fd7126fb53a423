"""
Corpus ingestion and the synthetic grounded bilingual corpus.

File formats
------------
Visual features (binary, little-endian)::

    b"VFEAT001" | u32 D_v | u32 max_objects
    per record: u32 id_len | id (UTF-8) | u32 m | m*D_v float32

Captions: UTF-8 TSV ``image_id<TAB>caption``, one caption per line.
STS pairs: UTF-8 TSV ``sent_a<TAB>sent_b<TAB>score`` with score in [0, 5].
Splits: one image id per line.
"""

from __future__ import annotations

import itertools
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError, VocabularyError

FEATURE_MAGIC = b"VFEAT001"
PAD, UNK = "<pad>", "<unk>"
PAD_ID, UNK_ID = 0, 1


# visual features

def write_features(path, features, d_v=None, max_objects=36):
    """Write ``{image_id: (m, D_v) array}`` in the VFEAT001 format."""
    if d_v is None:
        d_v = next(iter(features.values())).shape[1] if features else 0
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", d_v, max_objects))
        for image_id, rows in features.items():
            rows = np.asarray(rows, dtype="<f4")
            if rows.ndim != 2 or rows.shape[1] != d_v:
                raise ContractError(f"image {image_id!r}: expected (m, {d_v}) rows, got {rows.shape}")
            if rows.shape[0] > max_objects:
                raise ContractError(f"image {image_id!r}: {rows.shape[0]} objects > max {max_objects}")
            raw = image_id.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", rows.shape[0]))
            fh.write(rows.tobytes())


def load_features(path):
    """Read a VFEAT001 file.

    Returns ``(features, d_v, max_objects)`` where ``features`` maps image id to
    an (m, D_v) float64 array; rows beyond ``m`` are implicit padding.
    """
    data = Path(path).read_bytes()
    if data[:8] != FEATURE_MAGIC:
        raise ParseError("bad feature file header", "byte 0")
    if len(data) < 16:
        raise ParseError("truncated feature file header", "byte 8")
    d_v, max_objects = struct.unpack_from("<II", data, 8)
    pos = 16
    features = {}
    while pos < len(data):
        start = pos
        if pos + 4 > len(data):
            raise ParseError("truncated id length", f"byte {start}")
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + n + 4 > len(data):
            raise ParseError("truncated record id", f"byte {start}")
        try:
            image_id = data[pos:pos + n].decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError("record id is not UTF-8", f"byte {pos}") from None
        pos += n
        (m,) = struct.unpack_from("<I", data, pos)
        if m > max_objects:
            raise ContractError(f"image {image_id!r} at byte {start}: {m} objects > max {max_objects}")
        pos += 4
        nbytes = 4 * m * d_v
        if pos + nbytes > len(data):
            raise ParseError(f"truncated payload for image {image_id!r}", f"byte {pos}")
        rows = np.frombuffer(data, dtype="<f4", count=m * d_v, offset=pos)
        features[image_id] = rows.reshape(m, d_v).astype(np.float64)
        pos += nbytes
    return features, d_v, max_objects


# text

def tokenize(text, max_len=100):
    """Lower-case, split on whitespace, truncate."""
    return text.lower().split()[:max_len]


def load_captions(path, language=None, max_len=100):
    """Read ``image_id<TAB>caption`` lines into ``{image_id: [tokens, ...]}``."""
    captions = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            if "\t" not in line:
                raise ParseError(f"missing image id column in {language or 'caption'} file", f"line {lineno}")
            image_id, text = line.split("\t", 1)
            tokens = tokenize(text, max_len)
            if not image_id or not tokens:
                raise ParseError("empty image id or caption", f"line {lineno}")
            captions.setdefault(image_id, []).append(tokens)
    return captions


def write_captions(path, captions):
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, caps in captions.items():
            for tokens in caps:
                fh.write(f"{image_id}\t{' '.join(tokens)}\n")


def load_sts(path, max_len=100):
    """Read STS pairs; returns ``(pairs, gold)``."""
    pairs, gold = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != 3:
                raise ParseError(f"expected 3 tab-separated columns, got {len(cols)}", f"line {lineno}")
            try:
                score = float(cols[2])
            except ValueError:
                raise ParseError(f"score {cols[2]!r} is not a number", f"line {lineno}") from None
            if not 0.0 <= score <= 5.0:
                raise ParseError(f"score {score} outside [0, 5]", f"line {lineno}")
            pairs.append((tokenize(cols[0], max_len), tokenize(cols[1], max_len)))
            gold.append(score)
    return pairs, np.array(gold)


def load_split(path):
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


def write_split(path, ids):
    Path(path).write_text("".join(f"{i}\n" for i in ids), encoding="utf-8")


class Vocabulary:
    """Token to index map; index 0 is padding, index 1 the unknown token."""

    def __init__(self, tokens):
        self.itos = [PAD, UNK] + [t for t in tokens if t not in (PAD, UNK)]
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def index(self, token):
        return self.stoi.get(token, UNK_ID)

    def encode(self, tokens):
        return [self.index(t) for t in tokens]

    def decode(self, ids):
        for i in ids:
            if not 0 <= i < len(self.itos):
                raise VocabularyError(f"token index {i} outside vocabulary of size {len(self)}")
        return [self.itos[i] for i in ids if i != PAD_ID]


def build_vocab(captions, min_count=1):
    """Vocabulary over tokenized captions, ordered by frequency then token.

    ``captions`` is an iterable of token lists or a ``{image_id: [tokens...]}``
    table.
    """
    if min_count < 1:
        raise ContractError("min_count must be >= 1")
    if isinstance(captions, dict):
        captions = itertools.chain.from_iterable(captions.values())
    counts = Counter()
    for tokens in captions:
        if isinstance(tokens, str):
            tokens = tokenize(tokens)
        counts.update(tokens)
    kept = [t for t, c in counts.items() if c >= min_count]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


def pad_ids(sequences, length=None):
    """Left-aligned ``(B, N)`` id matrix and validity mask."""
    n = length if length is not None else max((len(s) for s in sequences), default=0)
    ids = np.zeros((len(sequences), max(n, 1)), dtype=np.int64)
    for i, s in enumerate(sequences):
        s = s[:n]
        ids[i, :len(s)] = s
    return ids, ids != PAD_ID


# corpus

@dataclass
class Corpus:
    features: dict  # image id -> (m, D_v) float64
    captions: dict  # language -> {image id -> [token lists]}
    splits: dict = field(default_factory=dict)  # split name -> [image ids]
    languages: tuple = ("en", "de")
    max_objects: int = 36
    concepts: dict | None = None  # synthetic corpora only: image id -> concept ids

    def __post_init__(self):
        for lang in self.languages:
            for image_id in self.captions.get(lang, {}):
                if image_id not in self.features:
                    raise ContractError(f"{lang} caption refers to unknown image {image_id!r}")
        seen = {}
        for name, ids in self.splits.items():
            for i in ids:
                if i in seen:
                    raise ContractError(f"image {i!r} is in both {seen[i]!r} and {name!r} splits")
                seen[i] = name
        for image_id, rows in self.features.items():
            if rows.shape[0] > self.max_objects:
                raise ContractError(f"image {image_id!r} has {rows.shape[0]} objects > {self.max_objects}")

    @property
    def d_v(self):
        return next(iter(self.features.values())).shape[1]

    def split(self, name):
        return self.splits[name] if name in self.splits else sorted(self.features)

    def image_ids(self):
        return list(self.features)


def load_corpus(directory, languages=("en", "de"), max_len=100):
    """Read ``features.bin``, ``captions.<lang>.tsv`` and ``<split>.txt`` files."""
    d = Path(directory)
    features, _, max_objects = load_features(d / "features.bin")
    captions = {lang: load_captions(d / f"captions.{lang}.tsv", lang, max_len) for lang in languages}
    splits = {p.stem: load_split(p) for p in sorted(d.glob("*.txt"))}
    return Corpus(features, captions, splits, tuple(languages), max_objects)


def save_corpus(corpus, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_features(d / "features.bin", corpus.features, corpus.d_v, corpus.max_objects)
    for lang in corpus.languages:
        write_captions(d / f"captions.{lang}.tsv", corpus.captions[lang])
    for name, ids in corpus.splits.items():
        write_split(d / f"{name}.txt", ids)


@dataclass
class SyntheticSpec:
    n_concepts: int = 40
    n_images: int = 500
    objects_per_image: int = 3
    vocab_per_language: int = 60
    captions_per_image: int = 2
    noise: float = 0.1
    seed: int = 0
    d_v: int = 64
    concepts_per_caption: int | None = None  # None: every concept of the image
    fillers_per_caption: tuple = (1, 3)
    split_fractions: tuple = (0.8, 0.1, 0.1)
    languages: tuple = ("en", "de")


def generate_synthetic(spec=SyntheticSpec()):
    """Bilingual captions over images built from concept prototypes.

    Each image is a distinct set of ``objects_per_image`` concepts (distinct
    across images while the number of combinations allows), each object a
    concept prototype plus Gaussian noise. Each language has its own disjoint
    vocabulary: one word per concept plus filler words. Captions in the two
    languages draw their concept subsets, fillers and word order independently.
    """
    n_fill = spec.vocab_per_language - spec.n_concepts
    if n_fill < 0:
        raise ContractError(
            f"vocab_per_language={spec.vocab_per_language} cannot cover {spec.n_concepts} concepts")
    if spec.objects_per_image > spec.n_concepts:
        raise ContractError("objects_per_image exceeds n_concepts")
    per_caption = spec.concepts_per_caption or spec.objects_per_image
    if not 1 <= per_caption <= spec.objects_per_image:
        raise ContractError("concepts_per_caption must lie in [1, objects_per_image]")
    lo, hi = spec.fillers_per_caption
    if n_fill == 0 and hi > 0:
        lo = hi = 0

    rng = np.random.default_rng(spec.seed)
    prototypes = rng.standard_normal((spec.n_concepts, spec.d_v))

    words = {}
    for lang in spec.languages:
        names = [f"{lang}{i:03d}" for i in rng.permutation(spec.vocab_per_language)]
        words[lang] = (names[:spec.n_concepts], names[spec.n_concepts:])

    n_combos = math.comb(spec.n_concepts, spec.objects_per_image)
    used = set()
    features, concepts = {}, {}
    for i in range(spec.n_images):
        while True:
            chosen = tuple(sorted(rng.choice(spec.n_concepts, spec.objects_per_image, replace=False)))
            if chosen not in used or len(used) >= n_combos:
                break
        used.add(chosen)
        order = rng.permutation(chosen)
        rows = prototypes[order] + spec.noise * rng.standard_normal((len(order), spec.d_v))
        image_id = f"img{i:05d}"
        # stored as float32 on disk; keep memory identical to a round trip
        features[image_id] = rows.astype(np.float32).astype(np.float64)
        concepts[image_id] = [int(c) for c in chosen]

    captions = {lang: {} for lang in spec.languages}
    for image_id, cs in concepts.items():
        for lang in spec.languages:
            concept_words, fillers = words[lang]
            caps = []
            for _ in range(spec.captions_per_image):
                subset = rng.choice(cs, per_caption, replace=False)
                n = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
                tokens = [concept_words[c] for c in subset]
                tokens += [fillers[j] for j in rng.integers(0, len(fillers), n)] if n else []
                caps.append([tokens[j] for j in rng.permutation(len(tokens))])
            captions[lang][image_id] = caps

    ids = list(features)
    perm = [ids[j] for j in rng.permutation(len(ids))]
    n_train = int(round(spec.split_fractions[0] * len(ids)))
    n_val = int(round(spec.split_fractions[1] * len(ids)))
    splits = {
        "train": sorted(perm[:n_train]),
        "val": sorted(perm[n_train:n_train + n_val]),
        "test": sorted(perm[n_train + n_val:]),
    }
    return Corpus(features, captions, splits, tuple(spec.languages),
                  max_objects=max(36, spec.objects_per_image), concepts=concepts)

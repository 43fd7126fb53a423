"""Multilingual visual-semantic embeddings with diverse multi-head attention."""

from .config import RunConfig
from .data import Corpus, SyntheticSpec, Vocabulary, build_vocab, generate_synthetic
from .model import ModelParams, TripleBatch, encode_batch, init_params
from .objectives import EncodedBatch, LossBreakdown, total_loss
from .tensor import Tape, Tensor, backward, finite_diff_check, no_grad

__version__ = "0.1.0"

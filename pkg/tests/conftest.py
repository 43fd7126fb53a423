import numpy as np
import pytest

from diverse_vse import RunConfig, SyntheticSpec, generate_synthetic, init_params
from diverse_vse.training import build_vocabs, sample_batch

# scaled configuration for the desk-scale synthetic runs
SCALED = dict(k=2, hidden=32, d_w=32, batch=32, epochs=30, lr=1e-3, lr_after=1e-4,
              lr_switch_epoch=22, seed=0)


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f`` w.r.t. every entry of array ``x``."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b)))


@pytest.fixture(scope="session")
def tiny_corpus():
    return generate_synthetic(SyntheticSpec(n_concepts=10, n_images=24, vocab_per_language=14, d_v=8))


@pytest.fixture
def tiny_setup(tiny_corpus):
    cfg = RunConfig(k=2, hidden=16, d_w=8, batch=3)
    vocabs = build_vocabs(tiny_corpus, tiny_corpus.image_ids())
    params = init_params(cfg, {s: len(vocabs[s]) for s in "EG"}, tiny_corpus.d_v)
    batch = sample_batch(tiny_corpus, vocabs, np.random.default_rng(1), 3, tiny_corpus.image_ids())
    return cfg, vocabs, params, batch


def make_encoded(rng, b=4, k=2, h=5, scale=1.0):
    """Random EncodedBatch of leaf tensors for V, E and G."""
    from diverse_vse.attention import HeadedRepresentation
    from diverse_vse.objectives import EncodedBatch
    from diverse_vse.tensor import Tensor, concat

    streams = {}
    for s in "VEG":
        heads = [Tensor(scale * rng.standard_normal((b, h)), requires_grad=True) for _ in range(k)]
        streams[s] = HeadedRepresentation(heads, concat(heads, axis=-1) if k > 1 else heads[0])
    return EncodedBatch(streams)


@pytest.fixture(scope="session")
def default_corpus():
    return generate_synthetic(SyntheticSpec())


@pytest.fixture(scope="session")
def scaled_runs(default_corpus):
    """Paired scaled runs on the default synthetic corpus, keyed by beta."""
    from diverse_vse.training import train

    return {beta: train(RunConfig(**SCALED, beta=beta), default_corpus) for beta in (0.0, 1.0)}


ACCEPTANCE = []  # (criterion, passed, detail) in run order


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for name, ok, detail in ACCEPTANCE:
            terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")

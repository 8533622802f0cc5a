import time

import pytest
import torch

from xjac.encoder import EncoderConfig, SiameseEncoder, build_vocab
from xjac.synthetic import synthetic_pairs
from xjac.trainer import TrainConfig, train

SENTENCES = [
    "the cat sat on the mat",
    "a dog ran in the park",
    "hot coffee is not good",
    "the coffee is bad",
    "a cat and a dog",
]


@pytest.fixture(scope="session")
def vocab():
    return build_vocab(SENTENCES)


@pytest.fixture(scope="session")
def models(vocab):
    """Untrained models of every architecture, keyed by architecture tag."""
    return {
        arch: SiameseEncoder(EncoderConfig(architecture=arch), vocab, seed=3)
        for arch in ("linear", "mlp", "transformer")
    }


@pytest.fixture(scope="session")
def transformer(models):
    return models["transformer"]


@pytest.fixture(scope="session")
def corpus():
    return synthetic_pairs(4000, seed=1), synthetic_pairs(200, seed=2)


@pytest.fixture(scope="session")
def trained(corpus):
    """Three-layer toy transformer trained with the adjusted dot objective.

    Returns ``(model, loss_trace, wall_seconds)``.
    """
    torch.set_num_threads(1)
    train_pairs, eval_pairs = corpus
    vocab = build_vocab([t for p in train_pairs for t in (p.text_a, p.text_b)])
    model = SiameseEncoder(EncoderConfig(), vocab, seed=0)
    start = time.perf_counter()
    trace = train(model, train_pairs, TrainConfig(seed=0))
    return model, trace, time.perf_counter() - start


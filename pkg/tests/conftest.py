"""Shared fixtures: the grammar and one expensive memorization run."""

import numpy as np
import pytest

from noisecap import world as W
from noisecap.encoders import EncoderConfig, TextEncoder
from noisecap.model import DecoderModel, ModelConfig
from noisecap.training import NoiseConfig, TrainConfig, train_text_only


@pytest.fixture(scope="session")
def grammar():
    return W.Grammar()


@pytest.fixture(scope="session")
def memorization_run(grammar):
    """Tiny-corpus zero-noise run (20 captions, 2k steps): the memorization
    regime used by the training-loss bound and the exact-reproduction check."""
    encoder = TextEncoder(grammar, EncoderConfig(seed=7))
    scenes, corpus = W.generate_corpus(7, 4, 5, split_counts=(4, 0, 0),
                                       grammar=grammar)
    model = DecoderModel(ModelConfig(vocab_size=len(grammar.vocab)),
                         grammar.vocab.vocab_hash(), seed=7)
    cfg = TrainConfig(steps=2000, batch_size=10, lr=1e-3, warmup_steps=100, seed=7)
    result = train_text_only(corpus, encoder, model, NoiseConfig(0.0), cfg)
    return {"grammar": grammar, "encoder": encoder, "scenes": scenes,
            "corpus": corpus, "model": model, "result": result}

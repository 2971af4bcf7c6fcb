import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sentattn.corpus import SyntheticSpec, encode_example, generate_synthetic_dataset, vocab_for
from sentattn.model import ModelConfig, Seq2Seq

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def tiny_data():
    spec = SyntheticSpec(12, n_sentences=(3, 6), sentence_len=(2, 5), salient_count=2, vocab_size=30, seed=3)
    raw = generate_synthetic_dataset(spec)
    vocab = vocab_for(raw)
    return raw, vocab, [encode_example(e, vocab) for e in raw]


def make_tiny_model(vocab_size, seed=0, approx=True, **kw):
    cfg = dict(D=8, H=2, ffn=16, enc_layers=2, dec_layers=2, Ds=6, gru_layers=2, max_src=64, max_tgt=32, seed=seed)
    cfg.update(kw)
    return Seq2Seq(ModelConfig(vocab_size, **cfg), with_approximator=approx)


@pytest.fixture
def tiny_model(tiny_data):
    _, vocab, _ = tiny_data
    return make_tiny_model(len(vocab))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

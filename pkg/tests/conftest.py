import numpy as np
import pytest
import torch

from mathpretext.encoder import EncoderConfig, ModelBundle
from mathpretext.synthetic import generate_problems
from mathpretext.tokenizer import WhitespaceTokenizer


def corpus_tokenizer(problems):
    texts = [t for p in problems for t in (p.question, p.rationale, *p.option_values())]
    return WhitespaceTokenizer.from_corpus(texts)


@pytest.fixture(scope="session")
def tiny_problems():
    return generate_problems(60, seed=11)


@pytest.fixture(scope="session")
def tiny_tokenizer(tiny_problems):
    return corpus_tokenizer(tiny_problems)


@pytest.fixture(scope="session")
def tiny_config(tiny_tokenizer):
    return EncoderConfig(
        layers=2, heads=2, hidden=32, ffn=64, vocab_size=len(tiny_tokenizer.vocab), dropout=0.1
    )


@pytest.fixture()
def tiny_bundle(tiny_config):
    torch.manual_seed(0)
    return ModelBundle(tiny_config, heads=("mlm", "order", "qa", "match"))


class FakeRng:
    """Deterministic stand-in exposing the numpy Generator calls the samplers use."""

    def __init__(self, randoms=(), integers=()):
        self._randoms = list(randoms)
        self._integers = list(integers)

    def random(self):
        return self._randoms.pop(0)

    def integers(self, *args, **kwargs):
        return self._integers.pop(0)

    def choice(self, n, size=None, replace=True):
        picked = self._integers[:size]
        del self._integers[:size]
        return np.array(picked)

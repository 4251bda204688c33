from dataclasses import replace
import numpy as np
from contrastive_nmt import tensor as T
from contrastive_nmt.augment import synthetic_synonym_dictionary
from contrastive_nmt.maker import generate_synthetic_languages
from contrastive_nmt.model import ModelConfig, ModelParams
from contrastive_nmt.patterns import Singleton
from contrastive_nmt.tensor import Tensor
from contrastive_nmt.vocab import build_vocabulary_from_sentences


def tiny_config(vocab_size: int, **kwargs) -> ModelConfig:
    """
    2 + 2 layers, d_model 8, no dropout.
    """
    cfg = ModelConfig(vocab_size=vocab_size, n_layers_enc=2, n_layers_dec=2, d_model=8, n_heads=2, d_ffn=16,
                      max_len=16, dropout_rate=0.0)
    return replace(cfg, **kwargs)


def weighted_sum(y: Tensor, seed: int = 0) -> Tensor:
    """
    A scalar depending on every entry of y with a distinct weight.
    """
    weights = np.random.default_rng(seed).normal(size=y.shape)
    return T.total(T.mul(y, Tensor(weights)))


class TestHelper(metaclass=Singleton):
    """
    Corpora, vocabularies and dictionaries shared by the test modules, built once.
    """
    def __init__(self):
        self._corpora = None
        self._vocab = None
        self._dictionary = None

    @property
    def corpora(self):
        if self._corpora is None:
            self._corpora = generate_synthetic_languages(24, 4, 40, (3, 6), seed=0, n_heldout=12)
        return self._corpora

    @property
    def vocab(self):
        if self._vocab is None:
            corpora = self.corpora
            held_out = [s for sentences in corpora.multiway.values() for s in sentences]
            self._vocab = build_vocabulary_from_sentences(list(corpora.training_sentences()) + held_out,
                                                          corpora.languages)
        return self._vocab

    @property
    def dictionary(self):
        if self._dictionary is None:
            self._dictionary = synthetic_synonym_dictionary(self.corpora.ciphers, 0.6, seed=0)
        return self._dictionary

    def params(self, seed: int = 0, **kwargs) -> ModelParams:
        kwargs.setdefault("n_languages", len(self.vocab.languages))
        return ModelParams.init(tiny_config(len(self.vocab), **kwargs), seed)

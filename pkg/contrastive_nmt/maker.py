from abc import ABC, abstractmethod
from typing import Any, Optional, Tuple, List
import numpy as np
from contrastive_nmt.corpus import CorpusSet, MonolingualCorpus, ParallelCorpus, cipher_token
from contrastive_nmt.errors import DataError
from contrastive_nmt.types_utils import Tokens


class DatasetMaker(ABC):
    def __init__(self):
        pass

    @abstractmethod
    def make(self, n_samples: int) -> Any:
        raise NotImplementedError()


class CipherLanguages(DatasetMaker):
    """
    Synthetic multilingual corpora. A latent corpus of concept id sentences is drawn from a Zipfian distribution
    and every language L_i renders concept c as the token "l<i>_<sigma_i(c)>" for a per-language permutation
    sigma_i. Parallel data only exists between the hub language (l1) and the supervised languages, the last
    ``n_mono_only`` languages only get monolingual data, and a held-out set is rendered in every language.
    """
    def __init__(self, base_vocab_size: int = 200, n_languages: int = 4, sentence_len_range: Tuple[int, int] = (4, 12),
                 seed: int = 0, n_mono_only: Optional[int] = None, n_mono_sentences: Optional[int] = None,
                 n_heldout: int = 200, zipf_exponent: float = 1.1, identity_ciphers: bool = False):
        super().__init__()
        lo, hi = sentence_len_range
        if n_languages < 2:
            raise DataError(f"n_languages {n_languages} needs to be at least 2.")
        if base_vocab_size < 1:
            raise DataError(f"base_vocab_size {base_vocab_size} needs to be positive.")
        if not 1 <= lo <= hi:
            raise DataError(f"sentence_len_range {sentence_len_range} needs 1 <= min <= max.")
        if n_mono_only is None:
            n_mono_only = 1 if n_languages >= 3 else 0
        if not 0 <= n_mono_only <= n_languages - 2:
            raise DataError(f"n_mono_only {n_mono_only} leaves no parallel pair among {n_languages} languages.")
        if n_heldout < 0 or (n_mono_sentences is not None and n_mono_sentences < 0):
            raise DataError("Sentence counts need to be non negative.")
        if zipf_exponent < 0:
            raise DataError(f"zipf_exponent {zipf_exponent} needs to be non negative.")

        self.base_vocab_size = base_vocab_size
        self.languages = [f"l{i}" for i in range(1, n_languages + 1)]
        self.hub = self.languages[0]
        self.mono_only = self.languages[n_languages - n_mono_only:]
        self.supervised = [lang for lang in self.languages[1:] if lang not in self.mono_only]
        self.min_len, self.max_len = lo, hi
        self.seed = seed
        self.n_mono_sentences = n_mono_sentences
        self.n_heldout = n_heldout
        self.identity_ciphers = identity_ciphers

        ranks = np.arange(1, base_vocab_size + 1, dtype=np.float64)
        self.concept_probs = ranks ** -zipf_exponent
        self.concept_probs /= self.concept_probs.sum()

    def make(self, n_samples: int) -> CorpusSet:
        """
        :param n_samples: Sentences per parallel corpus (and per monolingual corpus unless set separately).
        :return: The corpus set, ciphers included.
        """
        if n_samples < 1:
            raise DataError(f"n_samples {n_samples} needs to be positive.")
        rng = np.random.default_rng(self.seed)
        ciphers = {
            lang: np.arange(self.base_vocab_size) if self.identity_ciphers else rng.permutation(self.base_vocab_size)
            for lang in self.languages
        }
        corpora = CorpusSet(languages=list(self.languages), hub=self.hub, ciphers=ciphers)

        for lang in self.supervised:
            concepts = self.concept_sentences(rng, n_samples)
            corpora.parallel[f"{self.hub}-{lang}"] = ParallelCorpus(
                self.hub, lang, self.render(concepts, self.hub, ciphers), self.render(concepts, lang, ciphers))

        n_mono = n_samples if self.n_mono_sentences is None else self.n_mono_sentences
        if n_mono:
            for lang in self.languages:
                corpora.monolingual[lang] = MonolingualCorpus(
                    lang, self.render(self.concept_sentences(rng, n_mono), lang, ciphers))

        if self.n_heldout:
            concepts = self.concept_sentences(rng, self.n_heldout)
            corpora.multiway = {lang: self.render(concepts, lang, ciphers) for lang in self.languages}
        return corpora

    def concept_sentences(self, rng: np.random.Generator, n: int) -> List[np.ndarray]:
        lengths = rng.integers(self.min_len, self.max_len + 1, size=n)
        return [rng.choice(self.base_vocab_size, size=int(length), p=self.concept_probs) for length in lengths]

    @staticmethod
    def render(concepts: List[np.ndarray], lang: str, ciphers) -> List[Tokens]:
        perm = ciphers[lang]
        return [[cipher_token(lang, int(perm[c])) for c in sentence] for sentence in concepts]


def generate_synthetic_languages(base_vocab_size: int, n_languages: int, n_sentences: int,
                                 sentence_len_range: Tuple[int, int] = (4, 12), seed: int = 0, **kwargs) -> CorpusSet:
    """
    Functional front for :class:`CipherLanguages`, extra keyword arguments go to its constructor.
    """
    return CipherLanguages(base_vocab_size, n_languages, sentence_len_range, seed, **kwargs).make(n_sentences)

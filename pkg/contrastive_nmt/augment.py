"""
Aligned augmentation: code-switching a sentence by replacing dictionary words with cross-lingual synonyms.

Synonym dictionary file: TSV without header, columns src_lang, src_word, tgt_lang, tgt_word. Only the listed
directions are stored.
"""
import warnings
from collections import Counter
from typing import Dict, Iterable, List, Optional, Sequence, Tuple
import numpy as np
import pandas as pd
from contrastive_nmt.corpus import (Example, MonolingualSentence, PairKind, SentencePair, cipher_token)
from contrastive_nmt.errors import DataError
from contrastive_nmt.types_utils import Seed, Tokens
from contrastive_nmt.utils import read_lines, atomic_write

Entry = Tuple[str, str]


class SynonymDictionary:
    """
    Map from (language, word) to its cross-lingual synonyms, in insertion order and without duplicates.
    """
    def __init__(self):
        self._entries: Dict[Entry, List[Entry]] = {}
        self._word_langs: Dict[str, List[str]] = {}

    def add(self, src_lang: str, src_word: str, tgt_lang: str, tgt_word: str) -> bool:
        """
        :return: False when the entry was dropped as a duplicate or a self mapping.
        """
        if (src_lang, src_word) == (tgt_lang, tgt_word):
            warnings.warn(f"Ignoring synonym entry mapping {src_lang}:{src_word} to itself.")
            return False
        synonyms = self._entries.setdefault((src_lang, src_word), [])
        langs = self._word_langs.setdefault(src_word, [])
        if src_lang not in langs:
            langs.append(src_lang)
        if (tgt_lang, tgt_word) in synonyms:
            return False
        synonyms.append((tgt_lang, tgt_word))
        return True

    def lookup(self, lang: str, word: str) -> List[Entry]:
        return list(self._entries.get((lang, word), ()))

    def covers(self, lang: str, word: str) -> bool:
        return (lang, word) in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        for (src_lang, src_word), synonyms in self._entries.items():
            for tgt_lang, tgt_word in synonyms:
                yield src_lang, src_word, tgt_lang, tgt_word

    def languages(self) -> List[str]:
        return sorted({lang for lang, _ in self._entries})

    def guess_language(self, tokens: Tokens) -> Optional[str]:
        """
        The language owning most of the dictionary-covered tokens, ties broken by language code.
        """
        votes = Counter(lang for t in tokens for lang in self._word_langs.get(t, ()))
        if not votes:
            return None
        return min(votes, key=lambda lang: (-votes[lang], lang))

    def save(self, path: str) -> None:
        with atomic_write(path) as f:
            for row in self:
                f.write("\t".join(row) + "\n")


def load_synonym_dictionary(path: str) -> SynonymDictionary:
    """
    :param path: TSV file with the columns src_lang, src_word, tgt_lang, tgt_word. Blank lines are skipped.
    :raise DataError: For a line without exactly four non-empty columns, naming the line number.
    """
    dictionary = SynonymDictionary()
    for number, line in enumerate(read_lines(path), 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != 4 or not all(c.strip() for c in cols):
            raise DataError(f"{path}:{number}: expected 4 tab separated columns, got {line!r}.")
        dictionary.add(*(c.strip() for c in cols))
    return dictionary


def synthetic_synonym_dictionary(ciphers: Dict[str, np.ndarray], coverage: float = 0.6, seed: int = 0) \
        -> SynonymDictionary:
    """
    Cross-language synonym entries derived from known ciphers: for a random :param coverage fraction of concepts,
    every language's token for the concept is linked to every other language's token for it.
    """
    assert 0.0 <= coverage <= 1.0, f"coverage {coverage} needs to be in [0, 1]."
    dictionary = SynonymDictionary()
    if not ciphers:
        return dictionary
    langs = sorted(ciphers)
    n_concepts = len(ciphers[langs[0]])
    rng = np.random.default_rng(seed)
    covered = np.sort(rng.permutation(n_concepts)[:int(round(coverage * n_concepts))])
    for concept in covered:
        for src in langs:
            for tgt in langs:
                if src != tgt:
                    dictionary.add(src, cipher_token(src, int(ciphers[src][concept])),
                                   tgt, cipher_token(tgt, int(ciphers[tgt][concept])))
    return dictionary


def augment(x: Tokens, lang: str, dictionary: SynonymDictionary, p_replace: float, seed: Seed) -> Tokens:
    """
    C(x): every token with dictionary entries is replaced, independently with probability :param p_replace,
    by one of its synonyms chosen uniformly. Length and uncovered positions are unchanged.
    :param x: The sentence.
    :param lang: The language of :param x.
    :param dictionary: The synonym dictionary.
    :param p_replace: Replacement probability.
    :param seed: Seed for this sentence, e.g. (global seed, corpus id, line number, epoch).
    """
    assert 0.0 <= p_replace <= 1.0, f"p_replace {p_replace} needs to be in [0, 1]."
    rng = np.random.default_rng(seed)
    out = list(x)
    for i, token in enumerate(x):
        synonyms = dictionary.lookup(lang, token)
        if not synonyms:
            continue
        # Two draws per covered token whatever p_replace is.
        u, choice = rng.random(), int(rng.integers(len(synonyms)))
        if u < p_replace:
            out[i] = synonyms[choice][1]
    return out


def make_pseudo_pairs(example: Example, dictionary: SynonymDictionary, p_replace: float, seed: Seed) \
        -> SentencePair:
    """
    Parallel (x_i, x_j) -> pseudo-parallel (C(x_i), x_j); monolingual x_i -> pseudo self-parallel (C(x_i), x_i).
    """
    if isinstance(example, SentencePair):
        return SentencePair(example.src_lang, example.tgt_lang,
                            augment(example.src, example.src_lang, dictionary, p_replace, seed),
                            example.tgt, PairKind.PSEUDO_PARALLEL)
    if isinstance(example, MonolingualSentence):
        return SentencePair(example.lang, example.lang,
                            augment(example.tokens, example.lang, dictionary, p_replace, seed),
                            example.tokens, PairKind.PSEUDO_SELF_PARALLEL)
    raise TypeError(f"Cannot augment {type(example).__name__}.")


def preview_rows(lines: Iterable[str], dictionary: SynonymDictionary, p_replace: float, seed: int,
                 lang: Optional[str] = None) -> pd.DataFrame:
    """
    Original / augmented sentence table; line i uses the seed (seed, 0, i, 0).
    :param lang: Language of every line, guessed per line from the dictionary when None.
    """
    rows = []
    for i, line in enumerate(lines):
        tokens = line.split()
        line_lang = lang if lang is not None else dictionary.guess_language(tokens)
        augmented = tokens if line_lang is None else augment(tokens, line_lang, dictionary, p_replace, (seed, 0, i, 0))
        rows.append((" ".join(tokens), " ".join(augmented)))
    return pd.DataFrame(rows, columns=["original", "augmented"])


def replaced_positions(original: Sequence[str], augmented: Sequence[str]) -> List[int]:
    assert len(original) == len(augmented), "Augmentation never changes the sentence length."
    return [i for i, (a, b) in enumerate(zip(original, augmented)) if a != b]

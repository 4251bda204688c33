"""
Shared multilingual vocabulary. Ids 0..3 are reserved for PAD, BOS, EOS and UNK, followed by one language indicator
token per registered language and then the corpus tokens by descending count (ties broken lexicographically).
"""
from collections import Counter
from typing import Dict, Iterable, List, Sequence
from contrastive_nmt.errors import DataError
from contrastive_nmt.types_utils import TokenIds, Tokens
from contrastive_nmt.utils import read_lines, write_lines, text_sha256

PAD, BOS, EOS, UNK = "<pad>", "<s>", "</s>", "<unk>"
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED = (PAD, BOS, EOS, UNK)
LANG_PREFIX = "LANG_"


def lang_token(lang: str) -> str:
    return f"{LANG_PREFIX}{lang}"


def tokenize(sentence: str) -> Tokens:
    return sentence.split()


class Vocabulary:
    """
    Immutable token <-> id map.
    """
    def __init__(self, tokens: Sequence[str]):
        assert tuple(tokens[:len(RESERVED)]) == RESERVED, \
            f"The first tokens must be the reserved tokens {RESERVED}, got {tuple(tokens[:len(RESERVED)])}."
        self._tokens: List[str] = list(tokens)
        self._ids: Dict[str, int] = {}
        for i, t in enumerate(self._tokens):
            if t in self._ids:
                raise DataError(f"Token {t!r} appears twice in the vocabulary (ids {self._ids[t]} and {i}).")
            self._ids[t] = i
        self.languages: List[str] = [t[len(LANG_PREFIX):] for t in self._tokens if t.startswith(LANG_PREFIX)]

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._tokens == other._tokens

    @property
    def tokens(self) -> List[str]:
        return list(self._tokens)

    def id(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self._tokens[idx]

    def lang_id(self, lang: str) -> int:
        """
        :raise DataError: If :param lang is not registered.
        """
        tok = lang_token(lang)
        if tok not in self._ids:
            raise DataError(f"Language {lang!r} is not registered, registered: {self.languages}.")
        return self._ids[tok]

    def is_special(self, idx: int) -> bool:
        return idx < len(RESERVED) or self._tokens[idx].startswith(LANG_PREFIX)

    def encode(self, sentence, lang: str, add_lang_token: bool = True) -> TokenIds:
        """
        Encodes a sentence as [LANG_lang] + token ids + [EOS]; unknown tokens become UNK.
        :param sentence: A whitespace separated string or a token list.
        :param lang: The language code of the sentence.
        :param add_lang_token: Whether the language indicator is prepended.
        :raise DataError: If :param lang is not registered.
        """
        tokens = tokenize(sentence) if isinstance(sentence, str) else sentence
        lang_id = self.lang_id(lang)
        head = [lang_id] if add_lang_token else []
        return head + [self.id(t) for t in tokens] + [EOS_ID]

    def decode(self, ids: Iterable[int]) -> str:
        """
        Inverse of encode for in-vocabulary sentences: special and language tokens are dropped, decoding stops at EOS.
        """
        return " ".join(self.decode_tokens(ids))

    def decode_tokens(self, ids: Iterable[int]) -> Tokens:
        out = []
        for i in ids:
            i = int(i)
            if i == EOS_ID:
                break
            if i == UNK_ID:
                out.append(UNK)
            elif not self.is_special(i):
                out.append(self._tokens[i])
        return out

    def save(self, path: str) -> None:
        write_lines(path, self._tokens)

    def fingerprint(self) -> str:
        """
        sha256 of the vocabulary file contents.
        """
        return text_sha256("".join(f"{t}\n" for t in self._tokens))


def load_vocabulary(path: str) -> Vocabulary:
    return Vocabulary(read_lines(path))


def build_vocabulary_from_sentences(sentences: Iterable[Tokens], languages: Sequence[str], min_count: int = 1) \
        -> Vocabulary:
    """
    :param sentences: Tokenised sentences.
    :param languages: The language codes to register, in order.
    :param min_count: Tokens seen fewer times are left out (they encode as UNK).
    :raise DataError: If the corpus has no tokens or a language code is duplicated.
    """
    assert min_count >= 1, f"min_count {min_count} needs to be at least 1."
    duplicated = sorted({lang for lang in languages if list(languages).count(lang) > 1})
    if duplicated:
        raise DataError(f"Duplicate language codes: {duplicated}.")
    counts = Counter(t for s in sentences for t in s)
    if not counts:
        raise DataError("Cannot build a vocabulary from an empty corpus.")
    specials = set(RESERVED) | {lang_token(lang) for lang in languages}
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in specials),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(list(RESERVED) + [lang_token(lang) for lang in languages] + kept)


def build_vocabulary(corpora: Sequence[str], languages: Sequence[str], min_count: int = 1) -> Vocabulary:
    """
    Builds the vocabulary from UTF-8 text files holding one whitespace tokenised sentence per line.
    :param corpora: The corpus file paths.
    :param languages: The language codes to register.
    :param min_count: The minimum token count.
    """
    return build_vocabulary_from_sentences((tokenize(line) for path in corpora for line in read_lines(path)),
                                           languages, min_count)

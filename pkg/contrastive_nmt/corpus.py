"""
Parallel and monolingual corpora, temperature balanced sampling and token budgeted batches.

Corpus directory layout::

    corpus.json                      languages, hub language, parallel pair names
    parallel/<pair>.<lang>.txt       line aligned sides of an English-centric (hub-centric) parallel corpus
    mono/mono.<lang>.txt             monolingual sentences
    multiway/multiway.<lang>.txt     held-out set, line aligned across every language
    ciphers.tsv                      lang, concept, token (only for synthetic corpora)
"""
import json
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union
import contextlib2
import numpy as np
import pandas as pd
from contrastive_nmt.errors import DataError
from contrastive_nmt.types_utils import Seed, Tokens
from contrastive_nmt.utils import open_aligned_files, read_lines, atomic_write
from contrastive_nmt.vocab import Vocabulary, PAD_ID, tokenize


class PairKind(str, Enum):
    PARALLEL = "parallel"
    PSEUDO_PARALLEL = "pseudo_parallel"
    PSEUDO_SELF_PARALLEL = "pseudo_self_parallel"


@dataclass(frozen=True)
class SentencePair:
    src_lang: str
    tgt_lang: str
    src: Tokens
    tgt: Tokens
    kind: PairKind = PairKind.PARALLEL

    def __post_init__(self):
        if self.kind == PairKind.PSEUDO_SELF_PARALLEL and self.src_lang != self.tgt_lang:
            raise DataError(f"A pseudo self-parallel pair needs one language, got {self.src_lang}/{self.tgt_lang}.")
        if not self.src or not self.tgt:
            raise DataError(f"Empty side in {self.src_lang}->{self.tgt_lang} pair: {self.src} / {self.tgt}.")


@dataclass(frozen=True)
class MonolingualSentence:
    lang: str
    tokens: Tokens


Example = Union[SentencePair, MonolingualSentence]


@dataclass
class ParallelCorpus:
    src_lang: str
    tgt_lang: str
    src: List[Tokens]
    tgt: List[Tokens]

    def __post_init__(self):
        if len(self.src) != len(self.tgt):
            raise DataError(f"Parallel corpus {self.name} is not line aligned ({len(self.src)} != {len(self.tgt)}).")

    @property
    def name(self) -> str:
        return f"{self.src_lang}-{self.tgt_lang}"

    def __len__(self) -> int:
        return len(self.src)

    def pairs(self, reverse: bool = False) -> List[SentencePair]:
        if reverse:
            return [SentencePair(self.tgt_lang, self.src_lang, t, s) for s, t in zip(self.src, self.tgt)]
        return [SentencePair(self.src_lang, self.tgt_lang, s, t) for s, t in zip(self.src, self.tgt)]


@dataclass
class MonolingualCorpus:
    lang: str
    sentences: List[Tokens]

    @property
    def name(self) -> str:
        return f"mono.{self.lang}"

    def __len__(self) -> int:
        return len(self.sentences)

    def examples(self) -> List[MonolingualSentence]:
        return [MonolingualSentence(self.lang, s) for s in self.sentences]


@dataclass
class CorpusSet:
    """
    Named parallel corpora, monolingual corpora per language and a multi-way aligned held-out set.
    """
    languages: List[str]
    hub: str
    parallel: Dict[str, ParallelCorpus] = field(default_factory=dict)
    monolingual: Dict[str, MonolingualCorpus] = field(default_factory=dict)
    multiway: Dict[str, List[Tokens]] = field(default_factory=dict)
    ciphers: Dict[str, np.ndarray] = field(default_factory=dict)

    def counts(self) -> Dict[str, int]:
        """
        :return: Sentence count per corpus name.
        """
        counts = {name: len(c) for name, c in self.parallel.items()}
        counts.update({c.name: len(c) for c in self.monolingual.values()})
        return counts

    def parallel_languages(self) -> List[str]:
        return sorted({lang for c in self.parallel.values() for lang in (c.src_lang, c.tgt_lang)})

    def monolingual_only_languages(self) -> List[str]:
        paired = set(self.parallel_languages())
        return [lang for lang in self.languages if lang not in paired]

    def has_parallel(self, a: str, b: str) -> bool:
        return any({c.src_lang, c.tgt_lang} == {a, b} for c in self.parallel.values())

    def training_sentences(self) -> Iterator[Tokens]:
        for c in self.parallel.values():
            yield from c.src
            yield from c.tgt
        for c in self.monolingual.values():
            yield from c.sentences

    def save(self, directory: str) -> None:
        """
        Writes the corpus set to :param directory using the layout in the module docstring.
        """
        for sub in ("parallel", "mono", "multiway"):
            os.makedirs(os.path.join(directory, sub), exist_ok=True)
        meta = {"languages": self.languages, "hub": self.hub,
                "parallel": [[c.src_lang, c.tgt_lang] for c in self.parallel.values()]}
        with atomic_write(os.path.join(directory, "corpus.json")) as f:
            json.dump(meta, f, indent=2, sort_keys=True)
            f.write("\n")

        with contextlib2.ExitStack() as stack:
            for c in self.parallel.values():
                paths = [os.path.join(directory, "parallel", f"{c.name}.{lang}.txt") for lang in (c.src_lang, c.tgt_lang)]
                src_f, tgt_f = open_aligned_files(stack, paths, "w")
                for s, t in zip(c.src, c.tgt):
                    src_f.write(" ".join(s) + "\n")
                    tgt_f.write(" ".join(t) + "\n")
            for c in self.monolingual.values():
                mono_f, = open_aligned_files(stack, [os.path.join(directory, "mono", f"{c.name}.txt")], "w")
                mono_f.writelines(" ".join(s) + "\n" for s in c.sentences)
            if self.multiway:
                langs = list(self.multiway)
                files = open_aligned_files(stack, [os.path.join(directory, "multiway", f"multiway.{lang}.txt")
                                                   for lang in langs], "w")
                for f, lang in zip(files, langs):
                    f.writelines(" ".join(s) + "\n" for s in self.multiway[lang])

        if self.ciphers:
            rows = [(lang, concept, cipher_token(lang, int(symbol)))
                    for lang, perm in self.ciphers.items() for concept, symbol in enumerate(perm)]
            pd.DataFrame(rows, columns=["lang", "concept", "token"]) \
                .to_csv(os.path.join(directory, "ciphers.tsv"), sep="\t", index=False, lineterminator="\n")


def load_corpus_set(directory: str) -> CorpusSet:
    """
    Reads a corpus directory written by :meth:`CorpusSet.save`.
    :raise DataError: If corpus.json is missing or the files are inconsistent.
    """
    meta_path = os.path.join(directory, "corpus.json")
    if not os.path.exists(meta_path):
        raise DataError(f"{directory} is not a corpus directory (no corpus.json).")
    with open(meta_path, "r", encoding="utf-8") as f:
        meta = json.load(f)

    def read(path: str) -> List[Tokens]:
        if not os.path.exists(path):
            raise DataError(f"Missing corpus file {path}.")
        return [tokenize(line) for line in read_lines(path)]

    corpora = CorpusSet(languages=meta["languages"], hub=meta["hub"])
    for src_lang, tgt_lang in meta["parallel"]:
        name = f"{src_lang}-{tgt_lang}"
        corpora.parallel[name] = ParallelCorpus(
            src_lang, tgt_lang,
            read(os.path.join(directory, "parallel", f"{name}.{src_lang}.txt")),
            read(os.path.join(directory, "parallel", f"{name}.{tgt_lang}.txt")))
    for lang in corpora.languages:
        mono_path = os.path.join(directory, "mono", f"mono.{lang}.txt")
        if os.path.exists(mono_path):
            corpora.monolingual[lang] = MonolingualCorpus(lang, read(mono_path))
        multiway_path = os.path.join(directory, "multiway", f"multiway.{lang}.txt")
        if os.path.exists(multiway_path):
            corpora.multiway[lang] = read(multiway_path)
    if len({len(s) for s in corpora.multiway.values()}) > 1:
        raise DataError(f"Multi-way files in {directory} are not line aligned.")

    cipher_path = os.path.join(directory, "ciphers.tsv")
    if os.path.exists(cipher_path):
        table = pd.read_csv(cipher_path, sep="\t", keep_default_na=False)
        for lang, rows in table.groupby("lang", sort=False):
            rows = rows.sort_values("concept")
            corpora.ciphers[lang] = np.asarray([parse_cipher_token(t)[1] for t in rows["token"]], dtype=np.int64)
    return corpora


def cipher_token(lang: str, symbol: int) -> str:
    return f"{lang}_{symbol}"


def parse_cipher_token(token: str) -> Tuple[str, int]:
    lang, _, symbol = token.rpartition("_")
    if not lang or not symbol.isdigit():
        raise DataError(f"{token!r} is not a cipher token.")
    return lang, int(symbol)


def cipher_translate(tokens: Tokens, src_lang: str, tgt_lang: str, ciphers: Dict[str, np.ndarray]) -> Tokens:
    """
    Exact translation between cipher languages: applies sigma_tgt after the inverse of sigma_src to every token.
    :raise DataError: If a language has no cipher or a token does not belong to :param src_lang.
    """
    for lang in (src_lang, tgt_lang):
        if lang not in ciphers:
            raise DataError(f"No cipher for language {lang!r}.")
    inverse = np.argsort(ciphers[src_lang])
    out = []
    for t in tokens:
        lang, symbol = parse_cipher_token(t)
        if lang != src_lang or symbol >= len(inverse):
            raise DataError(f"Token {t!r} is not a {src_lang} cipher token.")
        out.append(cipher_token(tgt_lang, int(ciphers[tgt_lang][inverse[symbol]])))
    return out


def temperature_sample_weights(counts: Sequence[float], temperature: float = 5.0) -> np.ndarray:
    """
    p_i proportional to (n_i / sum_j n_j) ** (1 / T). T = 1 is proportional sampling, large T tends to uniform.
    :param counts: Sentence count per corpus.
    :param temperature: T.
    :raise DataError: If a count is not positive or T is not positive.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.size == 0 or np.any(counts <= 0):
        raise DataError(f"Temperature sampling needs positive corpus counts, got {counts.tolist()}.")
    if temperature <= 0:
        raise DataError(f"Temperature {temperature} needs to be positive.")
    scaled = (counts / counts.sum()) ** (1.0 / temperature)
    return scaled / scaled.sum()


def draw_sources(weights: Sequence[float], n: int, rng: np.random.Generator) -> np.ndarray:
    """
    Draws :param n corpus indices according to :param weights.
    """
    weights = np.asarray(weights, dtype=np.float64)
    return rng.choice(len(weights), size=n, p=weights / weights.sum())


Transform = Callable[[Example, Seed], SentencePair]


@dataclass
class TrainingSource:
    """
    One sampling corpus: a list of examples plus the transform turning an example into a training pair
    (identity for parallel pairs, aligned augmentation for pseudo pairs). The transform receives the seed
    (global seed, corpus id, line number, epoch).
    """
    name: str
    examples: Sequence[Example]
    transform: Optional[Transform] = None

    def __len__(self) -> int:
        return len(self.examples)

    def pair(self, line: int, seed: Seed) -> SentencePair:
        example = self.examples[line]
        if self.transform is not None:
            return self.transform(example, seed)
        if not isinstance(example, SentencePair):
            raise DataError(f"Source {self.name} holds monolingual sentences but has no transform.")
        return example

    def max_tokens(self) -> int:
        """
        Upper bound of encoded src + tgt tokens (language token and EOS on both sides) of any pair.
        Transforms never change sentence lengths.
        """
        sizes = [len(e.src) + len(e.tgt) if isinstance(e, SentencePair) else 2 * len(e.tokens)
                 for e in self.examples]
        return max(sizes, default=0) + 4


@dataclass
class SourceBatch:
    """
    Padded source ids. src_mask is 1 exactly on non-PAD positions.
    """
    src: np.ndarray
    src_mask: np.ndarray
    src_langs: List[str]

    def __len__(self) -> int:
        return self.src.shape[0]


@dataclass
class Batch(SourceBatch):
    """
    Teacher forced translation batch. tgt_full is [LANG_tgt] + tgt + [EOS]; tgt_input drops its last position and
    tgt_output its first, so tgt_output[t] == tgt_input[t + 1].
    """
    tgt_input: np.ndarray
    tgt_output: np.ndarray
    tgt_mask: np.ndarray
    tgt_full: np.ndarray
    tgt_full_mask: np.ndarray
    tgt_langs: List[str]
    kinds: List[PairKind]

    @property
    def n_tokens(self) -> int:
        return int(self.src_mask.sum() + self.tgt_full_mask.sum())

    @property
    def avg_target_length(self) -> float:
        """
        |s|: mean number of unmasked target positions per row.
        """
        return float(self.tgt_mask.sum() / len(self))

    def target_side(self) -> SourceBatch:
        """
        The targets laid out as encoder input, used for their pooled representation.
        """
        return SourceBatch(self.tgt_full, self.tgt_full_mask, self.tgt_langs)


def pad_ids(seqs: Sequence[Sequence[int]]) -> Tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=np.float64)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = 1.0
    return ids, mask


def collate_sources(vocab: Vocabulary, sentences: Sequence[Tokens], langs: Union[str, Sequence[str]]) \
        -> SourceBatch:
    langs = [langs] * len(sentences) if isinstance(langs, str) else list(langs)
    src, src_mask = pad_ids([vocab.encode(s, lang) for s, lang in zip(sentences, langs)])
    return SourceBatch(src, src_mask, langs)


def collate_pairs(vocab: Vocabulary, pairs: Sequence[SentencePair]) -> Batch:
    assert pairs, "Cannot collate an empty list of pairs."
    src, src_mask = pad_ids([vocab.encode(p.src, p.src_lang) for p in pairs])
    full = [vocab.encode(p.tgt, p.tgt_lang) for p in pairs]
    tgt_full, tgt_full_mask = pad_ids(full)
    tgt_input, _ = pad_ids([f[:-1] for f in full])
    tgt_output, tgt_mask = pad_ids([f[1:] for f in full])
    return Batch(src, src_mask, [p.src_lang for p in pairs],
                 tgt_input, tgt_output, tgt_mask, tgt_full, tgt_full_mask,
                 [p.tgt_lang for p in pairs], [p.kind for p in pairs])


def pair_tokens(pair: SentencePair) -> int:
    return len(pair.src) + len(pair.tgt) + 4


def make_batches(sources: Sequence[TrainingSource], vocab: Vocabulary, batch_size_tokens: int,
                 weights: Sequence[float], seed: int, epoch: int = 0, n_draws: Optional[int] = None) \
        -> Iterator[Batch]:
    """
    Draws examples from :param sources according to :param weights and packs them into batches whose
    src + tgt token count stays within :param batch_size_tokens. The stream is a pure function of
    (sources, weights, seed, epoch).
    :param sources: The sampling corpora.
    :param vocab: Vocabulary covering every language of the sources.
    :param batch_size_tokens: Token budget per batch.
    :param weights: One sampling probability per source.
    :param seed: The global seed.
    :param epoch: Pass index, mixed into every random draw (augmentation is re-sampled per pass).
    :param n_draws: Examples drawn in this pass, the total number of examples by default.
    :raise DataError: If the budget is smaller than the longest pair.
    """
    assert len(sources) == len(weights), \
        f"There needs to be one weight per source ({len(sources)} != {len(weights)})."
    longest = max(s.max_tokens() for s in sources)
    if batch_size_tokens < longest:
        raise DataError(f"batch_size_tokens {batch_size_tokens} is smaller than the longest pair ({longest} tokens).")
    n_draws = sum(len(s) for s in sources) if n_draws is None else n_draws

    rng = np.random.default_rng([seed, epoch])
    picks = draw_sources(weights, n_draws, rng)
    lines = [int(rng.integers(len(sources[i]))) for i in picks]

    pending, used = [], 0
    for corpus_id, line in zip(picks, lines):
        pair = sources[corpus_id].pair(line, (seed, int(corpus_id), line, epoch))
        size = pair_tokens(pair)
        if pending and used + size > batch_size_tokens:
            yield collate_pairs(vocab, pending)
            pending, used = [], 0
        pending.append(pair)
        used += size
    if pending:
        yield collate_pairs(vocab, pending)

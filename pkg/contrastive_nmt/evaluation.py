"""
Evaluation: cross-lingual similarity search over pooled representations, corpus BLEU per translation direction
grouped into supervised / unsupervised / zero-shot scenarios, and representation export.
"""
import math
import warnings
from abc import ABC, abstractmethod
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from itertools import permutations
from typing import Dict, List, Optional, Sequence, Tuple
import numpy as np
import pandas as pd
from tqdm import tqdm
from contrastive_nmt.corpus import CorpusSet, cipher_translate, collate_sources
from contrastive_nmt.errors import DataError, NumericError
from contrastive_nmt.model import ModelParams, encode, greedy_or_beam_decode
from contrastive_nmt.patterns import SingletonStrategies, strategy_method
from contrastive_nmt.types_utils import Tokens
from contrastive_nmt.utils import chunks
from contrastive_nmt.vocab import Vocabulary

REPORT_COLUMNS = ["direction", "metric", "value", "n", "scenario"]
METRIC_RANGES = {"bleu": (0.0, 100.0), "retrieval_top1": (0.0, 1.0)}


class Scenario(str, Enum):
    SUPERVISED = "supervised"
    UNSUPERVISED = "unsupervised"
    ZERO_SHOT = "zero-shot"
    PIVOT = "pivot"


@dataclass
class RetrievalTask:
    """
    Find gold[i] among :attr:`candidates` for every :attr:`sources` sentence i.
    """
    src_lang: str
    tgt_lang: str
    sources: List[Tokens]
    candidates: List[Tokens]
    gold: np.ndarray

    def __post_init__(self):
        self.gold = np.asarray(self.gold, dtype=np.int64)
        if self.gold.shape != (len(self.sources),):
            raise DataError(f"gold has shape {self.gold.shape}, expected ({len(self.sources)},).")
        if self.gold.size and (self.gold.min() < 0 or self.gold.max() >= len(self.candidates)):
            raise DataError("gold indexes outside the candidate list.")

    def __len__(self) -> int:
        return len(self.sources)

    @classmethod
    def from_multiway(cls, multiway: Dict[str, List[Tokens]], src_lang: str, tgt_lang: str) -> "RetrievalTask":
        for lang in (src_lang, tgt_lang):
            if lang not in multiway:
                raise DataError(f"No multi-way held-out sentences for {lang!r}.")
        return cls(src_lang, tgt_lang, multiway[src_lang], multiway[tgt_lang], np.arange(len(multiway[src_lang])))


@dataclass
class DirectionReport:
    direction: str
    metric: str
    value: float
    n_sentences: int
    scenario: str = ""

    def __post_init__(self):
        lo, hi = METRIC_RANGES.get(self.metric, (-math.inf, math.inf))
        if not lo <= self.value <= hi:
            raise NumericError(f"{self.metric} {self.value} of {self.direction} outside [{lo}, {hi}].")

    @property
    def src_lang(self) -> str:
        return self.direction.split("-", 1)[0]

    @property
    def tgt_lang(self) -> str:
        return self.direction.split("-", 1)[1]

    def to_row(self) -> List:
        return [self.direction, self.metric, self.value, self.n_sentences, self.scenario]


def reports_frame(reports: Sequence[DirectionReport]) -> pd.DataFrame:
    """
    Reports ordered by (metric, scenario, direction).
    """
    frame = pd.DataFrame([r.to_row() for r in reports], columns=REPORT_COLUMNS)
    return frame.sort_values(["metric", "scenario", "direction"], kind="stable").reset_index(drop=True)


def classify_direction(corpora: CorpusSet, src_lang: str, tgt_lang: str) -> Scenario:
    """
    supervised: a parallel corpus pairs the two languages; unsupervised: one side only has monolingual data;
    zero-shot: both languages are paired with the hub but never with each other.
    :raise DataError: For an unknown language or a direction from a language into itself.
    """
    for lang in (src_lang, tgt_lang):
        if lang not in corpora.languages:
            raise DataError(f"Unknown direction {src_lang}-{tgt_lang}: {lang!r} is not one of {corpora.languages}.")
    if src_lang == tgt_lang:
        raise DataError(f"Unknown direction {src_lang}-{tgt_lang}: source and target are the same language.")
    if corpora.has_parallel(src_lang, tgt_lang):
        return Scenario.SUPERVISED
    mono_only = corpora.monolingual_only_languages()
    if src_lang in mono_only or tgt_lang in mono_only:
        return Scenario.UNSUPERVISED
    return Scenario.ZERO_SHOT


def all_directions(corpora: CorpusSet) -> List[Tuple[str, str]]:
    return list(permutations(corpora.languages, 2))


def parse_direction(direction: str) -> Tuple[str, str]:
    src, sep, tgt = direction.partition("-")
    if not sep or not src or not tgt:
        raise DataError(f"Direction {direction!r} is not of the form SRC-TGT.")
    return src, tgt


def sentence_representations(params: ModelParams, vocab: Vocabulary, sentences: Sequence[Tokens], lang: str,
                             batch_size: int = 64) -> np.ndarray:
    """
    Pooled encoder representations R(s), dropout off.
    :return: Shape (len(sentences), d_model).
    """
    assert batch_size > 0, f"batch_size {batch_size} needs to be positive."
    parts = [encode(params, collate_sources(vocab, chunk, lang)).pooled.data
             for chunk in chunks(list(sentences), batch_size)]
    return np.concatenate(parts, axis=0) if parts else np.zeros((0, params.config.d_model))


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    an, bn = np.linalg.norm(a, axis=1, keepdims=True), np.linalg.norm(b, axis=1, keepdims=True)
    if np.any(an == 0) or np.any(bn == 0):
        raise NumericError("Cosine similarity is undefined for a zero-norm representation.")
    return (a / an) @ (b / bn).T


def retrieval_accuracy(src_reps: np.ndarray, cand_reps: np.ndarray, gold: np.ndarray) -> float:
    """
    Fraction of rows whose most cosine-similar candidate is the gold one; ties go to the lowest index.
    """
    if len(src_reps) == 0 or len(cand_reps) == 0:
        raise DataError("Similarity search needs at least one source and one candidate.")
    predicted = np.argmax(cosine_matrix(src_reps, cand_reps), axis=1)
    return float(np.mean(predicted == np.asarray(gold)))


def similarity_search_accuracy(params: ModelParams, vocab: Vocabulary, task: RetrievalTask,
                               batch_size: int = 64) -> float:
    """
    :raise DataError: If the task is empty.
    """
    if not len(task) or not task.candidates:
        raise DataError(f"Retrieval task {task.src_lang}-{task.tgt_lang} is empty.")
    return retrieval_accuracy(sentence_representations(params, vocab, task.sources, task.src_lang, batch_size),
                              sentence_representations(params, vocab, task.candidates, task.tgt_lang, batch_size),
                              task.gold)


def multiway_representations(params: ModelParams, vocab: Vocabulary, multiway: Dict[str, List[Tokens]],
                             max_sentences: Optional[int] = None, quiet: bool = True) -> Dict[str, np.ndarray]:
    if len({len(s) for s in multiway.values()}) > 1:
        raise DataError("The multi-way set is not line aligned.")
    return {lang: sentence_representations(params, vocab, sentences[:max_sentences], lang)
            for lang, sentences in tqdm(multiway.items(), desc="encode", disable=quiet)}


def multiway_retrieval(representations: Dict[str, np.ndarray], corpora: Optional[CorpusSet] = None) \
        -> List[DirectionReport]:
    """
    Top-1 accuracy for every ordered language pair of a line aligned multi-way set (gold = same line).
    """
    reports = []
    for src, tgt in permutations(sorted(representations), 2):
        n = len(representations[src])
        accuracy = retrieval_accuracy(representations[src], representations[tgt], np.arange(n))
        scenario = classify_direction(corpora, src, tgt).value if corpora is not None else ""
        reports.append(DirectionReport(f"{src}-{tgt}", "retrieval_top1", accuracy, n, scenario))
    return reports


def english_centric_retrieval(representations: Dict[str, np.ndarray], hub: str) -> List[DirectionReport]:
    """
    hub->X and X->hub accuracies for every other language X.
    """
    if hub not in representations:
        raise DataError(f"No representations for the hub language {hub!r}.")
    reports = []
    for lang in sorted(representations):
        if lang == hub:
            continue
        for src, tgt in ((hub, lang), (lang, hub)):
            n = len(representations[src])
            reports.append(DirectionReport(f"{src}-{tgt}", "retrieval_top1",
                                           retrieval_accuracy(representations[src], representations[tgt],
                                                              np.arange(n)), n))
    return reports


def retrieval_matrix(representations: Dict[str, np.ndarray]) -> pd.DataFrame:
    """
    Source language rows, target language columns, top-1 accuracy cells (the diagonal is self retrieval).
    """
    langs = sorted(representations)
    cells = [[retrieval_accuracy(representations[a], representations[b], np.arange(len(representations[a])))
              for b in langs] for a in langs]
    return pd.DataFrame(cells, index=pd.Index(langs, name="src"), columns=langs)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class BleuStatistics:
    matches: List[int]
    totals: List[int]
    hyp_len: int
    ref_len: int


def bleu_statistics(hypotheses: Sequence[Tokens], references: Sequence[Tokens], max_n: int = 4) -> BleuStatistics:
    """
    Clipped n-gram match counts and n-gram totals summed over the corpus.
    :raise DataError: If the lists are empty or differ in length.
    """
    if len(hypotheses) != len(references):
        raise DataError(f"{len(hypotheses)} hypotheses for {len(references)} references.")
    if not hypotheses:
        raise DataError("BLEU needs a non-empty corpus.")
    matches, totals = [0] * max_n, [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            hyp_counts, ref_counts = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    return BleuStatistics(matches, totals, hyp_len, ref_len)


def bleu_from_statistics(stats: BleuStatistics) -> float:
    """
    Geometric mean of modified n-gram precisions with uniform weights times the brevity penalty, in [0, 100].
    Orders n >= 2 with no match are add-one smoothed; no unigram match means 0.
    """
    if stats.hyp_len == 0 or stats.matches[0] == 0:
        return 0.0
    log_precision = 0.0
    for n, (m, t) in enumerate(zip(stats.matches, stats.totals), 1):
        if n >= 2 and m == 0:
            m, t = m + 1, t + 1
        log_precision += math.log(m / t)
    bp = 1.0 if stats.hyp_len >= stats.ref_len else math.exp(1.0 - stats.ref_len / stats.hyp_len)
    return 100.0 * bp * math.exp(log_precision / len(stats.matches))


def bleu(hypotheses: Sequence[Tokens], references: Sequence[Tokens], max_n: int = 4) -> float:
    return bleu_from_statistics(bleu_statistics(hypotheses, references, max_n))


class Translator(ABC):
    @abstractmethod
    def translate(self, sentences: Sequence[Tokens], src_lang: str, tgt_lang: str) -> List[Tokens]:
        raise NotImplementedError()


class ModelTranslator(Translator):
    """
    Batched greedy (beam == 1) or beam search decoding with the model.
    """
    def __init__(self, params: ModelParams, vocab: Vocabulary, beam: int = 1, batch_size: int = 32,
                 max_len: Optional[int] = None, quiet: bool = True):
        self.params = params
        self.vocab = vocab
        self.beam = beam
        self.batch_size = batch_size
        self.max_len = max_len
        self.quiet = quiet

    def translate(self, sentences: Sequence[Tokens], src_lang: str, tgt_lang: str) -> List[Tokens]:
        limit = self.params.config.max_len - 2
        out: List[Tokens] = [[] for _ in sentences]
        keep = [i for i, s in enumerate(sentences) if len(s) <= limit]
        if len(keep) < len(sentences):
            warnings.warn(f"Skipping {len(sentences) - len(keep)} {src_lang} sentences longer than {limit} tokens.")
        tgt_id = self.vocab.lang_id(tgt_lang)
        for idx in tqdm(list(chunks(keep, self.batch_size)), desc=f"{src_lang}-{tgt_lang}", disable=self.quiet):
            batch = collate_sources(self.vocab, [sentences[i] for i in idx], src_lang)
            max_len = self.max_len if self.max_len is not None else 2 * batch.src.shape[1] + 4
            for i, ids in zip(idx, greedy_or_beam_decode(self.params, batch, tgt_id, self.beam, max_len)):
                out[i] = self.vocab.decode_tokens(ids)
        return out


class PivotTranslator(Translator):
    """
    X -> hub -> Y through another translator; directions touching the hub are translated directly.
    """
    def __init__(self, translator: Translator, hub: str):
        self.translator = translator
        self.hub = hub

    def translate(self, sentences: Sequence[Tokens], src_lang: str, tgt_lang: str) -> List[Tokens]:
        if self.hub in (src_lang, tgt_lang):
            return self.translator.translate(sentences, src_lang, tgt_lang)
        middle = self.translator.translate(sentences, src_lang, self.hub)
        hyps: List[Tokens] = [[] for _ in sentences]
        filled = [i for i, s in enumerate(middle) if s]
        for i, t in zip(filled, self.translator.translate([middle[i] for i in filled], self.hub, tgt_lang)):
            hyps[i] = t
        return hyps


class CipherTranslator(Translator):
    """
    Exact translation of synthetic cipher languages, an upper bound for every direction.
    """
    def __init__(self, ciphers: Dict[str, np.ndarray]):
        if not ciphers:
            raise DataError("The corpus has no ciphers, the oracle translator needs a synthetic corpus.")
        self.ciphers = ciphers

    def translate(self, sentences: Sequence[Tokens], src_lang: str, tgt_lang: str) -> List[Tokens]:
        return [cipher_translate(s, src_lang, tgt_lang, self.ciphers) for s in sentences]


def evaluate_directions(translator: Translator, corpora: CorpusSet,
                        directions: Optional[Sequence[Tuple[str, str]]] = None, max_sentences: Optional[int] = None,
                        scenario: Optional[Scenario] = None) -> List[DirectionReport]:
    """
    Translates the multi-way held-out set along each direction and scores it with BLEU.
    :param translator: The system under test.
    :param corpora: Corpus set with the multi-way held-out set and the training topology.
    :param directions: (src, tgt) pairs, every ordered pair of languages by default.
    :param max_sentences: Only the first sentences of the held-out set are used when given.
    :param scenario: Overrides the scenario label (e.g. pivot), otherwise it is derived from the topology.
    :return: Reports ordered by direction name.
    :raise DataError: For an unknown direction or a language without held-out sentences.
    """
    directions = all_directions(corpora) if directions is None else list(directions)
    reports = []
    for src, tgt in sorted(directions, key=lambda d: f"{d[0]}-{d[1]}"):
        label = classify_direction(corpora, src, tgt) if scenario is None else scenario
        task = RetrievalTask.from_multiway(corpora.multiway, src, tgt)
        sources, references = task.sources[:max_sentences], task.candidates[:max_sentences]
        if not sources:
            raise DataError(f"No held-out sentences for {src}-{tgt}.")
        hyps = translator.translate(sources, src, tgt)
        reports.append(DirectionReport(f"{src}-{tgt}", "bleu", bleu(hyps, references), len(sources), label.value))
    return reports


def scenario_means(reports: Sequence[DirectionReport]) -> pd.DataFrame:
    """
    Mean value per (metric, scenario).
    """
    frame = reports_frame(reports)
    return frame.groupby(["metric", "scenario"], sort=True)["value"].agg(["mean", "count"]).reset_index()


def format_summary(reports: Sequence[DirectionReport], hub: Optional[str] = None) -> str:
    """
    One page of scenario averages: BLEU per supervised / unsupervised / zero-shot (and pivot) plus retrieval
    averages, English-centric (directions touching the hub) and multi-way (all ordered pairs).
    """
    lines = ["scenario averages", ""]
    bleu_reports = [r for r in reports if r.metric == "bleu"]
    for scenario in Scenario:
        values = [r.value for r in bleu_reports if r.scenario == scenario.value]
        if values or scenario != Scenario.PIVOT:
            lines.append(f"bleu {scenario.value:<14} {_mean_text(values, '.2f')}  ({len(values)} directions)")
    retrieval = [r for r in reports if r.metric == "retrieval_top1"]
    if retrieval:
        lines.append("")
        if hub is not None:
            centric = [r.value for r in retrieval if hub in (r.src_lang, r.tgt_lang)]
            lines.append(f"retrieval english-centric {_mean_text(centric, '.4f')}  ({len(centric)} directions)")
        lines.append(f"retrieval multi-way       {_mean_text([r.value for r in retrieval], '.4f')}  "
                     f"({len(retrieval)} directions)")
        zero_shot = [r.value for r in retrieval if r.scenario == Scenario.ZERO_SHOT.value]
        lines.append(f"retrieval zero-shot       {_mean_text(zero_shot, '.4f')}  ({len(zero_shot)} directions)")
    return "\n".join(lines) + "\n"


def _mean_text(values: Sequence[float], fmt: str) -> str:
    return format(float(np.mean(values)), fmt) if values else "n/a"


@dataclass
class EvaluationContext:
    params: ModelParams
    vocab: Vocabulary
    corpora: CorpusSet
    beam: int = 1
    max_sentences: Optional[int] = None
    quiet: bool = True
    representations: Dict[str, np.ndarray] = field(default_factory=dict)

    def multiway_representations(self) -> Dict[str, np.ndarray]:
        if not self.representations:
            self.representations = multiway_representations(self.params, self.vocab, self.corpora.multiway,
                                                            self.max_sentences, self.quiet)
        return self.representations


class EvaluationSuites(SingletonStrategies):
    def __init__(self):
        super().__init__()


class EvaluationSuite(ABC):
    @abstractmethod
    def run(self, context: EvaluationContext) -> List[DirectionReport]:
        raise NotImplementedError()


@strategy_method(EvaluationSuites, "retrieval")
class RetrievalSuite(EvaluationSuite):
    def run(self, context: EvaluationContext) -> List[DirectionReport]:
        return multiway_retrieval(context.multiway_representations(), context.corpora)


@strategy_method(EvaluationSuites, "bleu")
class BleuSuite(EvaluationSuite):
    """
    BLEU on every ordered direction, plus pivoting through the hub on the zero-shot ones.
    """
    def run(self, context: EvaluationContext) -> List[DirectionReport]:
        corpora = context.corpora
        translator = ModelTranslator(context.params, context.vocab, context.beam, quiet=context.quiet)
        reports = evaluate_directions(translator, corpora, max_sentences=context.max_sentences)
        zero_shot = [(r.src_lang, r.tgt_lang) for r in reports if r.scenario == Scenario.ZERO_SHOT.value]
        if zero_shot:
            reports += evaluate_directions(PivotTranslator(translator, corpora.hub), corpora, zero_shot,
                                           context.max_sentences, Scenario.PIVOT)
        return reports


@strategy_method(EvaluationSuites, "all")
class AllSuites(EvaluationSuite):
    def run(self, context: EvaluationContext) -> List[DirectionReport]:
        return RetrievalSuite().run(context) + BleuSuite().run(context)


def run_suite(name: str, context: EvaluationContext) -> List[DirectionReport]:
    return EvaluationSuites().get(name).run(context)


def pca_project(x: np.ndarray, k: int = 2) -> Tuple[np.ndarray, np.ndarray]:
    """
    Principal component projection from the eigendecomposition of the centred covariance. Components are ordered by
    descending eigenvalue and signed so that their largest-magnitude loading is positive.
    :return: The (N, k) coordinates and the (d, k) components.
    :raise DataError: If the representations have fewer than k dimensions.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < k:
        raise DataError(f"PCA to {k} dimensions needs representations with at least {k} dimensions, got {x.shape}.")
    centred = x - x.mean(axis=0)
    _, vectors = np.linalg.eigh(centred.T @ centred / max(len(x), 1))
    components = vectors[:, ::-1][:, :k].copy()
    for j in range(k):
        if components[np.argmax(np.abs(components[:, j])), j] < 0:
            components[:, j] = -components[:, j]
    return centred @ components, components


class Projections(SingletonStrategies):
    def __init__(self):
        super().__init__()


@strategy_method(Projections, "none")
class NoProjection:
    def project(self, x: np.ndarray) -> np.ndarray:
        return x


@strategy_method(Projections, "pca2")
class PCA2:
    def project(self, x: np.ndarray) -> np.ndarray:
        return pca_project(x, 2)[0]


def representation_frame(representations: Dict[str, np.ndarray], projection: str = "none") -> pd.DataFrame:
    """
    Rows (language, line_id, v1..vk); the projection is fitted on all languages together.
    """
    langs = sorted(representations)
    stacked = np.concatenate([representations[lang] for lang in langs], axis=0)
    projected = Projections().get(projection).project(stacked)
    frame = pd.DataFrame(projected, columns=[f"v{i + 1}" for i in range(projected.shape[1])])
    frame.insert(0, "line_id", np.concatenate([np.arange(len(representations[lang])) for lang in langs]))
    frame.insert(0, "language", np.repeat(langs, [len(representations[lang]) for lang in langs]))
    return frame


def export_representations(params: ModelParams, vocab: Vocabulary, multiway: Dict[str, List[Tokens]],
                           out_path: str, projection: str = "none") -> pd.DataFrame:
    """
    Writes pooled representations of a multi-way set as TSV, raw or projected.
    :raise DataError: If the set is not line aligned or the projection cannot be computed.
    """
    if not multiway:
        raise DataError("There is no multi-way set to export.")
    frame = representation_frame(multiway_representations(params, vocab, multiway), projection)
    frame.to_csv(out_path, sep="\t", index=False, float_format="%.17g", lineterminator="\n")
    return frame

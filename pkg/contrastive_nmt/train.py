"""
Optimisation: Adam with bias correction, linear warm-up followed by linear decay, global gradient norm clipping,
checkpoints and the training loop.

Checkpoint container (``.npz``, uncompressed, fixed member timestamps so equal states give equal bytes)::

    param/<name>.npy     little-endian float64 parameter values
    adam_m/<name>.npy    Adam first moments
    adam_v/<name>.npy    Adam second moments
    meta.npy             uint8 UTF-8 JSON: format, model_config, train_config, step, stream, vocab_tokens, vocab_sha256
"""
import csv
import json
import math
import os
import warnings
import zipfile
from dataclasses import dataclass, field, fields, asdict, replace
from functools import partial
from typing import Dict, Iterator, List, Optional, Sequence, Tuple
import numpy as np
from tqdm import tqdm
from contrastive_nmt.augment import SynonymDictionary, make_pseudo_pairs
from contrastive_nmt.corpus import (Batch, CorpusSet, Example, TrainingSource, make_batches,
                                    temperature_sample_weights)
from contrastive_nmt.errors import CheckpointError, DataError, NumericError
from contrastive_nmt.loss import LossReport, joint_objective
from contrastive_nmt.model import ModelConfig, ModelParams
from contrastive_nmt.patterns import SingletonStrategies, strategy_method
from contrastive_nmt.tensor import Tape, Tensor
from contrastive_nmt.types_utils import Seed
from contrastive_nmt.utils import atomic_write, prefetch, read_lines
from contrastive_nmt.vocab import Vocabulary

CHECKPOINT_FORMAT = "contrastive-nmt-checkpoint/1"
LOG_COLUMNS = ["step", "lr", "grad_norm", "mt", "ctl", "combined", "avg_seq_len", "tokens"]


@dataclass
class TrainConfig:
    lr_peak: float = 3e-4
    warmup_steps: int = 500
    total_steps: int = 5000
    beta1: float = 0.9
    beta2: float = 0.98
    eps_adam: float = 1e-6
    clip_norm: float = 5.0
    lam: float = 1.0
    tau: float = 0.1
    p_replace: float = 0.9
    seed: int = 0
    use_ctl: bool = True
    use_aa: bool = True
    use_mono: bool = True
    include_positive: bool = True
    batch_size_tokens: int = 1024
    temperature: float = 5.0
    log_every: int = 1
    checkpoint_every: int = 1000
    prefetch: int = 4
    corpus_dir: str = ""
    dictionary: str = ""

    def validate(self) -> "TrainConfig":
        """
        :raise DataError: If a value is out of range.
        """
        if self.lr_peak <= 0:
            raise DataError(f"lr_peak {self.lr_peak} needs to be positive.")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise DataError(f"warmup_steps {self.warmup_steps} needs to be in [0, total_steps={self.total_steps}).")
        if self.clip_norm <= 0:
            raise DataError(f"clip_norm {self.clip_norm} needs to be positive.")
        if not 0.0 <= self.p_replace <= 1.0:
            raise DataError(f"p_replace {self.p_replace} needs to be in [0, 1].")
        if self.tau <= 0 or self.temperature <= 0:
            raise DataError(f"tau {self.tau} and temperature {self.temperature} need to be positive.")
        if self.lam < 0:
            raise DataError(f"lambda {self.lam} needs to be non negative.")
        if min(self.batch_size_tokens, self.log_every, self.checkpoint_every) <= 0:
            raise DataError("batch_size_tokens, log_every and checkpoint_every need to be positive.")
        return self

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


KEY_ALIASES = {"lambda": "lam"}


def _parse_value(raw: str, kind, key: str):
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise DataError(f"Value {raw!r} is not a valid {kind.__name__} for {key}.") from None


def parse_config_lines(lines: Sequence[str], source: str = "<config>") -> Dict[str, str]:
    """
    Flat ``key = value`` lines; ``#`` starts a comment, blank lines are ignored.
    :raise DataError: For a line without ``=``, naming the line.
    """
    values = {}
    for number, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise DataError(f"{source}:{number}: expected 'key = value', got {line!r}.")
        values[key.strip()] = value.strip()
    return values


def build_configs(values: Dict[str, str], source: str = "<config>",
                  base: Optional[Tuple[ModelConfig, TrainConfig]] = None) -> Tuple[ModelConfig, TrainConfig]:
    """
    Splits raw key/value strings between ModelConfig and TrainConfig, converting them to the field types.
    :param base: The configs the values are applied on, the defaults when not given.
    :raise DataError: For an unknown key or a value of the wrong type.
    """
    model_fields = {f.name: f.type for f in fields(ModelConfig)}
    train_fields = {f.name: f.type for f in fields(TrainConfig)}
    model_values, train_values = {}, {}
    for key, raw in values.items():
        name = KEY_ALIASES.get(key, key)
        if name in model_fields:
            model_values[name] = _parse_value(raw, model_fields[name], key)
        elif name in train_fields:
            train_values[name] = _parse_value(raw, train_fields[name], key)
        else:
            raise DataError(f"{source}: unknown configuration key {key!r}.")
    model_cfg, train_cfg = base if base is not None else (ModelConfig(), TrainConfig())
    return replace(model_cfg, **model_values), replace(train_cfg, **train_values)


def load_configs(path: Optional[str] = None, overrides: Sequence[str] = (),
                 base: Optional[Tuple[ModelConfig, TrainConfig]] = None) -> Tuple[ModelConfig, TrainConfig]:
    """
    Reads a config file (optional) and applies ``key=value`` overrides on top, both over :param base.
    """
    values = parse_config_lines(read_lines(path), path) if path else {}
    values.update(parse_config_lines(list(overrides), "--set"))
    return build_configs(values, path or "--set", base)


class TrainingModes(SingletonStrategies):
    """
    The five ablation configurations: which of CTL, AA and monolingual data are switched on.
    """
    def __init__(self):
        super().__init__()


class TrainingMode:
    use_ctl = False
    use_aa = False
    use_mono = False

    def apply(self, cfg: TrainConfig) -> TrainConfig:
        return replace(cfg, use_ctl=self.use_ctl, use_aa=self.use_aa, use_mono=self.use_mono)


@strategy_method(TrainingModes, "baseline")
class Baseline(TrainingMode):
    pass


@strategy_method(TrainingModes, "ctl")
class WithContrastive(TrainingMode):
    use_ctl = True


@strategy_method(TrainingModes, "aa")
class WithAugmentation(TrainingMode):
    use_aa = True


@strategy_method(TrainingModes, "aa-ctl")
class WithAugmentationAndContrastive(TrainingMode):
    use_ctl = True
    use_aa = True


@strategy_method(TrainingModes, "full")
class Full(TrainingMode):
    use_ctl = True
    use_aa = True
    use_mono = True


def apply_mode(cfg: TrainConfig, mode: str) -> TrainConfig:
    return TrainingModes().get(mode).apply(cfg)


def _pseudo_pair(dictionary: SynonymDictionary, p_replace: float, example: Example, seed: Seed):
    return make_pseudo_pairs(example, dictionary, p_replace, seed)


def build_training_sources(corpora: CorpusSet, dictionary: Optional[SynonymDictionary], cfg: TrainConfig) \
        -> Tuple[List[TrainingSource], np.ndarray]:
    """
    One sampling source per direction of every parallel corpus, plus one per monolingual corpus when use_mono is
    set. With use_aa parallel sources yield (C(x_i), x_j) and monolingual ones (C(x_i), x_i); monolingual sources
    without use_aa are plain copy tasks.
    :return: The sources and their temperature sampling weights.
    :raise DataError: If no source is left.
    """
    dictionary = dictionary if dictionary is not None else SynonymDictionary()
    if cfg.use_aa and not len(dictionary):
        warnings.warn("Aligned augmentation is on but the synonym dictionary is empty.")
    augmenting = partial(_pseudo_pair, dictionary, cfg.p_replace)
    copying = partial(_pseudo_pair, dictionary, 0.0)

    sources = []
    for corpus in corpora.parallel.values():
        for reverse in (False, True):
            pairs = corpus.pairs(reverse)
            name = f"{pairs[0].src_lang}-{pairs[0].tgt_lang}" if pairs else corpus.name
            sources.append(TrainingSource(name, pairs, augmenting if cfg.use_aa else None))
    if cfg.use_mono:
        for corpus in corpora.monolingual.values():
            sources.append(TrainingSource(corpus.name, corpus.examples(), augmenting if cfg.use_aa else copying))
    sources = [s for s in sources if len(s)]
    if not sources:
        raise DataError("There is no training data for this configuration.")
    return sources, temperature_sample_weights([len(s) for s in sources], cfg.temperature)


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls({n: np.zeros_like(t.data) for n, t in params.items()},
                   {n: np.zeros_like(t.data) for n, t in params.items()})

    def check(self, params: ModelParams) -> None:
        for name, t in params.items():
            if name not in self.m or self.m[name].shape != t.shape or self.v[name].shape != t.shape:
                raise CheckpointError(f"Optimizer moments do not match parameter {name} {t.shape}.")


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """
    Linear warm-up from 0 to lr_peak over warmup_steps, then linear decay to 0 at total_steps.
    """
    assert step >= 1, f"step {step} needs to be at least 1."
    if step <= cfg.warmup_steps:
        return cfg.lr_peak * (step / cfg.warmup_steps)
    return cfg.lr_peak * max(0.0, (cfg.total_steps - step) / (cfg.total_steps - cfg.warmup_steps))


def clip_gradients(params: ModelParams, clip_norm: float) -> float:
    """
    Rescales every gradient by clip_norm / g when the global L2 norm g exceeds :param clip_norm.
    :return: The global norm before clipping.
    :raise NumericError: If a gradient is non-finite, naming the parameter.
    """
    squares = 0.0
    for name, t in params.items():
        if t.grad is None:
            continue
        if not np.all(np.isfinite(t.grad)):
            raise NumericError(f"Non-finite gradient for parameter {name}.")
        squares += float(np.sum(t.grad * t.grad))
    norm = math.sqrt(squares)
    if norm > clip_norm:
        factor = clip_norm / norm
        for t in params.tensors.values():
            if t.grad is not None:
                t.grad = t.grad * factor
    return norm


def adam_update(params: ModelParams, state: AdamState, lr: float, cfg: TrainConfig) -> None:
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1 ** state.step, 1.0 - b2 ** state.step
    for name, t in params.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        t.data = t.data - lr * (state.m[name] / c1) / (np.sqrt(state.v[name] / c2) + cfg.eps_adam)


@dataclass
class StepReport(LossReport):
    step: int = 0
    lr: float = 0.0
    grad_norm: float = 0.0

    def to_row(self) -> List:
        return [self.step, repr(self.lr), repr(self.grad_norm), repr(self.mt_loss), repr(self.ctl_loss),
                repr(self.combined), repr(self.avg_seq_len), self.token_count]


def dropout_rng(cfg: TrainConfig, model_cfg: ModelConfig, step: int) -> Optional[np.random.Generator]:
    return np.random.default_rng([cfg.seed, step]) if model_cfg.dropout_rate > 0 else None


def train_step(params: ModelParams, opt_state: AdamState, batch: Batch, cfg: TrainConfig) -> StepReport:
    """
    Forward, backward, clip and Adam update for one batch. Dropout draws from a generator seeded by (seed, step).
    :raise NumericError: If the loss or a gradient is non-finite.
    """
    step = opt_state.step + 1
    lr = lr_schedule(step, cfg)
    params.zero_grad()
    with Tape() as tape:
        combined, report = joint_objective(params, batch, cfg.lam, cfg.tau, cfg.use_ctl, cfg.include_positive,
                                           dropout_rng(cfg, params.config, step))
    tape.backward(combined)
    grad_norm = clip_gradients(params, cfg.clip_norm)
    adam_update(params, opt_state, lr, cfg)
    params.check_finite()
    return StepReport(**report.to_dict(), step=step, lr=lr, grad_norm=grad_norm)


@dataclass
class StreamPosition:
    """
    Where the batch stream resumes: pass index and number of batches of that pass already consumed.
    """
    epoch: int = 0
    batch: int = 0


@dataclass
class Checkpoint:
    params: ModelParams
    opt_state: AdamState
    train_config: TrainConfig
    vocab: Vocabulary
    position: StreamPosition = field(default_factory=StreamPosition)


def _write_npz(f, arrays: Dict[str, np.ndarray]) -> None:
    with zipfile.ZipFile(f, "w", zipfile.ZIP_STORED) as zf:
        for key, array in arrays.items():
            info = zipfile.ZipInfo(f"{key}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as member:
                np.lib.format.write_array(member, np.ascontiguousarray(array), allow_pickle=False)


def save_checkpoint(path: str, params: ModelParams, opt_state: AdamState, cfg: TrainConfig, vocab: Vocabulary,
                    position: Optional[StreamPosition] = None) -> None:
    """
    Writes the checkpoint container atomically (temporary file, then rename).
    """
    position = position if position is not None else StreamPosition()
    meta = {
        "format": CHECKPOINT_FORMAT,
        "model_config": params.config.to_dict(),
        "train_config": cfg.to_dict(),
        "step": opt_state.step,
        "stream": asdict(position),
        "vocab_tokens": vocab.tokens,
        "vocab_sha256": vocab.fingerprint(),
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)}
    for name, t in params.items():
        arrays[f"param/{name}"] = t.data.astype("<f8")
        arrays[f"adam_m/{name}"] = opt_state.m[name].astype("<f8")
        arrays[f"adam_v/{name}"] = opt_state.v[name].astype("<f8")
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with atomic_write(path, "wb") as f:
        _write_npz(f, arrays)


def load_checkpoint(path: str, vocab: Optional[Vocabulary] = None) -> Checkpoint:
    """
    :param path: The checkpoint file.
    :param vocab: When given, its fingerprint must match the one stored in the checkpoint.
    :raise CheckpointError: If the file is unreadable, incomplete or belongs to another vocabulary.
    """
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {k: archive[k] for k in archive.files}
    except (OSError, ValueError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    if "meta" not in arrays:
        raise CheckpointError(f"{path} has no meta entry.")
    meta = json.loads(arrays["meta"].tobytes().decode("utf-8"))
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} has format {meta.get('format')!r}, expected {CHECKPOINT_FORMAT!r}.")

    stored_vocab = Vocabulary(meta["vocab_tokens"])
    if stored_vocab.fingerprint() != meta["vocab_sha256"]:
        raise CheckpointError(f"{path}: stored vocabulary does not match its hash.")
    if vocab is not None and vocab.fingerprint() != meta["vocab_sha256"]:
        raise CheckpointError(f"{path} was trained with vocabulary {meta['vocab_sha256'][:12]}, "
                              f"given vocabulary is {vocab.fingerprint()[:12]}.")

    config = ModelConfig.from_dict(meta["model_config"])
    names = [k[len("param/"):] for k in arrays if k.startswith("param/")]
    try:
        params = ModelParams(config, {n: Tensor(arrays[f"param/{n}"], requires_grad=True, name=n) for n in names})
        opt_state = AdamState({n: arrays[f"adam_m/{n}"] for n in names}, {n: arrays[f"adam_v/{n}"] for n in names},
                              int(meta["step"]))
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path} is incomplete: {e}") from e
    opt_state.check(params)
    return Checkpoint(params, opt_state, TrainConfig.from_dict(meta["train_config"]), stored_vocab,
                      StreamPosition(**meta["stream"]))


class Trainer:
    """
    Runs train steps over an endless chain of sampling passes until total_steps. Batches are prepared on a producer
    thread; the stream, augmentation and dropout are all seeded, so a resumed run continues exactly.
    """
    def __init__(self, params: ModelParams, vocab: Vocabulary, corpora: CorpusSet, cfg: TrainConfig,
                 dictionary: Optional[SynonymDictionary] = None, out_dir: Optional[str] = None,
                 opt_state: Optional[AdamState] = None, position: Optional[StreamPosition] = None,
                 quiet: bool = False):
        self.params = params
        self.vocab = vocab
        self.cfg = cfg.validate()
        self.out_dir = out_dir
        self.opt_state = opt_state if opt_state is not None else AdamState.zeros(params)
        self.opt_state.check(params)
        self.position = position if position is not None else StreamPosition()
        self.quiet = quiet
        self.sources, self.weights = build_training_sources(corpora, dictionary, cfg)
        used = corpora.parallel_languages() + (list(corpora.monolingual) if cfg.use_mono else [])
        for lang in sorted(set(used)):
            vocab.lang_id(lang)

    @classmethod
    def from_checkpoint(cls, checkpoint: Checkpoint, corpora: CorpusSet, cfg: Optional[TrainConfig] = None,
                        dictionary: Optional[SynonymDictionary] = None, out_dir: Optional[str] = None,
                        quiet: bool = False) -> "Trainer":
        return cls(checkpoint.params, checkpoint.vocab, corpora, cfg or checkpoint.train_config, dictionary, out_dir,
                   checkpoint.opt_state, checkpoint.position, quiet)

    def batches(self) -> Iterator[Tuple[StreamPosition, Batch]]:
        """
        Yields every batch together with the stream position just after it.
        """
        epoch, skip = self.position.epoch, self.position.batch
        while True:
            index = -1
            for index, batch in enumerate(make_batches(self.sources, self.vocab, self.cfg.batch_size_tokens,
                                                       self.weights, self.cfg.seed, epoch)):
                if index >= skip:
                    yield StreamPosition(epoch, index + 1), batch
            if index < 0:
                raise DataError("A sampling pass produced no batches.")
            epoch, skip = epoch + 1, 0

    @property
    def log_path(self) -> Optional[str]:
        return os.path.join(self.out_dir, "train_log.tsv") if self.out_dir else None

    @property
    def checkpoint_path(self) -> Optional[str]:
        return os.path.join(self.out_dir, "checkpoint.npz") if self.out_dir else None

    def save(self, path: Optional[str] = None) -> None:
        save_checkpoint(path or self.checkpoint_path, self.params, self.opt_state, self.cfg, self.vocab,
                        self.position)

    def run(self, n_steps: Optional[int] = None) -> List[StepReport]:
        """
        Trains until total_steps, or for :param n_steps more steps when given.
        :return: The step reports of this call.
        """
        last = self.cfg.total_steps if n_steps is None else min(self.cfg.total_steps, self.opt_state.step + n_steps)
        reports = []
        if self.opt_state.step >= last:
            return reports

        log_file, writer = None, None
        if self.out_dir:
            os.makedirs(self.out_dir, exist_ok=True)
            new_log = not os.path.exists(self.log_path) or self.opt_state.step == 0
            log_file = open(self.log_path, "w" if new_log else "a", encoding="utf-8", newline="")
            writer = csv.writer(log_file, delimiter="\t", lineterminator="\n")
            if new_log:
                writer.writerow(LOG_COLUMNS)

        stream = self.batches()
        if self.cfg.prefetch > 0:
            stream = prefetch(stream, self.cfg.prefetch)
        if not self.quiet and self.opt_state.step == 0:
            tqdm.write(f"training {self.params.n_parameters()} parameters on {len(self.sources)} sources")
        progress = tqdm(total=last - self.opt_state.step, disable=self.quiet, desc="train")
        try:
            for position, batch in stream:
                report = train_step(self.params, self.opt_state, batch, self.cfg)
                self.position = position
                reports.append(report)
                if writer is not None and report.step % self.cfg.log_every == 0:
                    writer.writerow(report.to_row())
                progress.update(1)
                progress.set_postfix(mt=f"{report.mt_per_token:.3f}", ctl=f"{report.ctl_loss:.3f}")
                if self.out_dir and report.step % self.cfg.checkpoint_every == 0 and report.step < last:
                    log_file.flush()
                    self.save()
                if report.step >= last:
                    break
        finally:
            progress.close()
            if hasattr(stream, "close"):
                stream.close()
            if log_file is not None:
                log_file.close()
        if self.out_dir:
            self.save()
        if not self.quiet:
            tqdm.write(f"step {self.opt_state.step}: mt/token {reports[-1].mt_per_token:.4f}, "
                       f"ctl {reports[-1].ctl_loss:.4f}")
        return reports

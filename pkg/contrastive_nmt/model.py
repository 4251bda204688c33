"""
Pre-norm transformer encoder-decoder with layer-normalised embeddings, a shared embedding matrix tied to the
output projection, fixed sinusoidal positions and average pooled sentence representations R(s).
"""
import math
from dataclasses import dataclass, asdict, fields
from typing import Callable, Dict, Iterator, List, Optional, Tuple
import numpy as np
from scipy.special import log_softmax
from contrastive_nmt import tensor as T
from contrastive_nmt.corpus import SourceBatch
from contrastive_nmt.errors import DataError, ShapeError, NumericError
from contrastive_nmt.tensor import Tensor
from contrastive_nmt.vocab import BOS_ID, EOS_ID, PAD_ID, RESERVED

NEG_INF = -1e9

# (rows, prefixes) -> log probabilities of the next token, shape (len(rows), V)
LogProbFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class ModelConfig:
    vocab_size: int = 0
    n_layers_enc: int = 2
    n_layers_dec: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 256
    max_len: int = 64
    dropout_rate: float = 0.1
    pool_lang_token: bool = True
    # 0 removes every residual branch, leaving embeddings -> final layer norm -> projection.
    residual_scale: float = 1.0
    # Language indicator ids follow the reserved ids; decoding never emits them.
    n_languages: int = 0

    def validate(self) -> "ModelConfig":
        """
        :raise DataError: If a size is not positive or d_model is not divisible by n_heads.
        """
        for name in ("vocab_size", "n_layers_enc", "n_layers_dec", "d_model", "n_heads", "d_ffn", "max_len"):
            if getattr(self, name) <= 0:
                raise DataError(f"ModelConfig.{name} needs to be positive, got {getattr(self, name)}.")
        if self.d_model % self.n_heads:
            raise DataError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}.")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise DataError(f"dropout_rate {self.dropout_rate} needs to be in [0, 1).")
        if not 0 <= self.n_languages <= self.vocab_size - len(RESERVED):
            raise DataError(f"n_languages {self.n_languages} does not fit a vocabulary of {self.vocab_size}.")
        return self

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


def sinusoidal_positions(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, d_model, 2) / d_model))
    pe = np.zeros((max_len, d_model))
    pe[:, 0::2] = np.sin(pos * rates)
    pe[:, 1::2] = np.cos(pos * rates)[:, :d_model // 2]
    return pe


def _parameter_shapes(cfg: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    d, f = cfg.d_model, cfg.d_ffn
    shapes = [("embed", (cfg.vocab_size, d))]

    def norm(name):
        return [(f"{name}.gain", (d,)), (f"{name}.bias", (d,))]

    def attention(name):
        return [(f"{name}.{w}", (d, d)) for w in ("wq", "wk", "wv", "wo")] + \
               [(f"{name}.{b}", (d,)) for b in ("bq", "bk", "bv", "bo")]

    def ffn(name):
        return [(f"{name}.w1", (d, f)), (f"{name}.b1", (f,)), (f"{name}.w2", (f, d)), (f"{name}.b2", (d,))]

    shapes += norm("enc.emb_ln")
    for i in range(cfg.n_layers_enc):
        shapes += norm(f"enc.{i}.attn_ln") + attention(f"enc.{i}.self_attn") + norm(f"enc.{i}.ffn_ln") + \
                  ffn(f"enc.{i}.ffn")
    shapes += norm("enc.final_ln") + norm("dec.emb_ln")
    for i in range(cfg.n_layers_dec):
        shapes += norm(f"dec.{i}.self_ln") + attention(f"dec.{i}.self_attn") + \
                  norm(f"dec.{i}.cross_ln") + attention(f"dec.{i}.cross_attn") + \
                  norm(f"dec.{i}.ffn_ln") + ffn(f"dec.{i}.ffn")
    shapes += norm("dec.final_ln")
    return shapes


class ModelParams:
    """
    Named model tensors, all requiring gradients.
    """
    def __init__(self, config: ModelConfig, tensors: Dict[str, Tensor]):
        self.config = config.validate()
        expected = dict(_parameter_shapes(config))
        if set(expected) != set(tensors):
            missing, extra = sorted(set(expected) - set(tensors)), sorted(set(tensors) - set(expected))
            raise ShapeError(f"Parameter names do not match the config (missing {missing}, unexpected {extra}).")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ShapeError(f"Parameter {name} has shape {tensors[name].shape}, config needs {shape}.")
        self.tensors = tensors
        self.positions = sinusoidal_positions(config.max_len, config.d_model)

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "ModelParams":
        """
        Glorot uniform matrices, unit layer-norm gains, zero biases.
        """
        config.validate()
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in _parameter_shapes(config):
            if name.endswith(".gain"):
                data = np.ones(shape)
            elif len(shape) == 1:
                data = np.zeros(shape)
            else:
                limit = math.sqrt(6.0 / (shape[0] + shape[1]))
                data = rng.uniform(-limit, limit, size=shape)
            tensors[name] = Tensor(data, requires_grad=True, name=name)
        return cls(config, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {n: Tensor(t.data.copy(), requires_grad=True, name=n)
                                         for n, t in self.tensors.items()})

    def n_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def check_finite(self) -> None:
        for name, t in self.tensors.items():
            if not np.all(np.isfinite(t.data)):
                raise NumericError(f"Parameter {name} holds non-finite values.")


@dataclass
class EncodedBatch:
    """
    Final encoder states (B, S, d), the source mask and the pooled representations R (B, d).
    """
    states: Tensor
    src_mask: np.ndarray
    pooled: Tensor


def _norm(params: ModelParams, name: str, x: Tensor) -> Tensor:
    return T.layer_norm(x, params[f"{name}.gain"], params[f"{name}.bias"])


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(x, w), b)


def _embed(params: ModelParams, ids: np.ndarray, norm: str, rng) -> Tensor:
    cfg = params.config
    b, s = ids.shape
    if s > cfg.max_len:
        raise DataError(f"Sequence length {s} exceeds max_len {cfg.max_len}.")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise DataError(f"Token ids outside [0, {cfg.vocab_size}).")
    x = T.scale(T.embedding(params["embed"], ids), math.sqrt(cfg.d_model))
    x = T.add(x, Tensor(np.broadcast_to(params.positions[:s], (b, s, cfg.d_model)).copy()))
    return T.dropout(_norm(params, norm, x), cfg.dropout_rate, rng)


def _split_heads(params: ModelParams, x: Tensor) -> Tensor:
    b, s, d = x.shape
    h = params.config.n_heads
    return T.transpose(T.reshape(x, (b, s, h, d // h)), (0, 2, 1, 3))


def _attention(params: ModelParams, name: str, queries: Tensor, memory: Tensor, allowed: np.ndarray, rng) -> Tensor:
    """
    Multi-head attention of :param queries over :param memory. :param allowed is a (B, S, T) boolean mask.
    """
    cfg = params.config
    b, s, d = queries.shape
    q = _split_heads(params, _linear(queries, params[f"{name}.wq"], params[f"{name}.bq"]))
    k = _split_heads(params, _linear(memory, params[f"{name}.wk"], params[f"{name}.bk"]))
    v = _split_heads(params, _linear(memory, params[f"{name}.wv"], params[f"{name}.bv"]))
    scores = T.scale(T.bmm(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d // cfg.n_heads))
    blocked = np.broadcast_to(~allowed[:, None, :, :], scores.shape)
    weights = T.dropout(T.softmax(T.masked_fill(scores, blocked, NEG_INF), axis=-1), cfg.dropout_rate, rng)
    context = T.reshape(T.transpose(T.bmm(weights, v), (0, 2, 1, 3)), (b, s, d))
    return _linear(context, params[f"{name}.wo"], params[f"{name}.bo"])


def _feed_forward(params: ModelParams, name: str, x: Tensor, rng) -> Tensor:
    hidden = T.dropout(T.relu(_linear(x, params[f"{name}.w1"], params[f"{name}.b1"])), params.config.dropout_rate, rng)
    return _linear(hidden, params[f"{name}.w2"], params[f"{name}.b2"])


def _residual(params: ModelParams, x: Tensor, branch: Tensor, rng) -> Tensor:
    cfg = params.config
    branch = T.dropout(branch, cfg.dropout_rate, rng)
    if cfg.residual_scale != 1.0:
        branch = T.scale(branch, cfg.residual_scale)
    return T.add(x, branch)


def encode(params: ModelParams, batch: SourceBatch, rng: Optional[np.random.Generator] = None) -> EncodedBatch:
    """
    Runs the encoder and mean-pools its final states over non-PAD positions.
    :param params: The model.
    :param batch: Source ids and mask.
    :param rng: Dropout randomness; None disables dropout.
    :raise DataError: If a sequence is longer than max_len or ids fall outside the vocabulary.
    """
    src_mask = np.asarray(batch.src_mask, dtype=np.float64)
    if src_mask.shape != batch.src.shape:
        raise ShapeError(f"Source ids {batch.src.shape} and mask {src_mask.shape} differ.")
    keys = src_mask.astype(bool)
    allowed = np.broadcast_to(keys[:, None, :], (keys.shape[0], keys.shape[1], keys.shape[1]))

    x = _embed(params, batch.src, "enc.emb_ln", rng)
    for i in range(params.config.n_layers_enc):
        x = _residual(params, x, _attention(params, f"enc.{i}.self_attn", _norm(params, f"enc.{i}.attn_ln", x),
                                            _norm(params, f"enc.{i}.attn_ln", x), allowed, rng), rng)
        x = _residual(params, x, _feed_forward(params, f"enc.{i}.ffn", _norm(params, f"enc.{i}.ffn_ln", x), rng), rng)
    states = _norm(params, "enc.final_ln", x)

    pool_mask = src_mask.copy()
    if not params.config.pool_lang_token:
        pool_mask[:, 0] = 0.0
    return EncodedBatch(states, src_mask, T.masked_mean(states, pool_mask))


def decode_train(params: ModelParams, encoded: EncodedBatch, tgt_input: np.ndarray, tgt_mask: np.ndarray,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
    """
    Teacher forced decoder pass with causal self-attention and cross-attention over the encoder states.
    :param tgt_input: (B, T) ids starting with the target language token.
    :param tgt_mask: (B, T) 1 on non-PAD positions.
    :return: Logits (B, T, V).
    :raise ShapeError: If the target shapes disagree with each other or with the encoded batch.
    """
    tgt_input = np.asarray(tgt_input, dtype=np.int64)
    tgt_mask = np.asarray(tgt_mask, dtype=np.float64)
    if tgt_input.ndim != 2 or tgt_input.shape != tgt_mask.shape or tgt_input.shape[0] != encoded.states.shape[0]:
        raise ShapeError(f"Target ids {tgt_input.shape}, mask {tgt_mask.shape} and encoded batch "
                         f"{encoded.states.shape} are incompatible.")
    b, t = tgt_input.shape
    causal = np.tril(np.ones((t, t), dtype=bool))[None, :, :] & tgt_mask.astype(bool)[:, None, :]
    # Position 0 (the language token) is always visible, so no row is fully blocked.
    causal[:, :, 0] = True
    cross = np.broadcast_to(encoded.src_mask.astype(bool)[:, None, :], (b, t, encoded.src_mask.shape[1]))

    y = _embed(params, tgt_input, "dec.emb_ln", rng)
    for i in range(params.config.n_layers_dec):
        h = _norm(params, f"dec.{i}.self_ln", y)
        y = _residual(params, y, _attention(params, f"dec.{i}.self_attn", h, h, causal, rng), rng)
        h = _norm(params, f"dec.{i}.cross_ln", y)
        y = _residual(params, y, _attention(params, f"dec.{i}.cross_attn", h, encoded.states, cross, rng), rng)
        y = _residual(params, y, _feed_forward(params, f"dec.{i}.ffn", _norm(params, f"dec.{i}.ffn_ln", y), rng), rng)
    y = _norm(params, "dec.final_ln", y)
    return T.matmul(y, T.transpose(params["embed"]))


def non_generated_ids(config: ModelConfig) -> np.ndarray:
    languages = range(len(RESERVED), len(RESERVED) + config.n_languages)
    return np.asarray([PAD_ID, BOS_ID, *languages], dtype=np.int64)


def model_log_prob_fn(params: ModelParams, encoded: EncodedBatch) -> LogProbFn:
    """
    Next-token log probabilities for prefixes of the given encoded rows, without a cache.
    PAD, BOS and the language indicator ids get log probability -inf.
    """
    states, src_mask = encoded.states.data, encoded.src_mask
    banned = non_generated_ids(params.config)

    def log_probs(rows: np.ndarray, prefixes: np.ndarray) -> np.ndarray:
        memory = EncodedBatch(Tensor(states[rows]), src_mask[rows], encoded.pooled)
        logits = decode_train(params, memory, prefixes, np.ones(prefixes.shape))
        out = log_softmax(logits.data[:, -1, :], axis=-1)
        out[:, banned] = -np.inf
        return out
    return log_probs


def _decode_limit(params: Optional[ModelParams], max_len: Optional[int]) -> int:
    limit = max_len if max_len is not None else (params.config.max_len - 1 if params is not None else 64)
    if params is not None:
        limit = min(limit, params.config.max_len - 1)
    return limit


def greedy_decode(params: Optional[ModelParams], src_batch: SourceBatch, tgt_lang_id: int,
                  max_len: Optional[int] = None, log_prob_fn: Optional[LogProbFn] = None) -> List[List[int]]:
    """
    Arg-max decoding of every row in parallel until EOS or :param max_len generated tokens.
    :return: Token ids per row without the language token and EOS.
    """
    if log_prob_fn is None:
        log_prob_fn = model_log_prob_fn(params, encode(params, src_batch))
    n = len(src_batch)
    limit = _decode_limit(params, max_len)
    prefixes = np.full((n, 1), tgt_lang_id, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    for _ in range(limit):
        live = np.flatnonzero(~done)
        if live.size == 0:
            break
        step = np.full(n, PAD_ID, dtype=np.int64)
        step[live] = np.argmax(log_prob_fn(live, prefixes[live]), axis=-1)
        prefixes = np.concatenate([prefixes, step[:, None]], axis=1)
        done |= step == EOS_ID
    out = []
    for row in prefixes[:, 1:]:
        tokens = []
        for tok in row:
            if tok == EOS_ID:
                break
            tokens.append(int(tok))
        out.append(tokens)
    return out


def beam_search(params: Optional[ModelParams], src_batch: SourceBatch, tgt_lang_id: int, beam: int = 4,
                max_len: Optional[int] = None, alpha: float = 1.0, log_prob_fn: Optional[LogProbFn] = None) \
        -> List[List[int]]:
    """
    Beam search per row. Finished hypotheses are scored by log probability / (generated length ** alpha), EOS
    included in the length; the search of a row stops once :param beam hypotheses have finished.
    :return: Token ids per row without the language token and EOS.
    """
    assert beam >= 1, f"beam {beam} needs to be at least 1."
    if log_prob_fn is None:
        log_prob_fn = model_log_prob_fn(params, encode(params, src_batch))
    limit = _decode_limit(params, max_len)
    out = []
    for row in range(len(src_batch)):
        alive: List[Tuple[List[int], float]] = [([tgt_lang_id], 0.0)]
        finished: List[Tuple[float, List[int]]] = []
        for _ in range(limit):
            prefixes = np.asarray([seq for seq, _ in alive], dtype=np.int64)
            log_probs = log_prob_fn(np.full(len(alive), row), prefixes)
            vocab_size = log_probs.shape[1]
            candidates = (np.asarray([score for _, score in alive])[:, None] + log_probs).reshape(-1)
            survivors = []
            for idx in np.argsort(-candidates, kind="stable"):
                if not np.isfinite(candidates[idx]):
                    break
                h, tok = divmod(int(idx), vocab_size)
                seq, score = alive[h][0] + [tok], float(candidates[idx])
                if tok == EOS_ID:
                    finished.append((score / (len(seq) - 1) ** alpha, seq))
                else:
                    survivors.append((seq, score))
                if len(survivors) == beam:
                    break
            alive = survivors
            if len(finished) >= beam or not alive:
                break
        if not finished:
            finished = [(score / (len(seq) - 1) ** alpha, seq) for seq, score in alive]
        best = max(range(len(finished)), key=lambda i: (finished[i][0], -i))
        out.append([tok for tok in finished[best][1][1:] if tok != EOS_ID])
    return out


def greedy_or_beam_decode(params: Optional[ModelParams], src_batch: SourceBatch, tgt_lang_id: int, beam: int = 1,
                          max_len: Optional[int] = None, alpha: float = 1.0,
                          log_prob_fn: Optional[LogProbFn] = None) -> List[List[int]]:
    """
    Greedy decoding for beam == 1, length normalised beam search otherwise.
    """
    assert beam >= 1, f"beam {beam} needs to be at least 1."
    if beam == 1:
        return greedy_decode(params, src_batch, tgt_lang_id, max_len, log_prob_fn)
    return beam_search(params, src_batch, tgt_lang_id, beam, max_len, alpha, log_prob_fn)

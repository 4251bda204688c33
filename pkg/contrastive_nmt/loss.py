"""
Training objective: summed token cross-entropy, in-batch contrastive loss over pooled sentence representations and
their joint combination L = L_mt + lambda * |s| * L_ctl.
"""
import math
from dataclasses import dataclass, asdict
from typing import Dict, Optional, Tuple
import numpy as np
from contrastive_nmt import tensor as T
from contrastive_nmt.corpus import Batch
from contrastive_nmt.errors import NumericError, ShapeError
from contrastive_nmt.model import ModelParams, encode, decode_train
from contrastive_nmt.tensor import Tensor


def mt_loss(logits: Tensor, tgt_output: np.ndarray, tgt_mask: np.ndarray) -> Tensor:
    """
    Sum over unmasked target positions of -log softmax(logits)[gold]. PAD positions contribute zero.
    """
    return T.cross_entropy(logits, tgt_output, tgt_mask)


def contrastive_loss(r_src: Tensor, r_tgt: Tensor, tau: float = 0.1, include_positive: bool = True) -> Tensor:
    """
    In-batch contrastive loss. Row b of :param r_src and row b of :param r_tgt are the positive pair, every other
    target row is a negative:

        loss = sum_b [ logsumexp_k(cos(R_src[b], R_tgt[k]) / tau) - cos(R_src[b], R_tgt[b]) / tau ]

    :param r_src: Pooled source representations (B, d).
    :param r_tgt: Pooled target representations (B, d).
    :param tau: The temperature.
    :param include_positive: Whether the positive is part of the denominator. Without it a batch of one row has no
        negatives and the loss is 0.
    :raise NumericError: If a representation has zero norm.
    """
    assert tau > 0, f"tau {tau} needs to be positive."
    if r_src.shape != r_tgt.shape or r_src.ndim != 2:
        raise ShapeError(f"contrastive_loss: representations {r_src.shape} and {r_tgt.shape}.")
    b = r_src.shape[0]
    logits = T.scale(T.pairwise_cosine(r_src, r_tgt), 1.0 / tau)
    positives = T.diagonal(logits)
    if not include_positive and b == 1:
        return T.scale(T.total(positives), 0.0)
    mask = np.ones((b, b)) if include_positive else 1.0 - np.eye(b)
    return T.total(T.sub(T.logsumexp(logits, axis=1, mask=mask), positives))


def combined_loss(mt: Tensor, ctl: Tensor, lam: float, avg_seq_len: float) -> Tensor:
    """
    mt + lam * avg_seq_len * ctl, exactly mt when lam is 0.
    """
    if lam == 0.0:
        return mt
    return T.add(mt, T.scale(ctl, lam * avg_seq_len))


@dataclass
class LossReport:
    mt_loss: float
    ctl_loss: float
    combined: float
    avg_seq_len: float
    token_count: int
    batch_rows: int
    lam: float = 1.0

    @property
    def mt_per_token(self) -> float:
        return self.mt_loss / max(self.token_count, 1)

    def verify(self, tolerance: float = 1e-9) -> "LossReport":
        """
        Recomputes combined from its parts.
        :raise NumericError: If a value is non-finite or the recomposition does not hold.
        """
        values = {"mt_loss": self.mt_loss, "ctl_loss": self.ctl_loss, "combined": self.combined}
        bad = [name for name, v in values.items() if not math.isfinite(v)]
        if bad:
            raise NumericError(f"Non-finite loss ({', '.join(bad)}): {values}.")
        expected = self.mt_loss + self.lam * self.avg_seq_len * self.ctl_loss
        if abs(expected - self.combined) > tolerance * max(1.0, abs(expected)):
            raise NumericError(f"combined {self.combined} != mt + lambda*|s|*ctl = {expected}.")
        return self

    def to_dict(self) -> Dict:
        return asdict(self)


def joint_objective(params: ModelParams, batch: Batch, lam: float = 1.0, tau: float = 0.1, use_ctl: bool = True,
                    include_positive: bool = True, rng: Optional[np.random.Generator] = None) \
        -> Tuple[Tensor, LossReport]:
    """
    Forward pass of one batch. The target side is encoded by the shared encoder as [LANG_tgt] + tgt + [EOS] to get
    R(tgt). With use_ctl off the contrastive term is still reported, computed off the tape without dropout, and the
    combined loss is the translation loss.
    :return: The differentiable combined loss and its report.
    :raise NumericError: If a loss is non-finite.
    """
    encoded = encode(params, batch, rng)
    logits = decode_train(params, encoded, batch.tgt_input, batch.tgt_mask, rng)
    mt = mt_loss(logits, batch.tgt_output, batch.tgt_mask)
    if use_ctl:
        ctl = contrastive_loss(encoded.pooled, encode(params, batch.target_side(), rng).pooled, tau, include_positive)
    else:
        with T.untaped():
            ctl = contrastive_loss(encoded.pooled, encode(params, batch.target_side()).pooled, tau, include_positive)
    effective_lam = lam if use_ctl else 0.0
    avg_seq_len = batch.avg_target_length
    combined = combined_loss(mt, ctl, effective_lam, avg_seq_len)
    report = LossReport(mt.item(), ctl.item(), combined.item(), avg_seq_len, int(batch.tgt_mask.sum()), len(batch),
                        effective_lam)
    return combined, report.verify()

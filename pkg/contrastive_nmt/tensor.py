"""
Dense float64 tensors with tape based reverse mode automatic differentiation.

Operations executed while a :class:`Tape` is active, and with at least one input requiring a gradient, are recorded
on the tape. ``tape.backward(loss)`` walks the record in reverse and accumulates gradients into the ``grad`` buffer
of every leaf tensor that requires one. The graph is rebuilt on every forward pass.

Broadcasting is limited to adding a bias over the last axis.
"""
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, Union
import numpy as np
from scipy.special import logsumexp as _logsumexp
from contrastive_nmt.errors import ShapeError, NumericError

DTYPE = np.float64

ArrayLike = Union[np.ndarray, Sequence, float]
Backward = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_local = threading.local()


class Tensor:
    """
    Row major float64 array with an optional gradient buffer of the same shape.
    """
    __slots__ = ("data", "grad", "requires_grad", "name", "is_leaf", "__weakref__")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.is_leaf = True

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class TapeRecord:
    op: str
    inputs: Tuple[int, ...]
    output: int
    backward: Backward


class Tape:
    """
    Ordered record of primitive operations. Node ids are assigned on first sight, so every input id precedes the
    id of the output it feeds.
    """
    def __init__(self):
        self.records: List[TapeRecord] = []
        self._ids = {}
        self._nodes: List[Tensor] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def node_id(self, tensor: Tensor) -> int:
        key = id(tensor)
        if key not in self._ids:
            self._ids[key] = len(self._nodes)
            # Holding the reference keeps id() unique for the tape's lifetime.
            self._nodes.append(tensor)
        return self._ids[key]

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward: Backward) -> None:
        ins = tuple(self.node_id(t) for t in inputs)
        self.records.append(TapeRecord(op, ins, self.node_id(output), backward))

    def backward(self, root: Tensor, seed: Optional[np.ndarray] = None) -> None:
        """
        Accumulates d(root)/d(leaf) into ``leaf.grad`` for every leaf requiring a gradient.
        The tape is left intact, running it twice doubles every leaf gradient.
        :param root: The tensor being differentiated, usually a scalar loss.
        :param seed: The upstream gradient of :param root, ones by default.
        """
        if id(root) not in self._ids:
            raise ShapeError(f"{root!r} was not produced on this tape.")
        seed = np.ones_like(root.data) if seed is None else np.asarray(seed, dtype=DTYPE)
        if seed.shape != root.shape:
            raise ShapeError(f"seed shape {seed.shape} does not match root shape {root.shape}.")
        grads = {self._ids[id(root)]: seed}
        for rec in reversed(self.records):
            g = grads.get(rec.output)
            if g is None:
                continue
            for nid, ig in zip(rec.inputs, rec.backward(g)):
                if ig is None or not self._nodes[nid].requires_grad:
                    continue
                grads[nid] = grads[nid] + ig if nid in grads else ig
        for nid, g in grads.items():
            node = self._nodes[nid]
            if node.is_leaf and node.requires_grad:
                node.grad = np.array(g, dtype=DTYPE) if node.grad is None else node.grad + g


def _stack() -> List[Optional[Tape]]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Optional[Tape]:
    tapes = _stack()
    return tapes[-1] if tapes else None


@contextmanager
def untaped():
    """
    Operations inside record nothing on the enclosing tape; their results carry no gradient.
    """
    _stack().append(None)
    try:
        yield
    finally:
        _stack().pop()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, inputs: Sequence[Tensor], data: np.ndarray, backward: Backward) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        tape.record(op, inputs, out, backward)
    return out


def _sum_to_bias(g: np.ndarray, n: int) -> np.ndarray:
    return g.reshape(-1, n).sum(axis=0)


def add(a: Tensor, b: Tensor) -> Tensor:
    """
    a + b for equal shapes, or a bias b of shape (n,) added over the last axis of a.
    """
    if a.shape == b.shape:
        return _result("add", (a, b), a.data + b.data, lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return _result("add_bias", (a, b), a.data + b.data, lambda g: (g, _sum_to_bias(g, b.shape[0])))
    raise ShapeError(f"add: shapes {a.shape} and {b.shape} are incompatible.")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ.")
    return _result("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result("scale", (a,), a.data * c, lambda g: (g * c,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ.")
    return _result("mul", (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def relu(x: Tensor) -> Tensor:
    active = x.data > 0
    return _result("relu", (x,), np.where(active, x.data, 0.0), lambda g: (g * active,))


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """
    Inverted dropout. Identity when :param rng is None (evaluation) or the rate is zero.
    """
    assert 0.0 <= rate < 1.0, f"dropout rate {rate} needs to be in [0, 1)."
    if rng is None or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _result("dropout", (x,), x.data * keep, lambda g: (g * keep,))


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """
    Replaces entries where :param mask is True with a constant, their gradient is zero.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(f"masked_fill: mask shape {mask.shape} does not match {x.shape}.")
    return _result("masked_fill", (x,), np.where(mask, value, x.data), lambda g: (np.where(mask, 0.0, g),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot reshape {original} into {tuple(shape)}.") from e
    return _result("reshape", (x,), data, lambda g: (g.reshape(original),))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} are not a permutation for shape {x.shape}.")
    inverse = tuple(np.argsort(axes))
    return _result("transpose", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    assert tensors, "concat needs at least one tensor."
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} along axis {axis}.") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result("concat", tensors, data, lambda g: tuple(np.split(g, bounds, axis=axis)))


def diagonal(x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeError(f"diagonal: expected a square matrix, got {x.shape}.")
    n = x.shape[0]

    def backward(g):
        out = np.zeros((n, n))
        out[np.arange(n), np.arange(n)] = g
        return (out,)
    return _result("diagonal", (x,), np.diagonal(x.data).copy(), backward)


def total(x: Tensor) -> Tensor:
    """
    Sum of every entry, as a scalar.
    """
    shape = x.shape
    return _result("total", (x,), np.asarray(x.data.sum()), lambda g: (np.full(shape, float(g)),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    (..., m, k) @ (k, n) -> (..., m, n). Leading axes of a are treated as extra rows.
    """
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible.")
    k, n = b.shape

    def backward(g):
        da = g @ b.data.T
        db = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        return da, db
    return _result("matmul", (a, b), a.data @ b.data, backward)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """
    Batched matrix product (..., m, k) @ (..., k, n) with identical leading axes.
    """
    if a.ndim < 3 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"bmm: shapes {a.shape} and {b.shape} are incompatible.")

    def backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g
    return _result("bmm", (a, b), a.data @ b.data, backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} is invalid for shape {x.shape}.")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return _result("softmax", (x,), y, lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """
    Normalises the last axis to zero mean and unit (population) variance, then applies gain and bias.
    """
    n = x.shape[-1]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last axis of {x.shape}.")
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    rstd = 1.0 / np.sqrt((centred ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * rstd

    def backward(g):
        dxhat = g * gain.data
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, _sum_to_bias(g * xhat, n), _sum_to_bias(g, n)
    return _result("layer_norm", (x, gain, bias), xhat * gain.data + bias.data, backward)


def logsumexp(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    log(sum(exp(x))) along :param axis, restricted to entries where :param mask is True.
    """
    b = np.ones(x.shape) if mask is None else np.asarray(mask, dtype=DTYPE)
    if b.shape != x.shape:
        raise ShapeError(f"logsumexp: mask shape {b.shape} does not match {x.shape}.")
    out = _logsumexp(x.data, axis=axis, b=b)
    weights = b * np.exp(x.data - np.expand_dims(out, axis))
    return _result("logsumexp", (x,), out, lambda g: (weights * np.expand_dims(g, axis),))


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """
    Summed negative log likelihood of integer :param targets under softmax(:param logits) over masked-in positions.
    :param logits: Shape (..., V).
    :param targets: Integer ids with the leading shape of :param logits.
    :param mask: 1 on positions that count, 0 on padding.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=DTYPE)
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape}, targets {targets.shape}, mask {mask.shape}.")
    lse = _logsumexp(logits.data, axis=-1)
    gold = np.take_along_axis(logits.data, targets[..., None], axis=-1)[..., 0]
    loss = float(((lse - gold) * mask).sum())

    def backward(g):
        probs = np.exp(logits.data - lse[..., None])
        np.put_along_axis(probs, targets[..., None], np.take_along_axis(probs, targets[..., None], -1) - 1.0, -1)
        return (probs * (mask * float(g))[..., None],)
    return _result("cross_entropy", (logits,), np.asarray(loss), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """
    Gathers rows of :param table, the backward pass scatter-adds into them.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-d, got {table.shape}.")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids outside [0, {table.shape[0]}).")

    def backward(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (dt,)
    return _result("embedding", (table,), table.data[ids], backward)


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """
    Mean of (B, S, d) states over positions where the (B, S) mask is 1.
    """
    mask = np.asarray(mask, dtype=DTYPE)
    if x.ndim != 3 or mask.shape != x.shape[:2]:
        raise ShapeError(f"masked_mean: states {x.shape} and mask {mask.shape} are incompatible.")
    counts = mask.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise ShapeError("masked_mean: a row has no unmasked position.")
    weights = (mask / counts)[..., None]
    return _result("masked_mean", (x,), (x.data * weights).sum(axis=1),
                   lambda g: (g[:, None, :] * weights,))


def _unit_rows(x: np.ndarray, label: str) -> Tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise NumericError(f"{label}: cosine similarity is undefined for a zero-norm vector.")
    return x / norms, norms


def _unit_backward(d_unit: np.ndarray, unit: np.ndarray, norms: np.ndarray) -> np.ndarray:
    return (d_unit - unit * (d_unit * unit).sum(axis=-1, keepdims=True)) / norms


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """
    Row-wise cosine similarity of two (N, d) matrices, shape (N,).
    """
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"cosine_similarity: shapes {a.shape} and {b.shape}.")
    an, a_norm = _unit_rows(a.data, "cosine_similarity")
    bn, b_norm = _unit_rows(b.data, "cosine_similarity")

    def backward(g):
        g = g[:, None]
        return _unit_backward(g * bn, an, a_norm), _unit_backward(g * an, bn, b_norm)
    return _result("cosine_similarity", (a, b), (an * bn).sum(axis=-1), backward)


def pairwise_cosine(a: Tensor, b: Tensor) -> Tensor:
    """
    Cosine similarity of every row of a (N, d) with every row of b (M, d), shape (N, M).
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_cosine: shapes {a.shape} and {b.shape}.")
    an, a_norm = _unit_rows(a.data, "pairwise_cosine")
    bn, b_norm = _unit_rows(b.data, "pairwise_cosine")

    def backward(g):
        return _unit_backward(g @ bn, an, a_norm), _unit_backward(g.T @ an, bn, b_norm)
    return _result("pairwise_cosine", (a, b), an @ bn.T, backward)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale_ = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale_)


def numerical_gradient(fn: Callable[..., Tensor], inputs: Sequence[Tensor], index: int, eps: float = 1e-4) \
        -> np.ndarray:
    """
    Central finite differences of the scalar fn(*inputs) with respect to inputs[index].
    """
    x = inputs[index]
    grad = np.zeros_like(x.data)
    flat, gflat = x.data.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        up = fn(*inputs).item()
        flat[i] = original - eps
        down = fn(*inputs).item()
        flat[i] = original
        gflat[i] = (up - down) / (2 * eps)
    return grad


def gradient_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-4) -> float:
    """
    Compares tape gradients of the scalar fn(*inputs) against central finite differences.
    :param fn: A pure function of :param inputs returning a scalar tensor.
    :param inputs: Tensors, those with requires_grad set are checked.
    :param eps: The finite difference step.
    :return: The largest relative error over the checked inputs.
    """
    checked = [i for i, t in enumerate(inputs) if t.requires_grad]
    assert checked, "gradient_check needs at least one input with requires_grad=True."
    for t in inputs:
        t.zero_grad()
    with Tape() as tape:
        out = fn(*inputs)
    assert out.size == 1, f"gradient_check needs a scalar output, got shape {out.shape}."
    tape.backward(out)
    errors = []
    for i in checked:
        analytic = inputs[i].grad if inputs[i].grad is not None else np.zeros_like(inputs[i].data)
        errors.append(relative_error(analytic, numerical_gradient(fn, inputs, i, eps)))
    return max(errors)

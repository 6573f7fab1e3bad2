"""Dense float64 tensors with reverse-mode differentiation, plus the losses.

The kernel covers exactly what the tiny policy needs: elementwise arithmetic,
matmul, row gather/stack, column slicing, log-softmax, and a few reductions.
Tensors wrap numpy arrays; every public operation checks its output for
NaN/Inf. Gradient tracking is thread-local so sampling workers can run with
tracing disabled while the trainer owns the graph.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np


class NumericError(ArithmeticError):
    """A public operation produced a non-finite value."""


class ShapeMismatchError(ValueError):
    pass


class ZeroNormError(ValueError):
    pass


class NonPositiveTauError(ValueError):
    pass


class LabelOutOfRangeError(IndexError):
    pass


class GraphCycleError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


_STATE = threading.local()


def _tracing() -> bool:
    return not getattr(_STATE, "no_grad", False)


class no_grad:
    """Context manager disabling graph construction on the current thread."""

    def __enter__(self):
        self._prev = getattr(_STATE, "no_grad", False)
        _STATE.no_grad = True
        return self

    def __exit__(self, *exc):
        _STATE.no_grad = self._prev
        return False


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by {op}")
    return arr


class Tensor:
    """A float64 array node in a reverse-mode computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and arrays are wrapped as constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data: np.ndarray, op: str, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(_check_finite(np.asarray(data, dtype=np.float64), op))
    if _tracing() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor) -> None:
    """Populate .grad on every parameter reachable from a scalar loss."""
    if loss.data.shape != ():
        raise ShapeMismatchError(f"backward needs a scalar, got shape {loss.data.shape}")
    order: list[Tensor] = []
    state: dict[int, int] = {}  # id -> 0 visiting, 1 done
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            state[id(node)] = 1
            order.append(node)
            continue
        mark = state.get(id(node))
        if mark == 1:
            continue
        if mark == 0:
            raise GraphCycleError("cycle detected in computation graph")
        state[id(node)] = 0
        stack.append((node, True))
        for parent in node._parents:
            if state.get(id(parent)) != 1:
                stack.append((parent, False))
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            _accumulate(node, g)
            continue
        for parent, pg in node._backward(g):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64)
    # leftover grads belong to leaves reached but not processed (never happens:
    # every node is in order), so nothing else to do


# --- primitives ---------------------------------------------------------------


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if shape == ():
        return np.sum(g)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _node(a.data + b.data, "add", (a, b),
                 lambda g: ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _node(a.data - b.data, "sub", (a, b),
                 lambda g: ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    return _node(a.data * b.data, "mul", (a, b),
                 lambda g: ((a, _unbroadcast(g * b.data, a.shape)),
                            (b, _unbroadcast(g * a.data, b.shape))))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "div")
    return _node(a.data / b.data, "div", (a, b),
                 lambda g: ((a, _unbroadcast(g / b.data, a.shape)),
                            (b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, "neg", (a,), lambda g: ((a, -g),))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(a.data)
    return _node(out_data, "log", (a,), lambda g: ((a, g / a.data),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)
    return _node(out_data, "exp", (a,), lambda g: ((a, g * out_data),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out_data = np.sqrt(a.data)
    return _node(out_data, "sqrt", (a,), lambda g: ((a, g / (2.0 * out_data)),))


def minimum(a, b) -> Tensor:
    """Elementwise min; the subgradient follows the selected branch."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "minimum")
    take_a = a.data <= b.data
    return _node(np.where(take_a, a.data, b.data), "minimum", (a, b),
                 lambda g: ((a, _unbroadcast(g * take_a, a.shape)),
                            (b, _unbroadcast(g * ~take_a, b.shape))))


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "maximum")
    take_a = a.data >= b.data
    return _node(np.where(take_a, a.data, b.data), "maximum", (a, b),
                 lambda g: ((a, _unbroadcast(g * take_a, a.shape)),
                            (b, _unbroadcast(g * ~take_a, b.shape))))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ShapeMismatchError("matmul supports 1-D and 2-D operands only")
    if a.shape[-1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")

    def backward_fn(g):
        ga: np.ndarray
        gb: np.ndarray
        if a.data.ndim == 1 and b.data.ndim == 1:
            ga = g * b.data
            gb = g * a.data
        elif a.data.ndim == 2 and b.data.ndim == 1:
            ga = np.outer(g, b.data)
            gb = a.data.T @ g
        elif a.data.ndim == 1 and b.data.ndim == 2:
            ga = g @ b.data.T
            gb = np.outer(a.data, g)
        else:
            ga = g @ b.data.T
            gb = a.data.T @ g
        return ((a, ga), (b, gb))

    return _node(a.data @ b.data, "matmul", (a, b), backward_fn)


def dot(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or b.data.ndim != 1 or a.shape != b.shape:
        raise ShapeMismatchError(f"dot needs equal-length vectors, got {a.shape} and {b.shape}")
    return matmul(a, b)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatchError("transpose expects a matrix")
    return _node(a.data.T, "transpose", (a,), lambda g: ((a, g.T),))


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.sum(), "sum", (a,), lambda g: ((a, np.broadcast_to(g, a.shape).copy()),))


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return _node(a.data.mean(), "mean", (a,),
                 lambda g: ((a, np.broadcast_to(g / n, a.shape).copy()),))


def sum_axis(a, axis: int) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatchError("sum_axis expects a matrix")
    return _node(a.data.sum(axis=axis), "sum_axis", (a,),
                 lambda g: ((a, np.expand_dims(g, axis).repeat(a.shape[axis], axis=axis)),))


def mean_axis(a, axis: int) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeMismatchError("mean_axis expects a matrix")
    n = a.shape[axis]
    return _node(a.data.mean(axis=axis), "mean_axis", (a,),
                 lambda g: ((a, np.expand_dims(g / n, axis).repeat(n, axis=axis)),))


def gather_rows(mat, indices: Sequence[int]) -> Tensor:
    mat = as_tensor(mat)
    if mat.data.ndim != 2:
        raise ShapeMismatchError("gather_rows expects a matrix")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise ShapeMismatchError("gather_rows needs a non-empty 1-D index list")
    if idx.min() < 0 or idx.max() >= mat.shape[0]:
        raise ShapeMismatchError(f"row index out of range for {mat.shape}")

    def backward_fn(g):
        gm = np.zeros_like(mat.data)
        np.add.at(gm, idx, g)
        return ((mat, gm),)

    return _node(mat.data[idx], "gather_rows", (mat,), backward_fn)


def take_at(vec, index: int) -> Tensor:
    vec = as_tensor(vec)
    if vec.data.ndim != 1:
        raise ShapeMismatchError("take_at expects a vector")
    if not 0 <= index < vec.shape[0]:
        raise LabelOutOfRangeError(f"index {index} out of range for length {vec.shape[0]}")

    def backward_fn(g):
        gv = np.zeros_like(vec.data)
        gv[index] = g
        return ((vec, gv),)

    return _node(vec.data[index], "take_at", (vec,), backward_fn)


def take_indices(vec, indices: Sequence[int]) -> Tensor:
    vec = as_tensor(vec)
    if vec.data.ndim != 1:
        raise ShapeMismatchError("take_indices expects a vector")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= vec.shape[0]):
        raise ShapeMismatchError(f"index out of range for length {vec.shape[0]}")

    def backward_fn(g):
        gv = np.zeros_like(vec.data)
        np.add.at(gv, idx, g)
        return ((vec, gv),)

    return _node(vec.data[idx], "take_indices", (vec,), backward_fn)


def take_diag(mat) -> Tensor:
    mat = as_tensor(mat)
    if mat.data.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ShapeMismatchError("take_diag expects a square matrix")

    def backward_fn(g):
        gm = np.zeros_like(mat.data)
        np.fill_diagonal(gm, g)
        return ((mat, gm),)

    return _node(np.diagonal(mat.data).copy(), "take_diag", (mat,), backward_fn)


def stack_rows(vectors: Sequence) -> Tensor:
    tensors = [as_tensor(v) for v in vectors]
    if not tensors:
        raise ShapeMismatchError("stack_rows needs at least one vector")
    width = tensors[0].shape
    if any(t.data.ndim != 1 or t.shape != width for t in tensors):
        raise ShapeMismatchError("stack_rows needs equal-length vectors")

    def backward_fn(g):
        return tuple((t, g[i]) for i, t in enumerate(tensors))

    return _node(np.stack([t.data for t in tensors]), "stack_rows", tensors, backward_fn)


def concat_cols(mats: Sequence) -> Tensor:
    tensors = [as_tensor(m) for m in mats]
    if not tensors or any(t.data.ndim != 2 for t in tensors):
        raise ShapeMismatchError("concat_cols needs matrices")
    rows = tensors[0].shape[0]
    if any(t.shape[0] != rows for t in tensors):
        raise ShapeMismatchError("concat_cols needs equal row counts")
    widths = [t.shape[1] for t in tensors]
    offsets = np.cumsum([0] + widths)

    def backward_fn(g):
        return tuple((t, g[:, offsets[i]:offsets[i + 1]]) for i, t in enumerate(tensors))

    return _node(np.concatenate([t.data for t in tensors], axis=1), "concat_cols",
                 tensors, backward_fn)


def col_slice(mat, start: int, stop: int) -> Tensor:
    mat = as_tensor(mat)
    if mat.data.ndim != 2 or not (0 <= start < stop <= mat.shape[1]):
        raise ShapeMismatchError(f"bad column slice [{start}:{stop}] for {mat.shape}")

    def backward_fn(g):
        gm = np.zeros_like(mat.data)
        gm[:, start:stop] = g
        return ((mat, gm),)

    return _node(mat.data[:, start:stop].copy(), "col_slice", (mat,), backward_fn)


def scale_rows(mat, vec) -> Tensor:
    """Multiply row i of a matrix by vec[i]."""
    mat, vec = as_tensor(mat), as_tensor(vec)
    if mat.data.ndim != 2 or vec.data.ndim != 1 or mat.shape[0] != vec.shape[0]:
        raise ShapeMismatchError(f"scale_rows: {mat.shape} vs {vec.shape}")
    return _node(mat.data * vec.data[:, None], "scale_rows", (mat, vec),
                 lambda g: ((mat, g * vec.data[:, None]), (vec, (g * mat.data).sum(axis=1))))


def log_softmax(x, axis: int = -1) -> Tensor:
    """Log-softmax with max subtraction, over a vector or matrix rows."""
    x = as_tensor(x)
    if x.data.ndim not in (1, 2):
        raise ShapeMismatchError("log_softmax expects a vector or matrix")
    ax = axis if axis >= 0 else x.data.ndim - 1
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    ls = shifted - np.log(np.exp(shifted).sum(axis=ax, keepdims=True))

    def backward_fn(g):
        softmax = np.exp(ls)
        return ((x, g - softmax * g.sum(axis=ax, keepdims=True)),)

    return _node(ls, "log_softmax", (x,), backward_fn)


def softmax(x, axis: int = -1) -> Tensor:
    return exp(log_softmax(x, axis=axis))


# --- losses ---------------------------------------------------------------------


def cosine_similarity(u, v) -> Tensor:
    """z_u . z_v / (|z_u| |z_v|); raises ZeroNormError on a zero vector."""
    u, v = as_tensor(u), as_tensor(v)
    if u.data.ndim != 1 or v.data.ndim != 1 or u.shape != v.shape:
        raise ShapeMismatchError(f"cosine needs equal-length vectors, got {u.shape}, {v.shape}")
    nu = float(np.linalg.norm(u.data))
    nv = float(np.linalg.norm(v.data))
    if nu == 0.0 or nv == 0.0:
        raise ZeroNormError("cosine similarity of a zero vector is undefined")
    return div(dot(u, v), mul(sqrt(dot(u, u)), sqrt(dot(v, v))))


@dataclass
class AlignmentBatch:
    """Paired pooled embeddings for one contrastive batch."""

    visual: Tensor
    text: Tensor
    tau: float

    def __post_init__(self):
        self.visual = as_tensor(self.visual)
        self.text = as_tensor(self.text)
        if self.visual.data.ndim != 2 or self.text.data.ndim != 2:
            raise ShapeMismatchError("alignment batch needs B x d matrices")
        if self.visual.shape != self.text.shape:
            raise ShapeMismatchError(
                f"visual {self.visual.shape} and text {self.text.shape} shapes differ")
        if self.visual.shape[0] < 1 or self.visual.shape[1] < 1:
            raise ShapeMismatchError("alignment batch needs B >= 1 and d >= 1")
        if self.tau <= 0:
            raise NonPositiveTauError(f"tau must be positive, got {self.tau}")
        for name, mat in (("visual", self.visual), ("text", self.text)):
            norms = np.linalg.norm(mat.data, axis=1)
            if np.any(norms == 0.0):
                raise ZeroNormError(f"zero-norm row in {name} embeddings")


def _row_normalize(mat: Tensor) -> Tensor:
    norms = sqrt(sum_axis(mul(mat, mat), axis=1))
    return scale_rows(mat, div(1.0, norms))


def infonce_align(batch: AlignmentBatch) -> Tensor:
    """Contrastive alignment loss over cosine similarities.

    For each row i the positive is the paired text row; all text rows in the
    batch act as candidates. Mean of -log softmax(S_i/tau)[i] over rows.
    """
    sims = matmul(_row_normalize(batch.visual), transpose(_row_normalize(batch.text)))
    scaled = mul(sims, 1.0 / batch.tau)
    return neg(mean_all(take_diag(log_softmax(scaled, axis=1))))


def cross_entropy(logits, label: int) -> Tensor:
    """-log softmax(logits)[label], stabilized via log-sum-exp."""
    logits = as_tensor(logits)
    if logits.data.ndim != 1 or logits.shape[0] < 2:
        raise ShapeMismatchError("cross_entropy expects a vector of >= 2 logits")
    if not 0 <= label < logits.shape[0]:
        raise LabelOutOfRangeError(f"label {label} out of range for {logits.shape[0]} classes")
    return neg(take_at(log_softmax(logits), label))


def total_loss(l_diag, l_logic, l_align, lambda_logic: float, lambda_align: float):
    """Weighted sum of the three training signals; works on floats or tensors."""
    if lambda_logic < 0 or lambda_align < 0:
        raise ValueError("loss weights must be non-negative")
    return l_diag + lambda_logic * l_logic + lambda_align * l_align


# --- gradient checking ------------------------------------------------------------


def grad_check(f: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor],
               epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error per coordinate is |a - n| / max(1e-8, |a| + |n|); the analytic side
    comes from backward(), the numeric side from (f(x+eps) - f(x-eps)) / 2 eps.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    for p in params:
        p.zero_grad()
    loss = f(params)
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                hi = float(f(params).data)
                flat[i] = orig - epsilon
                lo = float(f(params).data)
                flat[i] = orig
                numeric = (hi - lo) / (2.0 * epsilon)
                ai = a.reshape(-1)[i]
                err = abs(ai - numeric) / max(1e-8, abs(ai) + abs(numeric))
                worst = max(worst, err)
    return worst


# --- checkpoints --------------------------------------------------------------------


_MAGIC = b"LTRK"
_VERSION = 1


def save_tensors(path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named float64 arrays to a flat binary container, sorted by name."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype="<f8", order="C")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise CheckpointError("bad magic bytes, not a checkpoint file")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    offset = 8
    while offset < len(blob):
        try:
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
            offset += 8 * count
        except (struct.error, ValueError) as exc:
            raise CheckpointError(f"truncated checkpoint record: {exc}") from exc
        if arr.size != count:
            raise CheckpointError("truncated checkpoint payload")
        out[name] = arr.reshape(dims).astype(np.float64)
    return out

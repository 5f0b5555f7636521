"""Dense tensors with reverse-mode automatic differentiation.

The op set is exactly what the fusion head needs: matrix products (plain and
per-head batched), bias/residual adds, ReLU, dropout, row softmax, layer norm,
dilated causal 1-d convolution, temporal mean pooling, l2 normalization, head
split/merge, and two fused loss kernels. Training runs in float32; gradient
checking runs the identical graph in float64.

Gradients of interior nodes live only for the duration of a backward pass;
leaf tensors accumulate into their ``grad`` slot until ``zero_grad``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import (
    ContractError,
    DegenerateVectorError,
    EmptySequenceError,
    LabelError,
    ParameterError,
    ShapeMismatchError,
)

LAYER_NORM_EPS = 1e-5
L2_NORM_EPS = 1e-8


class Tensor:
    """A dense float array plus an optional gradient slot.

    Leaf tensors created with ``requires_grad=True`` carry a zeroed ``grad``
    of the same shape; backward passes accumulate (+=) into it. Tensors
    produced by ops remember their parents and how to push a gradient back.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float32)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if (requires_grad and not _parents) else None
        self.op = op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, dtype=np.float32) -> Tensor:
    """Create a leaf tensor, copying ``data`` into the requested dtype."""
    return Tensor(np.array(data, dtype=dtype), requires_grad=requires_grad)


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; ops return detached results."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _node(data: np.ndarray, parents: tuple, op: str, backward: Callable) -> Tensor:
    if not isinstance(data, np.ndarray):
        data = np.asarray(data)  # 0-d results come back as numpy scalars
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, op, parents, backward)
    return Tensor(data, False, op)


def _topo_order(root: Tensor) -> list[Tensor]:
    """Parents-before-children ordering of the graph below ``root``."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Reverse-mode sweep from a scalar ``root``.

    Interior gradients are kept in a scratch map so a second backward from a
    different root over a shared subgraph stays correct; leaves accumulate
    into their persistent ``grad``.
    """
    if root.data.size != 1:
        raise ContractError(f"backward requires a scalar root, got shape {root.data.shape}")
    if not root.requires_grad:
        return
    order = _topo_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        deltas = node._backward(g)
        for parent, delta in zip(node._parents, deltas):
            if delta is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + delta
            else:
                grads[key] = delta


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        if p.requires_grad:
            p.grad = np.zeros_like(p.data)


class DropoutRng:
    """Counter-keyed mask source owned by a training run.

    Sequential masks depend only on ``(seed, draw index)`` and keyed masks on
    ``(seed, sample serial, site)``, so a run replays bitwise given the same
    seed and sample order, independent of batching layout.
    """

    MAX_SITES = 1024  # dropout sites per sample forward

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.draws = 0

    def _mask(self, stream: int, shape: tuple, keep_prob: float) -> np.ndarray:
        key = np.array([self.seed, stream], dtype=np.uint64)
        gen = np.random.Generator(np.random.Philox(key=key))
        return gen.random(shape) < keep_prob

    def next_mask(self, shape: tuple, keep_prob: float) -> np.ndarray:
        mask = self._mask(self.draws, shape, keep_prob)
        self.draws += 1
        return mask

    def mask_keyed(self, sample_serial: int, site: int, shape: tuple,
                   keep_prob: float) -> np.ndarray:
        if not 0 <= site < self.MAX_SITES:
            raise ParameterError(f"dropout site {site} outside [0, {self.MAX_SITES})")
        return self._mask((sample_serial + 1) * self.MAX_SITES + site, shape, keep_prob)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _node(out, (a, b), "matmul", bwd)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over shared leading axes: (...,M,K) @ (...,K,N) -> (...,M,N)."""
    if (a.ndim < 3 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]
            or a.shape[-1] != b.shape[-2]):
        raise ShapeMismatchError(f"bmm: incompatible shapes {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.swapaxes(-1, -2), a.data.swapaxes(-1, -2) @ g

    return _node(out, (a, b), "bmm", bwd)


def add(x: Tensor, y: Tensor) -> Tensor:
    """Same-shape add, or a 1-d bias broadcast over the rows of ``x``."""
    if x.shape == y.shape:
        out = x.data + y.data

        def bwd(g):
            return g, g

    elif y.ndim == 1 and x.ndim >= 2 and x.shape[-1] == y.shape[0]:
        out = x.data + y.data
        lead = tuple(range(x.ndim - 1))

        def bwd(g):
            return g, g.sum(axis=lead)

    else:
        raise ShapeMismatchError(f"add: incompatible shapes {x.shape} + {y.shape}")
    return _node(out, (x, y), "add", bwd)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = x.data * c

    def bwd(g):
        return (g * c,)

    return _node(out, (x,), "scale", bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.data.dtype, copy=False)

    def bwd(g):
        return (g * mask,)

    return _node(out, (x,), "relu", bwd)


def dropout(x: Tensor, p: float, train: bool, rng: DropoutRng | None = None) -> Tensor:
    """Inverted dropout; identity when ``train`` is false or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ParameterError("train-mode dropout requires the run's DropoutRng")
    keep = 1.0 - p
    mult = rng.next_mask(x.shape, keep).astype(x.data.dtype) / np.asarray(keep, dtype=x.data.dtype)
    return dropout_masked(x, mult)


def dropout_masked(x: Tensor, mult: np.ndarray) -> Tensor:
    """Dropout with a caller-built multiplier (mask already scaled by 1/keep)."""
    if mult.shape != x.shape:
        raise ShapeMismatchError(f"dropout multiplier shape {mult.shape} vs input {x.shape}")
    out = x.data * mult

    def bwd(g):
        return (g * mult,)

    return _node(out, (x,), "dropout", bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilized by max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _node(s, (x,), "softmax_rows", bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Per-row normalization over the feature axis, then affine gamma/beta."""
    if x.ndim != 2:
        raise ShapeMismatchError(f"layer_norm expects a TxD input, got shape {x.shape}")
    d = x.shape[-1]
    if d < 2:
        raise ParameterError(f"layer_norm requires feature dim >= 2, got {d}")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatchError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} vs D={d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta

    return _node(out, (x, gamma, beta), "layer_norm", bwd)


def _causal_cols(xpad: np.ndarray, t: int, k: int, dilation: int) -> np.ndarray:
    """Stacked im2col view: (S, T+P, C) -> (S*T, k*C) gather of causal taps."""
    s, _, c = xpad.shape
    view = as_strided(
        xpad,
        shape=(s, t, k, c),
        strides=(xpad.strides[0], xpad.strides[1], dilation * xpad.strides[1],
                 xpad.strides[2]),
    )
    return np.ascontiguousarray(view).reshape(s * t, k * c)


def conv1d_causal(x: Tensor, w: Tensor, b: Tensor, dilation: int,
                  segments: int = 1) -> Tensor:
    """Causal dilated 1-d convolution.

    ``x`` is TxC_in, ``w`` is kxC_inxC_out, ``b`` is C_out. The input is
    left-padded with (k-1)*dilation zero frames so output frame t sees only
    input frames <= t and the output keeps length T. With ``segments`` = S,
    the rows of ``x`` are S independent equal-length sequences stacked along
    time, each padded and convolved separately (one fused matmul).
    """
    if not isinstance(dilation, int) or dilation < 1:
        raise ParameterError(f"dilation must be a positive integer, got {dilation}")
    if w.ndim != 3:
        raise ShapeMismatchError(f"conv weight must be k x C_in x C_out, got shape {w.shape}")
    k, c_in, c_out = w.shape
    if k < 1:
        raise ParameterError(f"kernel size must be >= 1, got {k}")
    if x.ndim != 2 or x.shape[1] != c_in:
        raise ShapeMismatchError(f"conv input shape {x.shape} vs weight C_in {c_in}")
    if b.shape != (c_out,):
        raise ShapeMismatchError(f"conv bias shape {b.shape} vs C_out {c_out}")
    if segments < 1 or x.shape[0] % segments:
        raise ShapeMismatchError(
            f"{x.shape[0]} rows do not split into {segments} equal segments")
    s = segments
    t = x.shape[0] // s
    pad = (k - 1) * dilation
    xpad = np.zeros((s, t + pad, c_in), dtype=x.data.dtype)
    xpad[:, pad:, :] = x.data.reshape(s, t, c_in)
    cols = _causal_cols(xpad, t, k, dilation)
    w2 = w.data.reshape(k * c_in, c_out)
    out = cols @ w2 + b.data

    def bwd(g):
        dcols = (g @ w2.T).reshape(s, t, k, c_in)
        dxpad = np.zeros_like(xpad)
        for j in range(k):
            dxpad[:, j * dilation:j * dilation + t, :] += dcols[:, :, j, :]
        dw = (_causal_cols(xpad, t, k, dilation).T @ g).reshape(k, c_in, c_out)
        return dxpad[:, pad:, :].reshape(s * t, c_in), dw, g.sum(axis=0)

    return _node(out, (x, w, b), "conv1d_causal", bwd)


def mean_pool_time(x: Tensor) -> Tensor:
    """Mean over the time axis of a TxD sequence."""
    if x.ndim != 2 or x.shape[0] < 1:
        raise EmptySequenceError(f"mean_pool_time needs at least one frame, got shape {x.shape}")
    t = x.shape[0]
    out = x.data.mean(axis=0)

    def bwd(g):
        return (np.broadcast_to(g / t, x.shape),)

    return _node(out, (x,), "mean_pool_time", bwd)


def l2_normalize(x: Tensor, eps: float = L2_NORM_EPS) -> Tensor:
    if x.ndim != 1:
        raise ShapeMismatchError(f"l2_normalize expects a vector, got shape {x.shape}")
    n = float(np.linalg.norm(x.data))
    if n <= eps:
        raise DegenerateVectorError(f"cannot normalize vector with norm {n:.3e}")
    y = x.data / n

    def bwd(g):
        return ((g - y * float(g @ y)) / n,)

    return _node(y, (x,), "l2_normalize", bwd)


def linear_vec(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map of a vector: x @ w + b with x (D_in,), w (D_in, D_out)."""
    if x.ndim != 1 or w.ndim != 2 or x.shape[0] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatchError(f"linear_vec: shapes x{x.shape} w{w.shape} b{b.shape}")
    out = x.data @ w.data + b.data

    def bwd(g):
        return w.data @ g, np.outer(x.data, g), g

    return _node(out, (x, w, b), "linear_vec", bwd)


def concat_vec(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 1 or b.ndim != 1:
        raise ShapeMismatchError(f"concat_vec expects vectors, got {a.shape} and {b.shape}")
    na = a.shape[0]
    out = np.concatenate([a.data, b.data])

    def bwd(g):
        return g[:na], g[na:]

    return _node(out, (a, b), "concat_vec", bwd)


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    """Stack same-length vectors into a matrix, one per row."""
    if not rows:
        raise EmptySequenceError("stack_rows needs at least one row")
    d = rows[0].shape
    for r in rows:
        if r.ndim != 1 or r.shape != d:
            raise ShapeMismatchError(f"stack_rows: inconsistent row shapes {d} vs {r.shape}")
    out = np.stack([r.data for r in rows])

    def bwd(g):
        return tuple(g[i] for i in range(len(rows)))

    return _node(out, tuple(rows), "stack_rows", bwd)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """TxD -> heads x T x (D/heads)."""
    if x.ndim != 2 or x.shape[1] % heads != 0:
        raise ShapeMismatchError(f"split_heads: shape {x.shape} not divisible into {heads} heads")
    t, d = x.shape
    hd = d // heads
    out = np.ascontiguousarray(x.data.reshape(t, heads, hd).transpose(1, 0, 2))

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(1, 0, 2)).reshape(t, d),)

    return _node(out, (x,), "split_heads", bwd)


def merge_heads(x: Tensor) -> Tensor:
    """heads x T x hd -> T x (heads*hd)."""
    if x.ndim != 3:
        raise ShapeMismatchError(f"merge_heads expects 3-d input, got shape {x.shape}")
    heads, t, hd = x.shape
    out = np.ascontiguousarray(x.data.transpose(1, 0, 2)).reshape(t, heads * hd)

    def bwd(g):
        return (np.ascontiguousarray(g.reshape(t, heads, hd).transpose(1, 0, 2)),)

    return _node(out, (x,), "merge_heads", bwd)


def swap_last2(x: Tensor) -> Tensor:
    out = x.data.swapaxes(-1, -2)

    def bwd(g):
        return (g.swapaxes(-1, -2),)

    return _node(out, (x,), "swap_last2", bwd)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(x.shape),)

    return _node(out, (x,), "reshape", bwd)


def transpose_axes(x: Tensor, axes: tuple) -> Tensor:
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _node(out, (x,), "transpose_axes", bwd)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 2 or not 0 <= start < stop <= x.shape[0]:
        raise ShapeMismatchError(f"slice_rows [{start}, {stop}) of shape {x.shape}")
    out = x.data[start:stop]

    def bwd(g):
        dx = np.zeros_like(x.data)
        dx[start:stop] = g
        return (dx,)

    return _node(out, (x,), "slice_rows", bwd)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows by (unique) index; backward scatters into place."""
    idx = np.asarray(idx)
    out = x.data[idx]

    def bwd(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        return (dx,)

    return _node(out, (x,), "gather_rows", bwd)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack 2-d blocks along the row axis."""
    if not parts:
        raise EmptySequenceError("concat_rows needs at least one block")
    cols = parts[0].shape[-1]
    for p in parts:
        if p.ndim != 2 or p.shape[1] != cols:
            raise ShapeMismatchError(f"concat_rows: block {p.shape} vs {cols} columns")
    if len(parts) == 1:
        return parts[0]
    out = np.concatenate([p.data for p in parts], axis=0)
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def bwd(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _node(out, tuple(parts), "concat_rows", bwd)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeMismatchError(f"concat_cols: shapes {a.shape} and {b.shape}")
    na = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def bwd(g):
        return g[:, :na], g[:, na:]

    return _node(out, (a, b), "concat_cols", bwd)


def mean_pool_segments(x: Tensor, segments: int) -> Tensor:
    """Mean over time of S stacked equal-length sequences: (S*T, D) -> (S, D)."""
    if x.ndim != 2 or segments < 1 or x.shape[0] % segments:
        raise ShapeMismatchError(
            f"{x.shape} does not split into {segments} equal segments")
    t = x.shape[0] // segments
    if t < 1:
        raise EmptySequenceError("mean_pool_segments needs at least one frame")
    d = x.shape[1]
    out = x.data.reshape(segments, t, d).mean(axis=1)

    def bwd(g):
        return (np.broadcast_to(g[:, None, :] / t, (segments, t, d)).reshape(x.shape),)

    return _node(out, (x,), "mean_pool_segments", bwd)


def l2_normalize_rows(x: Tensor, eps: float = L2_NORM_EPS) -> Tensor:
    if x.ndim != 2:
        raise ShapeMismatchError(f"l2_normalize_rows expects a matrix, got {x.shape}")
    n = np.linalg.norm(x.data, axis=1, keepdims=True)
    if (n <= eps).any():
        raise DegenerateVectorError(f"cannot normalize row with norm {float(n.min()):.3e}")
    y = x.data / n

    def bwd(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / n,)

    return _node(y, (x,), "l2_normalize_rows", bwd)


def tensor_inner(a: Tensor, b: Tensor) -> Tensor:
    """Frobenius inner product of two same-shape tensors (scalar)."""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"tensor_inner: shapes {a.shape} vs {b.shape}")
    out = np.asarray((a.data * b.data).sum(), dtype=a.data.dtype)

    def bwd(g):
        return g * b.data, g * a.data

    return _node(out, (a, b), "tensor_inner", bwd)


def weighted_cross_entropy_op(logits: Tensor, labels: np.ndarray, class_weights: np.ndarray,
                              denom: float | None = None) -> Tensor:
    """Weighted-mean cross entropy over a batch of logit rows.

    loss = sum_i w[y_i] * (-log softmax(logits_i)[y_i]) / denom, with denom
    defaulting to sum_i w[y_i]. Passing an explicit ``denom`` lets a caller
    split one batch across several calls without changing the total.
    """
    labels = np.asarray(labels)
    n_classes = logits.shape[-1]
    if logits.ndim != 2:
        raise ShapeMismatchError(f"expected BxC logits, got shape {logits.shape}")
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeMismatchError(f"labels shape {labels.shape} vs logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise LabelError(f"labels must lie in [0, {n_classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    class_weights = np.asarray(class_weights, dtype=np.float64)
    if class_weights.shape != (n_classes,) or (class_weights <= 0).any():
        raise ParameterError("class weights must be positive, one per class")

    b = logits.shape[0]
    w = class_weights[labels]
    if denom is None:
        denom = float(w.sum())
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    logp = z - np.log(e.sum(axis=-1, keepdims=True))
    ce = -logp[np.arange(b), labels]
    out = np.asarray((w * ce).sum() / denom, dtype=logits.data.dtype)

    def bwd(g):
        d = s.copy()
        d[np.arange(b), labels] -= 1.0
        d *= (w / denom)[:, None]
        return (g * d.astype(logits.data.dtype, copy=False),)

    return _node(out, (logits,), "weighted_cross_entropy", bwd)


def masked_infonce_op(scores: Tensor, exclude: np.ndarray) -> Tensor:
    """Symmetric InfoNCE over a BxB similarity matrix with diagonal positives.

    ``exclude[i, j]`` removes entry (i, j) from both the row and column
    softmax denominators; the diagonal must never be excluded. Returns
    (CE over rows + CE over columns) / 2, each averaged over the batch.
    """
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ShapeMismatchError(f"expected square score matrix, got shape {scores.shape}")
    b = scores.shape[0]
    exclude = np.asarray(exclude, dtype=bool)
    if exclude.shape != (b, b):
        raise ShapeMismatchError(f"exclude mask shape {exclude.shape} vs scores {scores.shape}")
    if exclude[np.diag_indices(b)].any():
        raise ParameterError("diagonal positives cannot be excluded")
    allowed = ~exclude

    def _masked_softmax(m, allow):
        neg = np.where(allow, m, -np.inf)
        mx = neg.max(axis=-1, keepdims=True)
        e = np.exp(m - mx) * allow
        z = e.sum(axis=-1, keepdims=True)
        return e / z, (m[np.diag_indices(b)] - mx[:, 0] - np.log(z[:, 0]))

    p_row, log_diag_row = _masked_softmax(scores.data, allowed)
    p_colt, log_diag_col = _masked_softmax(scores.data.T, allowed.T)
    loss = -(log_diag_row.mean() + log_diag_col.mean()) / 2.0
    out = np.asarray(loss, dtype=scores.data.dtype)

    def bwd(g):
        eye = np.eye(b, dtype=scores.data.dtype)
        d = ((p_row - eye) + (p_colt - eye).T) / (2.0 * b)
        return (g * d.astype(scores.data.dtype, copy=False),)

    return _node(out, (scores,), "masked_infonce", bwd)


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-4,
               max_coords: int = 100, seed: int = 0) -> float:
    """Compare analytic gradients against central finite differences.

    ``f`` rebuilds and returns the scalar loss from the current parameter
    values; it is re-evaluated at nudged coordinates, so it must be a pure
    function of ``params`` (freeze any dropout masks inside it). Checks every
    coordinate when there are at most ``max_coords`` in total, otherwise a
    seeded random subset of ``max_coords`` (>= 100) of them. Returns the
    maximum relative error |g_a - g_n| / max(1, |g_a|, |g_n|).
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise ContractError("grad_check requires float64 parameters")
    max_coords = max(100, int(max_coords))
    out = f()
    if out.data.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued graph, got shape {out.data.shape}")
    zero_grad(params)
    backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    sizes = [p.data.size for p in params]
    total = int(sum(sizes))
    if total <= max_coords:
        coords = np.arange(total)
    else:
        coords = np.random.Generator(np.random.Philox(key=seed)).choice(
            total, size=max_coords, replace=False)

    bounds = np.cumsum([0] + sizes)
    max_rel = 0.0
    for c in coords:
        pi = int(np.searchsorted(bounds, c, side="right") - 1)
        i = int(c - bounds[pi])
        flat = params[pi].data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(f().data)
        flat[i] = orig - h
        f_minus = float(f().data)
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = float(analytic[pi].reshape(-1)[i])
        rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        max_rel = max(max_rel, rel)
    return max_rel

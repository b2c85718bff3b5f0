"""Dense tensor arithmetic with reverse-mode automatic differentiation.

A Tensor wraps a numpy array; operations executed inside a `with Tape():`
block are recorded and `backward(loss)` replays the tape in reverse,
accumulating gradients by summation into the `.grad` of every leaf that
requires them. Outside a tape nothing is recorded, so inference costs no
graph bookkeeping.

Design constraints (deliberate, to keep the bug surface small):
  * no broadcasting except row-vector bias addition in `add`;
  * float64 in tests (finite-difference headroom), float32 in training;
  * a Tape is confined to one thread; parallelism happens across tapes.
"""

import itertools
import threading

import numpy as np

from .errors import ConfigError, DimensionError

# Enabled by the test suite: asserts every op output is finite.
CHECK_FINITE = False

_node_counter = itertools.count()
_tls = threading.local()


def _active_tape():
    stack = getattr(_tls, "tapes", None)
    return stack[-1] if stack else None


class Tensor:
    """A dense n-d array, optionally a node in the active tape."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_counter)
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of operations; append order is execution order."""

    def __init__(self):
        self.ops = []  # (out tensor, input tensors, backward fn)

    def __enter__(self):
        stack = getattr(_tls, "tapes", None)
        if stack is None:
            stack = _tls.tapes = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tls.tapes.pop()
        return False


def _finish(out: Tensor, inputs, backward_fn) -> Tensor:
    """Record `out` on the active tape if any input participates in grad."""
    if CHECK_FINITE and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite value produced by a forward op")
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.ops.append((out, tuple(inputs), backward_fn))
    return out


def backward(loss: Tensor):
    """Populate `.grad` on every requires_grad leaf reachable from `loss`.

    Gradients accumulate by summation, both within one call (shared nodes)
    and across calls (existing `.grad` is added to, enabling batch
    accumulation). Deterministic given tape order.
    """
    if loss.data.ndim != 0:
        raise DimensionError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    tape = loss._tape
    if tape is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
        return
    grads = {loss.node_id: np.ones_like(loss.data)}
    produced = {out.node_id for out, _, _ in tape.ops}
    leaves = {}
    for out, inputs, fn in reversed(tape.ops):
        g = grads.pop(out.node_id, None)
        if g is None:
            continue
        for t, gi in zip(inputs, fn(g)):
            if gi is None or not t.requires_grad:
                continue
            prev = grads.get(t.node_id)
            # Never += in place: backward fns may return views/aliases.
            grads[t.node_id] = gi if prev is None else prev + gi
            if t.node_id not in produced:
                leaves[t.node_id] = t
    for nid, t in leaves.items():
        g = grads.get(nid)
        if g is None:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# construction helpers

def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float64, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def constant(arr, dtype=None) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype))


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-d, or stacked 3-d with equal leading dimension."""
    if a.ndim not in (2, 3) or b.ndim != a.ndim:
        raise DimensionError(f"matmul supports 2-d or matching 3-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def bw(g):
        return g @ b.data.swapaxes(-1, -2), a.data.swapaxes(-1, -2) @ g

    return _finish(out, (a, b), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; `b` may also be a row vector added to each row of `a`."""
    bias = b.ndim == 1 and a.ndim >= 2 and a.shape[-1] == b.shape[0]
    if not bias and a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")
    out = Tensor(a.data + b.data)

    def bw(g):
        gb = g.reshape(-1, b.shape[0]).sum(axis=0) if bias else g
        return g, gb

    return _finish(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub shape mismatch: {a.shape} - {b.shape}")
    out = Tensor(a.data - b.data)
    return _finish(out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} * {b.shape}")
    out = Tensor(a.data * b.data)
    return _finish(out, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"div shape mismatch: {a.shape} / {b.shape}")
    out = Tensor(a.data / b.data)

    def bw(g):
        return g / b.data, -g * a.data / (b.data * b.data)

    return _finish(out, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c)
    return _finish(out, (a,), lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data + float(c))
    return _finish(out, (a,), lambda g: (g,))


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))
    return _finish(out, (a,), lambda g: (g * (a.data > 0),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y)
    return _finish(out, (a,), lambda g: (g * y * (1.0 - y),))


def absolute(a: Tensor) -> Tensor:
    out = Tensor(np.abs(a.data))
    return _finish(out, (a,), lambda g: (g * np.sign(a.data),))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"maximum shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(np.maximum(a.data, b.data))

    def bw(g):
        m = a.data >= b.data
        return g * m, g * ~m

    return _finish(out, (a, b), bw)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"minimum shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(np.minimum(a.data, b.data))

    def bw(g):
        m = a.data <= b.data
        return g * m, g * ~m

    return _finish(out, (a, b), bw)


def tsum(a: Tensor, axis=None) -> Tensor:
    out = Tensor(a.data.sum(axis=axis))

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _finish(out, (a,), bw)


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    out = Tensor(a.data.mean(axis=axis))

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).astype(a.dtype, copy=True),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, a.shape).copy(),)

    return _finish(out, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return _finish(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)
    out = Tensor(a.data.transpose(axes))
    return _finish(out, (a,), lambda g: (g.transpose(inverse),))


def concat(tensors, axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat requires at least one tensor")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.array_split(g, splits, axis=axis))

    return _finish(out, tuple(tensors), bw)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start <= stop <= a.shape[0]):
        raise DimensionError(f"slice_rows [{start}:{stop}] out of range for {a.shape}")
    out = Tensor(a.data[start:stop].copy())

    def bw(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _finish(out, (a,), bw)


def take_rows(a: Tensor, indices) -> Tensor:
    """Gather rows (duplicates allowed); gradient scatter-adds."""
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(a.data[idx])

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _finish(out, (a,), bw)


def take_cols(a: Tensor, indices) -> Tensor:
    """Gather columns of a 2-d tensor; gradient scatter-adds."""
    if a.ndim != 2:
        raise DimensionError(f"take_cols expects a 2-d tensor, got {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(a.data[:, idx])
    rows = np.arange(a.shape[0])[:, None]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, idx[None, :]), g)
        return (full,)

    return _finish(out, (a,), bw)


def dropout(a: Tensor, p: float, training: bool, rng) -> Tensor:
    """Elementwise dropout: survivors scaled by 1/(1-p); identity in inference."""
    if not training or p <= 0.0:
        return a
    if p >= 1.0:
        raise ConfigError(f"dropout probability must be < 1, got {p}")
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    out = Tensor(a.data * keep)
    return _finish(out, (a,), lambda g: (g * keep,))


def path_drop(a: Tensor, p: float, training: bool, rng) -> Tensor:
    """Stochastic-depth dropout: zero the whole tensor with probability p."""
    if not training or p <= 0.0:
        return a
    if rng.random() < p:
        return scale(a, 0.0)
    return scale(a, 1.0 / (1.0 - p))


# ---------------------------------------------------------------------------
# neural-net ops

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _finish(out, (a,), bw)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean/unit variance, then scale and shift."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm gain/bias must have shape ({d},)")
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def bw(g):
        dg = (g * xhat).reshape(-1, d).sum(axis=0)
        db = g.reshape(-1, d).sum(axis=0)
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dg, db

    return _finish(out, (a, gain, bias), bw)


def cross_entropy_logits(logits: Tensor, targets, class_weights=None) -> Tensor:
    """Weighted-mean negative log softmax probability of the target class.

    Weighting follows the usual convention: sum_i w[t_i] * nll_i / sum_i w[t_i].
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy_logits expects 2-d logits, got {logits.shape}")
    idx = np.asarray(targets, dtype=np.intp)
    n, c = logits.shape
    if idx.shape != (n,):
        raise DimensionError(f"targets must have shape ({n},)")
    if idx.min(initial=0) < 0 or idx.max(initial=0) >= c:
        raise IndexError(f"target class out of range [0, {c})")
    w = np.ones(c, dtype=logits.dtype) if class_weights is None else np.asarray(class_weights, dtype=logits.dtype)
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    wt = w[idx]
    wsum = wt.sum()
    out = Tensor(-(wt * logp[np.arange(n), idx]).sum() / wsum)

    def bw(g):
        p = np.exp(logp)
        d = p * wt[:, None]
        d[np.arange(n), idx] -= wt
        return (d * (g / wsum),)

    return _finish(out, (logits,), bw)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, weights: dict, n_heads: int):
    """Scaled dot-product attention with `n_heads` heads.

    `weights` holds projections wq/wk/wv/wo of shape (d, d) and biases
    bq/bk/bv/bo of shape (d,). Returns (output (Lq,d), attention weights
    (n_heads, Lq, Lk)); the weights are part of the graph, so they are also
    available for visualization after an inference pass.
    """
    lq, d = q.shape
    lk = k.shape[0]
    if d % n_heads != 0:
        raise ConfigError(f"model width {d} not divisible by {n_heads} heads")
    if k.shape[1] != d or v.shape != (lk, d):
        raise DimensionError(f"attention shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    dh = d // n_heads

    def split_heads(t, length):
        return transpose(reshape(t, (length, n_heads, dh)), (1, 0, 2))

    qh = split_heads(add(matmul(q, weights["wq"]), weights["bq"]), lq)
    kh = split_heads(add(matmul(k, weights["wk"]), weights["bk"]), lk)
    vh = split_heads(add(matmul(v, weights["wv"]), weights["bv"]), lk)
    scores = scale(matmul(qh, transpose(kh, (0, 2, 1))), 1.0 / np.sqrt(dh))
    attn = softmax(scores, axis=-1)
    ctx = reshape(transpose(matmul(attn, vh), (1, 0, 2)), (lq, d))
    out = add(matmul(ctx, weights["wo"]), weights["bo"])
    return out, attn


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding; accepts (C,H,W) or (B,C,H,W)."""
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects (B,C,H,W) input and (O,C,k,k) kernel, got {x.shape}, {kernel.shape}")
    b, cin, h, w = xd.shape
    cout, cin_k, kh, kw = kernel.shape
    if cin != cin_k or kh != kw:
        raise DimensionError(f"conv2d kernel {kernel.shape} incompatible with input {x.shape}")
    if kh % 2 != 1:
        raise ConfigError(f"conv2d kernel size must be odd, got {kh}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise DimensionError(f"input {h}x{w} smaller than kernel {kh} after padding {padding}")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]                       # (B,C,oh,ow,kh,kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, oh * ow, cin * kh * kw)
    cols = np.ascontiguousarray(cols)
    wmat = kernel.data.reshape(cout, -1)
    y = cols @ wmat.T                                         # (B,oh*ow,Cout)
    if bias is not None:
        if bias.shape != (cout,):
            raise DimensionError(f"conv2d bias must have shape ({cout},)")
        y = y + bias.data
    y = y.transpose(0, 2, 1).reshape(b, cout, oh, ow)
    out = Tensor(y[0] if squeeze else y)

    def bw(g):
        gd = g[None] if squeeze else g
        gmat = gd.reshape(b, cout, oh * ow).transpose(0, 2, 1)     # (B,oh*ow,Cout)
        dw = np.tensordot(gmat, cols, axes=([0, 1], [0, 1])).reshape(kernel.shape)
        dcols = (gmat @ wmat).reshape(b, oh, ow, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += dcols[:, :, :, :, i, j]
        dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        grads = [dx[0] if squeeze else dx, dw]
        if bias is not None:
            grads.append(gd.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _finish(out, inputs, bw)


# ---------------------------------------------------------------------------
# optimization

def adamw_step(params, grads, state: dict, lr: float, betas=(0.9, 0.999),
               eps: float = 1e-8, weight_decay: float = 0.0):
    """In-place AdamW update with bias correction.

    `state` holds per-parameter first/second moments under "m/<name>" and
    "v/<name>" plus a shared step counter under "t".
    """
    b1, b2 = betas
    t = float(state.get("t", np.zeros(()))) + 1.0
    state["t"] = np.array(t)
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient shape {g.shape} != param shape {p.data.shape} for {name}")
        m = state.get(f"m/{name}")
        v = state.get(f"v/{name}")
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * (g * g) if v is None else b2 * v + (1 - b2) * (g * g)
        state[f"m/{name}"] = m
        state[f"v/{name}"] = v
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            update = update + weight_decay * p.data
        p.data = p.data - lr * update


def sgd_momentum_step(params, grads, state: dict, lr: float, momentum: float):
    """In-place SGD with momentum: v <- momentum*v + g; p <- p - lr*v.

    `state` maps a stable key per parameter to its velocity buffer and is
    created on first use. `params` is a dict name -> Tensor and `grads` a
    matching dict name -> ndarray (or None to skip).
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient shape {g.shape} != param shape {p.data.shape} for {name}")
        v = state.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = momentum * v + g
        state[name] = v
        p.data = p.data - lr * v

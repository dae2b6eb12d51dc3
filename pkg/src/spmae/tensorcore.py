"""A small reverse-mode autograd engine over numpy arrays.

Tensors record the op that produced them and a closure that pushes the
output gradient back to the inputs. :func:`backward` walks the recorded graph
in reverse topological order. Broadcasting is limited to bias addition and to
matmul against a shared 2-D weight; everything else requires equal shapes.

Float32 is used for training, float64 for gradient checks; ops keep the
dtype of their inputs.
"""
from __future__ import annotations

import contextlib
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = ()
        self.backward_fn = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _node(data, op, parents, backward_fn):
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    g = g.astype(t.data.dtype, copy=False)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _check(cond, op, msg):
    if not cond:
        raise ShapeError(f"{op}: {msg}")


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b):
    _check(a.shape == b.shape, "add", f"shape mismatch {a.shape} vs {b.shape}")

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, g)
    out = _node(a.data + b.data, "add", (a, b), None)
    out.backward_fn = bw
    return out


def mul(a, b):
    _check(a.shape == b.shape, "mul", f"shape mismatch {a.shape} vs {b.shape}")
    out = _node(a.data * b.data, "mul", (a, b), None)
    out.backward_fn = lambda g: (_accumulate(a, g * b.data), _accumulate(b, g * a.data))
    return out


def scale(a, c):
    c = float(c)
    out = _node(a.data * a.data.dtype.type(c), "scale", (a,), None)
    out.backward_fn = lambda g: _accumulate(a, g * c)
    return out


def add_bias(x, b):
    """x + b where b matches the trailing dimensions of x."""
    nb = b.data.ndim
    _check(x.shape[x.data.ndim - nb:] == b.shape, "add_bias",
           f"bias shape {b.shape} does not match trailing dims of {x.shape}")
    lead = tuple(range(x.data.ndim - nb))

    def bw(g):
        _accumulate(x, g)
        _accumulate(b, g.sum(axis=lead) if lead else g)
    out = _node(x.data + b.data, "add_bias", (x, b), None)
    out.backward_fn = bw
    return out


def matmul(a, b):
    """a (..., m, k) @ b (..., k, n) with equal leading dims, or b a shared (k, n) matrix."""
    ad, bd = a.data, b.data
    _check(ad.ndim >= 2 and bd.ndim >= 2, "matmul", "operands must be at least 2-D")
    _check(ad.shape[-1] == bd.shape[-2], "matmul", f"inner dims differ: {ad.shape} @ {bd.shape}")
    shared = bd.ndim == 2 and ad.ndim > 2
    if not shared:
        _check(ad.shape[:-2] == bd.shape[:-2], "matmul",
               f"leading dims differ: {ad.shape} @ {bd.shape}")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(bd, -1, -2))
        if b.requires_grad:
            if shared:
                k, n = bd.shape
                _accumulate(b, ad.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                _accumulate(b, np.swapaxes(ad, -1, -2) @ g)
    out = _node(ad @ bd, "matmul", (a, b), None)
    out.backward_fn = bw
    return out


def transpose(x, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = _node(np.transpose(x.data, axes), "transpose", (x,), None)
    out.backward_fn = lambda g: _accumulate(x, np.transpose(g, inv))
    return out


def reshape(x, shape):
    shape = tuple(shape)
    _check(int(np.prod(shape)) == x.data.size, "reshape", f"cannot reshape {x.shape} to {shape}")
    src = x.shape
    out = _node(x.data.reshape(shape), "reshape", (x,), None)
    out.backward_fn = lambda g: _accumulate(x, g.reshape(src))
    return out


def _row_index(x_shape, idx):
    """Index tuple selecting rows ``idx`` (along axis -2) of an array shaped x_shape."""
    idx = np.asarray(idx, dtype=np.int64)
    if len(x_shape) == 2:
        return (idx,)
    lead = idx.shape[:-1]
    grids = np.meshgrid(*[np.arange(n) for n in lead], indexing="ij")
    return tuple(gr[..., None] for gr in grids) + (idx,)


def gather_rows(x, idx):
    """Select rows along axis -2; ``idx`` has the leading dims of x plus a row axis."""
    idx = np.asarray(idx, dtype=np.int64)
    _check(idx.ndim == x.data.ndim - 1 and idx.shape[:-1] == x.shape[:-2], "gather_rows",
           f"index shape {idx.shape} incompatible with {x.shape}")
    _check(idx.size == 0 or (idx.min() >= 0 and idx.max() < x.shape[-2]), "gather_rows",
           "row index out of range")
    sel = _row_index(x.shape, idx)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, sel, g)
        _accumulate(x, full)
    out = _node(x.data[sel], "gather_rows", (x,), None)
    out.backward_fn = bw
    return out


def scatter_rows(x, idx, n_rows):
    """Place rows of x at positions ``idx`` of a zero array with ``n_rows`` rows."""
    idx = np.asarray(idx, dtype=np.int64)
    _check(idx.shape == x.shape[:-1], "scatter_rows", f"index shape {idx.shape} vs rows of {x.shape}")
    _check(idx.size == 0 or (idx.min() >= 0 and idx.max() < n_rows), "scatter_rows",
           "row index out of range")
    shape = x.shape[:-2] + (n_rows, x.shape[-1])
    sel = _row_index(shape, idx)
    data = np.zeros(shape, dtype=x.dtype)
    data[sel] = x.data
    out = _node(data, "scatter_rows", (x,), None)
    out.backward_fn = lambda g: _accumulate(x, g[sel])
    return out


def sum_all(x):
    out = _node(np.asarray(x.data.sum(), dtype=x.dtype), "sum", (x,), None)
    out.backward_fn = lambda g: _accumulate(x, np.broadcast_to(g, x.shape))
    return out


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------


def softmax(x):
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accumulate(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))
    out = _node(y, "softmax", (x,), None)
    out.backward_fn = bw
    return out


LN_EPS = 1e-6


def layer_norm(x, gamma, beta, eps=LN_EPS):
    d = x.shape[-1]
    _check(gamma.shape == (d,) and beta.shape == (d,), "layer_norm",
           f"scale/shift must be ({d},), got {gamma.shape}, {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            _accumulate(beta, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gh = g * gamma.data
            _accumulate(x, inv * (gh - gh.mean(axis=-1, keepdims=True)
                                  - xhat * (gh * xhat).mean(axis=-1, keepdims=True)))
    out = _node(xhat * gamma.data + beta.data, "layer_norm", (x, gamma, beta), None)
    out.backward_fn = bw
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * (xd + 0.044715 * x2 * xd))

    def bw(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x2)
        _accumulate(x, g * (0.5 * (1.0 + t) + 0.5 * xd * dt))
    out = _node(0.5 * xd * (1.0 + t), "gelu", (x,), None)
    out.backward_fn = bw
    return out


def attention(q, k, v):
    """softmax(q k^T / sqrt(d)) v over the last two axes."""
    d = q.shape[-1]
    nd = q.data.ndim
    kt = transpose(k, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    # scaling q instead of the (n x n) scores is the same product and much cheaper
    weights = softmax(matmul(scale(q, 1.0 / math.sqrt(d)), kt))
    return matmul(weights, v)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def masked_mse(pred, target, row_mask):
    """Mean squared error over the rows where ``row_mask`` is True.

    ``row_mask`` has the shape of pred without its last axis. Every sample in
    a batch carries the same number of masked rows, so this equals the mean
    over the batch of each sample's masked-row MSE.
    """
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    _check(pred.shape == target.shape, "masked_mse", f"{pred.shape} vs {target.shape}")
    m = np.asarray(row_mask, dtype=bool)
    _check(m.shape == pred.shape[:-1], "masked_mse", f"mask shape {m.shape} vs rows of {pred.shape}")
    count = int(m.sum()) * pred.shape[-1]
    if count == 0:
        raise ContractError("masked_mse: no masked rows")
    w = m[..., None].astype(pred.dtype)
    diff = (pred.data - target) * w
    out = _node(np.asarray((diff * diff).sum() / count, dtype=pred.dtype), "masked_mse", (pred,), None)
    out.backward_fn = lambda g: _accumulate(pred, g * 2.0 * diff / count)
    return out


def softmax_cross_entropy(logits, labels):
    labels = np.asarray(labels, dtype=np.int64)
    _check(logits.data.ndim == 2 and labels.shape == logits.shape[:1], "softmax_cross_entropy",
           f"logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = labels.size
    rows = np.arange(n)

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        _accumulate(logits, g * p / n)
    out = _node(np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype), "softmax_xent", (logits,), None)
    out.backward_fn = bw
    return out


def sigmoid_binary_cross_entropy(logits, targets):
    """Mean over all entries of the per-class binary cross entropy on sigmoid(logits)."""
    y = np.asarray(targets, dtype=logits.dtype)
    _check(y.shape == logits.shape, "sigmoid_bce", f"logits {logits.shape} vs targets {y.shape}")
    x = logits.data
    loss = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        _accumulate(logits, g * (1.0 / (1.0 + np.exp(-x)) - y) / y.size)
    out = _node(np.asarray(loss.mean(), dtype=logits.dtype), "sigmoid_bce", (logits,), None)
    out.backward_fn = bw
    return out


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d loss / d t into ``t.grad`` for every tensor the loss depends on.

    Returns the gradients of named leaf tensors as a dict.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = topological_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)
    return {n.name: n.grad for n in order if n.op == "leaf" and n.name is not None and n.grad is not None}


def zero_grad(params):
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    no_decay: frozenset = frozenset()


def optimizer_step(state, params, grads, lr=None):
    """One AdamW step, in place on ``params`` (dict name -> Tensor).

    Weight decay is decoupled: each decayed parameter is first multiplied by
    ``1 - lr * weight_decay``, then moved by the bias-corrected moment ratio.
    Parameters without a gradient are left untouched.
    """
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"optimizer: gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        if state.weight_decay and name not in state.no_decay:
            p.data *= p.data.dtype.type(1.0 - lr * state.weight_decay)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype, copy=False)


# ---------------------------------------------------------------------------
# tensor files
# ---------------------------------------------------------------------------

MAGIC = b"SPMA"
FORMAT_VERSION = 1


class FormatError(ValueError):
    pass


def encode_tensors(tensors):
    """Serialize an ordered name -> array mapping to the SPMA byte format."""
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise FormatError(f"tensor {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_tensors(data):
    if data[:4] != MAGIC:
        raise FormatError("bad magic, not an SPMA tensor file")
    try:
        version, count = struct.unpack_from("<HI", data, 4)
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported SPMA version {version}")
        pos = 10
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            if pos + 4 * n > len(data):
                raise FormatError(f"truncated data for tensor {name!r}")
            if name in out:
                raise FormatError(f"duplicate tensor {name!r}")
            out[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * n
    except struct.error as exc:
        raise FormatError(f"truncated SPMA file: {exc}") from None
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after the last tensor")
    return out


def save_tensors(path, tensors):
    """Atomic write (temp file + rename)."""
    data = encode_tensors(tensors)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_tensors(path):
    with open(path, "rb") as fh:
        return decode_tensors(fh.read())

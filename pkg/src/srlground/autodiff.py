"""Reverse-mode differentiable tensor core.

Dense float64 tensors over numpy with a dynamically recorded tape, the
operator set needed by the grounding models, Glorot-uniform initialisation,
Adam, and a central-difference gradient checker.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .errors import ContractError, ShapeError

__all__ = [
    "Tensor",
    "Parameter",
    "tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "concat",
    "transpose",
    "reshape",
    "softmax",
    "sigmoid",
    "tanh",
    "relu",
    "layer_norm",
    "embedding_lookup",
    "masked_fill",
    "tsum",
    "tmean",
    "bce_with_logits",
    "backward",
    "glorot_uniform",
    "AdamState",
    "adam_step",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return tslice(self, idx)

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """Named trainable tensor."""

    __slots__ = ("name",)

    def __init__(self, name, data):
        super().__init__(data, requires_grad=True)
        self.name = name


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(*ts):
    return any(t.requires_grad for t in ts)


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# forward ops


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out_data = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape)

    def _back(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return Tensor(out_data, _needs_grad(a, b), (a, b), _back)


def sub(a, b):
    return add(a, mul(b, -1.0))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out_data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape)

    def _back(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return Tensor(out_data, _needs_grad(a, b), (a, b), _back)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 1 or b.data.ndim < 1:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out_data = a.data @ b.data
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape)

    def _back(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accumulate(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accumulate(b, _unbroadcast(gb, b.data.shape))

    return Tensor(out_data, _needs_grad(a, b), (a, b), _back)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of zero tensors")
    nd = tensors[0].data.ndim
    if not -nd <= axis < nd:
        raise ShapeError(f"concat axis {axis} out of range", *[t.shape for t in tensors])
    try:
        out_data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors])
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def _back(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)

    return Tensor(out_data, _needs_grad(*tensors), tuple(tensors), _back)


def tslice(a, idx):
    a = _as_tensor(a)
    out_data = a.data[idx]

    def _back(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            _accumulate(a, full)

    return Tensor(out_data, a.requires_grad, (a,), _back)


def transpose(a, axes=None):
    a = _as_tensor(a)
    out_data = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def _back(g):
        _accumulate(a, np.transpose(g, inv))

    return Tensor(out_data, a.requires_grad, (a,), _back)


def reshape(a, shape):
    a = _as_tensor(a)
    try:
        out_data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape)

    def _back(g):
        _accumulate(a, g.reshape(a.data.shape))

    return Tensor(out_data, a.requires_grad, (a,), _back)


def softmax(a, axis=-1):
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def _back(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(a, out_data * (g - dot))

    return Tensor(out_data, a.requires_grad, (a,), _back)


def sigmoid(a):
    a = _as_tensor(a)
    out_data = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                        np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))

    def _back(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return Tensor(out_data, a.requires_grad, (a,), _back)


def tanh(a):
    a = _as_tensor(a)
    out_data = np.tanh(a.data)

    def _back(g):
        _accumulate(a, g * (1.0 - out_data * out_data))

    return Tensor(out_data, a.requires_grad, (a,), _back)


def relu(a):
    a = _as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def _back(g):
        _accumulate(a, g * (a.data > 0))

    return Tensor(out_data, a.requires_grad, (a,), _back)


def layer_norm(a, gain, bias, eps=1e-8):
    """Normalise the last axis to zero mean / unit variance, then affine."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    d = a.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError("layer_norm", a.shape, gain.shape, bias.shape)
    mean = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    norm = centered * inv
    out_data = norm * gain.data + bias.data

    def _back(g):
        if a.requires_grad:
            gn = g * gain.data
            # d/dx of (x - mu) / sqrt(var + eps)
            ga = inv * (gn - gn.mean(axis=-1, keepdims=True)
                        - norm * (gn * norm).mean(axis=-1, keepdims=True))
            _accumulate(a, ga)
        if gain.requires_grad:
            _accumulate(gain, _unbroadcast(g * norm, gain.data.shape))
        if bias.requires_grad:
            _accumulate(bias, _unbroadcast(g, bias.data.shape))

    return Tensor(out_data, _needs_grad(a, gain, bias), (a, gain, bias), _back)


def embedding_lookup(table, ids):
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ContractError(f"embedding id out of range for table of {table.data.shape[0]} rows")
    out_data = table.data[ids]

    def _back(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids, g)
            _accumulate(table, full)

    return Tensor(out_data, table.requires_grad, (table,), _back)


def masked_fill(a, mask, value):
    a = _as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.data.shape:
        raise ShapeError("masked_fill", a.shape, mask.shape)
    out_data = np.where(mask, value, a.data)

    def _back(g):
        _accumulate(a, np.where(mask, 0.0, g))

    return Tensor(out_data, a.requires_grad, (a,), _back)


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def _back(g):
        if a.requires_grad:
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(g, a.data.shape).copy())

    return Tensor(out_data, a.requires_grad, (a,), _back)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def bce_with_logits(logits, targets, mask=None, pos_weight=1.0):
    """Mean binary cross-entropy over mask-true entries, log-sum-exp stable.

    pos_weight scales the positive-target terms (counters label imbalance);
    the mean is taken over per-entry weights so pos_weight=1 is the plain mean.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.data.shape:
        raise ShapeError("bce_with_logits", logits.shape, targets.shape)
    if mask is None:
        mask = np.ones_like(targets, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != logits.data.shape:
            raise ShapeError("bce_with_logits mask", logits.shape, mask.shape)
    if int(mask.sum()) == 0:
        raise ContractError("bce_with_logits: all-false mask")
    if pos_weight <= 0:
        raise ContractError(f"bce_with_logits: pos_weight {pos_weight} must be positive")
    x = logits.data
    w = np.where(targets > 0, float(pos_weight), 1.0)
    n = float((w * mask).sum())
    # max(x,0) - x*t + log(1 + exp(-|x|))
    per = np.maximum(x, 0.0) - x * targets + np.log1p(np.exp(-np.abs(x)))
    out_data = (w * per)[mask].sum() / n

    def _back(g):
        if logits.requires_grad:
            s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                         np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
            _accumulate(logits, np.where(mask, g * w * (s - targets) / n, 0.0))

    return Tensor(out_data, logits.requires_grad, (logits,), _back)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss):
    if loss.data.size != 1:
        raise ContractError(f"backward on non-scalar tensor of shape {loss.data.shape}")
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and (p.requires_grad or p._parents):
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# initialisation and optimisation


def glorot_uniform(name, shape, rng):
    fan_in = shape[0] if len(shape) > 1 else shape[0]
    fan_out = shape[-1]
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return Parameter(name, rng.uniform(-a, a, size=shape))


class AdamState:
    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ContractError("duplicate parameter names in AdamState")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}


def adam_step(state):
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for p in state.params:
        if p.grad is None:
            raise ContractError(f"adam_step: parameter {p.name} has no gradient")
        m = state.m[p.name]
        v = state.v[p.name]
        m *= b1
        m += (1 - b1) * p.grad
        v *= b2
        v += (1 - b2) * p.grad * p.grad
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if state.weight_decay:
            p.data -= state.lr * state.weight_decay * p.data  # decoupled


# ---------------------------------------------------------------------------
# gradient checking


class GradCheckReport:
    def __init__(self, max_rel_error, n_checked, n_excluded, passed):
        self.max_rel_error = max_rel_error
        self.n_checked = n_checked
        self.n_excluded = n_excluded
        self.passed = passed

    def __repr__(self):
        return (f"GradCheckReport(max_rel_error={self.max_rel_error:.3e}, "
                f"checked={self.n_checked}, excluded={self.n_excluded}, passed={self.passed})")


def grad_check(f, point, eps=1e-4, tol=1e-4, kink_rel=1e-2):
    """Compare backward grads of scalar f against central differences.

    Coordinates where the left and right one-sided differences disagree
    (non-differentiable points, e.g. relu kinks) are excluded rather than
    failed.
    """
    points = point if isinstance(point, (list, tuple)) else [point]
    for p in points:
        p.zero_grad()
    loss = f(*points)
    backward(loss)
    grads = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in points]

    max_rel = 0.0
    n_checked = 0
    n_excluded = 0
    for p, g in zip(points, grads):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f(*points).item()
            flat[i] = orig - eps
            f_minus = f(*points).item()
            flat[i] = orig
            f_mid = f(*points).item()
            d_right = (f_plus - f_mid) / eps
            d_left = (f_mid - f_minus) / eps
            scale = abs(d_right) + abs(d_left) + 1.0
            if abs(d_right - d_left) / scale > kink_rel:
                n_excluded += 1
                continue
            num = (f_plus - f_minus) / (2 * eps)
            ana = g.reshape(-1)[i]
            rel = abs(num - ana) / max(abs(num), abs(ana), 1.0)
            max_rel = max(max_rel, rel)
            n_checked += 1
    return GradCheckReport(max_rel, n_checked, n_excluded, max_rel <= tol)


# ---------------------------------------------------------------------------
# checkpoint I/O

_CKPT_MAGIC = b"VOGC"


def save_checkpoint(path, params, manifest=None):
    """Write named parameters as little-endian f64 with a JSON manifest."""
    params = sorted(params, key=lambda p: p.name)
    entries = []
    offset = 0
    for p in params:
        nbytes = p.data.size * 8
        entries.append({"name": p.name, "shape": list(p.data.shape), "offset": offset})
        offset += nbytes
    header = {"manifest": manifest or {}, "params": entries}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for p in params:
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Return (dict name -> ndarray, manifest)."""
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise ContractError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        blob = fh.read()
    out = {}
    for e in header["params"]:
        shape = tuple(e["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=e["offset"])
        out[e["name"]] = arr.reshape(shape).astype(np.float64)
    return out, header["manifest"]


def checkpoint_hash(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()

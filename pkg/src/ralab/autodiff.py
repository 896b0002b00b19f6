"""Dense-tensor math with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (float32 by default, float64 for high-precision
checks). Operations record themselves, in creation order, onto a per-thread
graph whenever an input requires gradients; backward() replays that order in
reverse, accumulating gradients additively into every requires_grad leaf,
parameters and inputs alike. A graph is consumed by its backward pass.
"""

import json
import os
import threading

import numpy as np

from . import _kernels
from .errors import (
    DoubleBackward,
    InvalidParams,
    LabelOutOfRange,
    MissingGrad,
    NoGraph,
    NonFinite,
    ShapeMismatch,
    StepSizeZero,
)

DEFAULT_DTYPE = np.float32

_state = threading.local()


class Graph:
    """Ordered record of op outputs; one backward pass consumes it."""

    __slots__ = ("nodes", "consumed")

    def __init__(self):
        self.nodes = []
        self.consumed = False


def _graph_for_record():
    g = getattr(_state, "graph", None)
    if g is None or g.consumed:
        g = Graph()
        _state.graph = g
    return g


def _recording():
    return getattr(_state, "recording", True)


class no_grad:
    """Context manager: ops inside are not recorded and track no gradients."""

    def __enter__(self):
        self._prev = _recording()
        _state.recording = False
        return self

    def __exit__(self, *exc):
        _state.recording = self._prev
        return False


class frozen:
    """Temporarily clear requires_grad on the given tensors (e.g. parameters
    during an input-space attack, so their grads are not touched)."""

    def __init__(self, tensors):
        self._tensors = list(tensors)

    def __enter__(self):
        self._prev = [t.requires_grad for t in self._tensors]
        for t in self._tensors:
            t.requires_grad = False
        return self

    def __exit__(self, *exc):
        for t, r in zip(self._tensors, self._prev):
            t.requires_grad = r
        return False


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "velocity", "_graph", "_backward", "_op")

    def __init__(self, values, requires_grad=False, dtype=None):
        arr = np.asarray(values)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.values = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.velocity = None
        self._graph = None
        self._backward = None
        self._op = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self):
        return float(self.values.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, dtype={self.values.dtype}, requires_grad={self.requires_grad})"


def tensor(values, requires_grad=False, dtype=None):
    return Tensor(values, requires_grad=requires_grad, dtype=dtype)


def _check_finite(arr):
    if not np.all(np.isfinite(arr)):
        raise NonFinite("operation produced NaN or Inf")


def _accumulate(t, contribution):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(contribution, dtype=t.values.dtype, copy=True)
    else:
        t.grad += contribution


def _make_node(op, out_values, inputs, backward_fn):
    _check_finite(out_values)
    out = Tensor(out_values, dtype=out_values.dtype)
    if _recording() and any(t.requires_grad for t in inputs):
        g = _graph_for_record()
        out.requires_grad = True
        out._graph = g
        out._backward = backward_fn
        out._op = op
        g.nodes.append(out)
    return out


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


def backward(loss):
    """Populate grads of every requires_grad leaf reachable from loss."""
    if loss.values.size != 1:
        raise ShapeMismatch("backward requires a scalar loss")
    g = loss._graph
    if g is None:
        raise NoGraph("loss was not produced by recorded forward ops")
    if g.consumed:
        raise DoubleBackward("graph already consumed by a previous backward pass")
    g.consumed = True
    loss.grad = np.ones_like(loss.values)
    for node in reversed(g.nodes):
        if node.grad is not None and node._backward is not None:
            node._backward(node.grad)
    for node in g.nodes:
        node._backward = None
    g.nodes.clear()


# ---------------------------------------------------------------------------
# forward operations
# ---------------------------------------------------------------------------

def matmul(a, b):
    av, bv = a.values, b.values
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeMismatch(f"matmul {av.shape} @ {bv.shape}")
    out = av @ bv

    def back(g):
        _accumulate(a, g @ bv.T)
        _accumulate(b, av.T @ g)

    return _make_node("matmul", out, (a, b), back)


def add(a, b):
    av, bv = a.values, b.values
    if av.shape == bv.shape:
        out = av + bv

        def back(g):
            _accumulate(a, g)
            _accumulate(b, g)

    elif av.ndim == 2 and bv.ndim == 1 and av.shape[1] == bv.shape[0]:
        # bias case: row vector added to every row (no general broadcasting)
        out = av + bv

        def back(g):
            _accumulate(a, g)
            _accumulate(b, g.sum(axis=0))

    else:
        raise ShapeMismatch(f"add {av.shape} + {bv.shape}")
    return _make_node("add", out, (a, b), back)


def mul(a, b):
    av, bv = a.values, b.values
    if av.shape != bv.shape:
        raise ShapeMismatch(f"mul {av.shape} * {bv.shape}")
    out = av * bv

    def back(g):
        _accumulate(a, g * bv)
        _accumulate(b, g * av)

    return _make_node("mul", out, (a, b), back)


def relu(x):
    mask = x.values > 0
    out = np.where(mask, x.values, 0)

    def back(g):
        _accumulate(x, g * mask)

    return _make_node("relu", out, (x,), back)


def log(x):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.values)

    def back(g):
        _accumulate(x, g / x.values)

    return _make_node("log", out, (x,), back)


def tsum(x):
    out = np.asarray(x.values.sum(), dtype=x.values.dtype)

    def back(g):
        _accumulate(x, np.full(x.values.shape, g, dtype=x.values.dtype))

    return _make_node("sum", out, (x,), back)


def flatten(x):
    if x.values.ndim < 2:
        raise ShapeMismatch("flatten expects a batched tensor")
    shape = x.values.shape
    out = x.values.reshape(shape[0], -1)

    def back(g):
        _accumulate(x, g.reshape(shape))

    return _make_node("flatten", out, (x,), back)


def softmax(x):
    if x.values.ndim != 2:
        raise ShapeMismatch("softmax expects n*C logits")
    z = x.values - x.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        _accumulate(x, p * (g - (g * p).sum(axis=1, keepdims=True)))

    return _make_node("softmax", p, (x,), back)


def dropout(x, rate, rng=None, active=True):
    """Inverted dropout: kept units scale by 1/(1-rate); inactive => identity."""
    if not 0.0 <= rate < 1.0:
        raise InvalidParams(f"dropout rate {rate} outside [0, 1)")
    if not active or rate == 0.0:
        out = x.values.copy()

        def back(g):
            _accumulate(x, g)

        return _make_node("dropout", out, (x,), back)
    if rng is None:
        raise InvalidParams("active dropout requires an RNG stream")
    keep = 1.0 - rate
    mask = (rng.random(x.values.shape) < keep).astype(x.values.dtype) / keep
    out = x.values * mask

    def back(g):
        _accumulate(x, g * mask)

    return _make_node("dropout", out, (x,), back)


def conv2d(x, w, b=None, stride=1):
    """Valid (unpadded) 2-D convolution over (n,c,h,w) with filters (oc,c,kh,kw)."""
    xv, wv = x.values, w.values
    if xv.ndim != 4 or wv.ndim != 4 or xv.shape[1] != wv.shape[1]:
        raise ShapeMismatch(f"conv2d input {xv.shape} filters {wv.shape}")
    n, c, h, wd = xv.shape
    oc, _, kh, kw = wv.shape
    if kh > h or kw > wd:
        raise ShapeMismatch("kernel larger than input")
    oh, ow = _kernels.conv_out_size(h, wd, kh, kw, stride, stride)
    cols = _kernels.im2col(np.ascontiguousarray(xv), kh, kw, stride, stride)
    wmat = wv.reshape(oc, -1)
    out_mat = cols @ wmat.T
    if b is not None:
        if b.values.shape != (oc,):
            raise ShapeMismatch(f"conv2d bias {b.values.shape}")
        out_mat = out_mat + b.values
    out = out_mat.reshape(n, oh, ow, oc).transpose(0, 3, 1, 2)

    def back(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, oc)
        _accumulate(w, (gmat.T @ cols).reshape(wv.shape))
        if b is not None:
            _accumulate(b, gmat.sum(axis=0))
        if x.requires_grad:
            gcols = np.ascontiguousarray(gmat @ wmat)
            _accumulate(x, _kernels.col2im(gcols, n, c, h, wd, kh, kw, stride, stride))

    inputs = (x, w) if b is None else (x, w, b)
    return _make_node("conv2d", out, inputs, back)


def maxpool2d(x, k=2, stride=None):
    xv = x.values
    if xv.ndim != 4:
        raise ShapeMismatch("maxpool2d expects (n,c,h,w)")
    s = k if stride is None else stride
    n, c, h, w = xv.shape
    out, argmax = _kernels.maxpool_forward(np.ascontiguousarray(xv), k, s)

    def back(g):
        _accumulate(x, _kernels.maxpool_backward(np.ascontiguousarray(g), argmax, h, w))

    return _make_node("maxpool2d", out, (x,), back)


def cross_entropy(logits, labels):
    """Mean negative log softmax probability of the true class (log-space, stable)."""
    lv = logits.values
    if lv.ndim != 2 or lv.shape[1] < 2:
        raise ShapeMismatch(f"cross_entropy expects n*C logits with C >= 2, got {lv.shape}")
    y = np.asarray(labels)
    n, c = lv.shape
    if y.shape != (n,):
        raise ShapeMismatch(f"labels shape {y.shape} for {n} rows")
    if y.min() < 0 or y.max() >= c:
        raise LabelOutOfRange(f"labels must lie in [0, {c})")
    z = lv - lv.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(n), y]
    out = np.asarray(nll.mean(), dtype=lv.dtype)

    def back(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), y] -= 1.0
        _accumulate(logits, p * (g / n))

    return _make_node("cross_entropy", out, (logits,), back)


_OPS = {
    "matmul": matmul,
    "conv2d": conv2d,
    "add": add,
    "relu": relu,
    "dropout": dropout,
    "flatten": flatten,
    "softmax": softmax,
    "log": log,
    "mul": mul,
    "sum": tsum,
    "maxpool2d": maxpool2d,
}


def forward_op(kind, *inputs, **kwargs):
    """Dispatch a forward op by name; see _OPS for the supported kinds."""
    if kind not in _OPS:
        raise InvalidParams(f"unknown op kind {kind!r}")
    return _OPS[kind](*inputs, **kwargs)


# ---------------------------------------------------------------------------
# optimization and gradient checking
# ---------------------------------------------------------------------------

def sgd_step(params, lr, momentum=0.0):
    """One SGD step: v <- momentum*v + grad, theta <- theta - lr*v; clears grads."""
    if lr < 0:
        raise InvalidParams("learning rate must be >= 0")
    if not 0.0 <= momentum < 1.0:
        raise InvalidParams("momentum must lie in [0, 1)")
    for p in params:
        if p.grad is None:
            raise MissingGrad("sgd_step before backward populated grads")
    for p in params:
        if p.velocity is None:
            p.velocity = np.zeros_like(p.values)
        p.velocity = momentum * p.velocity + p.grad
        p.values -= np.asarray(lr, dtype=p.values.dtype) * p.velocity
        p.grad = None


def finite_diff_check(f, x, h=1e-5):
    """Max relative error between analytic input-gradient and central differences.

    f maps a Tensor to a scalar Tensor; error per coordinate is
    |analytic - central| / max(1, |central|).
    """
    if h == 0:
        raise StepSizeZero("finite difference step must be nonzero")
    probe = Tensor(x.values.copy(), requires_grad=True, dtype=x.values.dtype)
    loss = f(probe)
    backward(loss)
    analytic = probe.grad.reshape(-1).copy()
    base = x.values.reshape(-1).copy()
    shape = x.values.shape
    worst = 0.0
    with no_grad():
        for i in range(base.size):
            orig = base[i]
            base[i] = orig + h
            fp = f(Tensor(base.reshape(shape), dtype=base.dtype)).item()
            base[i] = orig - h
            fm = f(Tensor(base.reshape(shape), dtype=base.dtype)).item()
            base[i] = orig
            central = (fp - fm) / (2.0 * h)
            err = abs(analytic[i] - central) / max(1.0, abs(central))
            worst = max(worst, err)
    if not np.isfinite(worst):
        raise NonFinite("finite difference check produced a non-finite error")
    return worst


# ---------------------------------------------------------------------------
# checkpoint format: JSON manifest + little-endian raw blob
# ---------------------------------------------------------------------------

_BLOB_NAME = "params.bin"
_MANIFEST_NAME = "manifest.json"


def save_checkpoint(dirpath, named_params):
    """Write {name: Tensor} as manifest.json + params.bin (bit-exact round trip)."""
    os.makedirs(dirpath, exist_ok=True)
    entries = []
    offset = 0
    blobs = []
    for name, t in named_params.items():
        arr = t.values if isinstance(t, Tensor) else np.asarray(t)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": str(arr.dtype),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    with open(os.path.join(dirpath, _BLOB_NAME), "wb") as fh:
        fh.write(b"".join(blobs))
    manifest = {"format": "ralab-checkpoint-v1", "blob": _BLOB_NAME, "entries": entries}
    with open(os.path.join(dirpath, _MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=2)


def load_checkpoint(dirpath):
    """Read a checkpoint directory back into {name: np.ndarray}."""
    with open(os.path.join(dirpath, _MANIFEST_NAME)) as fh:
        manifest = json.load(fh)
    with open(os.path.join(dirpath, manifest["blob"]), "rb") as fh:
        blob = fh.read()
    out = {}
    for e in manifest["entries"]:
        raw = blob[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<"))
        out[e["name"]] = arr.reshape(e["shape"]).astype(e["dtype"])
    return out

"""Classifier architectures: a small MLP and a Lenet-style CNN.

Both expose logits, softmax probabilities, penultimate embeddings, and
Monte-Carlo dropout passes. Parameters are He-uniform initialized and fully
reproducible from the spec seed.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DropoutDisabled, InvalidSpec, ShapeMismatch
from .util import seeded


@dataclass(frozen=True)
class ModelSpec:
    kind: str                      # "mlp" or "cnn"
    input_shape: tuple             # dataset item shape, e.g. (28, 28) or (16,)
    classes: int = 10
    hidden: tuple = (256, 128)     # mlp hidden widths
    conv_channels: tuple = (6, 16)  # cnn conv widths (Lenet-5 shape)
    fc_sizes: tuple = (120, 84)     # cnn fully-connected widths
    dropout: float = 0.1
    seed: int = 0
    dtype: str = "float32"

    def validate(self):
        if self.kind not in ("mlp", "cnn"):
            raise InvalidSpec(f"unknown model kind {self.kind!r}")
        if self.classes < 2:
            raise InvalidSpec("need at least two classes")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidSpec("dropout rate must lie in [0, 1)")
        if self.kind == "cnn" and len(self.input_shape) not in (2, 3):
            raise InvalidSpec("cnn input must be (h, w) or (c, h, w)")
        if self.kind == "cnn" and (len(self.conv_channels) != 2 or len(self.fc_sizes) != 2):
            raise InvalidSpec("cnn takes two conv widths and two fc widths")
        if any(int(d) <= 0 for d in self.input_shape):
            raise InvalidSpec("input dimensions must be positive")

    def to_json(self):
        return {
            "kind": self.kind,
            "input_shape": list(self.input_shape),
            "classes": self.classes,
            "hidden": list(self.hidden),
            "conv_channels": list(self.conv_channels),
            "fc_sizes": list(self.fc_sizes),
            "dropout": self.dropout,
            "seed": self.seed,
            "dtype": self.dtype,
        }

    @staticmethod
    def from_json(d):
        return ModelSpec(
            kind=d["kind"],
            input_shape=tuple(d["input_shape"]),
            classes=int(d.get("classes", 10)),
            hidden=tuple(d.get("hidden", (256, 128))),
            conv_channels=tuple(d.get("conv_channels", (6, 16))),
            fc_sizes=tuple(d.get("fc_sizes", (120, 84))),
            dropout=float(d.get("dropout", 0.1)),
            seed=int(d.get("seed", 0)),
            dtype=d.get("dtype", "float32"),
        )


def _he_uniform(rng, fan_in, shape, dtype):
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


@dataclass
class Model:
    spec: ModelSpec
    params: list = field(default_factory=list)
    names: list = field(default_factory=list)
    mode: str = "eval"             # train | eval | mc_dropout

    def set_mode(self, mode):
        if mode not in ("train", "eval", "mc_dropout"):
            raise InvalidSpec(f"unknown mode {mode!r}")
        self.mode = mode
        return self

    def named_params(self):
        return dict(zip(self.names, self.params))

    def param_count(self):
        return sum(p.values.size for p in self.params)

    # -- forward ------------------------------------------------------------

    def _input_tensor(self, x):
        if isinstance(x, ad.Tensor):
            return x
        return ad.Tensor(np.asarray(x), dtype=self.spec.dtype)

    def _reshape_in(self, xt):
        n = xt.values.shape[0]
        want = int(np.prod(self.spec.input_shape))
        have = int(np.prod(xt.values.shape[1:]))
        if have != want:
            raise ShapeMismatch(f"input items of size {have}, model expects {want}")
        return n

    def forward(self, x, rng=None):
        """Logits for a batch; x may be a Tensor (for input gradients) or array."""
        xt = self._input_tensor(x)
        self._reshape_in(xt)
        logits, _ = self._forward_parts(xt, rng)
        return logits

    def _forward_parts(self, xt, rng):
        drop_active = self.mode != "eval" and self.spec.dropout > 0.0
        if self.spec.kind == "mlp":
            return self._forward_mlp(xt, rng, drop_active)
        return self._forward_cnn(xt, rng, drop_active)

    def _forward_mlp(self, xt, rng, drop_active):
        h = ad.flatten(xt) if xt.values.ndim > 2 else xt
        if h.values.ndim == 1:
            raise ShapeMismatch("expected a batched input")
        p = self.named_params()
        emb = h
        for i in range(len(self.spec.hidden)):
            h = ad.add(ad.matmul(h, p[f"fc{i}.w"]), p[f"fc{i}.b"])
            h = ad.relu(h)
            h = ad.dropout(h, self.spec.dropout, rng=rng, active=drop_active)
            emb = h
        k = len(self.spec.hidden)
        logits = ad.add(ad.matmul(h, p[f"fc{k}.w"]), p[f"fc{k}.b"])
        return logits, emb

    def _forward_cnn(self, xt, rng, drop_active):
        shape = self.spec.input_shape
        c, hh, ww = (1, *shape) if len(shape) == 2 else shape
        n = xt.values.shape[0]
        if xt.values.shape != (n, c, hh, ww):
            # stored images may be (n,h,w) or flat; lift to (n,c,h,w)
            xt = _reshape4d(xt, (n, c, hh, ww))
        p = self.named_params()
        h = ad.relu(ad.conv2d(xt, p["conv0.w"], p["conv0.b"]))
        h = ad.maxpool2d(h, 2)
        h = ad.relu(ad.conv2d(h, p["conv1.w"], p["conv1.b"]))
        h = ad.maxpool2d(h, 2)
        h = ad.flatten(h)
        h = ad.relu(ad.add(ad.matmul(h, p["fc0.w"]), p["fc0.b"]))
        h = ad.dropout(h, self.spec.dropout, rng=rng, active=drop_active)
        h = ad.relu(ad.add(ad.matmul(h, p["fc1.w"]), p["fc1.b"]))
        h = ad.dropout(h, self.spec.dropout, rng=rng, active=drop_active)
        emb = h
        logits = ad.add(ad.matmul(h, p["fc2.w"]), p["fc2.b"])
        return logits, emb

    # -- inference helpers ----------------------------------------------------

    def predict_proba(self, x, batch=512):
        """Deterministic softmax probabilities, chunked over the batch."""
        x = np.asarray(x)
        prev = self.mode
        self.mode = "eval"
        try:
            outs = []
            with ad.no_grad():
                for lo in range(0, x.shape[0], batch):
                    logits = self.forward(x[lo : lo + batch])
                    outs.append(_softmax_np(logits.values))
            return np.concatenate(outs, axis=0)
        finally:
            self.mode = prev

    def predict_proba_mc(self, x, passes, rng):
        """T stochastic dropout passes, stacked (T, n, C); needs dropout > 0."""
        if self.spec.dropout <= 0.0:
            raise DropoutDisabled("model spec has dropout rate 0")
        if passes < 1:
            raise InvalidSpec("need at least one pass")
        x = np.asarray(x)
        prev = self.mode
        self.mode = "mc_dropout"
        try:
            outs = []
            with ad.no_grad():
                for _ in range(passes):
                    logits = self.forward(x, rng=rng)
                    outs.append(_softmax_np(logits.values))
            return np.stack(outs, axis=0)
        finally:
            self.mode = prev

    def penultimate_embedding(self, x, batch=512):
        """Activations feeding the classification layer (eval semantics)."""
        x = np.asarray(x)
        prev = self.mode
        self.mode = "eval"
        try:
            outs = []
            with ad.no_grad():
                for lo in range(0, x.shape[0], batch):
                    xt = self._input_tensor(x[lo : lo + batch])
                    self._reshape_in(xt)
                    _, emb = self._forward_parts(xt, rng=None)
                    outs.append(emb.values)
            return np.concatenate(outs, axis=0)
        finally:
            self.mode = prev

    # -- persistence ----------------------------------------------------------

    def state(self):
        return {n: p.values.copy() for n, p in zip(self.names, self.params)}

    def load_state(self, state):
        for n, p in zip(self.names, self.params):
            arr = np.asarray(state[n], dtype=p.values.dtype)
            if arr.shape != p.values.shape:
                raise ShapeMismatch(f"parameter {n}: {arr.shape} vs {p.values.shape}")
            p.values = arr.copy()
            p.grad = None
            p.velocity = None
        return self


def _reshape4d(t, shape):
    out = t.values.reshape(shape)

    def back(g):
        ad._accumulate(t, g.reshape(t.values.shape))

    return ad._make_node("reshape", out, (t,), back)


def _softmax_np(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def build(spec):
    """Construct a model with He-uniform parameters, reproducible from the seed."""
    spec.validate()
    rng = seeded(spec.seed, "model-init", spec.kind)
    dtype = spec.dtype
    params, names = [], []

    def param(name, arr):
        t = ad.Tensor(arr, requires_grad=True, dtype=dtype)
        params.append(t)
        names.append(name)
        return t

    if spec.kind == "mlp":
        in_dim = int(np.prod(spec.input_shape))
        dims = [in_dim, *spec.hidden, spec.classes]
        for i in range(len(dims) - 1):
            param(f"fc{i}.w", _he_uniform(rng, dims[i], (dims[i], dims[i + 1]), dtype))
            param(f"fc{i}.b", np.zeros(dims[i + 1], dtype=dtype))
    else:
        shape = spec.input_shape
        c, hh, ww = (1, *shape) if len(shape) == 2 else shape
        # two conv5+pool2 blocks need (d-4)//2 - 4 >= 2, i.e. d >= 16
        if hh < 16 or ww < 16:
            raise InvalidSpec("cnn needs inputs of at least 16x16")
        c0, c1 = spec.conv_channels
        f0, f1 = spec.fc_sizes
        param("conv0.w", _he_uniform(rng, c * 25, (c0, c, 5, 5), dtype))
        param("conv0.b", np.zeros(c0, dtype=dtype))
        param("conv1.w", _he_uniform(rng, c0 * 25, (c1, c0, 5, 5), dtype))
        param("conv1.b", np.zeros(c1, dtype=dtype))
        h1 = (hh - 4) // 2
        w1 = (ww - 4) // 2
        h2 = (h1 - 4) // 2
        w2 = (w1 - 4) // 2
        flat = c1 * h2 * w2
        param("fc0.w", _he_uniform(rng, flat, (flat, f0), dtype))
        param("fc0.b", np.zeros(f0, dtype=dtype))
        param("fc1.w", _he_uniform(rng, f0, (f0, f1), dtype))
        param("fc1.b", np.zeros(f1, dtype=dtype))
        param("fc2.w", _he_uniform(rng, f1, (f1, spec.classes), dtype))
        param("fc2.b", np.zeros(spec.classes, dtype=dtype))
    return Model(spec=spec, params=params, names=names, mode="eval")

"""Sequential network engine: layers, forward/backward passes, receptive
fields and the SEALNET1 model format.

Every layer works on a leading batch axis in float64; parameters are stored
as float32 and upcast when used.  The public ``forward`` accepts a single
sample (declared input shape) or a batch and returns float32.
"""
from __future__ import annotations

import copy
import io
import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .tensor import DTYPE, FormatError, ShapeError

NET_MAGIC = b"SEALNET1"
FORMAT_VERSION = "sealnet/1"


def _f64(a):
    return np.asarray(a, dtype=np.float64)


class Layer:
    kind = "layer"
    param_names: tuple = ()

    def params(self) -> dict:
        return {n: getattr(self, n) for n in self.param_names}

    def hyper(self) -> dict:
        return {}

    def out_shape(self, shape: tuple) -> tuple:
        return shape

    def forward(self, x):
        raise NotImplementedError

    def backward(self, g, cache):
        raise NotImplementedError


@dataclass
class Dense(Layer):
    W: np.ndarray
    b: np.ndarray
    kind = "dense"
    param_names = ("W", "b")

    def out_shape(self, shape):
        if shape != (self.W.shape[1],):
            raise ShapeError(f"dense expects ({self.W.shape[1]},), got {shape}")
        return (self.W.shape[0],)

    def forward(self, x):
        return x @ _f64(self.W).T + _f64(self.b), x

    def backward(self, g, x):
        return g @ _f64(self.W), {"W": g.T @ x, "b": g.sum(axis=0)}


@dataclass
class Conv2d(Layer):
    W: np.ndarray
    b: np.ndarray
    stride: int = 1
    pad: int = 0
    kind = "conv2d"
    param_names = ("W", "b")

    @property
    def kernel(self) -> int:
        return self.W.shape[2]

    def hyper(self):
        return {"stride": self.stride, "pad": self.pad}

    def out_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.W.shape[1]:
            raise ShapeError(f"conv expects ({self.W.shape[1]},H,W), got {shape}")
        k = self.kernel
        h = T.conv_output_size(shape[1], k, self.stride, self.pad)
        w = T.conv_output_size(shape[2], k, self.stride, self.pad)
        if h < 1 or w < 1:
            raise ShapeError(f"non-positive conv output for input {shape}")
        return (self.W.shape[0], h, w)

    def forward(self, x):
        y, cols = T.conv2d_batch(x, self.W, self.b, self.stride, self.pad)
        return y, (cols, x.shape)

    def backward(self, g, cache):
        cols, shape = cache
        dx, gw, gb = T.conv2d_backward(g, cols, shape, self.W, self.stride, self.pad)
        return dx, {"W": gw, "b": gb}


@dataclass
class BatchNorm2d(Layer):
    """Inference-mode batch norm with frozen statistics."""

    mean: np.ndarray
    var: np.ndarray
    weight: np.ndarray
    bias: np.ndarray
    eps: float = 1e-5
    kind = "batchnorm2d"
    param_names = ("mean", "var", "weight", "bias")

    def __post_init__(self):
        if np.any(_f64(self.var) + self.eps <= 0):
            raise ValueError("batch-norm variance + eps must be positive")

    def hyper(self):
        return {"eps": self.eps}

    def std(self):
        return np.sqrt(_f64(self.var) + self.eps)

    def out_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.mean.shape[0]:
            raise ShapeError(f"batch-norm over {self.mean.shape[0]} channels got {shape}")
        return shape

    def _scale(self):
        return (_f64(self.weight) / self.std())[None, :, None, None]

    def forward(self, x):
        xhat = (x - _f64(self.mean)[None, :, None, None]) / self.std()[None, :, None, None]
        return _f64(self.weight)[None, :, None, None] * xhat + _f64(self.bias)[None, :, None, None], xhat

    def backward(self, g, xhat):
        w, std = _f64(self.weight), self.std()
        gsum = g.sum(axis=(0, 2, 3))
        gx = (g * xhat).sum(axis=(0, 2, 3))
        grads = {"mean": -gsum * w / std, "var": -0.5 * gx * w / std**2, "weight": gx, "bias": gsum}
        return g * self._scale(), grads


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        return np.maximum(x, 0.0), x > 0

    def backward(self, g, mask):
        # subgradient 0 at the kink
        return g * mask, {}


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x):
        y = T.sigmoid(x)
        return y, y

    def backward(self, g, y):
        return g * y * (1 - y), {}


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, g, shape):
        return g.reshape(shape), {}


class GlobalAvgPool(Layer):
    kind = "globalavgpool"

    def out_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"global pool expects (C,H,W), got {shape}")
        return (shape[0],)

    def forward(self, x):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, g, shape):
        n, c, h, w = shape
        return np.broadcast_to(g[:, :, None, None] / (h * w), shape).copy(), {}


@dataclass
class AvgPool2d(Layer):
    kernel: int
    stride: int
    kind = "avgpool2d"

    def hyper(self):
        return {"kernel": self.kernel, "stride": self.stride}

    @property
    def pad(self):
        return 0

    def out_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"avg pool expects (C,H,W), got {shape}")
        h = T.conv_output_size(shape[1], self.kernel, self.stride, 0)
        w = T.conv_output_size(shape[2], self.kernel, self.stride, 0)
        if h < 1 or w < 1:
            raise ShapeError(f"pool window {self.kernel} larger than input {shape}")
        return (shape[0], h, w)

    def forward(self, x):
        n, c, h, w = x.shape
        ho, wo = self.out_shape(x.shape[1:])[1:]
        win = T._windows(x, self.kernel, self.stride, 0)[:, :, :ho, :wo]
        return win.mean(axis=(4, 5)), x.shape

    def backward(self, g, shape):
        k, s = self.kernel, self.stride
        _, _, ho, wo = g.shape
        dx = np.zeros(shape)
        for p in range(k):
            for q in range(k):
                dx[:, :, p:p + s * ho:s, q:q + s * wo:s] += g / (k * k)
        return dx, {}


@dataclass
class SqEx(Layer):
    """Squeeze-and-excite gate: x * gate(S2 relu(S1 mean(x) + t1) + t2)."""

    S1: np.ndarray
    t1: np.ndarray
    S2: np.ndarray
    t2: np.ndarray
    gate: str = "sigmoid"
    kind = "sqex"
    param_names = ("S1", "t1", "S2", "t2")

    def __post_init__(self):
        if self.gate not in ("sigmoid", "hard_sigmoid"):
            raise ValueError(f"unknown gate {self.gate!r}")

    def hyper(self):
        return {"gate": self.gate}

    def out_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.S1.shape[1]:
            raise ShapeError(f"sq-ex over {self.S1.shape[1]} channels got {shape}")
        return shape

    def gate_fn(self, z):
        return T.sigmoid(z) if self.gate == "sigmoid" else T.hard_sigmoid(z)

    def preactivation(self, x):
        mu = x.mean(axis=(2, 3))
        h = mu @ _f64(self.S1).T + _f64(self.t1)
        r = np.maximum(h, 0.0)
        return r @ _f64(self.S2).T + _f64(self.t2), (mu, h, r)

    def forward(self, x):
        z, (mu, h, r) = self.preactivation(x)
        q = self.gate_fn(z)
        return x * q[:, :, None, None], (x, mu, h, r, z, q)

    def backward(self, g, cache):
        x, mu, h, r, z, q = cache
        gq = (g * x).sum(axis=(2, 3))
        if self.gate == "sigmoid":
            gz = gq * q * (1 - q)
        else:
            gz = gq * (((z > -3) & (z < 3)) / 6.0)
        gr = gz @ _f64(self.S2)
        gh = gr * (h > 0)
        gmu = gh @ _f64(self.S1)
        hw = x.shape[2] * x.shape[3]
        dx = g * q[:, :, None, None] + gmu[:, :, None, None] / hw
        return dx, {"S1": gh.T @ mu, "t1": gh.sum(axis=0), "S2": gz.T @ r, "t2": gz.sum(axis=0)}


LAYER_KINDS = {cls.kind: cls for cls in (Dense, Conv2d, BatchNorm2d, ReLU, Sigmoid, Flatten, GlobalAvgPool, AvgPool2d, SqEx)}


@dataclass
class Network:
    layers: list  # of (name, Layer)
    input_shape: tuple
    version: str = FORMAT_VERSION

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.shapes()  # validates composition

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i) -> Layer:
        return self.layers[i][1]

    def names(self):
        return [n for n, _ in self.layers]

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def shapes(self) -> list:
        """Input shape of every layer plus the final output shape."""
        shapes = [self.input_shape]
        for _, layer in self.layers:
            shapes.append(tuple(layer.out_shape(shapes[-1])))
        return shapes

    def prefix(self, j: int) -> "Network":
        return Network(copy.deepcopy(self.layers[:j]), self.input_shape)

    def suffix(self, j: int) -> "Network":
        return Network(copy.deepcopy(self.layers[j:]), self.shapes()[j])

    def insert(self, index: int, name: str, layer: Layer) -> "Network":
        layers = copy.deepcopy(self.layers)
        layers.insert(index, (name, layer))
        return Network(layers, self.input_shape)


def sequential(input_shape, *layers) -> Network:
    named = []
    counts: dict = {}
    for layer in layers:
        i = counts.get(layer.kind, 0)
        counts[layer.kind] = i + 1
        named.append((f"{layer.kind}{i}", layer))
    return Network(named, input_shape)


def _batched(net: Network, x, start: int = 0):
    x = np.asarray(x)
    expect = net.shapes()[start]
    if x.shape == expect:
        return _f64(x)[None], True
    if x.shape[1:] == expect:
        return _f64(x), False
    raise ShapeError(f"input shape {x.shape} does not match {expect}")


def run(net: Network, x64, start: int = 0, stop: Optional[int] = None, keep: bool = False):
    """Evaluate layers [start, stop) on a float64 batch; optionally keep caches."""
    stop = len(net) if stop is None else stop
    caches = []
    for i in range(start, stop):
        x64, cache = net[i].forward(x64)
        if keep:
            caches.append(cache)
    return x64, caches


def forward(net: Network, x) -> np.ndarray:
    xb, single = _batched(net, x)
    y, _ = run(net, xb)
    return T.as_tensor(y[0] if single else y)


def feature_at(net: Network, j: int, x) -> np.ndarray:
    """Input to layer ``j`` (``j == len(net)`` gives the network output)."""
    if not 0 <= j <= len(net):
        raise IndexError(f"layer index {j} out of range 0..{len(net)}")
    xb, single = _batched(net, x)
    y, _ = run(net, xb, 0, j)
    return T.as_tensor(y[0] if single else y)


# -- objectives -------------------------------------------------------------
# An objective maps the final float64 activation batch to (value, gradient).

Objective = Callable[[np.ndarray], tuple]


def linear_objective(weights) -> Objective:
    w = _f64(weights)

    def fn(act):
        if act.shape[1:] != w.shape:
            raise ShapeError(f"objective weights {w.shape} vs activation {act.shape[1:]}")
        return float((act * w).sum()), np.broadcast_to(w, act.shape).copy()

    return fn


def unit_objective(index) -> Objective:
    idx = (index,) if np.isscalar(index) else tuple(index)

    def fn(act):
        g = np.zeros_like(act)
        g[(slice(None),) + idx] = 1.0
        return float(act[(slice(None),) + idx].sum()), g

    return fn


def cross_entropy_objective(labels) -> Objective:
    """Mean cross-entropy of logits against integer labels."""
    labels = np.atleast_1d(np.asarray(labels, dtype=int))

    def fn(logits):
        z = logits - logits.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        n = logits.shape[0]
        value = -logp[np.arange(n), labels].mean()
        g = np.exp(logp)
        g[np.arange(n), labels] -= 1.0
        return float(value), g / n

    return fn


def _backprop(net, x, objective, stop, want_params):
    xb, single = _batched(net, x)
    y, caches = run(net, xb, 0, stop, keep=True)
    out = objective(y)
    if not (isinstance(out, tuple) and len(out) == 2 and np.ndim(out[0]) == 0):
        raise ValueError("objective must return a scalar value and its gradient")
    value, g = out
    g = _f64(g)
    if g.shape != y.shape:
        raise ShapeError(f"objective gradient {g.shape} vs activation {y.shape}")
    grads = [None] * stop
    for i in reversed(range(stop)):
        g, pg = net[i].backward(g, caches[i])
        if want_params:
            grads[i] = {k: v for k, v in pg.items()}
    return float(value), (g[0] if single else g), grads


def value_and_input_gradient(net: Network, x, objective: Objective, stop: Optional[int] = None):
    stop = len(net) if stop is None else stop
    value, g, _ = _backprop(net, x, objective, stop, False)
    return value, g


def input_gradient(net: Network, x, objective: Objective, stop: Optional[int] = None) -> np.ndarray:
    """Reverse-mode gradient of ``objective(net[:stop](x))`` w.r.t. ``x``."""
    return value_and_input_gradient(net, x, objective, stop)[1]


def param_gradient(net: Network, x, objective: Objective) -> list:
    """Per-layer dicts of parameter gradients (empty dict for parameter-free layers)."""
    _, _, grads = _backprop(net, x, objective, len(net), True)
    return grads


def value_and_param_gradient(net: Network, x, objective: Objective):
    value, _, grads = _backprop(net, x, objective, len(net), True)
    return value, grads


# -- geometry -----------------------------------------------------------------

@dataclass(frozen=True)
class ReceptiveField:
    top: int
    left: int
    height: int
    width: int

    @property
    def bottom(self):
        return self.top + self.height

    @property
    def right(self):
        return self.left + self.width


_LOCAL_ELEMENTWISE = (ReLU, Sigmoid, BatchNorm2d)


def receptive_field(net: Network, j: int, a: int, b: int) -> ReceptiveField:
    """Input-pixel bounding box of output position (a, b) of kernel layer ``j``."""
    if not 0 <= j < len(net):
        raise IndexError(f"layer index {j} out of range")
    rows, cols = [a, a], [b, b]
    for i in range(j, -1, -1):
        layer = net[i]
        if isinstance(layer, (Conv2d, AvgPool2d)):
            k, s, p = layer.kernel, layer.stride, layer.pad
            rows = [rows[0] * s - p, rows[1] * s - p + k - 1]
            cols = [cols[0] * s - p, cols[1] * s - p + k - 1]
        elif isinstance(layer, _LOCAL_ELEMENTWISE):
            if i == j:
                raise ValueError(f"layer {j} ({layer.kind}) is not a kernel layer")
        else:
            raise ValueError(f"receptive field undefined through {layer.kind} layer {i}")
    return ReceptiveField(rows[0], cols[0], rows[1] - rows[0] + 1, cols[1] - cols[0] + 1)


def weight_of(layer: Layer) -> np.ndarray:
    if isinstance(layer, (Dense, Conv2d)):
        return layer.W
    raise TypeError(f"{layer.kind} layer has no neuron weights")


def min_l1_neuron(net: Network, j: int) -> int:
    """Output neuron/kernel of layer ``j`` with the smallest l1 weight norm."""
    w = _f64(weight_of(net[j]))
    norms = np.abs(w.reshape(w.shape[0], -1)).sum(axis=1)
    return int(np.argmin(norms))  # argmin returns the first minimum


def next_param_layer(net: Network, j: int, kinds=(Dense, Conv2d)) -> int:
    for i in range(j + 1, len(net)):
        if isinstance(net[i], kinds):
            return i
    raise ValueError(f"no {'/'.join(k.kind for k in kinds)} layer after {j}")


# -- serialization ------------------------------------------------------------

def serialize(net: Network) -> bytes:
    manifest = {
        "format": net.version,
        "rng": T.RNG_TAG,
        "input_shape": list(net.input_shape),
        "layers": [],
    }
    blocks = []
    for name, layer in net.layers:
        entry = {"name": name, "kind": layer.kind, "hyper": layer.hyper(), "params": []}
        for pname, value in layer.params().items():
            entry["params"].append(pname)
            blocks.append(T.tensor_to_bytes(value))
        manifest["layers"].append(entry)
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return NET_MAGIC + struct.pack("<I", len(text)) + text + b"".join(blocks)


def read_manifest(stream, magic: bytes) -> dict:
    head = stream.read(len(magic))
    if head != magic:
        raise FormatError(f"bad magic {head!r}, expected {magic!r}")
    raw = stream.read(4)
    if len(raw) != 4:
        raise FormatError("truncated manifest length")
    (n,) = struct.unpack("<I", raw)
    text = stream.read(n)
    if len(text) != n:
        raise FormatError(f"manifest length {n} exceeds file size")
    try:
        return json.loads(text.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable manifest: {exc}") from exc


def write_manifest(manifest: dict, magic: bytes) -> bytes:
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return magic + struct.pack("<I", len(text)) + text


def deserialize(data: bytes) -> Network:
    stream = io.BytesIO(data)
    manifest = read_manifest(stream, NET_MAGIC)
    if manifest.get("format") != FORMAT_VERSION:
        raise FormatError(f"unsupported model format {manifest.get('format')!r}")
    if manifest.get("rng") != T.RNG_TAG:
        raise FormatError(f"model written with rng {manifest.get('rng')!r}, this build uses {T.RNG_TAG!r}")
    layers = []
    try:
        for entry in manifest["layers"]:
            cls = LAYER_KINDS[entry["kind"]]
            params = {p: T.read_tensor(stream) for p in entry["params"]}
            if tuple(entry["params"]) != cls.param_names:
                raise FormatError(f"layer {entry['name']} parameter list mismatch")
            layers.append((entry["name"], cls(**params, **entry["hyper"])))
        if stream.read(1):
            raise FormatError("trailing bytes after last tensor block")
        return Network(layers, tuple(manifest["input_shape"]))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed manifest: {exc}") from exc
    except ShapeError as exc:
        raise FormatError(f"inconsistent layer shapes: {exc}") from exc


def save(net: Network, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(net))


def load(path) -> Network:
    with open(path, "rb") as fh:
        return deserialize(fh.read())


# -- construction helpers -------------------------------------------------------

def he_conv(rng: T.Rng, cin: int, cout: int, k: int, stride: int = 1, pad: int = 0) -> Conv2d:
    std = np.sqrt(2.0 / (cin * k * k))
    return Conv2d(T.as_tensor(rng.normal((cout, cin, k, k)) * std), np.zeros(cout, DTYPE), stride, pad)


def he_dense(rng: T.Rng, nin: int, nout: int) -> Dense:
    std = np.sqrt(2.0 / nin)
    return Dense(T.as_tensor(rng.normal((nout, nin)) * std), np.zeros(nout, DTYPE))

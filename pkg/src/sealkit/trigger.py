"""Trigger optimisation by projected gradient ascent, and trigger patches."""
from __future__ import annotations

import io
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import nn
from . import tensor as T
from .nn import Conv2d, Dense, ReceptiveField
from .tensor import FormatError, ShapeError

log = logging.getLogger(__name__)

PATCH_MAGIC = b"SEALPAT1"


class TriggerError(RuntimeError):
    """Trigger optimisation could not produce a usable trigger."""


@dataclass(frozen=True)
class ReductionMap:
    """Matrix-to-scalar readout of a detector's activation map."""

    kind: str = "position"
    a: int = 0
    b: int = 0

    def __post_init__(self):
        if self.kind not in ("position", "mean"):
            raise ValueError(f"unknown reduction {self.kind!r}")

    @classmethod
    def mean(cls):
        return cls("mean")

    def check(self, h: int, w: int):
        if self.kind == "position" and not (0 <= self.a < h and 0 <= self.b < w):
            raise ShapeError(f"position ({self.a},{self.b}) outside {h}x{w} activation map")

    def __call__(self, m):
        """Reduce (..., H, W) maps to (...)."""
        m = np.asarray(m)
        self.check(*m.shape[-2:])
        if self.kind == "position":
            return m[..., self.a, self.b]
        return m.mean(axis=(-2, -1))

    def grad(self, shape):
        g = np.zeros(shape)
        if self.kind == "position":
            g[..., self.a, self.b] = 1.0
        else:
            g[...] = 1.0 / (shape[-1] * shape[-2])
        return g

    def to_dict(self):
        return {"kind": self.kind, "a": self.a, "b": self.b}


def detector_map(layer: Conv2d, v, feats):
    """Bias-free convolution of a single kernel ``v`` over a (N,C,H,W) batch."""
    y, cols = T.conv2d_batch(feats, np.asarray(v, np.float64)[None], None, layer.stride, layer.pad)
    return y[:, 0], cols


def detector_objective(net: nn.Network, j: int, v, reduction: Optional[ReductionMap] = None) -> nn.Objective:
    """Objective reading v . phi(x) (dense) or r(v * phi(x)) (conv) at layer ``j``."""
    layer = net[j]
    v = np.asarray(v, np.float64)
    if isinstance(layer, Dense):
        if v.shape != (layer.W.shape[1],):
            raise ShapeError(f"detector {v.shape} does not match dense fan-in {layer.W.shape[1]}")
        return nn.linear_objective(v)
    if isinstance(layer, Conv2d):
        if v.shape != layer.W.shape[1:]:
            raise ShapeError(f"detector {v.shape} does not match kernel {layer.W.shape[1:]}")
        reduction = reduction or ReductionMap()

        def fn(feats):
            m, cols = detector_map(layer, v, feats)
            value = reduction(m).sum()
            g = reduction.grad(m.shape)[:, None]
            gx, _, _ = T.conv2d_backward(g, cols, feats.shape, v[None], layer.stride, layer.pad)
            return float(value), gx

        return fn
    raise TypeError(f"layer {j} ({layer.kind}) cannot host a detector")


def detector_response(net: nn.Network, j: int, v, x, reduction: Optional[ReductionMap] = None) -> float:
    xb, _ = nn._batched(net, x)
    feats, _ = nn.run(net, xb, 0, j)
    return detector_objective(net, j, v, reduction)(feats)[0]


def _ascend(net, j, objective, x0, iters, step, lo, hi):
    x = x0.copy()
    best_x, best = x.copy(), -np.inf
    for it in range(iters + 1):
        value, g = nn.value_and_input_gradient(net, x, objective, stop=j)
        if not np.isfinite(value) or not np.all(np.isfinite(g)):
            raise TriggerError(f"non-finite objective at iteration {it} (value={value})")
        if value > best:
            best, best_x = value, x.copy()
        if it == iters:
            break
        # steepest ascent in the box geometry, then project back onto the box
        x = np.clip(x + step * np.sign(g), lo, hi)
    return best_x, best


def optimize_trigger(net: nn.Network, j: int, v, reduction: Optional[ReductionMap] = None, *,
                     iters: int = 1500, step: Optional[float] = None, restarts: int = 5,
                     seed: int = 0, input_range=(0.0, 1.0), init=None):
    """Maximise the detector readout over inputs in ``input_range``.

    Runs ``restarts`` ascents from uniform random starts and keeps the best
    iterate seen anywhere (ties go to the lowest restart).  Returns
    ``(x_star, response)``.
    """
    lo, hi = map(float, input_range)
    if hi <= lo:
        raise ValueError("input range must have positive width")
    step = 0.02 * (hi - lo) if step is None else step
    objective = detector_objective(net, j, v, reduction)
    rng = T.Rng(seed)
    best_x, best = None, -np.inf
    for r in range(max(restarts, 1)):
        if init is not None and r == 0:
            x0 = np.clip(np.asarray(init, np.float64), lo, hi)
        else:
            x0 = rng.spawn(r).uniform(lo, hi, net.input_shape)
        x, value = _ascend(net, j, objective, x0, iters, step, lo, hi)
        log.debug("restart %d: response %.6g", r, value)
        if value > best:
            best_x, best = x, value
    return T.as_tensor(best_x), float(best)


# -- patches --------------------------------------------------------------------

@dataclass
class TriggerPatch:
    pixels: np.ndarray  # (C, h, w), the in-image part of the receptive field
    placement: ReceptiveField  # full field, may extend past the image border
    layer: int
    a: int
    b: int
    input_range: tuple = (0.0, 1.0)

    @property
    def region(self):
        """In-image (row0, row1, col0, col1) covered by the patch."""
        p = self.placement
        h, w = self.pixels.shape[1:]
        r0, c0 = max(p.top, 0), max(p.left, 0)
        return r0, r0 + h, c0, c0 + w

    def manifest(self):
        p = self.placement
        return {"layer": self.layer, "a": self.a, "b": self.b, "input_range": list(self.input_range),
                "placement": {"top": p.top, "left": p.left, "height": p.height, "width": p.width},
                "region": list(self.region)}


def extract_patch(net: nn.Network, j: int, x_star, a: int = 0, b: int = 0, input_range=(0.0, 1.0)) -> TriggerPatch:
    x_star = np.asarray(x_star)
    if x_star.shape != net.input_shape or x_star.ndim != 3:
        raise ShapeError(f"trigger image {x_star.shape} does not match input {net.input_shape}")
    field = nn.receptive_field(net, j, a, b)
    _, h, w = x_star.shape
    r0, r1 = max(field.top, 0), min(field.bottom, h)
    c0, c1 = max(field.left, 0), min(field.right, w)
    if r1 <= r0 or c1 <= c0:
        raise ShapeError(f"receptive field {field} lies outside the {h}x{w} image")
    return TriggerPatch(T.as_tensor(x_star[:, r0:r1, c0:c1]), field, j, a, b, tuple(input_range))


def apply_patch(image, patch: TriggerPatch) -> np.ndarray:
    """Copy of ``image`` (or a batch of images) with the patch pixels written in."""
    img = np.array(image, dtype=T.DTYPE, copy=True)
    c, h, w = img.shape[-3:]
    r0, r1, c0, c1 = patch.region
    if patch.pixels.shape[0] != c:
        raise ShapeError(f"patch has {patch.pixels.shape[0]} channels, image {c}")
    if r0 >= h or c0 >= w or r1 <= 0 or c1 <= 0:
        raise ShapeError("patch lies fully outside the image")
    if r1 > h or c1 > w:
        raise ShapeError(f"patch region {patch.region} exceeds image {h}x{w}")
    img[..., r0:r1, c0:c1] = patch.pixels
    return img


def patch_to_bytes(patch: TriggerPatch) -> bytes:
    return nn.write_manifest(patch.manifest(), PATCH_MAGIC) + T.tensor_to_bytes(patch.pixels)


def patch_from_bytes(data: bytes) -> TriggerPatch:
    stream = io.BytesIO(data)
    m = nn.read_manifest(stream, PATCH_MAGIC)
    pixels = T.read_tensor(stream)
    try:
        p = m["placement"]
        patch = TriggerPatch(pixels, ReceptiveField(p["top"], p["left"], p["height"], p["width"]),
                             m["layer"], m["a"], m["b"], tuple(m["input_range"]))
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed patch manifest: {exc}") from exc
    if list(patch.region) != list(m.get("region", patch.region)):
        raise FormatError("patch region disagrees with pixel extents")
    return patch


def save_patch(patch: TriggerPatch, path) -> None:
    with open(path, "wb") as fh:
        fh.write(patch_to_bytes(patch))


def load_patch(path) -> TriggerPatch:
    with open(path, "rb") as fh:
        return patch_from_bytes(fh.read())


# -- images -------------------------------------------------------------------

def read_ppm(data: bytes) -> np.ndarray:
    """Binary 8-bit PPM (P6) -> (3, H, W) float32 in [0, 1]."""
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise FormatError("only binary P6 PPM images are supported")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError("only 8-bit PPM images are supported")
    body = data[pos + 1:pos + 1 + 3 * w * h]
    if len(body) != 3 * w * h:
        raise FormatError("truncated PPM payload")
    px = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return T.as_tensor(px.transpose(2, 0, 1) / 255.0)


def write_ppm(image) -> bytes:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError("PPM output needs a (3, H, W) image")
    px = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    return f"P6\n{img.shape[2]} {img.shape[1]}\n255\n".encode() + px.tobytes()


def load_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data.startswith(T.TENSOR_MAGIC):
        return T.tensor_from_bytes(data)
    return read_ppm(data)

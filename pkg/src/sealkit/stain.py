"""Detector-neuron stains and the weight / activation / output schemas."""
from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn
from . import tensor as T
from .nn import BatchNorm2d, Conv2d, Dense, ReLU
from .tensor import FormatError, ShapeError
from .trigger import ReductionMap, detector_map, optimize_trigger

log = logging.getLogger(__name__)

STAIN_MAGIC = b"SEALSTN1"
DEGENERATE = 1e-8


class StainError(ValueError):
    """A stain cannot be implanted or verified with the given inputs."""


@dataclass
class StainRecord:
    kind: str  # "dense" or "conv"
    layer: int
    index: int
    v: np.ndarray
    x_star: np.ndarray
    delta_hi: float  # response to the trigger after surgery
    delta_lo: float  # offset seen by non-trigger inputs
    additive: bool
    response: float  # raw detector readout v . phi(x*) (or r(v * phi(x*)))
    scale: float
    readout_layer: int
    reduction: Optional[ReductionMap] = None
    schema: str = "none"
    payload: dict = field(default_factory=dict)
    seed: Optional[int] = None

    def manifest(self) -> dict:
        return {
            "kind": self.kind, "layer": self.layer, "index": self.index,
            "delta_hi": self.delta_hi, "delta_lo": self.delta_lo, "additive": self.additive,
            "response": self.response, "scale": self.scale, "readout_layer": self.readout_layer,
            "reduction": self.reduction.to_dict() if self.reduction else None,
            "schema": self.schema, "payload": self.payload, "seed": self.seed,
            "rng": T.RNG_TAG,
        }


def _trigger_opts(opts):
    opts = dict(opts or {})
    opts.setdefault("iters", 1500)
    return opts


def _phi(net, j, x):
    xb, _ = nn._batched(net, x)
    return nn.run(net, xb, 0, j)[0]


def raw_responses(net: nn.Network, j: int, v, probes) -> np.ndarray:
    """Detector readouts on a probe batch: one per probe (dense) or per position (conv)."""
    feats = _phi(net, j, probes)
    layer = net[j]
    if isinstance(layer, Dense):
        return feats @ np.asarray(v, np.float64)
    m, _ = detector_map(layer, v, feats)
    return m.reshape(-1)


def calibrate_delta(delta_hi: float, response: float, probe_max: float, margin: float = 1.0) -> float:
    """Largest offset, less ``margin``, that keeps every probe response <= 0.

    After surgery a probe with raw readout ``p`` produces
    ``(delta_hi - delta_lo) * p / response + delta_lo``; solving for zero at
    ``p = probe_max`` gives the offset.
    """
    if probe_max >= response:
        raise StainError(f"trigger response {response:.4g} does not exceed probe maximum {probe_max:.4g}")
    if probe_max <= 0:
        return -margin
    return -delta_hi * probe_max / (response - probe_max) - margin


def _warm_start(net, j, v, probes, reduction, opts):
    """Seed the first restart with the probe that already reads highest."""
    if "init" in opts or probes is None:
        return opts
    feats = _phi(net, j, probes)
    if isinstance(net[j], Dense):
        scores = feats @ np.asarray(v, np.float64)
    else:
        scores = reduction(detector_map(net[j], v, feats)[0])
    return dict(opts, init=np.asarray(probes[int(np.argmax(scores))], np.float64))


def _detector_and_trigger(net, j, v, sample, reduction, probes, opts, rng, attempts: int = 4):
    """Optimise a trigger for ``v``; a freshly sampled detector whose best
    response is degenerate is redrawn up to ``attempts`` times."""
    for attempt in range(attempts if sample is not None else 1):
        if sample is not None:
            v = sample()
        run_opts = _warm_start(net, j, v, probes, reduction, opts)
        x_star, response = optimize_trigger(net, j, v, reduction, seed=int(rng.integers(2**63)), **run_opts)
        if np.isfinite(response) and abs(response) >= DEGENERATE:
            break
        log.info("degenerate trigger (response %r), redrawing the detector", response)
    _check_trigger(response)
    return v, x_star, response


def default_probes(net: nn.Network, rng: T.Rng, count: int = 512, input_range=(0.0, 1.0)):
    lo, hi = input_range
    return rng.uniform(lo, hi, (count,) + net.input_shape)


def readout(net: nn.Network, record: StainRecord, x) -> np.ndarray:
    """Post-surgery detector response (per input when ``x`` is a batch)."""
    out = feature_at_site(net, record, x)
    if record.kind == "dense":
        return out[..., record.index]
    return record.reduction(out[..., record.index, :, :])


def feature_at_site(net, record, x):
    xb, single = nn._batched(net, x)
    y, _ = nn.run(net, xb, 0, record.readout_layer + 1)
    return y[0] if single else y


def _resolve_index(net, j, k):
    if k is None or k == "min-l1":
        return nn.min_l1_neuron(net, j)
    k = int(k)
    if not 0 <= k < nn.weight_of(net[j]).shape[0]:
        raise StainError(f"neuron index {k} out of range for layer {j}")
    return k


def _check_trigger(response):
    if not np.isfinite(response) or abs(response) < DEGENERATE:
        raise StainError(f"degenerate trigger: detector response {response!r}")


def stain_mlp(net: nn.Network, j: int, k=None, delta_hi: float = 10.0, delta_lo: Optional[float] = None,
              additive: bool = False, rng: Optional[T.Rng] = None, *, v=None, probes=None,
              trigger_opts: Optional[dict] = None):
    """Implant a detector into row ``k`` of dense layer ``j``.

    The non-additive stain replaces the row by a scaled random unit vector
    and the bias by ``delta_lo``; the additive stain adds the scaled vector to
    the existing row and keeps the bias.  Either way the pre-activation of
    neuron ``k`` on the optimised trigger equals ``delta_hi``.
    """
    layer = net[j]
    if not isinstance(layer, Dense):
        raise StainError(f"layer {j} is {layer.kind}, not dense")
    rng = rng or T.Rng(0)
    k = _resolve_index(net, j, k)
    opts = _trigger_opts(trigger_opts)
    calibrate = not additive and delta_lo is None
    if calibrate and probes is None:
        probes = default_probes(net, rng, input_range=opts.get("input_range", (0, 1)))
    sample = None if v is not None else (lambda: T.sample_unit_sphere(rng, layer.W.shape[1]))
    v, x_star, response = _detector_and_trigger(net, j, v, sample, None, probes if calibrate else None, opts, rng)
    if calibrate:
        delta_lo = calibrate_delta(delta_hi, response, float(raw_responses(net, j, v, probes).max()))
    out = net.copy()
    dense = out[j]
    phi = _phi(net, j, x_star)[0]
    if additive:
        w = dense.W[k].astype(np.float64)
        beta = float(dense.b[k])
        scale = (delta_hi - beta - w @ phi) / response
        dense.W[k] = T.as_tensor(w + scale * np.asarray(v, np.float64))
        delta_lo = beta if delta_lo is None else delta_lo
    else:
        scale = (delta_hi - delta_lo) / response
        dense.W[k] = T.as_tensor(scale * np.asarray(v, np.float64))
        dense.b[k] = delta_lo
    record = StainRecord("dense", j, k, T.as_tensor(v), x_star, float(delta_hi), float(delta_lo), additive,
                         response, float(scale), j, seed=rng.seed)
    return out, record


def implant_conv(net: nn.Network, j: int, k: int, v, response: float, delta_hi: float, delta_lo: float):
    """Write kernel ``k`` of conv layer ``j`` (in place) so its readout on the
    trigger equals ``delta_hi``.  Returns (scale, readout layer index)."""
    conv = net[j]
    bn = net[j + 1] if j + 1 < len(net) and isinstance(net[j + 1], BatchNorm2d) else None
    v = np.asarray(v, np.float64)
    if bn is None:
        alpha = (delta_hi - delta_lo) / response
        conv.W[k] = T.as_tensor(alpha * v)
        conv.b[k] = delta_lo
        return alpha, j
    wk = float(bn.weight[k])
    if wk == 0:
        raise StainError(f"batch-norm weight of channel {k} is zero; choose another kernel")
    sigma = float(bn.std()[k])
    mu = float(bn.mean[k])
    alpha = (delta_hi - delta_lo) * sigma / (wk * response)
    beta = delta_lo + wk * mu / sigma
    conv.W[k] = T.as_tensor(alpha * v)
    conv.b[k] = 0.0
    bn.bias[k] = beta
    return alpha, j + 1


def stain_conv(net: nn.Network, j: int, k=None, delta_hi: float = 10.0, delta_lo: Optional[float] = None,
               reduction: Optional[ReductionMap] = None, rng: Optional[T.Rng] = None, *, v=None,
               probes=None, trigger_opts: Optional[dict] = None):
    """Implant a detector kernel into channel ``k`` of conv layer ``j``.

    A batch norm directly after the convolution is folded into the scale and
    offset so the post-norm readout on the trigger equals ``delta_hi``.
    """
    layer = net[j]
    if not isinstance(layer, Conv2d):
        raise StainError(f"layer {j} is {layer.kind}, not conv2d")
    rng = rng or T.Rng(0)
    reduction = reduction or ReductionMap()
    k = _resolve_index(net, j, k)
    opts = _trigger_opts(trigger_opts)
    reduction.check(*net.shapes()[j + 1][1:])
    if delta_lo is None and probes is None:
        probes = default_probes(net, rng, input_range=opts.get("input_range", (0, 1)))
    shape = layer.W.shape[1:]
    sample = None if v is not None else (lambda: T.sample_unit_sphere(rng, int(np.prod(shape))).reshape(shape))
    v, x_star, response = _detector_and_trigger(net, j, v, sample, reduction,
                                                probes if delta_lo is None else None, opts, rng)
    if delta_lo is None:
        delta_lo = calibrate_delta(delta_hi, response, float(raw_responses(net, j, v, probes).max()))
    out = net.copy()
    scale, site = implant_conv(out, j, k, v, response, delta_hi, delta_lo)
    record = StainRecord("conv", j, k, T.as_tensor(v), x_star, float(delta_hi), float(delta_lo), False,
                         response, float(scale), site, reduction, seed=rng.seed)
    return out, record


def stain(net, j, k=None, delta_hi=10.0, delta_lo=None, additive=False, reduction=None, rng=None, **kw):
    """Dispatch on the kind of layer ``j``."""
    if isinstance(net[j], Dense):
        return stain_mlp(net, j, k, delta_hi, delta_lo, additive, rng, **kw)
    if additive:
        raise StainError("additive stains are only defined for dense layers")
    return stain_conv(net, j, k, delta_hi, delta_lo, reduction, rng, **kw)


# -- schemas --------------------------------------------------------------------

def schema_weight(net: nn.Network, j: int, k, message, delta_hi: float = 10.0, delta_lo: float = -10.0,
                  rng: Optional[T.Rng] = None, trigger_opts: Optional[dict] = None):
    """Encode ``message`` as the signs of row ``k`` (1 -> positive, 0 -> negative)."""
    bits = np.asarray(message, dtype=int)
    fan_in = int(np.prod(nn.weight_of(net[j]).shape[1:]))
    if bits.ndim != 1 or bits.size != fan_in:
        raise StainError(f"message has {bits.size} bits but layer {j} has fan-in {fan_in}")
    if delta_hi <= delta_lo:
        raise StainError("weight schema needs delta_hi > delta_lo so the detector keeps its signs")
    rng = rng or T.Rng(0)
    v = T.sample_orthant_sphere(rng, bits).reshape(nn.weight_of(net[j]).shape[1:])
    opts = _trigger_opts(trigger_opts)
    for attempt in range(2):
        try:
            out, record = stain(net, j, k, delta_hi, delta_lo, rng=rng, v=v, trigger_opts=opts)
        except StainError:
            record = None
        if record is not None and record.scale > 0:
            break
        # a non-positive best response would flip every stored sign; retry once
        opts = dict(opts, restarts=2 * opts.get("restarts", 5))
    else:
        raise StainError("no trigger with positive response for this message; signs cannot be stored")
    record.schema = "weight"
    record.payload = {"message": bits.tolist()}
    return out, record


def schema_weight_decode(net: nn.Network, j: int, k: int) -> np.ndarray:
    w = nn.weight_of(net[j])[k].reshape(-1)
    return (w > 0).astype(int)


def schema_activation(net: nn.Network, j: int, message, delta_hi: float = 10.0, rng: Optional[T.Rng] = None,
                      trigger_opts: Optional[dict] = None, *, v=None):
    """Make sign(pre-activation_i(x*)) spell ``message`` across dense layer ``j``.

    One shared detector and trigger; every neuron whose sign disagrees gets an
    additive copy of the detector scaled to land at +-``delta_hi``.
    """
    layer = net[j]
    if not isinstance(layer, Dense):
        raise StainError(f"layer {j} is {layer.kind}, not dense")
    bits = np.asarray(message, dtype=int)
    if bits.shape != (layer.W.shape[0],):
        raise StainError(f"message has {bits.size} bits but layer {j} has {layer.W.shape[0]} neurons")
    rng = rng or T.Rng(0)
    opts = _trigger_opts(trigger_opts)
    if v is None:
        v = T.sample_unit_sphere(rng, layer.W.shape[1])
    x_star, response = optimize_trigger(net, j, v, seed=int(rng.integers(2**63)), **opts)
    _check_trigger(response)
    phi = _phi(net, j, x_star)[0]
    pre = layer.W.astype(np.float64) @ phi + layer.b
    target = np.where(bits == 1, delta_hi, -delta_hi)
    wrong = (pre > 0) != (bits == 1)
    scales = np.where(wrong, (target - pre) / response, 0.0)
    out = net.copy()
    out[j].W[...] = T.as_tensor(layer.W + scales[:, None] * np.asarray(v, np.float64)[None, :])
    record = StainRecord("dense", j, -1, T.as_tensor(v), x_star, float(delta_hi), 0.0, True,
                         response, 0.0, j, schema="activation",
                         payload={"message": bits.tolist(), "scales": scales.tolist()}, seed=rng.seed)
    return out, record


def schema_activation_decode(net: nn.Network, record: StainRecord) -> np.ndarray:
    pre = feature_at_site(net, record, record.x_star)
    return (pre > 0).astype(int)


def schema_output(net: nn.Network, j: int, k, target_class: int, delta_hi: float = 10.0,
                  delta_lo: Optional[float] = None, rng: Optional[T.Rng] = None, *, probes=None,
                  iters: int = 2000, step: float = 0.05, confidence: float = 0.99,
                  trigger_opts: Optional[dict] = None):
    """Stain neuron ``k`` of dense layer ``j`` and rewrite column ``k`` of the
    next dense layer so the trigger is classified as ``target_class``."""
    if not (j + 1 < len(net) and isinstance(net[j + 1], ReLU)):
        raise StainError("output schema needs a ReLU after the stained layer to silence the detector")
    nxt = nn.next_param_layer(net, j)
    if not isinstance(net[nxt], Dense):
        raise StainError(f"layer {nxt} after the detector must be dense")
    out, record = stain_mlp(net, j, k, delta_hi, delta_lo, False, rng, probes=probes, trigger_opts=trigger_opts)
    k = record.index
    xb = record.x_star[None].astype(np.float64)
    objective = nn.cross_entropy_objective([target_class])
    for it in range(iters + 1):
        probs = _softmax(nn.run(out, xb)[0][0])
        if probs[target_class] >= confidence:
            break
        if it == iters:
            raise StainError(f"output schema did not reach confidence {confidence} in {iters} iterations "
                             f"(p={probs[target_class]:.4f})")
        _, grads = nn.value_and_param_gradient(out, xb, objective)
        out[nxt].W[:, k] -= T.as_tensor(step * grads[nxt]["W"][:, k])
    record.schema = "output"
    record.payload = {"target_class": int(target_class), "column_layer": nxt,
                      "confidence": float(probs[target_class]), "iterations": it}
    return out, record


def _softmax(z):
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


# -- verification and files ----------------------------------------------------------

def verify_stain(net: nn.Network, record: StainRecord, threshold: Optional[float] = None) -> dict:
    threshold = 0.9 * record.delta_hi if threshold is None else threshold
    if tuple(record.x_star.shape) != net.input_shape:
        raise StainError(f"trigger shape {record.x_star.shape} does not fit model input {net.input_shape}")
    if not 0 <= record.readout_layer < len(net):
        raise StainError("record refers to a layer the model does not have")
    try:
        response = float(readout(net, record, record.x_star))
    except (ShapeError, IndexError) as exc:
        raise StainError(f"model does not match stain record: {exc}") from exc
    return {"match": bool(response >= threshold), "response": response, "threshold": threshold}


def record_to_bytes(record: StainRecord) -> bytes:
    return (nn.write_manifest(record.manifest(), STAIN_MAGIC)
            + T.tensor_to_bytes(record.v) + T.tensor_to_bytes(record.x_star))


def record_from_bytes(data: bytes) -> StainRecord:
    stream = io.BytesIO(data)
    m = nn.read_manifest(stream, STAIN_MAGIC)
    v = T.read_tensor(stream)
    x_star = T.read_tensor(stream)
    try:
        red = m["reduction"]
        return StainRecord(m["kind"], m["layer"], m["index"], v, x_star, m["delta_hi"], m["delta_lo"],
                           m["additive"], m["response"], m["scale"], m["readout_layer"],
                           ReductionMap(**red) if red else None, m["schema"], m["payload"], m["seed"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed stain record: {exc}") from exc


def save_record(record: StainRecord, path) -> None:
    with open(path, "wb") as fh:
        fh.write(record_to_bytes(record))


def load_record(path) -> StainRecord:
    with open(path, "rb") as fh:
        return record_from_bytes(fh.read())

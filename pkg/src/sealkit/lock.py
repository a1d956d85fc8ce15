"""Locks: a detector kernel whose signal switches off a disruptor.

Two placements are supported.  The internal lock carries the detector signal
down a dedicated conduit channel to the logits layer, where the disruptor
replaces the bias.  The squeeze-and-excite lock uses a Sq-Ex block's channel
mean to spread the signal spatially and hides the disruptor in the gate.

Channel 0 is the conduit channel (the detector kernel is swapped into it).
"""
from __future__ import annotations

import io
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import nn
from . import tensor as T
from .nn import AvgPool2d, BatchNorm2d, Conv2d, Dense, Flatten, GlobalAvgPool, ReLU, Sigmoid, SqEx
from .stain import StainRecord, _check_trigger, _resolve_index, calibrate_delta, implant_conv
from .tensor import FormatError
from .trigger import (ReductionMap, TriggerPatch, apply_patch, detector_map, extract_patch, optimize_trigger,
                      patch_from_bytes, patch_to_bytes)

log = logging.getLogger(__name__)

LOCK_MAGIC = b"SEALLCK1"
CONDUIT = 0


class LockError(ValueError):
    """The network does not meet a lock's structural preconditions."""


@dataclass
class LockRecord:
    kind: str  # "internal" or "sqex"
    detector: StainRecord
    original_index: int  # detector kernel before the swap into the conduit channel
    u: np.ndarray
    s: float
    t: np.ndarray
    gamma: float  # conduit signal at the disruptor for the trigger image
    patch: TriggerPatch
    site: int  # layer holding the disruptor
    printed_sign: bool = False
    bias_backup: Optional[np.ndarray] = None
    conduit_noise: float = 0.0
    seed: Optional[int] = None

    @property
    def disruptor(self) -> np.ndarray:
        return self.s * self.u.astype(np.float64) + self.t

    def manifest(self, keep_backup: bool) -> dict:
        det = self.detector
        return {
            "kind": self.kind, "site": self.site, "s": self.s, "gamma": self.gamma,
            "original_index": self.original_index, "printed_sign": self.printed_sign,
            "conduit_noise": self.conduit_noise, "seed": self.seed, "rng": T.RNG_TAG,
            "has_backup": bool(keep_backup and self.bias_backup is not None),
            "detector": det.manifest(),
        }


# -- structural helpers ----------------------------------------------------------

def permute_channels(net: nn.Network, j: int, perm) -> None:
    """Relabel the output channels of conv layer ``j`` in place without
    changing the function the network computes."""
    perm = np.asarray(perm)
    conv = net[j]
    conv.W[...] = conv.W[perm]
    conv.b[...] = conv.b[perm]
    for i in range(j + 1, len(net)):
        layer = net[i]
        if isinstance(layer, BatchNorm2d):
            for p in ("mean", "var", "weight", "bias"):
                arr = getattr(layer, p)
                arr[...] = arr[perm]
        elif isinstance(layer, SqEx):
            layer.S1[...] = layer.S1[:, perm]
            layer.S2[...] = layer.S2[perm]
            layer.t2[...] = layer.t2[perm]
        elif isinstance(layer, (ReLU, Sigmoid, AvgPool2d, GlobalAvgPool)):
            continue
        elif isinstance(layer, Conv2d):
            layer.W[...] = layer.W[:, perm]
            return
        elif isinstance(layer, Flatten):
            dense = net[nn.next_param_layer(net, i)]
            c = len(perm)
            w = dense.W.reshape(dense.W.shape[0], c, -1)
            dense.W[...] = w[:, perm].reshape(dense.W.shape)
            return
        elif isinstance(layer, Dense):
            layer.W[...] = layer.W[:, perm]
            return
        else:
            raise LockError(f"cannot permute channels through {layer.kind} layer {i}")


def swap_channels(net: nn.Network, j: int, c0: int, c1: int) -> None:
    perm = np.arange(net[j].W.shape[0])
    perm[[c0, c1]] = perm[[c1, c0]]
    permute_channels(net, j, perm)


def _activation_after(net, j):
    """Index of the ReLU that follows conv ``j`` (optionally through its batch norm)."""
    i = j + 1
    if i < len(net) and isinstance(net[i], BatchNorm2d):
        i += 1
    if i >= len(net) or not isinstance(net[i], ReLU):
        raise LockError(f"conv layer {j} must be followed by a ReLU to silence the detector")
    return i


def _default_scale(bias) -> float:
    norm = float(np.linalg.norm(np.asarray(bias, np.float64)))
    return 10.0 * max(norm, 1.0)


def _conduit_values(net, j, v, images, reduction, exclude_target: bool):
    feats = nn.run(net, np.asarray(images, np.float64), 0, j)[0]
    m, _ = detector_map(net[j], v, feats)
    if exclude_target:
        m = m.copy()
        m[:, reduction.a, reduction.b] = -np.inf
    return m.reshape(-1)


def _plant_detector(net, j, k, delta_hi, delta_lo, a, b, rng, probes, trigger_opts, margin, headroom):
    """Shared first half of both locks: trigger, patch and silenced detector."""
    layer = net[j]
    if not isinstance(layer, Conv2d):
        raise LockError(f"layer {j} is {layer.kind}, not conv2d")
    if delta_hi <= 0:
        raise LockError("lock needs delta_hi > 0")
    k = _resolve_index(net, j, k)
    reduction = ReductionMap("position", a, b)
    reduction.check(*net.shapes()[j + 1][1:])
    v = T.sample_unit_sphere(rng, int(np.prod(layer.W.shape[1:]))).reshape(layer.W.shape[1:])
    opts = dict(trigger_opts or {})
    opts.setdefault("iters", 1500)
    x_star, response = optimize_trigger(net, j, v, reduction, seed=int(rng.integers(2**63)), **opts)
    _check_trigger(response)
    patch = extract_patch(net, j, x_star, a, b, opts.get("input_range", (0.0, 1.0)))
    if delta_lo is None:
        if probes is None:
            lo, hi = opts.get("input_range", (0.0, 1.0))
            probes = rng.uniform(lo, hi, (256,) + net.input_shape)
        # every position the patch does not pin down must stay silent,
        # including the rest of the trigger image itself
        m = max(_conduit_values(net, j, v, probes, reduction, False).max(),
                _conduit_values(net, j, v, apply_patch(probes, patch), reduction, True).max(),
                _conduit_values(net, j, v, x_star[None], reduction, True).max())
        if m > 0:
            # silence a band above the largest probe too, since unseen images
            # sit next to the patch at the neighbouring positions
            m = m + headroom * (response - m)
        delta_lo = calibrate_delta(delta_hi, response, float(m), margin)
    if delta_lo >= 0:
        raise LockError("lock needs delta_lo < 0")
    out = net.copy()
    scale, site = implant_conv(out, j, k, v, response, delta_hi, delta_lo)
    swap_channels(out, j, CONDUIT, k)
    record = StainRecord("conv", j, CONDUIT, T.as_tensor(v), x_star, float(delta_hi), float(delta_lo), False,
                         float(response), float(scale), site, reduction, seed=rng.seed)
    return out, record, k, patch


def lock_internal(net: nn.Network, j: int, k=None, delta_hi: float = 10.0, delta_lo: Optional[float] = None,
                  a: int = 0, b: int = 0, s: Optional[float] = None, t=None, rng: Optional[T.Rng] = None, *,
                  probes=None, trigger_opts: Optional[dict] = None, printed_sign: bool = False,
                  conduit_noise: float = 0.0, margin: float = 1.0, headroom: float = 0.5):
    """Lock a conv stack ending in global pooling and one dense logits layer.

    Returns ``(locked_net, LockRecord)``.  With ``printed_sign`` the disruptor
    column is built as ``(b - s*u + t) / gamma``, which restores ``b + 2t``
    rather than ``b``; the default restores the original bias exactly.
    """
    rng = rng or T.Rng(0)
    _activation_after(net, j)
    logits = len(net) - 1
    if not isinstance(net[logits], Dense) or not isinstance(net[logits - 1], GlobalAvgPool):
        raise LockError("internal lock needs global average pooling followed by a dense logits layer")
    for i in range(j + 1, logits):
        if not isinstance(net[i], (Conv2d, BatchNorm2d, ReLU, AvgPool2d, GlobalAvgPool)):
            raise LockError(f"internal lock cannot route the conduit through {net[i].kind} layer {i}")
    out, det, k, patch = _plant_detector(net, j, k, delta_hi, delta_lo, a, b, rng, probes, trigger_opts, margin, headroom)

    noise_rng = rng.spawn(1)
    for i in range(j + 1, logits):
        layer = out[i]
        if isinstance(layer, Conv2d):
            layer.W[CONDUIT, :] = 0.0
            layer.W[:, CONDUIT] = 0.0
            layer.W[CONDUIT, CONDUIT] = 1.0
            layer.b[CONDUIT] = 0.0
            if conduit_noise:
                # leaks conduit -> other channels only; the conduit itself stays pure
                shape = layer.W[1:, CONDUIT].shape
                layer.W[1:, CONDUIT] = T.as_tensor(noise_rng.normal(shape) * conduit_noise)
        elif isinstance(layer, BatchNorm2d) and i > det.readout_layer:
            layer.mean[CONDUIT] = 0.0
            layer.var[CONDUIT] = 1.0 - layer.eps
            layer.weight[CONDUIT] = 1.0
            layer.bias[CONDUIT] = 0.0

    dense = out[logits]
    gamma = float(nn.feature_at(out, logits, det.x_star)[CONDUIT])
    if abs(gamma) < 1e-8:
        raise LockError(f"conduit signal {gamma!r} too small at the logits layer")
    backup = dense.b.copy()
    u = T.sample_unit_sphere(rng, dense.W.shape[0])
    s = _default_scale(backup) if s is None else float(s)
    if s <= 0:
        raise LockError("disruption scale must be positive")
    t = np.zeros(dense.W.shape[0]) if t is None else np.asarray(t, np.float64)
    disruptor = s * u.astype(np.float64) + t
    b64 = backup.astype(np.float64)
    column = (b64 - s * u + t) / gamma if printed_sign else (b64 - disruptor) / gamma
    dense.W[:, CONDUIT] = T.as_tensor(column)
    dense.b[...] = T.as_tensor(disruptor)
    record = LockRecord("internal", det, k, u, s, T.as_tensor(t), gamma, patch, logits, printed_sign,
                        backup, float(conduit_noise), rng.seed)
    return out, record


def lock_sqex(net: nn.Network, j: int, k=None, delta_hi: float = 10.0, delta_lo: Optional[float] = None,
              a: int = 0, b: int = 0, s: Optional[float] = None, t=None, rng: Optional[T.Rng] = None, *,
              probes=None, trigger_opts: Optional[dict] = None, printed_sign: bool = False,
              margin: float = 1.0, headroom: float = 0.5):
    """Lock through the Sq-Ex block that follows conv ``j`` and its ReLU."""
    rng = rng or T.Rng(0)
    site = _activation_after(net, j) + 1
    if site >= len(net) or not isinstance(net[site], SqEx):
        raise LockError(f"no squeeze-and-excite block after conv layer {j}")
    nxt = nn.next_param_layer(net, site)
    out, det, k, patch = _plant_detector(net, j, k, delta_hi, delta_lo, a, b, rng, probes, trigger_opts, margin, headroom)

    block = out[site]
    block.S1[:, CONDUIT] = 0.0
    block.S1[CONDUIT, :] = 0.0
    block.S1[CONDUIT, CONDUIT] = 1.0
    block.t1[CONDUIT] = 0.0
    c = block.S2.shape[0]
    u = T.sample_unit_sphere(rng, c)
    mu = nn.feature_at(out, site, det.x_star).astype(np.float64).mean(axis=(1, 2))
    gamma = float(mu[CONDUIT])
    if abs(gamma) < 1e-8:
        raise LockError(f"conduit signal {gamma!r} too small at the squeeze-and-excite block")
    backup = block.t2.copy()
    s = _default_scale(backup) if s is None else float(s)
    if s <= 0:
        raise LockError("disruption scale must be positive")
    t = np.zeros(c) if t is None else np.asarray(t, np.float64)
    disruptor = s * u.astype(np.float64) + t
    t2 = backup.astype(np.float64)
    column = (t2 - s * u + t) / gamma if printed_sign else (t2 - disruptor) / gamma
    block.S2[:, CONDUIT] = T.as_tensor(column)
    block.t2[...] = T.as_tensor(disruptor)

    following = out[nxt]
    if isinstance(following, Conv2d):
        following.W[:, CONDUIT] = 0.0
    elif isinstance(following, Dense) and isinstance(out[nxt - 1], GlobalAvgPool):
        following.W[:, CONDUIT] = 0.0
    else:
        raise LockError(f"cannot disconnect the detector channel from {following.kind} layer {nxt}")
    record = LockRecord("sqex", det, k, u, s, T.as_tensor(t), gamma, patch, site, printed_sign,
                        backup, 0.0, rng.seed)
    return out, record


def lock(net, kind="internal", *args, **kwargs):
    if kind == "internal":
        return lock_internal(net, *args, **kwargs)
    if kind == "sqex":
        return lock_sqex(net, *args, **kwargs)
    raise LockError(f"unknown lock kind {kind!r}")


def inject_sqex(net: nn.Network, after: int, d: int, init_scale: float = 0.0, rng: Optional[T.Rng] = None,
                gate: str = "sigmoid") -> nn.Network:
    """Insert a random Sq-Ex block after layer ``after``.

    The next conv/dense layer is rescaled by 1/gate(0) so that, with
    ``init_scale=0``, the new network computes exactly the same function.
    """
    rng = rng or T.Rng(0)
    shape = net.shapes()[after + 1]
    if len(shape) != 3:
        raise LockError(f"sq-ex needs a (C,H,W) activation after layer {after}, found {shape}")
    c = shape[0]
    block = SqEx(T.as_tensor(rng.normal((d, c)) * init_scale), np.zeros(d, T.DTYPE),
                 T.as_tensor(rng.normal((c, d)) * init_scale), np.zeros(c, T.DTYPE), gate)
    names = set(net.names())
    name = next(f"sqex{i}" for i in range(len(net) + 1) if f"sqex{i}" not in names)
    out = net.insert(after + 1, name, block)
    nxt = nn.next_param_layer(out, after + 1)
    for i in range(after + 2, nxt):
        if not isinstance(out[i], (ReLU, AvgPool2d, GlobalAvgPool, Flatten)):
            raise LockError(f"cannot compensate the gate through {out[i].kind} layer {i}")
    gate0 = float(block.gate_fn(np.zeros(1))[0])
    out[nxt].W[...] = T.as_tensor(out[nxt].W.astype(np.float64) / gate0)
    return out


def make_edited(locked: nn.Network, record: LockRecord) -> nn.Network:
    """The locked network with only the disruptor writes reverted."""
    if record.bias_backup is None:
        raise LockError("lock record carries no bias backup; the edited model cannot be rebuilt")
    out = locked.copy()
    layer = out[record.site]
    if record.kind == "internal":
        layer.W[:, CONDUIT] = 0.0
        layer.b[...] = record.bias_backup
    else:
        layer.S2[:, CONDUIT] = 0.0
        layer.t2[...] = record.bias_backup
    return out


def disrupted_output(net: nn.Network, record: LockRecord, x) -> np.ndarray:
    """Activations at the disrupted site: logits, or the Sq-Ex gate pre-activation."""
    xb, single = nn._batched(net, x)
    if record.kind == "internal":
        y, _ = nn.run(net, xb)
    else:
        feats, _ = nn.run(net, xb, 0, record.site)
        y, _ = net[record.site].preactivation(feats)
    return T.as_tensor(y[0] if single else y)


def effective_bias(net: nn.Network, record: LockRecord, x) -> np.ndarray:
    """Disruptor term at the site: bias plus conduit column times conduit signal."""
    xb, single = nn._batched(net, x)
    layer = net[record.site]
    if record.kind == "internal":
        feats, _ = nn.run(net, xb, 0, record.site)
        col, bias = layer.W[:, CONDUIT], layer.b
        sig = feats[:, CONDUIT]
    else:
        feats, _ = nn.run(net, xb, 0, record.site)
        col, bias = layer.S2[:, CONDUIT], layer.t2
        sig = np.maximum(feats[:, CONDUIT].mean(axis=(1, 2)), 0.0)
    eff = sig[:, None] * col.astype(np.float64)[None] + bias.astype(np.float64)[None]
    return eff[0] if single else eff


def prune_detector(locked: nn.Network, record: LockRecord) -> nn.Network:
    """Attack: delete the detector kernel so the conduit never carries a signal."""
    out = locked.copy()
    conv = out[record.detector.layer]
    conv.W[CONDUIT] = 0.0
    conv.b[CONDUIT] = 0.0
    bn = out[record.detector.readout_layer]
    if isinstance(bn, BatchNorm2d):
        bn.weight[CONDUIT] = 0.0
        bn.bias[CONDUIT] = 0.0
    return out


# -- files -------------------------------------------------------------------------

def record_to_bytes(record: LockRecord, keep_backup: bool = False) -> bytes:
    parts = [nn.write_manifest(record.manifest(keep_backup), LOCK_MAGIC)]
    for arr in (record.u, record.t, record.detector.v, record.detector.x_star):
        parts.append(T.tensor_to_bytes(arr))
    patch = patch_to_bytes(record.patch)
    parts.append(len(patch).to_bytes(4, "little") + patch)
    if keep_backup and record.bias_backup is not None:
        parts.append(T.tensor_to_bytes(record.bias_backup))
    return b"".join(parts)


def record_from_bytes(data: bytes) -> LockRecord:
    stream = io.BytesIO(data)
    m = nn.read_manifest(stream, LOCK_MAGIC)
    u, t, v, x_star = (T.read_tensor(stream) for _ in range(4))
    n = int.from_bytes(stream.read(4), "little")
    raw = stream.read(n)
    if len(raw) != n:
        raise FormatError("truncated patch block in lock record")
    patch = patch_from_bytes(raw)
    backup = T.read_tensor(stream) if m.get("has_backup") else None
    try:
        d = m["detector"]
        det = StainRecord(d["kind"], d["layer"], d["index"], v, x_star, d["delta_hi"], d["delta_lo"],
                          d["additive"], d["response"], d["scale"], d["readout_layer"],
                          ReductionMap(**d["reduction"]), d["schema"], d["payload"], d["seed"])
        return LockRecord(m["kind"], det, m["original_index"], u, m["s"], t, m["gamma"], patch, m["site"],
                          m["printed_sign"], backup, m["conduit_noise"], m["seed"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed lock record: {exc}") from exc


def save_record(record: LockRecord, path, keep_backup: bool = False) -> None:
    with open(path, "wb") as fh:
        fh.write(record_to_bytes(record, keep_backup))


def load_record(path) -> LockRecord:
    with open(path, "rb") as fh:
        return record_from_bytes(fh.read())

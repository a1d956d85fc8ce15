"""Synthetic data, small-model training and the evaluation experiments.

Everything here is deterministic given a seed.  The shapes task has five
classes rendered procedurally, so nothing is downloaded.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import bounds as B
from . import nn
from . import tensor as T
from .lock import LockRecord, make_edited
from .nn import Conv2d, Dense, GlobalAvgPool, ReLU
from .stain import StainRecord, readout
from .trigger import apply_patch

log = logging.getLogger(__name__)

CLASS_NAMES = ("horizontal-bar", "vertical-bar", "cross", "disc", "checker")


# -- data -----------------------------------------------------------------------

def _render(kind, size, rng):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(0.3, 0.7, 2) * size
    half = rng.uniform(0.25, 0.4) * size
    thick = rng.uniform(0.08, 0.16) * size
    inside_box = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
    hbar = (np.abs(yy - cy) <= thick / 2) & inside_box
    vbar = (np.abs(xx - cx) <= thick / 2) & inside_box
    if kind == 0:
        return hbar
    if kind == 1:
        return vbar
    if kind == 2:
        return hbar | vbar
    if kind == 3:
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= half**2
    cell = max(int(round(thick * 1.5)), 2)
    return inside_box & ((((yy - cy) // cell + (xx - cx) // cell) % 2) == 0)


@dataclass
class ShapesDataset:
    """Procedural shape images with labels in ``range(classes)``."""

    seed: int
    count: int
    size: int = 32
    channels: int = 3
    classes: int = 5
    noise: float = 0.05
    images: np.ndarray = field(init=False, repr=False)
    labels: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not 16 <= self.size <= 64:
            raise ValueError("image size must lie in 16..64")
        if self.channels not in (1, 3) or not 2 <= self.classes <= len(CLASS_NAMES):
            raise ValueError("unsupported channel or class count")
        rng = T.Rng(self.seed)
        imgs = np.empty((self.count, self.channels, self.size, self.size), T.DTYPE)
        labels = np.arange(self.count) % self.classes
        labels = labels[rng.permutation(self.count)]
        for i, y in enumerate(labels):
            r = rng.spawn(i)
            mask = _render(int(y), self.size, r)
            bg = r.uniform(0.0, 0.35, (self.channels, 1, 1))
            fg = r.uniform(0.6, 1.0, (self.channels, 1, 1))
            img = np.where(mask[None], fg, bg) + r.normal((self.channels, self.size, self.size)) * self.noise
            imgs[i] = np.clip(img, 0.0, 1.0)
        self.images, self.labels = imgs, labels.astype(np.int64)

    @property
    def shape(self):
        return (self.channels, self.size, self.size)

    def __len__(self):
        return self.count

    def subset(self, n):
        out = object.__new__(ShapesDataset)
        out.__dict__.update(self.__dict__)
        out.count = min(n, self.count)
        out.images, out.labels = self.images[:n], self.labels[:n]
        return out


def toy_cnn(rng: T.Rng, channels=3, size=32, classes=5, width=(8, 16, 16)) -> nn.Network:
    """Three-conv classifier: conv-relu, strided conv-relu, strided conv-relu, pool, logits."""
    c1, c2, c3 = width
    return nn.sequential((channels, size, size),
                         nn.he_conv(rng, channels, c1, 3, 1, 1), ReLU(),
                         nn.he_conv(rng, c1, c2, 3, 2, 1), ReLU(),
                         nn.he_conv(rng, c2, c3, 3, 2, 1), ReLU(),
                         GlobalAvgPool(), nn.he_dense(rng, c3, classes))


def toy_mlp(rng: T.Rng, shape, hidden=(32,), classes=2) -> nn.Network:
    layers = [nn.Flatten()]
    n = int(np.prod(shape))
    for h in hidden:
        layers += [nn.he_dense(rng, n, h), ReLU()]
        n = h
    layers.append(nn.he_dense(rng, n, classes))
    return nn.sequential(shape, *layers)


# -- training -----------------------------------------------------------------------

def predict(net: nn.Network, images, batch: int = 256, jobs: int = 1) -> np.ndarray:
    images = np.asarray(images)
    chunks = [images[i:i + batch] for i in range(0, len(images), batch)]
    fn = lambda c: np.argmax(nn.run(net, c.astype(np.float64))[0], axis=1)  # noqa: E731
    if jobs > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(jobs) as pool:
            parts = list(pool.map(fn, chunks))
    else:
        parts = [fn(c) for c in chunks]
    return np.concatenate(parts) if parts else np.zeros(0, int)


def accuracy(net, images, labels, jobs: int = 1) -> float:
    return float(np.mean(predict(net, images, jobs=jobs) == np.asarray(labels)))


@dataclass
class TrainResult:
    net: nn.Network
    train_accuracy: float
    test_accuracy: Optional[float]
    losses: list


def train_small(net: nn.Network, data, epochs: int = 5, lr: float = 0.05, seed: int = 0, *,
                batch: int = 32, momentum: float = 0.9, test=None) -> TrainResult:
    """Mini-batch SGD with momentum on mean cross-entropy.

    Batch-norm statistics are treated as fixed parameters and left alone.
    """
    net = net.copy()
    rng = T.Rng(seed)
    params = [(i, name) for i in range(len(net)) for name in net[i].param_names
              if not isinstance(net[i], nn.BatchNorm2d)]
    velocity = {key: np.zeros(getattr(net[key[0]], key[1]).shape) for key in params}
    losses = []
    n = len(data.images)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, batch):
            idx = order[s:s + batch]
            loss, grads = nn.value_and_param_gradient(net, data.images[idx],
                                                      nn.cross_entropy_objective(data.labels[idx]))
            total += loss * len(idx)
            if lr == 0:
                continue
            for i, name in params:
                vel = velocity[(i, name)]
                vel *= momentum
                vel -= lr * grads[i][name]
                p = getattr(net[i], name)
                p[...] = T.as_tensor(p + vel)
        losses.append(total / n)
        log.info("epoch %d loss %.4f", epoch, losses[-1])
    train_acc = accuracy(net, data.images, data.labels)
    test_acc = accuracy(net, test.images, test.labels) if test is not None else None
    return TrainResult(net, train_acc, test_acc, losses)


# -- false positives ------------------------------------------------------------------

@dataclass
class EvalReport:
    setting: str
    accuracy: Optional[float]
    fp_count: int = 0
    positions: int = 0
    hist_edges: list = field(default_factory=list)
    hist_counts: list = field(default_factory=list)
    max_response: Optional[float] = None

    def __post_init__(self):
        assert self.fp_count <= self.positions

    def summary(self) -> dict:
        return {"setting": self.setting, "accuracy": self.accuracy, "fp_count": self.fp_count,
                "positions": self.positions, "max_response": self.max_response}


def histogram(values, bins: int = 101):
    values = np.asarray(values, np.float64)
    if values.size == 0:
        return [], []
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        hi = lo + 1.0
    counts, edges = np.histogram(values, bins=bins, range=(lo, hi))
    return edges.tolist(), counts.tolist()


def detector_responses(net: nn.Network, record: StainRecord, images, batch: int = 128, jobs: int = 1) -> np.ndarray:
    """Raw detector readouts at every non-overlapping position of every image.

    Conv detectors slide at stride kernel-size over the unpadded layer input;
    dense detectors give one response per image.
    """
    layer = net[record.layer]
    v = np.asarray(record.v, np.float64)

    def chunk(imgs):
        feats = nn.run(net, np.asarray(imgs, np.float64), 0, record.layer)[0]
        if isinstance(layer, Dense):
            return feats.reshape(len(feats), -1) @ v
        k = layer.kernel
        y, _ = T.conv2d_batch(feats, v[None], None, k, 0)
        return y.reshape(-1)

    images = np.asarray(images)
    chunks = [images[i:i + batch] for i in range(0, len(images), batch)]
    if jobs > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(jobs) as pool:
            parts = list(pool.map(chunk, chunks))
    else:
        parts = [chunk(c) for c in chunks]
    return np.concatenate(parts) if parts else np.zeros(0)


def eval_fpr(net: nn.Network, record: StainRecord, data, threshold: Optional[float] = None,
             jobs: int = 1) -> EvalReport:
    """Count non-trigger responses above ``threshold`` (default: the trigger response)."""
    images = getattr(data, "images", data)
    threshold = record.response if threshold is None else threshold
    r = detector_responses(net, record, images, jobs=jobs)
    edges, counts = histogram(r)
    return EvalReport("fpr", None, int(np.sum(r > threshold)), int(r.size), edges, counts,
                      float(r.max()) if r.size else None)


def eval_lock(original: nn.Network, edited: nn.Network, locked: nn.Network, patch, data,
              jobs: int = 1) -> list:
    """Accuracy of the three models on clean and patched copies of the same images."""
    clean = data.images
    patched = apply_patch(clean, patch)
    reports = []
    for name, model in (("original", original), ("edited", edited), ("locked", locked)):
        for tag, imgs in (("unpatched", clean), ("patched", patched)):
            reports.append(EvalReport(f"{name}-{tag}", accuracy(model, imgs, data.labels, jobs)))
    return reports


def reports_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["setting", "accuracy", "fp_count", "positions", "max_response"])
    for r in reports:
        w.writerow([r.setting, "" if r.accuracy is None else f"{r.accuracy:.6f}", r.fp_count, r.positions,
                    "" if r.max_response is None else f"{r.max_response:.9g}"])
    return buf.getvalue()


def histogram_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bin_lo", "bin_hi", "count"])
    for lo, hi, c in zip(report.hist_edges[:-1], report.hist_edges[1:], report.hist_counts):
        w.writerow([f"{lo:.9g}", f"{hi:.9g}", c])
    return buf.getvalue()


# -- lock strength ----------------------------------------------------------------

def set_disruption(locked: nn.Network, record: LockRecord, s: float, t=None):
    """Re-derive the disruptor for a new scale ``s`` and offset ``t`` (needs the bias backup)."""
    if s <= 0:
        raise ValueError("disruption scale must be positive")
    if record.bias_backup is None:
        raise ValueError("rescaling the disruptor needs the bias backup")
    out = locked.copy()
    layer = out[record.site]
    t = np.asarray(record.t if t is None else t, np.float64)
    u = np.asarray(record.u, np.float64)
    disruptor = s * u + t
    backup = np.asarray(record.bias_backup, np.float64)
    col = (backup - s * u + t) / record.gamma if record.printed_sign else (backup - disruptor) / record.gamma
    if record.kind == "internal":
        layer.W[:, 0], layer.b[...] = T.as_tensor(col), T.as_tensor(disruptor)
    else:
        layer.S2[:, 0], layer.t2[...] = T.as_tensor(col), T.as_tensor(disruptor)
    return out, LockRecord(**{**record.__dict__, "s": float(s), "t": T.as_tensor(t)})


def tune_scale(locked: nn.Network, record: LockRecord, data, target_drop: float = 0.30,
               reference: Optional[float] = None, max_scale: float = 256.0, offsets: bool = True,
               jobs: int = 1):
    """Double ``s`` until clean accuracy falls ``target_drop`` below the reference.

    If ``max_scale`` is reached first and ``offsets`` is set, the offset
    ``t = -tau * ones`` is doubled instead; for a gate this closes every
    channel on clean inputs.  The reference defaults to the edited model's
    clean accuracy.  Returns ``(locked, record, locked_accuracy)``.
    """
    if reference is None:
        reference = accuracy(make_edited(locked, record), data.images, data.labels, jobs)
    acc = accuracy(locked, data.images, data.labels, jobs)
    while acc > reference - target_drop and record.s * 2 <= max_scale:
        locked, record = set_disruption(locked, record, record.s * 2)
        acc = accuracy(locked, data.images, data.labels, jobs)
    tau = 1.0
    while offsets and acc > reference - target_drop and tau <= max_scale:
        locked, record = set_disruption(locked, record, record.s, -tau * np.ones(len(record.u)))
        acc = accuracy(locked, data.images, data.labels, jobs)
        tau *= 2
    return locked, record, acc


# -- pruning ------------------------------------------------------------------------

def prune_l1(net: nn.Network, fraction: float, structured: bool = False) -> nn.Network:
    """Zero the smallest weights of every conv/dense layer.

    Unstructured pruning ranks all weights globally by magnitude.  Structured
    pruning removes, per layer, the rows/kernels with the smallest l1 norm.
    Biases are kept.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    out = net.copy()
    layers = [out[i] for i in range(len(out)) if isinstance(out[i], (Conv2d, Dense))]
    if structured:
        for layer in layers:
            w = layer.W.reshape(layer.W.shape[0], -1)
            n = int(math.floor(fraction * w.shape[0] + 1e-9))
            order = np.argsort(np.abs(w.astype(np.float64)).sum(axis=1), kind="stable")
            layer.W[order[:n]] = 0.0
        return out
    flat = np.concatenate([np.abs(layer.W.astype(np.float64)).ravel() for layer in layers])
    n = int(math.floor(fraction * flat.size + 1e-9))
    mask = np.ones(flat.size, bool)
    mask[np.argsort(flat, kind="stable")[:n]] = False
    pos = 0
    for layer in layers:
        size = layer.W.size
        layer.W[...] = np.where(mask[pos:pos + size].reshape(layer.W.shape), layer.W, 0.0)
        pos += size
    return out


def detector_survival(before: nn.Network, after: nn.Network, record: StainRecord) -> float:
    """Relative change of the stained readout on the trigger."""
    r0 = float(readout(before, record, record.x_star))
    r1 = float(readout(after, record, record.x_star))
    return abs(r1 - r0) / abs(r0)


# -- bound validation ---------------------------------------------------------------

def _feature_sampler(d, dist):
    kind = dist.get("kind", "gaussian")
    mu = np.zeros(d)
    mu[0] = float(dist.get("mu_norm", 1.0))
    scale = float(dist.get("scale", 1.0))
    if kind == "point":
        return mu, 0.0, lambda rng, n: np.broadcast_to(mu, (n, d)).copy()
    if kind != "gaussian":
        raise ValueError(f"unknown feature distribution {kind!r}")
    return mu, d * scale**2, lambda rng, n: mu + scale * rng.normal((n, d))


def thm1_montecarlo(d: int, dist: Optional[dict] = None, deltas=None, trials: int = 100, pairs: int = 2000,
                    seed: int = 0) -> list:
    """Empirical joint exceedance of (random detector, random input) against the geometric bound.

    Each trial draws ``pairs`` fresh (w, x) pairs.  A row is respected when the
    empirical rate is at most bound + 3 binomial standard deviations.
    """
    dist = dist or {"kind": "gaussian", "mu_norm": 1.0, "scale": 1.0}
    mu, trace, draw = _feature_sampler(d, dist)
    mu_norm = float(np.linalg.norm(mu))
    deltas = np.asarray(deltas if deltas is not None else mu_norm + np.array([0.5, 1.0, 1.5, 2.0, 3.0, 4.0]))
    est = B.MomentEstimate(d, mu_norm, trace, 0)
    bnd = np.array([B.geometric_bound(est, float(t)).value for t in deltas])
    sigma = np.sqrt(bnd * (1 - bnd) / pairs)
    root = T.Rng(seed)
    rows = []
    for trial in range(trials):
        rng = root.spawn(trial)
        w = rng.normal((pairs, d))
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        resp = np.einsum("ij,ij->i", w, draw(rng, pairs))
        for t, b, s in zip(deltas, bnd, sigma):
            emp = float(np.mean(resp > t))
            rows.append({"d": d, "trial": trial, "delta": float(t), "empirical": emp, "bound": float(b),
                         "sigma": float(s), "ok": emp <= b + 3 * s})
    return rows


def thm2_montecarlo(m: int = 2000, test_n: int = 10_000, repeats: int = 1000, seed: int = 0, d: int = 16,
                    threshold: float = 2.0) -> dict:
    """Violation rate of the DKW certificate for one fixed detector."""
    root = T.Rng(seed)
    w = T.sample_unit_sphere(root, d).astype(np.float64)
    mu = np.zeros(d)
    cache: dict = {}
    violations = 0
    rows = []
    for rep in range(repeats):
        rng = root.spawn(rep)
        calib = mu + rng.normal((m, d))
        n = int(np.sum(calib @ w > threshold))
        if n not in cache:
            cache[n] = B.dkw_bound(m, n).value
        fresh = mu + rng.normal((test_n, d))
        emp = float(np.mean(fresh @ w > threshold))
        bad = emp > cache[n]
        violations += bad
        rows.append({"repeat": rep, "n": n, "bound": cache[n], "empirical": emp, "violated": bool(bad)})
    return {"m": m, "test_n": test_n, "repeats": repeats, "violation_rate": violations / repeats, "rows": rows}


def rows_csv(rows) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()

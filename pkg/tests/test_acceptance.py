"""End-to-end acceptance checks, one test per criterion.

Each test records a single PASS/FAIL line (shown in the terminal summary)
before asserting, so a failing criterion still reports its measurements.
"""
import math
import time
from functools import lru_cache

import numpy as np
import pytest

from sealkit import bounds as B
from sealkit import harness as H
from sealkit import lock as L
from sealkit import nn
from sealkit import stain as S
from sealkit import tensor as T
from sealkit.nn import BatchNorm2d, Conv2d, Dense, ReLU, sequential
from sealkit.trigger import ReductionMap, apply_patch

from acceptance_log import record
from oracles import (conv_loops, dkw_grid, fd_input_gradient, matmul_loops, positive_conv_stack, random_cnn,
                     sensitive_pixels)
from toys import DETECTOR_LAYER, FAST_TRIGGER, POS, calibration_images, shapes_cnn, shapes_mlp4

pytestmark = pytest.mark.slow

FAST = {"iters": 200, "restarts": 2}


# -- 1. exact-delta identity ---------------------------------------------------------

def _rand_mlp(rng):
    widths = [int(rng.integers(4, 12)) for _ in range(int(rng.integers(2, 4)))] + [3]
    layers = []
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(Dense(rng.normal(size=(b, a)) / np.sqrt(a), rng.normal(size=b) * 0.1))
        if i < len(widths) - 2:
            layers.append(ReLU())
    return sequential((widths[0],), *layers)


def _rand_conv(rng, bn):
    c = int(rng.integers(1, 4))
    size = int(rng.integers(8, 13))
    layers, shape = [], c
    for _ in range(int(rng.integers(1, 3))):
        out = int(rng.integers(2, 5))
        layers.append(Conv2d(rng.normal(size=(out, shape, 3, 3)) * 0.4, rng.normal(size=out) * 0.1,
                             int(rng.integers(1, 3)), 1))
        if bn:
            layers.append(BatchNorm2d(rng.normal(size=out) * 0.1, rng.uniform(0.5, 2, out),
                                      rng.uniform(0.5, 2, out), rng.normal(size=out) * 0.1))
        layers.append(ReLU())
        shape = out
    return sequential((c, size, size), *layers)


def _one_stain(kind, seed):
    rng = np.random.default_rng(seed)
    delta = float(rng.uniform(1, 20))
    if kind in ("additive", "plain"):
        net = _rand_mlp(rng)
        dense = [i for i, (_, layer) in enumerate(net.layers) if isinstance(layer, Dense)]
        j = dense[int(rng.integers(len(dense)))]
        out, rec = S.stain(net, j, None, delta, additive=kind == "additive", rng=T.Rng(seed), trigger_opts=FAST)
    else:
        net = _rand_conv(rng, kind == "conv-bn")
        convs = [i for i, (_, layer) in enumerate(net.layers) if isinstance(layer, Conv2d)]
        j = convs[int(rng.integers(len(convs)))]
        h, w = net.shapes()[j + 1][1:]
        red = ReductionMap("position", h // 2, w // 2)
        out, rec = S.stain(net, j, None, delta, reduction=red, rng=T.Rng(seed), trigger_opts=FAST)
    got = float(np.ravel(S.readout(out, rec, rec.x_star))[0])
    return abs(got - delta) / max(1.0, abs(delta))


def test_criterion_1_exact_delta():
    t0 = time.perf_counter()
    worst, count = 0.0, 0
    for kind in ("additive", "plain", "conv", "conv-bn"):
        for seed in range(25):
            worst = max(worst, _one_stain(kind, 1000 * len(kind) + seed))
            count += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed <= 60 and count == 100
    record(1, ok, f"{count} stains, worst |readout-delta|/max(1,|delta|) = {worst:.2e}, {elapsed:.1f}s")
    assert ok


# -- 2. zero false positives ---------------------------------------------------------

@lru_cache(maxsize=None)
def cnn_stains(n=20):
    net = shapes_cnn()[0]
    probes = calibration_images()
    out = []
    for seed in range(n):
        red = ReductionMap("position", *POS)
        stained, rec = S.stain(net, DETECTOR_LAYER, None, 10.0, reduction=red, rng=T.Rng(seed), probes=probes,
                               trigger_opts=FAST_TRIGGER)
        out.append((stained, rec))
    return tuple(out)


def test_criterion_2_no_false_positives():
    net, _, _, acc = shapes_cnn()
    t0 = time.perf_counter()
    eval_data = H.ShapesDataset(4, 1000)
    fps, positions, worst = 0, [], -np.inf
    for stained, rec in cnn_stains():
        rep = H.eval_fpr(stained, rec, eval_data)
        fps += rep.fp_count
        positions.append(rep.positions)
        worst = max(worst, rep.max_response / rec.response)
    elapsed = time.perf_counter() - t0
    ok = fps == 0 and min(positions) >= 100_000 and len(positions) == 20 and elapsed <= 120
    record(2, ok, f"20 stains on a CNN with test accuracy {acc:.3f}: {fps} FPs, "
                  f"{min(positions)} positions per stain, max non-trigger/trigger = {worst:.3f}, {elapsed:.1f}s")
    assert ok


# -- 3. bound values -------------------------------------------------------------------

def test_criterion_3_bound_values():
    geo = B.geometric_bound(B.MomentEstimate(3, 0.0, 1.0, 0), 1.0).value
    dkw = B.dkw_bound(2000, 0).value
    grid = dkw_grid(2000, 0)
    col = B.collision_bound(100, 0.5)
    checks = [abs(geo - math.pi / 16) <= 1e-9, abs(dkw - grid) <= 1e-3, abs(col - math.exp(-12.5)) <= 1e-12]
    ok = all(checks)
    record(3, ok, f"geometric={geo:.10f} (pi/16={math.pi / 16:.10f}), dkw={dkw:.6f} vs grid {grid:.6f}, "
                  f"collision={col:.6e}")
    assert ok


# -- 4. bound validity -------------------------------------------------------------

def test_criterion_4_bounds_hold_empirically():
    t0 = time.perf_counter()
    respected = {}
    for d in (16, 64, 256):
        rows = H.thm1_montecarlo(d, trials=100, seed=d)
        bad = {r["trial"] for r in rows if not r["ok"]}
        respected[d] = 100 - len(bad)
    thm2 = H.thm2_montecarlo(m=2000, test_n=10_000, repeats=1000, seed=0)
    elapsed = time.perf_counter() - t0
    ok = all(v == 100 for v in respected.values()) and thm2["violation_rate"] <= 0.01 and elapsed <= 300
    record(4, ok, f"geometric bound respected in trials {respected}, DKW violation rate {thm2['violation_rate']:.4f}, "
                  f"{elapsed:.1f}s")
    assert ok


# -- 5. lock correctness ------------------------------------------------------------

SQEX_AFTER, SQEX_D = 3, 4


@lru_cache(maxsize=None)
def sqex_model():
    net = shapes_cnn()[0]
    return L.inject_sqex(net, SQEX_AFTER, SQEX_D, 0.01, T.Rng(17))


@lru_cache(maxsize=None)
def tuned_lock(kind):
    original = shapes_cnn()[0] if kind == "internal" else sqex_model()
    tune = H.ShapesDataset(5, 300)
    locked, rec = L.lock(original, kind, DETECTOR_LAYER, None, 10.0, None, *POS, rng=T.Rng(3),
                         probes=calibration_images(), trigger_opts=FAST_TRIGGER)
    ref = H.accuracy(original, tune.images, tune.labels)
    locked, rec, _ = H.tune_scale(locked, rec, tune, target_drop=0.4, reference=ref)
    return original, locked, rec


def test_criterion_5_lock_correctness():
    test = shapes_cnn()[2]
    t0 = time.perf_counter()
    lines, ok = [], shapes_cnn()[3] >= 0.90
    for kind in ("internal", "sqex"):
        original, locked, rec = tuned_lock(kind)
        edited = L.make_edited(locked, rec)
        patched = apply_patch(test.images, rec.patch)
        diff = float(np.abs(L.disrupted_output(locked, rec, patched)
                            - L.disrupted_output(edited, rec, patched)).max())
        acc = {r.setting: r.accuracy for r in H.eval_lock(original, edited, locked, rec.patch, test)}
        drop = acc["original-unpatched"] - acc["locked-unpatched"]
        gap = abs(acc["locked-patched"] - acc["edited-patched"])
        ok &= diff <= 1e-4 and drop >= 0.30 and gap <= 0.01
        lines.append(f"{kind}: max|unlocked-edited|={diff:.1e}, original {acc['original-unpatched']:.3f}, "
                     f"locked {acc['locked-unpatched']:.3f} (s={rec.s:g}, t={float(rec.t[0]):g}), "
                     f"unlocked {acc['locked-patched']:.3f} vs edited {acc['edited-patched']:.3f}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed <= 300
    record(5, ok, "; ".join(lines) + f"; {elapsed:.1f}s")
    assert ok


# -- 6. sq-ex injection neutrality -------------------------------------------------------

def test_criterion_6_injection_neutrality():
    net, _, test, acc = shapes_cnn()
    exact = L.inject_sqex(net, SQEX_AFTER, SQEX_D, 0.0, T.Rng(17))
    diff = float(np.abs(nn.forward(exact, test.images).astype(np.float64) - nn.forward(net, test.images)).max())
    small_acc = H.accuracy(sqex_model(), test.images, test.labels)
    ok = diff <= 1e-6 and abs(small_acc - acc) <= 0.01
    record(6, ok, f"init 0: max output change {diff:.1e}; init 0.01: accuracy {small_acc:.3f} vs {acc:.3f}")
    assert ok


# -- 7. engine verification ----------------------------------------------------------

def _conv_case(rng):
    c, k, stride, pad = int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(0, 2))
    h = int(rng.integers(k, k + 5))
    x = rng.normal(size=(c, h, h + int(rng.integers(0, 2)))).astype(np.float32)
    w = rng.normal(size=(int(rng.integers(1, 4)), c, k, k)).astype(np.float32)
    b = rng.normal(size=w.shape[0]).astype(np.float32)
    return x, w, b, stride, pad


def _rel(a, b):
    return float(np.linalg.norm(np.ravel(a) - np.ravel(b)) / max(np.linalg.norm(np.ravel(b)), 1e-8))


def _param_grad_err(net, seed):
    x = np.random.default_rng(seed).uniform(size=(2,) + net.input_shape)
    obj = nn.cross_entropy_objective([0, 1])
    grads = nn.param_gradient(net, x, obj)
    rng = np.random.default_rng(seed)
    num, ana, eps = [], [], 1e-6
    for i in range(len(net)):
        for name in net[i].param_names:
            p = getattr(net[i], name)
            idx = tuple(int(rng.integers(s)) for s in p.shape)
            old = p[idx]
            p[idx] = old + eps
            fp = obj(nn.run(net, x)[0])[0]
            p[idx] = old - eps
            fm = obj(nn.run(net, x)[0])[0]
            p[idx] = old
            num.append((fp - fm) / (2 * eps))
            ana.append(grads[i][name][idx])
    return _rel(ana, num)


def _field_ok(net, j, a, b, seed):
    rf = nn.receptive_field(net, j, a, b)
    size = net.input_shape[1]
    box = (max(rf.top, 0), min(rf.bottom, size) - 1, max(rf.left, 0), min(rf.right, size) - 1)
    rows, cols = np.nonzero(sensitive_pixels(net, j, a, b, trials=1, seed=seed))
    if rf.top >= 0 and rf.left >= 0 and rf.bottom <= size and rf.right <= size:
        return rows.size > 0 and (rows.min(), rows.max(), cols.min(), cols.max()) == box
    return rows.size == 0 or (rows.min() >= box[0] and rows.max() <= box[1]
                              and cols.min() >= box[2] and cols.max() <= box[3])


def test_criterion_7_engine():
    rng = np.random.default_rng(7)
    conv_bad = matmul_bad = 0
    for _ in range(1000):
        x, w, b, s, p = _conv_case(rng)
        ref = conv_loops(x.astype(np.float64), w.astype(np.float64), b.astype(np.float64), s, p)
        conv_bad += not np.allclose(T.conv2d(x, w, b, s, p), ref, rtol=1e-6, atol=1e-6)
        conv_bad += not np.allclose(T.conv2d_batch(x[None], w, b, s, p)[0][0], ref, rtol=0, atol=1e-6)
        a = rng.normal(size=(int(rng.integers(1, 6)), int(rng.integers(1, 6)))).astype(np.float32)
        m = rng.normal(size=(a.shape[1], int(rng.integers(1, 6)))).astype(np.float32)
        matmul_bad += not np.allclose(T.matmul(a, m), matmul_loops(a, m), rtol=1e-6, atol=1e-6)
    grad_err = 0.0
    for seed in range(20):
        net = random_cnn(seed + 200, head="gap" if seed % 2 else "flat")
        x = np.random.default_rng(seed).uniform(size=net.input_shape)
        obj = nn.linear_objective(np.random.default_rng(seed + 1).normal(size=3))
        grad_err = max(grad_err, _rel(nn.input_gradient(net, x, obj), fd_input_gradient(net, x, obj)),
                       _param_grad_err(net, seed))
    ser_bad = 0
    for seed in range(20):
        net = random_cnn(seed + 400)
        data = nn.serialize(net)
        again = nn.deserialize(data)
        xin = np.random.default_rng(seed).uniform(size=net.input_shape)
        ser_bad += nn.serialize(again) != data or nn.forward(again, xin).tobytes() != nn.forward(
            nn.deserialize(data), xin).tobytes()
    rf_bad = 0
    for seed in range(50):
        net, j = positive_conv_stack(seed)
        h, w = net.shapes()[j + 1][1:]
        rf_bad += not all(_field_ok(net, j, a, b, seed) for a, b in {(0, 0), (h - 1, w - 1), (h // 2, w // 2)})
    ok = conv_bad == matmul_bad == ser_bad == rf_bad == 0 and grad_err <= 1e-4
    record(7, ok, f"conv mismatches {conv_bad}/2000, matmul {matmul_bad}/1000, worst gradient rel err "
                  f"{grad_err:.1e} over 20 nets, serialization failures {ser_bad}/20, "
                  f"receptive-field mismatches {rf_bad}/50")
    assert ok


# -- 8. schema round trips ----------------------------------------------------------

def test_criterion_8_schemas():
    rng = np.random.default_rng(8)
    net = sequential((64,), Dense(rng.normal(size=(10, 64)) / 8, rng.normal(size=10) * 0.1), ReLU(),
                     Dense(rng.normal(size=(3, 10)), np.zeros(3)))
    weight_ok = 0
    for i in range(100):
        bits = rng.integers(0, 2, 64)
        k = int(rng.integers(10))
        out, _ = S.schema_weight(net, 0, k, bits, rng=T.Rng(i), trigger_opts=FAST)
        weight_ok += int(np.array_equal(S.schema_weight_decode(out, 0, k), bits))

    act_net = sequential((12,), Dense(rng.normal(size=(20, 12)) / 3, rng.normal(size=20) * 0.1), ReLU(),
                         Dense(rng.normal(size=(16, 20)) / 4, rng.normal(size=16) * 0.1))
    message = rng.integers(0, 2, 16)
    out, rec = S.schema_activation(act_net, 2, message, rng=T.Rng(1), trigger_opts=FAST)
    act_match = int(np.sum(S.schema_activation_decode(out, rec) == message))

    mlp, _, test, _ = shapes_mlp4()
    probes = H.ShapesDataset(13, 500, size=16, channels=1, classes=4).images
    before = H.predict(mlp, test.images)
    forced, unchanged_min = 0, len(test.images)
    for target in range(4):
        stained, rec = S.schema_output(mlp, 1, None, target, rng=T.Rng(target), probes=probes,
                                       trigger_opts=FAST)
        forced += int(np.argmax(nn.forward(stained, rec.x_star))) == target
        unchanged_min = min(unchanged_min, int(np.sum(H.predict(stained, test.images) == before)))
    ok = weight_ok == 100 and act_match == 16 and forced == 4 and unchanged_min == 1000
    record(8, ok, f"weight schema {weight_ok}/100 messages, activation schema {act_match}/16 neurons, "
                  f"output schema {forced}/4 targets with at least {unchanged_min}/1000 predictions unchanged")
    assert ok


# -- 9. pruning attacks --------------------------------------------------------------

def test_criterion_9_pruning():
    changes = []
    for stained, rec in cnn_stains()[:10]:
        pruned = H.prune_l1(stained, 0.30)
        changes.append(H.detector_survival(stained, pruned, rec))
    test = shapes_cnn()[2]
    gaps = {}
    for kind in ("internal", "sqex"):
        _, locked, rec = tuned_lock(kind)
        edited_acc = H.accuracy(L.make_edited(locked, rec), test.images, test.labels)
        pruned_acc = H.accuracy(L.prune_detector(locked, rec), test.images, test.labels)
        gaps[kind] = edited_acc - pruned_acc
    ok = max(changes) <= 0.20 and min(gaps.values()) >= 0.20
    record(9, ok, f"30% unstructured pruning: worst trigger response change {max(changes):.3f} over "
                  f"{len(changes)} stains; detector-pruned locks trail edited accuracy by "
                  + ", ".join(f"{k} {v:.3f}" for k, v in gaps.items()))
    assert ok

import numpy as np
import pytest

from sealkit import harness as H
from sealkit import lock as L
from sealkit import nn
from sealkit import tensor as T
from sealkit.lock import LockError
from sealkit.nn import BatchNorm2d, Conv2d, GlobalAvgPool, ReLU, sequential
from sealkit.trigger import apply_patch

from oracles import random_cnn

FAST = {"iters": 150, "restarts": 2}


def small_cnn(seed, bn=False):
    net = H.toy_cnn(T.Rng(seed), channels=1, size=12, classes=3, width=(4, 6, 6))
    if bn:
        rng = np.random.default_rng(seed)
        c = net[2].W.shape[0]
        net = net.insert(3, "bn", BatchNorm2d(rng.normal(size=c) * 0.1, rng.uniform(0.5, 2, c),
                                              rng.uniform(0.5, 2, c), rng.normal(size=c) * 0.1))
    return net


def images(seed, n=200):
    return np.random.default_rng(seed).uniform(size=(n, 1, 12, 12))


def build(kind, seed, **kw):
    net = small_cnn(seed, bn=kw.pop("bn", False))
    if kind == "sqex":
        net = L.inject_sqex(net, 3, 2, 0.0, T.Rng(seed))
    return net, L.lock(net, kind, 2, None, a=1, b=1, rng=T.Rng(seed), trigger_opts=FAST, **kw)


@pytest.mark.parametrize("seed", range(6))
def test_permute_channels_preserves_function(seed):
    net = random_cnn(seed + 40)
    convs = [i for i, (_, layer) in enumerate(net.layers) if isinstance(layer, Conv2d)]
    j = convs[0]
    perm = np.random.default_rng(seed).permutation(net[j].W.shape[0])
    other = net.copy()
    L.permute_channels(other, j, perm)
    x = np.random.default_rng(seed).uniform(size=(5,) + net.input_shape)
    np.testing.assert_allclose(nn.forward(other, x), nn.forward(net, x), atol=1e-5)


@pytest.mark.parametrize("kind", ["internal", "sqex"])
@pytest.mark.parametrize("seed", range(3))
def test_unlock_identity(kind, seed):
    _, (locked, rec) = build(kind, seed)
    edited = L.make_edited(locked, rec)
    xp = apply_patch(images(seed), rec.patch)
    np.testing.assert_allclose(L.disrupted_output(locked, rec, xp), L.disrupted_output(edited, rec, xp), atol=1e-4)


def test_unlock_identity_through_batch_norm():
    _, (locked, rec) = build("internal", 5, bn=True)
    assert rec.detector.readout_layer == 3
    xp = apply_patch(images(5), rec.patch)
    edited = L.make_edited(locked, rec)
    np.testing.assert_allclose(L.disrupted_output(locked, rec, xp), L.disrupted_output(edited, rec, xp), atol=1e-4)


@pytest.mark.parametrize("kind", ["internal", "sqex"])
def test_unpatched_inputs_see_disruptor(kind):
    _, (locked, rec) = build(kind, 1, s=7.0, t=np.full(3 if kind == "internal" else 6, 0.5))
    eff = L.effective_bias(locked, rec, images(9))
    np.testing.assert_allclose(eff, np.broadcast_to(rec.disruptor, eff.shape), atol=1e-5)
    assert np.allclose(rec.disruptor, 7.0 * rec.u.astype(np.float64) + 0.5)


def test_printed_sign_restores_shifted_bias():
    t = np.array([0.3, -0.2, 0.1])
    _, (locked, rec) = build("internal", 2, t=t, printed_sign=True)
    xp = apply_patch(images(2, 20), rec.patch)
    eff = L.effective_bias(locked, rec, xp)
    np.testing.assert_allclose(eff, np.broadcast_to(rec.bias_backup + 2 * t, eff.shape), atol=1e-4)


def test_edited_model_and_idempotence():
    net, (locked, rec) = build("internal", 0)
    edited = L.make_edited(locked, rec)
    np.testing.assert_array_equal(edited[rec.site].b, net[rec.site].b)
    assert np.all(edited[rec.site].W[:, L.CONDUIT] == 0)
    again = L.make_edited(edited, rec)
    assert nn.serialize(again) == nn.serialize(edited)
    assert rec.original_index == nn.min_l1_neuron(net, 2)


@pytest.mark.parametrize("gate", ["sigmoid", "hard_sigmoid"])
def test_inject_sqex_zero_scale_is_exact(gate):
    net = small_cnn(4)
    x = images(4, 50)
    for after in (1, 3, 5):
        out = L.inject_sqex(net, after, 3, 0.0, T.Rng(0), gate)
        assert len(out) == len(net) + 1
        np.testing.assert_allclose(nn.forward(out, x), nn.forward(net, x), atol=1e-6)


def test_inject_sqex_small_scale_is_close():
    net = small_cnn(4)
    x = images(4, 50)
    out = L.inject_sqex(net, 3, 3, 0.01, T.Rng(0))
    diff = np.abs(nn.forward(out, x) - nn.forward(net, x)).max()
    assert 0 < diff < 0.05 * np.abs(nn.forward(net, x)).max()


def test_inject_sqex_errors():
    net = small_cnn(0)
    with pytest.raises(LockError):
        L.inject_sqex(net, 6, 2)


def test_prune_detector_leaves_disruptor_on():
    _, (locked, rec) = build("internal", 3)
    pruned = L.prune_detector(locked, rec)
    xp = apply_patch(images(3, 30), rec.patch)
    eff = L.effective_bias(pruned, rec, xp)
    np.testing.assert_allclose(eff, np.broadcast_to(rec.disruptor, eff.shape), atol=1e-5)


def test_structural_errors():
    net = small_cnn(0)
    with pytest.raises(LockError):
        L.lock_internal(net, 1, rng=T.Rng(0), trigger_opts=FAST)  # relu, not conv
    with pytest.raises(LockError):
        L.lock_sqex(net, 2, a=1, b=1, rng=T.Rng(0), trigger_opts=FAST)  # no sq-ex block
    with pytest.raises(LockError):
        L.lock(net, "bogus", 2)
    with pytest.raises(LockError):
        L.lock_internal(net, 2, delta_hi=-1.0, a=1, b=1, trigger_opts=FAST)
    with pytest.raises(LockError):
        L.lock_internal(net, 2, delta_lo=1.0, a=1, b=1, trigger_opts=FAST)
    no_relu = sequential((1, 8, 8), Conv2d(np.ones((2, 1, 3, 3)), np.zeros(2)), GlobalAvgPool(),
                         nn.Dense(np.ones((2, 2)), np.zeros(2)))
    with pytest.raises(LockError):
        L.lock_internal(no_relu, 0, trigger_opts=FAST)
    flat = H.toy_mlp(T.Rng(0), (1, 8, 8))
    with pytest.raises(LockError):
        L.lock_internal(flat, 1, trigger_opts=FAST)


def test_non_positive_scale_rejected():
    with pytest.raises(LockError):
        build("internal", 0, s=0.0)


@pytest.mark.parametrize("keep", [False, True])
def test_record_round_trip(tmp_path, keep):
    _, (locked, rec) = build("sqex", 1)
    L.save_record(rec, tmp_path / "r.slck", keep_backup=keep)
    back = L.load_record(tmp_path / "r.slck")
    assert back.manifest(keep) == rec.manifest(keep)
    assert back.u.tobytes() == rec.u.tobytes()
    assert back.patch.pixels.tobytes() == rec.patch.pixels.tobytes()
    if keep:
        assert back.bias_backup.tobytes() == rec.bias_backup.tobytes()
        assert nn.serialize(L.make_edited(locked, back)) == nn.serialize(L.make_edited(locked, rec))
    else:
        assert back.bias_backup is None
        with pytest.raises(LockError):
            L.make_edited(locked, back)
    with pytest.raises(T.FormatError):
        L.record_from_bytes(L.record_to_bytes(rec)[:-10])

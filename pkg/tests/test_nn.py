import numpy as np
import pytest

from oracles import net_gradient_error
from renalverdict.nn import (MAGIC, AdamState, CacheError, EarlyStopping, adam_step, init_seeded,
                             load_checkpoint, restore, save_checkpoint, snapshot)


@pytest.mark.parametrize("seed", range(10))
def test_backward_matches_finite_differences(seed):
    assert net_gradient_error(seed) < 1e-4


def test_init_is_seeded():
    a = init_seeded([3, 8, 2], 5)
    b = init_seeded([3, 8, 2], 5)
    c = init_seeded([3, 8, 2], 6)
    assert all(np.array_equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    assert not np.array_equal(a.layers[0].weights, c.layers[0].weights)
    with pytest.raises(ValueError):
        init_seeded([3], 0)


def test_checkpoint_roundtrip(tmp_path):
    net = init_seeded([4, 6, 3], 1, "relu", "sigmoid", dropout_p=0.25, batchnorm=True)
    # move the batchnorm statistics off their defaults
    net.forward(np.random.default_rng(0).normal(size=(16, 4)), train=True, rng=np.random.default_rng(1))
    for p in net.parameters():
        p[...] = p.astype(np.float32)
    bn = net.batchnorm[0]
    bn.running_mean[...] = bn.running_mean.astype(np.float32)
    bn.running_var[...] = bn.running_var.astype(np.float32)
    path = tmp_path / "net.vknn"
    save_checkpoint(net, path)
    assert path.read_bytes()[:5] == MAGIC
    back = load_checkpoint(path)
    assert back.sizes == net.sizes
    assert back.dropout_p == pytest.approx(0.25)
    x = np.random.default_rng(2).normal(size=(5, 4))
    np.testing.assert_array_equal(back.predict(x), net.predict(x))
    save_checkpoint(back, tmp_path / "again.vknn")
    assert (tmp_path / "again.vknn").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"NOPE!" + bytes(20))
    with pytest.raises(ValueError, match="VKNN1"):
        load_checkpoint(p)


def test_stale_cache_is_refused():
    net = init_seeded([2, 3, 1], 0)
    out, cache = net.forward(np.ones((2, 2)))
    net.touch()
    with pytest.raises(CacheError, match="stale"):
        net.backward(np.ones_like(out), cache)
    with pytest.raises(CacheError):
        net.backward(np.ones_like(out), None)


def test_dropout_requires_rng_and_is_off_in_eval():
    net = init_seeded([2, 5, 1], 0, dropout_p=0.5)
    x = np.ones((3, 2))
    with pytest.raises(ValueError):
        net.forward(x, train=True)
    np.testing.assert_array_equal(net.predict(x), net.predict(x))


def test_adam_first_step_is_lr_sized():
    p = [np.array([1.0, -2.0])]
    g = [np.array([0.5, -3.0])]
    state = adam_step(p, g, AdamState(lr=0.1))
    # bias-corrected first step moves each coordinate by lr * sign(g)
    np.testing.assert_allclose(p[0], [0.9, -1.9], atol=1e-7)
    assert state.step == 1
    with pytest.raises(ValueError):
        adam_step(p, [np.zeros(3)], state)


def test_adam_minimises_quadratic():
    p = [np.array([5.0, -3.0])]
    state = AdamState(lr=0.1)
    for _ in range(500):
        adam_step(p, [2 * p[0]], state)
    assert np.abs(p[0]).max() < 1e-2


def test_early_stopping():
    es = EarlyStopping(patience=2, min_delta=0.1)
    assert not es.update(1.0)
    assert not es.update(0.95)  # not enough improvement
    assert es.update(0.93)
    assert es.best == 1.0 and es.best_epoch == 0


def test_snapshot_restore():
    net = init_seeded([2, 3, 1], 0, batchnorm=True)
    snap = snapshot(net)
    before = [p.copy() for p in net.parameters()]
    for p in net.parameters():
        p += 1.0
    restore(net, snap)
    assert all(np.array_equal(a, b) for a, b in zip(before, net.parameters()))

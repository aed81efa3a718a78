import io

import numpy as np
import pytest

from sttdrec import autograd as ag
from sttdrec.optim import ParamStore, adam_step, fd_check, load_checkpoint, save_checkpoint


def adam_reference(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.0):
    """Straight transcription of the textbook update, one step per gradient."""
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(grads, start=1):
        g = g + wd * theta
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return theta


def test_adam_matches_reference(rng):
    theta0 = rng.normal(size=(3, 4))
    grads = [rng.normal(size=(3, 4)) for _ in range(5)]
    store = ParamStore()
    p = store.add("w", theta0)
    for g in grads:
        p.grad = g.copy()
        adam_step(store, lr=0.01, weight_decay=1e-2)
    np.testing.assert_allclose(p.data, adam_reference(theta0, grads, 0.01, wd=1e-2), rtol=1e-12)
    assert store.step == 5


def test_first_adam_step_moves_by_lr(rng):
    # bias correction makes the first step exactly lr * sign(g) up to eps
    store = ParamStore()
    p = store.add("w", np.zeros(4))
    p.grad = np.array([3.0, -0.5, 1e-3, -7.0])
    adam_step(store, lr=0.1, eps=0.0)
    np.testing.assert_allclose(p.data, [-0.1, 0.1, -0.1, 0.1])


def test_missing_gradient_counts_as_zero():
    store = ParamStore()
    p = store.add("w", np.ones(2))
    adam_step(store, lr=0.1)
    np.testing.assert_array_equal(p.data, np.ones(2))


def test_frozen_store_refuses_updates():
    store = ParamStore()
    store.add("w", np.ones(2))
    store.freeze()
    assert not store["w"].requires_grad
    with pytest.raises(RuntimeError):
        adam_step(store)


def test_non_finite_step_leaves_store_untouched():
    store = ParamStore()
    a = store.add("a", np.ones(2))
    b = store.add("b", np.ones(2))
    a.grad = np.ones(2)
    b.grad = np.array([np.nan, 1.0])
    before = store.checksum()
    with pytest.raises(FloatingPointError):
        adam_step(store)
    assert store.checksum() == before
    assert store.step == 0 and not store.m


def test_duplicate_names_rejected():
    store = ParamStore()
    store.add("w", np.ones(1))
    with pytest.raises(KeyError):
        store.add("w", np.ones(1))


def test_load_state_checks_extents():
    store = ParamStore()
    store.add("w", np.ones((2, 2)))
    with pytest.raises(ValueError, match="w"):
        store.load_state({"w": np.ones(3)})
    with pytest.raises(KeyError):
        store.load_state({"x": np.ones(3)})


def test_checksum_sensitive_to_single_value():
    store = ParamStore()
    p = store.add("w", np.zeros(5, dtype=np.float32))
    before = store.checksum()
    p.data[3] = np.float32(1e-30)
    assert store.checksum() != before


def test_fd_check_accepts_correct_and_flags_wrong_gradient(rng):
    x = ag.Tensor(rng.normal(size=5), requires_grad=True)
    assert fd_check(lambda: ag.sum(ag.exp(x)), [x], samples_per_param=None) < 1e-7

    def broken():
        # forward says x^2 but the backward claims 3x
        out = ag._make(np.sum(x.data ** 2), (x,), lambda g: (3 * g * x.data,), "broken")
        return out
    assert fd_check(broken, [x], samples_per_param=None) > 0.1


def test_checkpoint_roundtrip(tmp_path, rng):
    store = ParamStore()
    store.add("a.w", rng.normal(size=(3, 2)).astype(np.float32))
    store.add("b", rng.normal(size=4).astype(np.float32))
    save_checkpoint(tmp_path / "c.ckpt", store, {"note": "x", "n": 3})
    meta, tensors = load_checkpoint(tmp_path / "c.ckpt")
    assert meta == {"note": "x", "n": 3}
    for k, v in store.state().items():
        np.testing.assert_array_equal(tensors[k], v)
    assert not (tmp_path / "c.ckpt.tmp").exists()


def test_checkpoint_rejects_non_finite():
    store = ParamStore()
    store.add("w", np.array([1.0, np.inf]))
    with pytest.raises(FloatingPointError):
        save_checkpoint(io.BytesIO(), store)


def test_checkpoint_rejects_wrong_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"STTDDATA" + b"\0" * 64)
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x")


def test_five_point_stencil_beats_central_on_curved_loss():
    x = ag.Tensor(np.array([0.3, -0.2]), requires_grad=True)

    def sharp():
        return ag.sum(ag.exp(x * 40.0))
    coarse = fd_check(sharp, [x], eps=1e-3, samples_per_param=None)
    fine = fd_check(sharp, [x], eps=1e-3, samples_per_param=None, stencil=5)
    assert fine < 1e-4 < coarse
    with pytest.raises(ValueError, match="stencil"):
        fd_check(sharp, [x], stencil=4)


def test_step_ladder_handles_kinks_but_not_wrong_gradients():
    x = ag.Tensor(np.array([5e-5, -3e-5, 0.7]), requires_grad=True)

    def hinge():
        return ag.sum(ag.relu(x) * 2.0)
    assert fd_check(hinge, [x], eps=1e-4, samples_per_param=None) > 0.1
    assert fd_check(hinge, [x], eps=(1e-4, 1e-5, 1e-6), samples_per_param=None) < 1e-8

    def broken():
        return ag._make(np.sum(x.data ** 2), (x,), lambda g: (3 * g * x.data,), "broken")
    assert fd_check(broken, [x], eps=(1e-4, 1e-5, 1e-6), samples_per_param=None) > 0.1

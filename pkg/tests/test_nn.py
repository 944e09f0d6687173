import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vflprecode.nn import (
    AdamState,
    Concat,
    Conv2d,
    Dense,
    Flatten,
    LayerSpec,
    ReLU,
    ShapeError,
    StaleCacheError,
    adam_step,
    build_sequential,
    load_checkpoint,
    save_checkpoint,
)


def fd_check(layer, x, rng, eps=1e-6, tol=1e-4):
    """Compare analytic input and parameter gradients of sum(w * f(x)) with central differences."""
    y, cache = layer.forward(x)
    w = rng.standard_normal(y.shape)
    grads, dx = layer.backward(cache, w)

    def f():
        return float(np.sum(w * layer.forward(x)[0]))

    num = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        fp = f()
        x[idx] = old - eps
        fm = f()
        x[idx] = old
        num[idx] = (fp - fm) / (2 * eps)
    assert np.linalg.norm(dx - num) <= tol * max(np.linalg.norm(num), 1e-8)
    for name, p in layer.params.items():
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            fp = f()
            p[idx] = old - eps
            fm = f()
            p[idx] = old
            num[idx] = (fp - fm) / (2 * eps)
        assert np.linalg.norm(grads[name] - num) <= tol * max(np.linalg.norm(num), 1e-8), name


def test_dense_fd(rng):
    fd_check(Dense(5, 4, rng), rng.standard_normal((3, 5)), rng)


def test_relu_fd(rng):
    x = rng.standard_normal((3, 6))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    fd_check(ReLU((6,)), x, rng)


def test_flatten_fd(rng):
    fd_check(Flatten((2, 3, 3)), rng.standard_normal((2, 2, 3, 3)), rng)


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (1, 1)])
def test_conv_fd(rng, stride, padding):
    layer = Conv2d((2, 6, 6), 3, 3, stride, padding, rng)
    fd_check(layer, rng.standard_normal((2, 2, 6, 6)), rng)


def test_conv_matches_direct_loop(rng):
    layer = Conv2d((2, 5, 5), 3, 3, 2, 1, rng)
    x = rng.standard_normal((1, 2, 5, 5))
    y, _ = layer.forward(x)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    W = layer.params["weight"].reshape(3, 2, 3, 3)
    for o in range(3):
        for i in range(y.shape[2]):
            for j in range(y.shape[3]):
                patch = xp[0, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
                assert np.isclose(y[0, o, i, j], np.sum(W[o] * patch) + layer.params["bias"][o])


def test_concat_roundtrip(rng):
    c = Concat((2, 3))
    a, b = rng.standard_normal((4, 2)), rng.standard_normal((4, 3))
    y, cache = c.forward([a, b])
    assert y.shape == (4, 5)
    _, (da, db) = c.backward(cache, y)
    assert np.array_equal(da, a) and np.array_equal(db, b)
    with pytest.raises(ShapeError):
        c.forward([a])


def test_dense_init_modes(rng):
    assert np.array_equal(Dense(3, 3, rng, "identity").params["weight"], np.eye(3))
    assert not Dense(3, 2, rng, "zeros").params["weight"].any()
    with pytest.raises(ValueError):
        Dense(3, 2, rng, "identity")


def test_identity_dense_is_identity(rng):
    net = build_sequential([LayerSpec("dense", (4,), 0, "identity")], (4,))
    x = rng.standard_normal((2, 4))
    assert np.array_equal(net(x), x)


def test_shape_errors():
    net = build_sequential([LayerSpec("dense", (4,), 0)], (3,))
    with pytest.raises(ShapeError, match="expects input shape"):
        net(np.zeros((2, 5)))
    with pytest.raises(ShapeError):
        build_sequential([LayerSpec("conv2d", (2, 3, 1, 0), 0)], (1, 2, 2))
    with pytest.raises(ValueError):
        build_sequential([LayerSpec("pool")], (3,))


def test_stale_cache_rejected(rng):
    net = build_sequential([LayerSpec("dense", (2,), 1)], (3,))
    _, cache = net.forward(rng.standard_normal((1, 3)))
    net.version += 1
    with pytest.raises(StaleCacheError):
        net.backward(cache, np.ones((1, 2)))
    other = build_sequential([LayerSpec("dense", (2,), 1)], (3,))
    _, cache = other.forward(rng.standard_normal((1, 3)))
    with pytest.raises(StaleCacheError):
        net.backward(cache, np.ones((1, 2)))


def test_sequential_fd(rng):
    specs = [
        LayerSpec("conv2d", (2, 3, 2, 1), 1),
        LayerSpec("relu"),
        LayerSpec("flatten"),
        LayerSpec("dense", (3,), 2),
    ]
    net = build_sequential(specs, (1, 4, 4))
    x = rng.standard_normal((2, 1, 4, 4))
    y, cache = net.forward(x)
    w = rng.standard_normal(y.shape)
    grads, _ = net.backward(cache, w)
    eps = 1e-6
    for name, p in net.parameters().items():
        idx = tuple(rng.integers(0, s) for s in p.shape)
        old = p[idx]
        p[idx] = old + eps
        fp = np.sum(w * net(x))
        p[idx] = old - eps
        fm = np.sum(w * net(x))
        p[idx] = old
        assert np.isclose(grads[name][idx], (fp - fm) / (2 * eps), rtol=1e-4, atol=1e-8)


def test_adam_first_step_moves_by_lr():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    st_ = AdamState(lr=0.1)
    adam_step(p, {"w": np.array([0.5, -0.5, 2.0])}, st_)
    # bias-corrected first step is lr * sign(g)
    assert np.allclose(p["w"], [0.9, -1.9, 2.9], atol=1e-6)
    assert st_.step == 1


def test_adam_zero_lr_keeps_params():
    p = {"w": np.ones(3)}
    adam_step(p, {"w": np.ones(3)}, AdamState(lr=0.0))
    assert np.array_equal(p["w"], np.ones(3))


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step({"w": np.ones(3)}, {"w": np.ones(2)}, AdamState())


@given(st.integers(0, 2**31 - 1))
def test_adam_minimises_quadratic(seed):
    rng = np.random.default_rng(seed)
    target = rng.standard_normal(4)
    p = {"w": np.zeros(4)}
    s = AdamState(lr=0.05)
    for _ in range(600):
        adam_step(p, {"w": 2 * (p["w"] - target)}, s)
    assert np.allclose(p["w"], target, atol=2e-2)


def test_checkpoint_roundtrip(tmp_path, rng):
    blocks = {"a/w": rng.standard_normal((3, 2)), "b": np.arange(4)}
    save_checkpoint(tmp_path / "c.npz", blocks, {"epoch": 3}, {"a/w": 42})
    back, header = load_checkpoint(tmp_path / "c.npz")
    assert header["meta"]["epoch"] == 3 and header["blocks"]["a/w"]["seed"] == 42
    for k in blocks:
        assert np.array_equal(back[k], blocks[k])


def test_checkpoint_rejects_foreign_file(tmp_path):
    np.savez(tmp_path / "x.npz", a=np.zeros(2))
    with pytest.raises(Exception):
        load_checkpoint(tmp_path / "x.npz")

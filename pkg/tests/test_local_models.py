import numpy as np
import pytest

from vflprecode.local_models import BranchConfig, build_local_model, bundles_to_inputs, local_backward, local_forward
from vflprecode.nn import AdamState, ShapeError, StaleCacheError
from vflprecode.sensing import SensingBundle

TINY = BranchConfig(l_g=3, l_r=3, l_l=4, l_s=3, n_antennas=3, l_p=2, bev_shape=(4, 4), l_z=4, integration_hidden=5, conv_channels=2)
VARIANTS = [frozenset(), frozenset({"gps"}), frozenset({"rgb"}), frozenset({"lidar"}), frozenset({"gps", "rgb", "lidar"})]


def make_inputs(mask, dims, B, rng):
    x = {"pilot": rng.standard_normal((B, 2 * dims.l_p))}
    if "gps" in mask:
        x["gps"] = rng.uniform(-1, 1, (B, 20))
    if "rgb" in mask:
        x["rgb"] = np.concatenate([rng.integers(0, 2, (B, 16)), rng.uniform(-1, 1, (B, 20))], axis=1).astype(float)
    if "lidar" in mask:
        x["lidar"] = rng.integers(0, dims.l_z + 1, (B,) + dims.bev_shape).astype(float)
    return x


@pytest.mark.parametrize("mask", VARIANTS, ids=lambda m: "+".join(sorted(m)) or "pilot-only")
def test_local_model_fd(mask, rng):
    model = build_local_model(mask, TINY, seed=3, vehicle_id=1)
    x = make_inputs(mask, TINY, 2, rng)
    v, cache = local_forward(model, x)
    assert v.shape == (2, TINY.n_antennas) and np.iscomplexobj(v)
    w = rng.standard_normal((2, 2 * TINY.n_antennas))
    grads = local_backward(model, cache, w)
    params = model.parameters()
    assert set(grads) == set(params)

    def f():
        out, _ = local_forward(model, x)
        return float(np.sum(w * np.concatenate([out.real, out.imag], axis=1)))

    eps = 1e-6
    for name, p in params.items():
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            fp = f()
            p[idx] = old - eps
            fm = f()
            p[idx] = old
            num[idx] = (fp - fm) / (2 * eps)
        assert np.linalg.norm(grads[name] - num) <= 1e-4 * max(np.linalg.norm(num), 1e-8), name


def test_integration_width_and_branches():
    model = build_local_model({"gps", "lidar"}, TINY, 0)
    assert set(model.branches) == {"gps", "lidar", "pilot"}
    assert model.integration_width == TINY.l_g + TINY.l_l + TINY.l_s
    assert model.sensor_mask == {"gps", "lidar"}


def test_unknown_modality():
    with pytest.raises(ValueError):
        build_local_model({"radar"}, TINY, 0)


def test_missing_input_is_reported(rng):
    model = build_local_model({"gps"}, TINY, 0)
    with pytest.raises(ValueError, match="missing"):
        local_forward(model, {"pilot": rng.standard_normal((1, 4))})


def test_zero_final_layer_outputs_zero(rng):
    model = build_local_model(set(), TINY, 0, zero_final=True)
    v, _ = local_forward(model, make_inputs(set(), TINY, 3, rng))
    assert not v.any()


def test_seeded_init_is_reproducible():
    a = build_local_model({"rgb"}, TINY, 5, 2).parameters()
    b = build_local_model({"rgb"}, TINY, 5, 2).parameters()
    c = build_local_model({"rgb"}, TINY, 5, 3).parameters()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_update_invalidates_cache(rng):
    model = build_local_model(set(), TINY, 0)
    x = make_inputs(set(), TINY, 2, rng)
    _, cache = local_forward(model, x)
    grads = local_backward(model, cache, np.ones((2, 6)))
    model.apply_gradients(grads, AdamState(lr=1e-2))
    with pytest.raises(StaleCacheError):
        local_backward(model, cache, np.ones((2, 6)))


def test_load_parameters_checks_shapes():
    model = build_local_model(set(), TINY, 0)
    params = {k: v.copy() for k, v in model.parameters().items()}
    model.load_parameters(params)
    bad = dict(params)
    k = next(iter(bad))
    bad[k] = np.zeros((1, 1))
    with pytest.raises(ShapeError):
        model.load_parameters(bad)
    with pytest.raises(ValueError):
        model.load_parameters({})


def test_bundles_to_inputs(rng):
    b = [SensingBundle(rng.standard_normal(2) + 1j, gps=np.zeros(20)) for _ in range(3)]
    x = bundles_to_inputs(b)
    assert x["pilot"].shape == (3, 4) and x["gps"].shape == (3, 20)
    model = build_local_model({"gps"}, TINY, 0)
    v, _ = local_forward(model, b)
    assert v.shape == (3, 3)
    with pytest.raises(ValueError):
        bundles_to_inputs([b[0], SensingBundle(np.ones(2, dtype=complex))])

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import crandn
from vflprecode.airlink import eta, enforce_power, rates
from vflprecode.local_models import BranchConfig, local_forward
from vflprecode.transport import InProcessTransport, SocketTransport
from vflprecode.vfl import (
    ClientDropoutError,
    FleetData,
    Join,
    Leave,
    TrainConfig,
    apply_change,
    build_fleet,
    bytes_to_mb,
    comm_volume,
    compute_loss,
    epoch_wire_bytes,
    epochs_to_fraction,
    estimate_csi,
    loss_terms,
    server_step,
    train_epochs,
    train_round,
)

TINY = BranchConfig(l_g=3, l_r=3, l_l=4, l_s=4, n_antennas=4, l_p=2, bev_shape=(4, 4), l_z=4, integration_hidden=6, conv_channels=2)


def test_loss_examples():
    r = np.full(4, 0.3)
    assert compute_loss(r, TrainConfig(K=4, loss_form="paper-literal")) == pytest.approx(-5.2, abs=1e-12)
    assert compute_loss(r, TrainConfig(K=4)) == pytest.approx(2.8, abs=1e-12)


@given(st.lists(st.floats(0, 20), min_size=1, max_size=6))
def test_penalty_gradient(r):
    cfg = TrainConfig()
    _, g, _ = loss_terms(np.array(r), cfg)
    assert np.all(g < -1.0 + 1e-12)
    # weak users get a larger push
    order = np.argsort(r)
    assert np.all(np.diff(-g[order]) <= 1e-9)
    eps = 1e-6
    for k in range(len(r)):
        rp, rm = np.array(r), np.array(r)
        rp[k] += eps
        rm[k] -= eps
        fd = (loss_terms(rp, cfg)[0] - loss_terms(rm, cfg)[0]) / (2 * eps)
        assert fd == pytest.approx(g[k], rel=1e-5, abs=1e-6)


def test_exponent_clamp():
    loss, g, n = loss_terms(np.array([-100.0, 1.0]), TrainConfig())
    assert n == 1 and np.isfinite(loss) and g[0] == -1.0
    with pytest.raises(ValueError):
        loss_terms(np.array([np.nan]), TrainConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lam=1.0)
    with pytest.raises(ValueError):
        TrainConfig(loss_form="other")


@pytest.mark.parametrize("form", ["penalty", "paper-literal"])
def test_server_step_fd(form, rng):
    cfg = TrainConfig(K=2, snr_db=10, loss_form=form)
    H = crandn(rng, 3, 4, 2)
    V = crandn(rng, 3, 4, 2)
    step = server_step(H, V, cfg)
    eps = 1e-6
    for idx in np.ndindex(V.shape):
        for unit in (1, 1j):
            Vp, Vm = V.copy(), V.copy()
            Vp[idx] += eps * unit
            Vm[idx] -= eps * unit
            fd = (server_step(H, Vp, cfg).loss - server_step(H, Vm, cfg).loss) / (2 * eps)
            an = step.grad[idx].real if unit == 1 else step.grad[idx].imag
            assert fd == pytest.approx(an, rel=1e-5, abs=1e-8)


def _tiny_fleet(cfg, masks=None):
    masks = masks or {0: frozenset(), 1: frozenset({"gps"})}
    return build_fleet(masks, TINY, cfg)


def _tiny_inputs(fleet, B, rng):
    x = {}
    for vid in fleet.vehicle_ids:
        d = {"pilot": rng.standard_normal((B, 2 * TINY.l_p))}
        if "gps" in fleet.clients[vid].model.sensor_mask:
            d["gps"] = rng.uniform(-1, 1, (B, 20))
        x[vid] = d
    return x


def test_end_to_end_split_gradient(rng):
    """Gradients a vehicle receives over the wire equal FD of the whole pipeline."""
    cfg = TrainConfig(K=2, l_p=2, snr_db=10)
    fleet = _tiny_fleet(cfg)
    x = _tiny_inputs(fleet, 3, rng)
    H = crandn(rng, 3, 4, 2)
    captured = {}
    for vid, c in fleet.clients.items():
        c.model.apply_gradients = lambda g, adam, vid=vid: captured.__setitem__(vid, g)
    train_round(fleet, x, H, cfg, InProcessTransport(fleet.vehicle_ids))

    def total_loss():
        V = np.stack([local_forward(fleet.clients[v].model, x[v])[0] for v in fleet.vehicle_ids], axis=-1)
        return compute_loss(rates(H, enforce_power(V, cfg.power), cfg.sigma2), cfg)

    eps = 1e-6
    for vid, c in fleet.clients.items():
        for name, p in c.model.parameters().items():
            num = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + eps
                fp = total_loss()
                p[idx] = old - eps
                fm = total_loss()
                p[idx] = old
                num[idx] = (fp - fm) / (2 * eps)
            err = np.linalg.norm(captured[vid][name] - num) / max(np.linalg.norm(num), 1e-12)
            assert err < 1e-3, (vid, name, err)


def test_zero_lr_round_keeps_parameters(rng):
    cfg = TrainConfig(K=2, l_p=2, lr=0.0)
    fleet = _tiny_fleet(cfg)
    before = {v: {k: a.copy() for k, a in c.model.parameters().items()} for v, c in fleet.clients.items()}
    train_round(fleet, _tiny_inputs(fleet, 4, rng), crandn(rng, 4, 4, 2), cfg, InProcessTransport(fleet.vehicle_ids))
    for v, c in fleet.clients.items():
        for k, a in c.model.parameters().items():
            assert np.array_equal(a, before[v][k])


def _tiny_data(fleet, S, rng):
    return FleetData(_tiny_inputs(fleet, S, rng), crandn(rng, S, 4, fleet.K))


@pytest.mark.parametrize("transport_cls", [InProcessTransport, SocketTransport])
def test_trace_protocol_and_bytes(transport_cls, rng):
    cfg = TrainConfig(K=2, l_p=2, batch_size=4, lr=1e-3)
    fleet = _tiny_fleet(cfg)
    data = _tiny_data(fleet, 14, rng)
    t = transport_cls(fleet.vehicle_ids)
    res = train_epochs(fleet, data, cfg, np.arange(10), np.arange(10, 14), epochs=2, transport=t)
    t.close()
    n_iter = 2 * 3
    for it in range(n_iter):
        rows = [e for e in t.trace if e.iteration == it]
        for vid in fleet.vehicle_ids:
            assert [e.direction for e in rows if e.vehicle_id == vid].count("up") == 1
            assert [e.direction for e in rows if e.vehicle_id == vid].count("down") == 1
        ups = [i for i, e in enumerate(t.trace) if e.iteration == it and e.direction == "up"]
        downs = [i for i, e in enumerate(t.trace) if e.iteration == it and e.direction == "down"]
        assert max(ups) < min(downs)
    up, down = epoch_wire_bytes(10, 4, 2, TINY.n_antennas)
    for m in res.history:
        assert (m.uplink_bytes, m.downlink_bytes) == (up, down)


def test_epoch_wire_bytes_formula():
    # 3 full batches of 32 and one of 4; each frame = 10-byte header + B * 2N * 4
    assert epoch_wire_bytes(100, 32, 3, 16) == (3 * (3 * (10 + 32 * 128) + 10 + 4 * 128),) * 2


def test_dropout_retry_then_error(rng):
    cfg = TrainConfig(K=2, l_p=2)
    fleet = _tiny_fleet(cfg)
    x = _tiny_inputs(fleet, 2, rng)
    H = crandn(rng, 2, 4, 2)
    t = InProcessTransport(fleet.vehicle_ids)
    fleet.clients[1].fail_on = {0}
    m = train_round(fleet, x, H, cfg, t)
    assert m.retries == 1 and fleet.iteration == 1
    fleet.clients[0].fail_on = {1}
    fleet.clients[1].fail_on = {1}
    with pytest.raises(ClientDropoutError):
        train_round(fleet, x, H, cfg, t)


def test_csi_nmse(rng):
    H = crandn(rng, 1000, 16, 1)
    Hh = estimate_csi(H, -30.0, rng)
    nmse = np.sum(np.abs(Hh - H) ** 2) / np.sum(np.abs(H) ** 2)
    assert abs(10 * np.log10(nmse) + 30) < 0.5


def test_join_then_leave_is_identity():
    cfg = TrainConfig(K=2, l_p=2)
    fleet = _tiny_fleet(cfg)
    joined = apply_change(fleet, Join(9, frozenset({"gps"})), cfg)
    assert joined.K == 3 and joined.clients[0] is fleet.clients[0]
    back = apply_change(joined, Leave(9), cfg)
    assert back.vehicle_ids == fleet.vehicle_ids
    assert all(back.clients[v] is fleet.clients[v] for v in fleet.vehicle_ids)
    with pytest.raises(KeyError):
        apply_change(fleet, Leave(42), cfg)
    with pytest.raises(ValueError):
        apply_change(fleet, Join(0), cfg)


def test_comm_volume():
    assert bytes_to_mb(comm_volume(800, 7)) == 2.8
    assert comm_volume(0, 5) == 0
    assert comm_volume(10, 3) + comm_volume(5, 3) == comm_volume(15, 3)
    assert comm_volume(10, 2) * 2 == comm_volume(10, 4)
    with pytest.raises(ValueError):
        comm_volume(-1, 2)


def test_epochs_to_fraction():
    assert epochs_to_fraction([0.0, 0.5, 0.96, 1.0]) == 2
    assert epochs_to_fraction([1.0, 1.0]) == 0


def test_early_stopping(rng):
    cfg = TrainConfig(K=2, l_p=2, lr=0.0, patience=3)
    fleet = _tiny_fleet(cfg)
    data = _tiny_data(fleet, 8, rng)
    res = train_epochs(fleet, data, cfg, np.arange(6), np.arange(6, 8), epochs=50)
    assert res.stopped_early and len(res.history) == 4 and res.best_epoch == 1

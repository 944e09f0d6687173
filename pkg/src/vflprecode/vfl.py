"""Split training between the BS (loss owner) and the vehicles (model owners).

Each iteration: every vehicle pushes its precoding vectors up, the BS stacks
them into V, applies the power budget, scores the batch and pushes dL/dv_k
back down; every vehicle then backpropagates through its own model only.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor, wait
from dataclasses import dataclass, field, replace

import numpy as np

from .airlink import (
    QuantizerConfig,
    complex_to_real,
    enforce_power,
    enforce_power_vjp,
    eta,
    noise_power,
    quantize_roundtrip,
    rates,
    rates_vjp,
)
from .local_models import BranchConfig, LocalModel, build_local_model, local_backward, local_forward
from .nn import AdamState
from .transport import HEADER, Kind, Message, make_transport, pack_f32, unpack_f32

log = logging.getLogger(__name__)

UPLINK_NOMINAL_BYTES = 512  # 0.5 KB per precoding vector per epoch


class ClientDropoutError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    K: int = 3
    l_p: int = 8
    bits: int = 2
    snr_db: float = 30.0
    lam: float = 10.0
    rate_threshold: float = 0.3
    lr: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 300
    patience: int = 20
    seed: int = 0
    loss_form: str = "penalty"
    power: float = 1.0
    exp_clamp: float = 50.0
    csi: str = "true"
    csi_nmse_db: float = -30.0
    transport: str = "inprocess"
    n_threads: int = 1

    def __post_init__(self):
        if self.lam <= 1:
            raise ValueError("lambda must exceed 1")
        if self.rate_threshold <= 0:
            raise ValueError("rate threshold must be positive")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.loss_form not in ("penalty", "paper-literal"):
            raise ValueError(f"unknown loss form {self.loss_form!r}")
        if self.csi not in ("true", "estimated"):
            raise ValueError(f"unknown CSI mode {self.csi!r}")

    @property
    def sigma2(self) -> float:
        return noise_power(self.snr_db, self.power)


# ---------------------------------------------------------------------------
# loss and server-side gradient


def loss_terms(r, cfg: TrainConfig):
    """Per-sample loss, dL/dR and the number of clamped exponents.

    ``r`` has shape (..., K); the loss sums over users.
    """
    r = np.asarray(r, dtype=float)
    if not np.all(np.isfinite(r)):
        raise ValueError("rates must be finite")
    e = cfg.rate_threshold - r
    clamped = e > cfg.exp_clamp
    e = np.minimum(e, cfg.exp_clamp)
    pen = cfg.lam**e
    dpen = np.where(clamped, 0.0, np.log(cfg.lam) * pen)
    if cfg.loss_form == "penalty":
        loss = -r.sum(axis=-1) + pen.sum(axis=-1)
        grad = -1.0 - dpen
    else:
        loss = -(r + pen).sum(axis=-1)
        grad = -1.0 + dpen
    return loss, grad, int(clamped.sum())


def compute_loss(r, cfg: TrainConfig) -> float:
    """Loss of one rate vector, or the batch mean for a (B, K) array."""
    loss, _, n = loss_terms(r, cfg)
    if n:
        log.warning("clamped %d loss exponents at %g", n, cfg.exp_clamp)
    return float(np.mean(loss))


@dataclass
class ServerStep:
    loss: float
    rates: np.ndarray
    grad: np.ndarray  # dL/dV_raw, (B, N, K), complex convention
    clamped: int


def server_step(H, V_raw, cfg: TrainConfig) -> ServerStep:
    """Batch-mean loss and its gradient w.r.t. the reconstructed (unscaled) V."""
    V = enforce_power(V_raw, cfg.power)
    r = rates(H, V, cfg.sigma2)
    loss, dr, n = loss_terms(r, cfg)
    B = r.shape[0]
    gV = rates_vjp(H, V, cfg.sigma2, dr / B)
    return ServerStep(float(loss.mean()), r, enforce_power_vjp(V_raw, cfg.power, gV), n)


def estimate_csi(H, nmse_db: float, rng) -> np.ndarray:
    """Channel estimates with ||e||^2 / ||h||^2 = 10^(nmse_db/10) in expectation, per user."""
    H = np.asarray(H, dtype=complex)
    N = H.shape[-2]
    per_entry = 10 ** (nmse_db / 10) * np.sum(np.abs(H) ** 2, axis=-2, keepdims=True) / N
    e = rng.standard_normal(H.shape) + 1j * rng.standard_normal(H.shape)
    return H + np.sqrt(per_entry / 2) * e


# ---------------------------------------------------------------------------
# clients and the fleet


class Client:
    def __init__(self, model: LocalModel, adam: AdamState, fail_on: frozenset = frozenset()):
        self.model = model
        self.adam = adam
        self._cache = None
        # iterations at which compute_uplink raises; used to exercise dropout handling
        self.fail_on = set(fail_on)

    @property
    def vehicle_id(self) -> int:
        return self.model.vehicle_id

    def compute_uplink(self, inputs, iteration: int) -> Message:
        if iteration in self.fail_on:
            self.fail_on.discard(iteration)
            raise ConnectionError(f"vehicle {self.vehicle_id} dropped at iteration {iteration}")
        v, self._cache = local_forward(self.model, inputs)
        return Message(Kind.UPLINK_RAW, self.vehicle_id, pack_f32(complex_to_real(v)))

    def apply_downlink(self, msg: Message) -> None:
        if msg.vehicle_id != self.vehicle_id or msg.kind != Kind.DOWNLINK_GRAD:
            raise ValueError("downlink message addressed to another vehicle")
        grad = unpack_f32(msg.payload, self.model.dims.output_dim)
        grads = local_backward(self.model, self._cache, grad)
        self._cache = None
        self.model.apply_gradients(grads, self.adam)


@dataclass
class FleetState:
    clients: dict[int, Client]
    dims: BranchConfig
    epoch: int = 0
    iteration: int = 0

    @property
    def vehicle_ids(self) -> list[int]:
        return sorted(self.clients)

    @property
    def K(self) -> int:
        return len(self.clients)

    def masks(self) -> dict[int, frozenset]:
        return {v: c.model.sensor_mask for v, c in sorted(self.clients.items())}


def build_fleet(masks: dict[int, frozenset], dims: BranchConfig, cfg: TrainConfig) -> FleetState:
    clients = {}
    for vid in sorted(masks):
        model = build_local_model(masks[vid], dims, cfg.seed, vid)
        clients[vid] = Client(model, AdamState(lr=cfg.lr))
    return FleetState(clients, dims)


@dataclass
class FleetData:
    """Per-vehicle model inputs plus the channels the BS scores against."""

    inputs: dict[int, dict[str, np.ndarray]]
    H: np.ndarray  # (S, N, K) ground truth, columns ordered by vehicle id
    H_loss: np.ndarray | None = None  # channels used in the loss; defaults to H

    @property
    def n_samples(self) -> int:
        return self.H.shape[0]

    def loss_channels(self):
        return self.H if self.H_loss is None else self.H_loss

    def take(self, idx):
        return {v: {k: a[idx] for k, a in d.items()} for v, d in self.inputs.items()}


@dataclass
class RoundMetrics:
    loss: float
    rates: np.ndarray
    uplink_bytes: int
    downlink_bytes: int
    clamped: int
    retries: int = 0


def _map(executor, fn, items):
    if executor is None:
        return [fn(x) for x in items]
    futures = [executor.submit(fn, x) for x in items]
    wait(futures)
    # every client has settled before a failure propagates
    return [f.result() for f in futures]


def train_round(fleet: FleetState, inputs: dict, H, cfg: TrainConfig, transport, executor=None) -> RoundMetrics:
    """One iteration of the protocol over a minibatch. Barrier-synchronised."""
    ids = fleet.vehicle_ids
    if set(inputs) != set(ids):
        raise ValueError("batch does not cover exactly the fleet's vehicles")
    n_trace = len(transport.trace)
    retries = 0
    while True:
        transport.iteration = fleet.iteration

        def up(vid):
            transport.client_send(fleet.clients[vid].compute_uplink(inputs[vid], fleet.iteration))

        try:
            _map(executor, up, ids)
            break
        except ConnectionError as exc:
            transport.drain()
            if retries:
                raise ClientDropoutError(f"round {fleet.iteration} failed twice: {exc}") from exc
            retries += 1
            log.warning("aborting round %d (%s); retrying once", fleet.iteration, exc)

    msgs = transport.server_recv()
    N = fleet.dims.n_antennas
    V_raw = np.stack([eta(unpack_f32(msgs[v].payload, 2 * N)) for v in ids], axis=-1)
    step = server_step(H, V_raw, cfg)
    for k, vid in enumerate(ids):
        transport.server_send(Message(Kind.DOWNLINK_GRAD, vid, pack_f32(complex_to_real(step.grad[..., k]))))

    def down(vid):
        fleet.clients[vid].apply_downlink(transport.client_recv(vid))

    _map(executor, down, ids)
    fleet.iteration += 1
    new = transport.trace[n_trace:]
    up_b = sum(t.nbytes for t in new if t.direction == "up")
    down_b = sum(t.nbytes for t in new if t.direction == "down")
    return RoundMetrics(step.loss, step.rates, up_b, down_b, step.clamped, retries)


def comm_volume(n_epoch: int, K: int) -> int:
    """Uplink volume in bytes under the 0.5 KB-per-vector-per-epoch convention."""
    if n_epoch < 0 or K < 0:
        raise ValueError("epochs and K must be non-negative")
    return n_epoch * K * UPLINK_NOMINAL_BYTES


def bytes_to_mb(n_bytes: int) -> float:
    """Megabytes as 1000 KB of 1024 bytes, the convention behind the 0.5 KB figure."""
    return n_bytes / 1024 / 1000


def epoch_wire_bytes(n_samples: int, batch_size: int, K: int, n_antennas: int) -> tuple[int, int]:
    """Analytic (uplink, downlink) frame bytes of one unquantized training epoch."""
    per_vec = 2 * n_antennas * 4
    n_full, rest = divmod(n_samples, batch_size)
    total = K * (n_full * (HEADER.size + batch_size * per_vec) + (rest > 0) * (HEADER.size + rest * per_vec))
    return total, total


# ---------------------------------------------------------------------------
# inference and the epoch loop


def fleet_precoders(fleet: FleetState, inputs: dict, quantizer: QuantizerConfig | None = None) -> np.ndarray:
    """V (S, N, K) as reconstructed at the BS, optionally through limited feedback."""
    cols = []
    for vid in fleet.vehicle_ids:
        v, _ = local_forward(fleet.clients[vid].model, inputs[vid])
        if quantizer is not None and not quantizer.training_bypass:
            v = np.stack([quantize_roundtrip(row, quantizer) for row in v])
        cols.append(v)
    return np.stack(cols, axis=-1)


def evaluate(fleet: FleetState, data: FleetData, idx, cfg: TrainConfig, quantizer=None, H=None) -> np.ndarray:
    """Per-sample, per-user rates (S, K) on samples ``idx`` against ``H`` (default: ground truth)."""
    idx = np.asarray(idx)
    V = enforce_power(fleet_precoders(fleet, data.take(idx), quantizer), cfg.power)
    H = data.H[idx] if H is None else H
    return rates(H, V, cfg.sigma2)


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    val_loss: float
    sum_rate: float
    user_rates: np.ndarray
    uplink_bytes: int
    downlink_bytes: int
    clamped: int = 0


@dataclass
class TrainResult:
    history: list[EpochMetrics] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False


def validation_metrics(fleet, data, val_idx, cfg):
    r_true = evaluate(fleet, data, val_idx, cfg)
    H_loss = data.loss_channels()[val_idx]
    r_loss = r_true if data.H_loss is None else evaluate(fleet, data, val_idx, cfg, H=H_loss)
    return compute_loss(r_loss, cfg), r_true


def train_epochs(
    fleet: FleetState,
    data: FleetData,
    cfg: TrainConfig,
    train_idx,
    val_idx,
    *,
    epochs: int | None = None,
    early_stop: bool = True,
    transport=None,
    on_epoch=None,
    state: dict | None = None,
) -> TrainResult:
    """Run Algorithm-style rounds for whole epochs.

    ``state`` carries early-stopping bookkeeping across resumptions; ``on_epoch``
    is called with (fleet, metrics, state) after every epoch.
    """
    epochs = cfg.max_epochs if epochs is None else epochs
    own_transport = transport is None
    transport = transport or make_transport(cfg.transport, fleet.vehicle_ids)
    state = state if state is not None else {"best": np.inf, "best_epoch": fleet.epoch, "since": 0}
    result = TrainResult()
    train_idx = np.asarray(train_idx)
    H_loss = data.loss_channels()
    executor = ThreadPoolExecutor(cfg.n_threads) if cfg.n_threads > 1 else None
    try:
        target = fleet.epoch + epochs
        while fleet.epoch < target:
            order = train_idx[np.random.default_rng([cfg.seed, fleet.epoch]).permutation(len(train_idx))]
            losses, weights, up_b, down_b, clamped = [], [], 0, 0, 0
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                m = train_round(fleet, data.take(idx), H_loss[idx], cfg, transport, executor)
                losses.append(m.loss)
                weights.append(len(idx))
                up_b += m.uplink_bytes
                down_b += m.downlink_bytes
                clamped += m.clamped
            fleet.epoch += 1
            val_loss, r = validation_metrics(fleet, data, val_idx, cfg)
            metrics = EpochMetrics(
                fleet.epoch,
                float(np.average(losses, weights=weights)),
                val_loss,
                float(r.sum(axis=1).mean()),
                r.mean(axis=0),
                up_b,
                down_b,
                clamped,
            )
            result.history.append(metrics)
            if val_loss < state["best"] - 1e-9:
                state.update(best=val_loss, best_epoch=fleet.epoch, since=0)
            else:
                state["since"] += 1
            if on_epoch is not None:
                on_epoch(fleet, metrics, state)
            if early_stop and state["since"] >= cfg.patience:
                result.stopped_early = True
                break
    finally:
        if executor is not None:
            executor.shutdown()
        if own_transport:
            transport.close()
    result.best_epoch = state["best_epoch"]
    return result


# ---------------------------------------------------------------------------
# online user changes


@dataclass(frozen=True)
class Join:
    vehicle_id: int
    sensor_mask: frozenset = frozenset()


@dataclass(frozen=True)
class Leave:
    vehicle_id: int


def apply_change(fleet: FleetState, change, cfg: TrainConfig) -> FleetState:
    """New vehicles download a fresh model; everyone else keeps theirs."""
    clients = dict(fleet.clients)
    if isinstance(change, Join):
        if change.vehicle_id in clients:
            raise ValueError(f"vehicle {change.vehicle_id} already in the fleet")
        model = build_local_model(change.sensor_mask, fleet.dims, cfg.seed, change.vehicle_id)
        clients[change.vehicle_id] = Client(model, AdamState(lr=cfg.lr))
    elif isinstance(change, Leave):
        if change.vehicle_id not in clients:
            raise KeyError(f"unknown vehicle id {change.vehicle_id}")
        del clients[change.vehicle_id]
    else:
        raise TypeError(f"unsupported change {change!r}")
    return FleetState(clients, fleet.dims, fleet.epoch, fleet.iteration)


def epochs_to_fraction(trace, fraction: float = 0.95) -> int:
    """First epoch index whose value reaches ``fraction`` of the trace's final value."""
    trace = np.asarray(trace, dtype=float)
    hit = np.flatnonzero(trace >= fraction * trace[-1])
    return int(hit[0])


@dataclass
class OnlineResult:
    fleet: FleetState
    trace: list[float]  # validation sum rate (true CSI) after each epoch, index 0 = before training
    history: list[EpochMetrics]

    @property
    def epochs_to_95(self) -> int:
        return epochs_to_fraction(self.trace, 0.95)


def online_adapt(fleet: FleetState, change, data: FleetData, cfg: TrainConfig, train_idx, val_idx, epochs: int) -> OnlineResult:
    """Apply a join/leave, then retrain against estimated CSI for ``epochs`` epochs.

    ``data`` must already describe the post-change fleet; if it carries no
    estimated channels they are drawn here at the configured NMSE.
    """
    fleet = apply_change(fleet, change, cfg)
    cfg = replace(cfg, csi="estimated", K=fleet.K)
    if data.H_loss is None:
        rng = np.random.default_rng([cfg.seed, 7919])
        data = FleetData(data.inputs, data.H, estimate_csi(data.H, cfg.csi_nmse_db, rng))
    start = fleet.epoch
    trace = [float(evaluate(fleet, data, val_idx, cfg).sum(axis=1).mean())]
    res = train_epochs(fleet, data, cfg, train_idx, val_idx, epochs=epochs, early_stop=False)
    trace += [m.sum_rate for m in res.history]
    log.info("online adaptation: %d epochs from epoch %d", epochs, start)
    return OnlineResult(fleet, trace, res.history)

"""Sweep orchestration: schemes x K x SNR x L_P x seeds, with resumable checkpoints.

Every sweep point draws one sample stream. Learned schemes train on its
training split; all schemes, including the perfect-CSI anchors, are scored on
the same held-out test channels.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .airlink import QuantizerConfig, make_pilots, rates
from .baselines import ZFInfeasibleError, mrt_precoder, random_precoder, wmmse_precoder, zf_precoder
from .dataset import SensorSetup, cached_samples, dataset_bytes, fleet_data
from .local_models import BranchConfig
from .nn import AdamState, load_checkpoint, save_checkpoint
from .scene import SENSORS, SceneConfig, generate_scene
from .vfl import (
    EpochMetrics,
    FleetData,
    Join,
    TrainConfig,
    build_fleet,
    bytes_to_mb,
    comm_volume,
    compute_loss,
    evaluate,
    online_adapt,
    train_epochs,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
LEARNED = ("uni-pilot", "pilot-gps", "pilot-rgb", "pilot-lidar", "h-mvmm")
BASELINES = ("zf", "wmmse", "mrt", "random")
PAIRED = ("zf", "wmmse")  # always scored next to learned schemes
SCHEMES = LEARNED + BASELINES
POLICIES = ("paper", "full")

# fractions of the fleet carrying each sensor in the heterogeneous scheme (5, 3 and 3 of 7)
HMVMM_FRACTIONS = {"gps": 5 / 7, "rgb": 3 / 7, "lidar": 3 / 7}


def sensor_masks(scheme: str, K: int, policy: str = "paper") -> dict[int, frozenset]:
    """Sensor subsets by vehicle id 0..K-1. Pilots are implicit for every vehicle."""
    if scheme not in LEARNED:
        raise ValueError(f"{scheme!r} is not a learned scheme")
    if policy not in POLICIES:
        raise ValueError(f"unknown sensor policy {policy!r}")
    if scheme == "uni-pilot":
        return {k: frozenset() for k in range(K)}
    if scheme.startswith("pilot-"):
        return {k: frozenset({scheme[len("pilot-") :]}) for k in range(K)}
    if policy == "full":
        return {k: frozenset(SENSORS) for k in range(K)}
    counts = {s: int(round(f * K)) for s, f in HMVMM_FRACTIONS.items()}
    masks = {}
    for k in range(K):
        have = set()
        if k < counts["gps"]:
            have.add("gps")
        if k < counts["rgb"]:
            have.add("rgb")
        # LiDAR goes to the tail of the fleet so modalities spread across vehicles
        if k >= K - counts["lidar"]:
            have.add("lidar")
        masks[k] = frozenset(have)
    return masks


DESK_BRANCH = BranchConfig(l_g=64, l_r=64, l_l=128, l_s=32, n_antennas=16, l_p=4, integration_hidden=128)


@dataclass(frozen=True)
class ExperimentConfig:
    schemes: tuple[str, ...] = ("uni-pilot", "h-mvmm")
    scene: SceneConfig = SceneConfig(n_v=4, n_h=4)
    train: TrainConfig = TrainConfig(l_p=4, lr=1e-3)
    branch: BranchConfig = DESK_BRANCH
    K_list: tuple[int, ...] = (3,)
    snr_list: tuple[float, ...] = (30.0,)
    l_p_list: tuple[int, ...] = (4,)
    seeds: tuple[int, ...] = (0,)
    sensor_policy: str = "paper"
    n_samples: int = 1000
    test_fraction: float = 0.2
    val_fraction: float = 0.1
    eval_bits: int = 2
    output_dir: str = "runs/default"

    def __post_init__(self):
        unknown = [s for s in self.schemes if s not in SCHEMES]
        if unknown:
            raise ValueError(f"unknown scheme ids {unknown}; choose from {SCHEMES}")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.sensor_policy not in POLICIES:
            raise ValueError(f"unknown sensor policy {self.sensor_policy!r}")
        if not 0 < self.test_fraction < 1 or not 0 < self.val_fraction < 1:
            raise ValueError("split fractions must lie in (0, 1)")
        if min(self.K_list, default=0) < 1:
            raise ValueError("K values must be >= 1")

    @property
    def learned(self) -> tuple[str, ...]:
        return tuple(s for s in self.schemes if s in LEARNED)

    @property
    def baselines(self) -> tuple[str, ...]:
        extra = tuple(s for s in self.schemes if s in BASELINES and s not in PAIRED)
        pair = PAIRED if self.learned else tuple(s for s in PAIRED if s in self.schemes)
        return pair + extra

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        nested = {"scene": SceneConfig, "train": TrainConfig, "branch": BranchConfig}
        kw = {}
        names = {f.name for f in fields(cls)}
        for key, val in d.items():
            if key not in names:
                raise ValueError(f"unknown config key {key!r}")
            if key in nested:
                kw[key] = nested[key](**{k: _tuplify(v) for k, v in val.items()})
            else:
                kw[key] = _tuplify(val)
        return cls(**kw)


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, list) else v


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# data for one sweep point


@dataclass(frozen=True)
class SweepPoint:
    K: int
    snr_db: float
    l_p: int
    seed: int

    @property
    def tag(self) -> str:
        return f"K{self.K}_snr{self.snr_db:g}_lp{self.l_p}_seed{self.seed}"


def sweep_points(cfg: ExperimentConfig) -> list[SweepPoint]:
    return [SweepPoint(K, s, lp, seed) for K in cfg.K_list for s in cfg.snr_list for lp in cfg.l_p_list for seed in cfg.seeds]


@dataclass
class Splits:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def make_splits(n: int, test_fraction: float, val_fraction: float) -> Splits:
    """Test is the tail of the stream; validation the head of what remains."""
    n_test = max(1, int(round(n * test_fraction)))
    n_fit = n - n_test
    n_val = max(1, int(round(n_fit * val_fraction)))
    if n_fit - n_val < 1:
        raise ValueError(f"{n} samples leave nothing to train on")
    return Splits(np.arange(n_val, n_fit), np.arange(n_val), np.arange(n_fit, n))


def point_config(cfg: ExperimentConfig, pt: SweepPoint) -> tuple[TrainConfig, BranchConfig, SceneConfig]:
    tc = replace(cfg.train, K=pt.K, l_p=pt.l_p, snr_db=pt.snr_db, seed=pt.seed, bits=cfg.eval_bits)
    sc = replace(cfg.scene, rng_seed=pt.seed)
    dims = replace(cfg.branch, n_antennas=sc.n_antennas, l_p=pt.l_p)
    return tc, dims, sc


def point_samples(cfg: ExperimentConfig, pt: SweepPoint):
    _, _, sc = point_config(cfg, pt)
    return cached_samples(generate_scene(sc), pt.K, cfg.n_samples, pt.seed, SensorSetup())


def point_data(cfg: ExperimentConfig, pt: SweepPoint, masks: dict[int, frozenset]) -> FleetData:
    tc, _, sc = point_config(cfg, pt)
    X = make_pilots(sc.n_antennas, pt.l_p, tc.power, pt.seed)
    sp = make_splits(cfg.n_samples, cfg.test_fraction, cfg.val_fraction)
    return fleet_data(point_samples(cfg, pt), masks, X, tc.sigma2, scale_idx=sp.train)


# ---------------------------------------------------------------------------
# metrics rows


@dataclass
class MetricsRow:
    scheme: str
    K: int
    snr_db: float
    l_p: int
    bits: int
    seed: int
    phase: str  # train | test
    epoch: int
    loss: float
    val_loss: float
    sum_rate: float
    min_user_rate: float
    user_rates: str  # per-user mean rates joined by ';'
    uplink_bytes: int
    downlink_bytes: int
    wall_time: float = 0.0
    schema: int = SCHEMA_VERSION


COLUMNS = [f.name for f in fields(MetricsRow)]


def _user_fields(r) -> tuple[float, str]:
    per_user = np.asarray(r, dtype=float).reshape(-1, np.shape(r)[-1]).mean(axis=0)
    return float(per_user.min()), ";".join(repr(float(x)) for x in per_user)


def row_from_rates(scheme, pt: SweepPoint, bits, phase, epoch, r, tc: TrainConfig, **kw) -> MetricsRow:
    mn, users = _user_fields(r)
    return MetricsRow(
        scheme,
        pt.K,
        pt.snr_db,
        pt.l_p,
        bits,
        pt.seed,
        phase,
        epoch,
        kw.pop("loss", compute_loss(r, tc)),
        kw.pop("val_loss", float("nan")),
        float(np.sum(r, axis=-1).mean()),
        mn,
        users,
        kw.pop("uplink_bytes", 0),
        kw.pop("downlink_bytes", 0),
        **kw,
    )


def row_from_epoch(scheme, pt, tc: TrainConfig, m: EpochMetrics, wall: float) -> MetricsRow:
    mn = float(np.min(m.user_rates))
    users = ";".join(repr(float(x)) for x in m.user_rates)
    return MetricsRow(
        scheme, pt.K, pt.snr_db, pt.l_p, tc.bits, pt.seed, "train", m.epoch, m.loss, m.val_loss,
        m.sum_rate, mn, users, m.uplink_bytes, m.downlink_bytes, wall,
    )


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_rows(path, rows: list[MetricsRow]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow([_fmt(getattr(r, c)) for c in COLUMNS])
    Path(path).write_text(buf.getvalue())


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# baselines on the test split


def _zf_or_reduced(H, power):
    """ZF on the users with non-zero channels; fully blocked users get nothing."""
    try:
        return zf_precoder(H, power)
    except ZFInfeasibleError:
        live = np.flatnonzero(np.linalg.norm(H, axis=0) > 0)
        V = np.zeros_like(H)
        if live.size:
            V[:, live] = zf_precoder(H[:, live], power)
        return V


def baseline_rates(name: str, H, tc: TrainConfig, rng=None) -> np.ndarray:
    """Per-sample rates (S, K) of a perfect-CSI anchor on channels (S, N, K)."""
    out = []
    for h in H:
        if name == "zf":
            V = _zf_or_reduced(h, tc.power)
        elif name == "wmmse":
            V = wmmse_precoder(h, tc.power, tc.sigma2).V
        elif name == "mrt":
            V = mrt_precoder(h, tc.power).V
        elif name == "random":
            V = random_precoder(h.shape[0], h.shape[1], tc.power, rng)
        else:
            raise ValueError(f"unknown baseline {name!r}")
        out.append(rates(h[None], V[None], tc.sigma2)[0])
    return np.array(out)


# ---------------------------------------------------------------------------
# checkpoints


def _ckpt_blocks(fleet) -> dict:
    blocks = {}
    for vid, c in fleet.clients.items():
        for name, p in c.model.parameters().items():
            blocks[f"v{vid}/p/{name}"] = p
            if name in c.adam.m:
                blocks[f"v{vid}/m/{name}"] = c.adam.m[name]
                blocks[f"v{vid}/v/{name}"] = c.adam.v[name]
    return blocks


def save_fleet(path, fleet, meta: dict, best: dict | None = None) -> None:
    meta = dict(meta, epoch=fleet.epoch, iteration=fleet.iteration,
                adam_steps={str(v): c.adam.step for v, c in fleet.clients.items()})
    blocks = _ckpt_blocks(fleet)
    for vid, params in (best or {}).items():
        blocks.update({f"v{vid}/b/{k}": p for k, p in params.items()})
    save_checkpoint(path, blocks, meta)


def snapshot(fleet) -> dict:
    return {vid: {k: p.copy() for k, p in c.model.parameters().items()} for vid, c in fleet.clients.items()}


def load_snapshot(fleet, snap: dict) -> None:
    for vid, params in snap.items():
        fleet.clients[vid].model.load_parameters(params)


def restore_fleet(path, fleet) -> dict:
    blocks, header = load_checkpoint(path)
    meta = header["meta"]
    for vid, c in fleet.clients.items():
        pre = f"v{vid}/"
        c.model.load_parameters({k[len(pre) + 2 :]: v for k, v in blocks.items() if k.startswith(pre + "p/")})
        c.adam.m = {k[len(pre) + 2 :]: v.copy() for k, v in blocks.items() if k.startswith(pre + "m/")}
        c.adam.v = {k[len(pre) + 2 :]: v.copy() for k, v in blocks.items() if k.startswith(pre + "v/")}
        c.adam.step = int(meta["adam_steps"][str(vid)])
    fleet.epoch = int(meta["epoch"])
    fleet.iteration = int(meta["iteration"])
    best = {}
    for vid in fleet.clients:
        pre = f"v{vid}/b/"
        params = {k[len(pre) :]: v for k, v in blocks.items() if k.startswith(pre)}
        if params:
            best[vid] = params
    meta["best_params"] = best or None
    return meta


# ---------------------------------------------------------------------------
# the runner


def _rows_from_meta(meta) -> list[MetricsRow]:
    return [MetricsRow(**r) for r in meta.get("rows", [])]


def train_point(cfg: ExperimentConfig, scheme: str, pt: SweepPoint, out: Path) -> list[MetricsRow]:
    tc, dims, _ = point_config(cfg, pt)
    masks = sensor_masks(scheme, pt.K, cfg.sensor_policy)
    data = point_data(cfg, pt, masks)
    sp = make_splits(data.n_samples, cfg.test_fraction, cfg.val_fraction)
    fleet = build_fleet(masks, dims, tc)
    ckpt = out / "checkpoints" / f"{scheme}_{pt.tag}.npz"
    rows: list[MetricsRow] = []
    state = None
    best = None
    if ckpt.exists():
        meta = restore_fleet(ckpt, fleet)
        rows = _rows_from_meta(meta)
        state = meta["early_stop"]
        best = meta["best_params"]
        if meta.get("done"):
            return rows
        log.info("resuming %s %s at epoch %d", scheme, pt.tag, fleet.epoch)
    state = state or {"best": float("inf"), "best_epoch": 0, "since": 0}
    t0 = time.perf_counter()

    def on_epoch(fl, m, st):
        nonlocal best
        if st["best_epoch"] == fl.epoch:
            best = snapshot(fl)
        rows.append(row_from_epoch(scheme, pt, tc, m, time.perf_counter() - t0))
        save_fleet(ckpt, fl, {"rows": [asdict(r) for r in rows], "early_stop": st, "done": False}, best)

    stopped = state["since"] >= tc.patience
    if not stopped and fleet.epoch < tc.max_epochs:
        train_epochs(fleet, data, tc, sp.train, sp.val, epochs=tc.max_epochs - fleet.epoch,
                     on_epoch=on_epoch, state=state)
    # score the parameters with the best validation loss
    if best is not None:
        load_snapshot(fleet, best)
    r = evaluate(fleet, data, sp.test, tc, QuantizerConfig(bits=cfg.eval_bits))
    up = sum(x.uplink_bytes for x in rows if x.phase == "train")
    down = sum(x.downlink_bytes for x in rows if x.phase == "train")
    rows.append(row_from_rates(scheme, pt, cfg.eval_bits, "test", state["best_epoch"], r, tc,
                               uplink_bytes=up, downlink_bytes=down, wall_time=time.perf_counter() - t0))
    save_fleet(ckpt, fleet, {"rows": [asdict(x) for x in rows], "early_stop": state, "done": True})
    return rows


def baseline_point(cfg: ExperimentConfig, name: str, pt: SweepPoint) -> MetricsRow:
    tc, _, _ = point_config(cfg, pt)
    S = point_samples(cfg, pt)
    sp = make_splits(S.n_samples, cfg.test_fraction, cfg.val_fraction)
    t0 = time.perf_counter()
    r = baseline_rates(name, S.H[sp.test], tc, np.random.default_rng([pt.seed, 11]))
    return row_from_rates(name, pt, 0, "test", 0, r, tc, wall_time=time.perf_counter() - t0)


def run_experiment(cfg: ExperimentConfig) -> list[MetricsRow]:
    """Run (or resume) every sweep point; writes metrics.csv, config.json and checkpoints."""
    out = Path(cfg.output_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    rows: list[MetricsRow] = []
    for pt in sweep_points(cfg):
        for scheme in cfg.learned:
            log.info("training %s at %s", scheme, pt.tag)
            rows += train_point(cfg, scheme, pt, out)
        for name in cfg.baselines:
            rows.append(baseline_point(cfg, name, pt))
        write_rows(out / "metrics.csv", rows)
    write_rows(out / "metrics.csv", rows)
    return rows


def strip_wall_time(text: str) -> str:
    """CSV text with the wall_time column blanked, for determinism comparisons."""
    lines = list(csv.reader(io.StringIO(text)))
    col = lines[0].index("wall_time")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for line in lines:
        w.writerow(line[:col] + line[col + 1 :])
    return buf.getvalue()


def summarize(rows) -> dict[tuple, float]:
    """Mean test sum rate over seeds, keyed by (scheme, K, snr_db, l_p)."""
    acc: dict[tuple, list] = {}
    for r in rows:
        d = r if isinstance(r, dict) else asdict(r)
        if d["phase"] != "test":
            continue
        key = (d["scheme"], int(d["K"]), float(d["snr_db"]), int(d["l_p"]))
        acc.setdefault(key, []).append(float(d["sum_rate"]))
    return {k: float(np.mean(v)) for k, v in acc.items()}


# ---------------------------------------------------------------------------
# evaluation of saved checkpoints


def evaluate_run(run_dir) -> list[MetricsRow]:
    """Re-score every finished checkpoint of a run on its test split; writes eval.csv."""
    run_dir = Path(run_dir)
    cfg = load_config(run_dir / "config.json")
    rows = []
    for pt in sweep_points(cfg):
        for scheme in cfg.learned:
            ckpt = run_dir / "checkpoints" / f"{scheme}_{pt.tag}.npz"
            if not ckpt.exists():
                raise FileNotFoundError(f"missing checkpoint {ckpt}")
            tc, dims, _ = point_config(cfg, pt)
            masks = sensor_masks(scheme, pt.K, cfg.sensor_policy)
            fleet = build_fleet(masks, dims, tc)
            restore_fleet(ckpt, fleet)
            data = point_data(cfg, pt, masks)
            sp = make_splits(data.n_samples, cfg.test_fraction, cfg.val_fraction)
            r = evaluate(fleet, data, sp.test, tc, QuantizerConfig(bits=cfg.eval_bits))
            rows.append(row_from_rates(scheme, pt, cfg.eval_bits, "test", fleet.epoch, r, tc))
    write_rows(run_dir / "eval.csv", rows)
    return rows


# ---------------------------------------------------------------------------
# accounting


@dataclass
class AccountingRow:
    scheme: str
    K: int
    seed: int
    epochs: int
    vfl_bytes: int
    vfl_mb: float
    wire_uplink_bytes: int
    wire_downlink_bytes: int
    cl_bytes: int
    cl_mb: float


def accounting_report(run_dir) -> list[AccountingRow]:
    """VFL uplink volume from the epochs actually run versus the bytes centralised learning would upload."""
    run_dir = Path(run_dir)
    metrics = run_dir / "metrics.csv"
    if not metrics.exists():
        raise FileNotFoundError(f"no metrics file in {run_dir}")
    cfg = load_config(run_dir / "config.json")
    rows = read_rows(metrics)
    out = []
    for pt in sweep_points(cfg):
        for scheme in cfg.learned:
            mine = [r for r in rows if r["scheme"] == scheme and int(r["K"]) == pt.K and int(r["seed"]) == pt.seed
                    and float(r["snr_db"]) == pt.snr_db and int(r["l_p"]) == pt.l_p and r["phase"] == "train"]
            epochs = len(mine)
            up = sum(int(r["uplink_bytes"]) for r in mine)
            down = sum(int(r["downlink_bytes"]) for r in mine)
            data = point_data(cfg, pt, sensor_masks(scheme, pt.K, cfg.sensor_policy))
            sp = make_splits(data.n_samples, cfg.test_fraction, cfg.val_fraction)
            cl = dataset_bytes(data, sp.train)
            vfl = comm_volume(epochs, pt.K)
            out.append(AccountingRow(scheme, pt.K, pt.seed, epochs, vfl, bytes_to_mb(vfl), up, down, cl, bytes_to_mb(cl)))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = [f.name for f in fields(AccountingRow)]
    w.writerow(names)
    for a in out:
        w.writerow([_fmt(getattr(a, n)) for n in names])
    (run_dir / "accounting.csv").write_text(buf.getvalue())
    return out


# ---------------------------------------------------------------------------
# online user change: warm versus cold start


@dataclass
class OnlineRun:
    seed: int
    start: str  # warm | cold
    trace: list[float] = field(default_factory=list)
    epochs_to_95: int = 0


def run_online(cfg: ExperimentConfig, scheme: str = "uni-pilot", K_before: int = 2,
               pre_epochs: int = 40, epochs: int = 40) -> list[OnlineRun]:
    """One vehicle joins a trained fleet of ``K_before``; compare with training all from scratch.

    Both arms retrain for ``epochs`` epochs against estimated CSI on the same
    post-join data and seeds.
    """
    K = K_before + 1
    runs = []
    for seed in cfg.seeds:
        pt = SweepPoint(K, cfg.snr_list[0], cfg.l_p_list[0], seed)
        tc, dims, _ = point_config(cfg, pt)
        masks = sensor_masks(scheme, K, cfg.sensor_policy)
        data = point_data(cfg, pt, masks)
        sp = make_splits(data.n_samples, cfg.test_fraction, cfg.val_fraction)
        before = {v: masks[v] for v in range(K_before)}
        pre_data = FleetData({v: data.inputs[v] for v in before}, data.H[..., :K_before])
        pre_cfg = replace(tc, K=K_before)
        warm = build_fleet(before, dims, pre_cfg)
        train_epochs(warm, pre_data, pre_cfg, sp.train, sp.val, epochs=pre_epochs, early_stop=False)
        cold = build_fleet(before, dims, pre_cfg)
        join = Join(K_before, masks[K_before])
        for label, fleet in (("warm", warm), ("cold", cold)):
            res = online_adapt(fleet, join, data, tc, sp.train, sp.val, epochs)
            runs.append(OnlineRun(seed, label, res.trace, res.epochs_to_95))
    return runs


def write_online(path, runs: list[OnlineRun]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "start", "epoch", "sum_rate", "epochs_to_95"])
    for r in runs:
        for e, v in enumerate(r.trace):
            w.writerow([r.seed, r.start, e, repr(float(v)), r.epochs_to_95])
    Path(path).write_text(buf.getvalue())

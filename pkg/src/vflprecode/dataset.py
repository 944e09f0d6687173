"""Sample streams: K vehicles dropped into a fixed world, with every modality precomputed.

All modalities are computed for every vehicle so different schemes train and
test on exactly the same channel draws; a scheme only chooses which of them
each vehicle gets to see.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .airlink import downlink_train
from .scene import (
    CameraIntrinsics,
    RayConfig,
    Scene,
    VehicleState,
    sample_detections,
    sample_gps,
    sample_lidar,
    sample_vehicles,
    synthesize_channel,
)
from .sensing import (
    BevGrid,
    SensingBundle,
    bundle_to_bytes,
    dead_reckon,
    gps_feature,
    indicator_vector,
    lidar_to_bev,
    rgb_feature,
)
from .vfl import FleetData


@dataclass(frozen=True)
class SensorSetup:
    gps_noise_std: float = 5.0
    dead_reckon_interval: float = 1.0
    intrinsics: CameraIntrinsics = CameraIntrinsics()
    detection_range: float = 120.0
    ray_config: RayConfig = RayConfig()
    bev_grid: BevGrid = BevGrid()


@dataclass
class SampleSet:
    seed: int
    H: np.ndarray  # (S, N, K)
    gps: np.ndarray  # (S, K, 20)
    rgb: np.ndarray  # (S, K, 36)
    bev: np.ndarray  # (S, K, Lx, Ly)
    positions: np.ndarray  # (S, K, 3)
    los: np.ndarray  # (S, K)
    gps_available: np.ndarray  # (S, K)

    @property
    def n_samples(self) -> int:
        return self.H.shape[0]

    @property
    def K(self) -> int:
        return self.H.shape[2]


def _sub_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def gps_estimate(vehicle: VehicleState, scene: Scene, setup: SensorSetup, rng) -> tuple[np.ndarray, bool]:
    """GPS fix, or dead reckoning from the fix taken one interval earlier when shadowed."""
    fix, ok = sample_gps(vehicle, scene, setup.gps_noise_std, rng)
    if ok:
        return fix, True
    dt = setup.dead_reckon_interval
    x, y, z = vehicle.position
    vx, vy = vehicle.velocity
    earlier = VehicleState(vehicle.id, (x - vx * dt, y - vy * dt, z), vehicle.velocity, vehicle.orientation)
    last_fix, _ = sample_gps(earlier, scene, setup.gps_noise_std, rng)
    return dead_reckon(last_fix, vehicle.velocity, dt), False


def generate_samples(scene: Scene, K: int, n: int, seed: int, setup: SensorSetup = SensorSetup()) -> SampleSet:
    place_rng = np.random.default_rng([seed, 1])
    N = scene.config.n_antennas
    g = setup.bev_grid
    H = np.zeros((n, N, K), dtype=complex)
    gps = np.zeros((n, K, 20))
    rgb = np.zeros((n, K, 36))
    bev = np.zeros((n, K, g.l_x, g.l_y), dtype=np.uint8)
    pos = np.zeros((n, K, 3))
    los = np.zeros((n, K), dtype=bool)
    avail = np.zeros((n, K), dtype=bool)
    bs = scene.bs_position
    for s in range(n):
        phase_seed = _sub_seed(seed, s)
        for k, veh in enumerate(sample_vehicles(scene, K, place_rng)):
            ch = synthesize_channel(scene, veh, phase_seed)
            H[s, :, k] = ch.h
            los[s, k] = ch.has_los
            pos[s, k] = veh.position
            est, avail[s, k] = gps_estimate(veh, scene, setup, np.random.default_rng([seed, 2, s, k]))
            gps[s, k] = gps_feature(est, bs)
            dets = sample_detections(veh, scene, setup.intrinsics, setup.detection_range)
            rgb[s, k] = rgb_feature(indicator_vector(dets, setup.intrinsics), veh.orientation)
            bev[s, k] = lidar_to_bev(sample_lidar(veh, scene, setup.ray_config), g)
    return SampleSet(seed, H, gps, rgb, bev, pos, los, avail)


@lru_cache(maxsize=16)
def cached_samples(scene: Scene, K: int, n: int, seed: int, setup: SensorSetup = SensorSetup()) -> SampleSet:
    return generate_samples(scene, K, n, seed, setup)


def received_pilots(samples: SampleSet, X, sigma2: float) -> np.ndarray:
    """(S, K, L_P) pilots; noise draws depend only on (seed, sample, user), so SNR sweeps stay paired."""
    S, _, K = samples.H.shape
    y = np.zeros((S, K, X.shape[1]), dtype=complex)
    for s in range(S):
        for k in range(K):
            y[s, k] = downlink_train(samples.H[s, :, k], X, sigma2, np.random.default_rng([samples.seed, 3, s, k]))
    return y


def pilot_scale(y, idx=None) -> float:
    """1 / RMS of the real pilot components over ``idx`` (default: all samples)."""
    y = np.asarray(y) if idx is None else np.asarray(y)[idx]
    rms = np.sqrt(np.mean(y.real**2 + y.imag**2) / 2)
    return 1.0 if rms == 0 else float(1.0 / rms)


def fleet_data(
    samples: SampleSet, masks: dict[int, frozenset], X, sigma2: float, vehicle_order=None, scale_idx=None
) -> FleetData:
    """Assemble model inputs. Column k of the sample set belongs to the k-th vehicle id.

    Pilots are standardised by one scale factor computed on ``scale_idx``
    (the training split), shared by every vehicle and every split.
    """
    ids = sorted(masks) if vehicle_order is None else list(vehicle_order)
    if len(ids) != samples.K:
        raise ValueError(f"{len(ids)} vehicles but samples were drawn for K={samples.K}")
    y = received_pilots(samples, X, sigma2)
    y = y * pilot_scale(y, scale_idx)
    inputs = {}
    for k, vid in enumerate(ids):
        d = {"pilot": np.concatenate([y[:, k].real, y[:, k].imag], axis=-1)}
        mask = masks[vid]
        if "gps" in mask:
            d["gps"] = samples.gps[:, k]
        if "rgb" in mask:
            d["rgb"] = samples.rgb[:, k]
        if "lidar" in mask:
            d["lidar"] = samples.bev[:, k].astype(float)
        inputs[vid] = d
    return FleetData(inputs, samples.H)


def sample_bundles(data: FleetData, s: int) -> dict[int, SensingBundle]:
    out = {}
    for vid, d in data.inputs.items():
        p = d["pilot"][s]
        lp = len(p) // 2
        lidar = d.get("lidar")
        out[vid] = SensingBundle(
            p[:lp] + 1j * p[lp:],
            d["gps"][s] if "gps" in d else None,
            d["rgb"][s] if "rgb" in d else None,
            lidar[s].astype(np.int64) if lidar is not None else None,
        )
    return out


def dataset_bytes(data: FleetData, idx) -> int:
    """Bytes a centralised learner would need uploaded: every serialized training bundle."""
    return sum(len(bundle_to_bytes(b)) for s in idx for b in sample_bundles(data, int(s)).values())

"""Turn raw sensor outputs into the fixed-size vectors the local models consume."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import DegenerateGeometryError, departure_angles, wrap_angle
from .scene import CameraIntrinsics, PointCloud

GPS_DIM = 20
RGB_DIM = 36
ANGLE_LEVELS = 5
ORIENTATION_LEVELS = 10
OBJECTNESS_THRESHOLD = 0.5
# concatenation order of the per-camera indicator blocks
INDICATOR_ORDER = ("right", "left", "back", "front")

__all__ = [
    "DegenerateGeometryError",
    "BevGrid",
    "SensingBundle",
    "dead_reckon",
    "bs_angles",
    "posenc",
    "gps_feature",
    "detection_to_azimuth",
    "indicator_vector",
    "rgb_feature",
    "lidar_to_bev",
]


def dead_reckon(last_fix, velocity, dt: float) -> np.ndarray:
    if dt < 0:
        raise ValueError("dt must be non-negative")
    x, y, z = np.asarray(last_fix, dtype=float)
    vx, vy = velocity
    return np.array([x + vx * dt, y + vy * dt, z])


def bs_angles(p_vehicle, p_bs) -> tuple[float, float]:
    """(azimuth, elevation) of the vehicle as seen from the BS."""
    return departure_angles(p_vehicle, p_bs)


def posenc(p: float, levels: int) -> np.ndarray:
    if levels < 1:
        raise ValueError("levels must be >= 1")
    arg = (2.0 ** np.arange(levels)) * np.pi * p
    out = np.empty(2 * levels)
    out[0::2] = np.sin(arg)
    out[1::2] = np.cos(arg)
    return out


def gps_feature(p_noisy, p_bs) -> np.ndarray:
    theta, phi = bs_angles(p_noisy, p_bs)
    return np.concatenate([posenc(theta / np.pi, ANGLE_LEVELS), posenc(phi / np.pi, ANGLE_LEVELS)])


def _intrinsic_matrix(intrinsics) -> np.ndarray:
    return intrinsics.matrix if isinstance(intrinsics, CameraIntrinsics) else np.asarray(intrinsics, dtype=float)


def detection_to_azimuth(det, intrinsics, width: Optional[float] = None, height: Optional[float] = None) -> float:
    """Horizontal bearing of a bbox centre relative to the camera axis.

    ``u`` scales with the image width and ``v`` with the image height.
    """
    K = _intrinsic_matrix(intrinsics)
    if width is None or height is None:
        width, height = intrinsics.width, intrinsics.height
    u = det.u if hasattr(det, "u") else det["u"]
    v = det.v if hasattr(det, "v") else det["v"]
    try:
        pc = np.linalg.solve(K, np.array([u * width, v * height, 1.0]))
    except np.linalg.LinAlgError as exc:
        raise ValueError("camera intrinsics are not invertible") from exc
    pc = pc / pc[2]
    return float(np.arctan(pc[0]))


def indicator_vector(dets: dict, intrinsics: CameraIntrinsics = CameraIntrinsics()) -> np.ndarray:
    fov = np.deg2rad(intrinsics.fov_deg)
    w_min = -fov / 2
    dw = fov / 4
    lo = w_min + dw * np.arange(4)
    hi = w_min + dw * np.arange(1, 5)
    blocks = []
    for face in INDICATOR_ORDER:
        r = np.zeros(4)
        for det in dets.get(face, ()):
            if det.s <= OBJECTNESS_THRESHOLD:
                continue
            w = detection_to_azimuth(det, intrinsics)
            # half-open bins [lo_j, hi_j)
            r[(lo <= w) & (w < hi)] = 1.0
        blocks.append(r)
    return np.concatenate(blocks)


def rgb_feature(indicator, orientation: float) -> np.ndarray:
    beta = float(wrap_angle(orientation))
    return np.concatenate([np.asarray(indicator, dtype=float), posenc(beta / np.pi, ORIENTATION_LEVELS)])


@dataclass(frozen=True)
class BevGrid:
    l_x: int = 32
    l_y: int = 32
    l_z: int = 8
    bounds: tuple[tuple[float, float], tuple[float, float], tuple[float, float]] = (
        (-40.0, 40.0),
        (-40.0, 40.0),
        (-2.0, 30.0),
    )

    def __post_init__(self):
        if min(self.l_x, self.l_y, self.l_z) < 1:
            raise ValueError("grid dims must be >= 1")
        if any(lo >= hi for lo, hi in self.bounds):
            raise ValueError("grid bounds must be well ordered")


def lidar_to_bev(cloud, grid: BevGrid = BevGrid()) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float).reshape(-1, 3)
    dims = np.array([grid.l_x, grid.l_y, grid.l_z])
    lo = np.array([b[0] for b in grid.bounds])
    hi = np.array([b[1] for b in grid.bounds])
    inside = np.all((pts >= lo) & (pts < hi), axis=1)
    idx = np.floor((pts[inside] - lo) / (hi - lo) * dims).astype(int)
    idx = np.minimum(idx, dims - 1)
    occ = np.zeros(tuple(dims), dtype=bool)
    occ[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return occ.sum(axis=2).astype(np.int64)


@dataclass(frozen=True)
class SensingBundle:
    pilot: np.ndarray  # complex, length L_P
    gps: Optional[np.ndarray] = None
    rgb: Optional[np.ndarray] = None
    lidar: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.gps is not None and np.shape(self.gps) != (GPS_DIM,):
            raise ValueError(f"gps feature must have length {GPS_DIM}")
        if self.rgb is not None and np.shape(self.rgb) != (RGB_DIM,):
            raise ValueError(f"rgb feature must have length {RGB_DIM}")
        if self.lidar is not None and np.ndim(self.lidar) != 2:
            raise ValueError("lidar BEV must be a matrix")

    @property
    def mask(self) -> frozenset[str]:
        return frozenset(n for n in ("gps", "rgb", "lidar") if getattr(self, n) is not None)

    @property
    def pilot_real(self) -> np.ndarray:
        return np.concatenate([self.pilot.real, self.pilot.imag])

    def check_mask(self, sensor_mask) -> None:
        if self.mask != frozenset(sensor_mask):
            raise ValueError(f"bundle carries {sorted(self.mask)}, vehicle mask is {sorted(sensor_mask)}")


# on-disk layout: magic, version, mask bits, L_P, L_x, L_y, then f32 pilots (re, im),
# f32 gps, f32 rgb, u8 bev; absent blocks take no space
_BUNDLE_HEADER = struct.Struct("<4sBBHHH")
_BUNDLE_MAGIC = b"SBDL"
_BUNDLE_VERSION = 1


def bundle_to_bytes(b: SensingBundle) -> bytes:
    bits = (b.gps is not None) | (b.rgb is not None) << 1 | (b.lidar is not None) << 2
    lx, ly = b.lidar.shape if b.lidar is not None else (0, 0)
    parts = [_BUNDLE_HEADER.pack(_BUNDLE_MAGIC, _BUNDLE_VERSION, bits, len(b.pilot), lx, ly)]
    parts.append(b.pilot_real.astype("<f4").tobytes())
    if b.gps is not None:
        parts.append(np.asarray(b.gps, dtype="<f4").tobytes())
    if b.rgb is not None:
        parts.append(np.asarray(b.rgb, dtype="<f4").tobytes())
    if b.lidar is not None:
        parts.append(np.asarray(b.lidar, dtype=np.uint8).tobytes())
    return b"".join(parts)


def bundle_from_bytes(data: bytes) -> SensingBundle:
    magic, version, bits, lp, lx, ly = _BUNDLE_HEADER.unpack_from(data)
    if magic != _BUNDLE_MAGIC or version != _BUNDLE_VERSION:
        raise ValueError("not a sensing bundle")
    off = _BUNDLE_HEADER.size

    def take(n, dtype):
        nonlocal off
        arr = np.frombuffer(data, dtype=dtype, count=n, offset=off)
        off += n * np.dtype(dtype).itemsize
        return arr

    pr = take(2 * lp, "<f4").astype(float)
    pilot = pr[:lp] + 1j * pr[lp:]
    gps = take(GPS_DIM, "<f4").astype(float) if bits & 1 else None
    rgb = take(RGB_DIM, "<f4").astype(float) if bits & 2 else None
    lidar = take(lx * ly, np.uint8).reshape(lx, ly).astype(np.int64) if bits & 4 else None
    return SensingBundle(pilot, gps, rgb, lidar)


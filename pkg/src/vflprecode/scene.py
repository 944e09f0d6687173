"""Synthetic city-block world.

One geometry drives everything: the multipath channel of each vehicle, its
GPS reading, what its four cameras see and what its LiDAR returns.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import cached_property
import pathlib

import numpy as np

from .geometry import (
    BOX_EDGES,
    box_corners,
    departure_angles,
    ray_box_hits,
    segment_blocked,
    wrap_angle,
)

SCENE_FORMAT = "vflprecode-scene"
SCENE_VERSION = 1

SENSORS = ("gps", "rgb", "lidar")
CAMERA_FACES = ("front", "back", "left", "right")
# yaw of each camera relative to the vehicle heading (counter-clockwise)
CAMERA_YAW = {"front": 0.0, "left": np.pi / 2, "back": np.pi, "right": -np.pi / 2}


class SceneTooDenseError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    extent_x: float = 190.0
    extent_y: float = 135.0
    bs_position: tuple[float, float, float] = (95.0, 67.5, 9.0)
    n_buildings: int = 12
    building_footprint: tuple[float, float] = (10.0, 32.0)
    building_height: tuple[float, float] = (8.0, 40.0)
    street_gap: float = 6.0
    bs_clearance: float = 8.0
    rng_seed: int = 0
    n_v: int = 16
    n_h: int = 8
    downlink_carrier_hz: float = 4.95e9
    reflection_coeff: float = 0.6
    # distance at which the LoS amplitude equals one
    path_gain_ref: float = 10.0
    gps_shadow_height: float = 20.0
    gps_shadow_distance: float = 5.0
    max_retries: int = 2000

    def __post_init__(self):
        if self.extent_x <= 0 or self.extent_y <= 0:
            raise ValueError("scene extents must be positive")
        if self.n_v < 1 or self.n_h < 1:
            raise ValueError("antenna counts must be >= 1")
        if self.bs_position[2] <= 0:
            raise ValueError("BS height must be positive")
        if self.n_buildings < 0:
            raise ValueError("n_buildings must be non-negative")
        lo, hi = self.building_footprint
        if not 0 < lo <= hi:
            raise ValueError("bad building footprint range")
        if not 0 < self.building_height[0] <= self.building_height[1]:
            raise ValueError("bad building height range")

    @property
    def n_antennas(self) -> int:
        return self.n_v * self.n_h


@dataclass(frozen=True)
class Building:
    min_corner: tuple[float, float, float]
    max_corner: tuple[float, float, float]

    def __post_init__(self):
        if not all(a < b for a, b in zip(self.min_corner, self.max_corner)):
            raise ValueError("building min_corner must be below max_corner componentwise")

    @property
    def height(self) -> float:
        return self.max_corner[2]


@dataclass(frozen=True)
class Scene:
    config: SceneConfig
    buildings: tuple[Building, ...]

    @property
    def bs_position(self) -> np.ndarray:
        return np.asarray(self.config.bs_position, dtype=float)

    @cached_property
    def boxes(self) -> np.ndarray:
        """(B, 2, 3) array of [min_corner, max_corner]."""
        if not self.buildings:
            return np.zeros((0, 2, 3))
        return np.array([[b.min_corner, b.max_corner] for b in self.buildings], dtype=float)

    def contains_xy(self, x: float, y: float) -> bool:
        return 0.0 <= x <= self.config.extent_x and 0.0 <= y <= self.config.extent_y


@dataclass(frozen=True)
class VehicleState:
    id: int
    position: tuple[float, float, float]
    velocity: tuple[float, float] = (0.0, 0.0)
    orientation: float = 0.0
    sensor_mask: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.position[2] < 0:
            raise ValueError("vehicle z must be >= 0")
        unknown = set(self.sensor_mask) - set(SENSORS)
        if unknown:
            raise ValueError(f"unknown sensors {sorted(unknown)}")
        object.__setattr__(self, "orientation", float(wrap_angle(self.orientation)))
        object.__setattr__(self, "sensor_mask", frozenset(self.sensor_mask))


@dataclass(frozen=True)
class Path:
    azimuth: float
    elevation: float
    gain: complex
    is_los: bool
    building: int = -1


@dataclass(frozen=True)
class ChannelVector:
    h: np.ndarray
    paths: tuple[Path, ...]

    @property
    def blocked(self) -> bool:
        return len(self.paths) == 0

    @property
    def has_los(self) -> bool:
        return any(p.is_los for p in self.paths)


@dataclass(frozen=True)
class CameraIntrinsics:
    width: int = 640
    height: int = 480
    fov_deg: float = 90.0

    @property
    def focal(self) -> float:
        return (self.width / 2) / np.tan(np.deg2rad(self.fov_deg) / 2)

    @property
    def matrix(self) -> np.ndarray:
        f = self.focal
        return np.array([[f, 0.0, self.width / 2], [0.0, f, self.height / 2], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Detection:
    u: float
    v: float
    w: float
    h: float
    s: float

    def __post_init__(self):
        for name in ("u", "v", "w", "h", "s"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise ValueError(f"detection field {name}={val} outside [0, 1]")


DetectionSet = dict  # face -> list[Detection]


@dataclass(frozen=True)
class RayConfig:
    n_azimuth: int = 72
    n_elevation: int = 8
    elevation_min_deg: float = -25.0
    elevation_max_deg: float = 10.0
    max_range: float = 60.0

    def __post_init__(self):
        if self.n_azimuth < 1 or self.n_elevation < 1:
            raise ValueError("ray grid needs at least one azimuth and elevation step")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")

    @property
    def budget(self) -> int:
        return self.n_azimuth * self.n_elevation


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray  # (M, 3), vehicle frame

    def __len__(self):
        return len(self.points)


# ---------------------------------------------------------------------------
# world generation


def _footprints_overlap(a, b, gap):
    return not (
        a[1][0] + gap <= b[0][0]
        or b[1][0] + gap <= a[0][0]
        or a[1][1] + gap <= b[0][1]
        or b[1][1] + gap <= a[0][1]
    )


def generate_scene(cfg: SceneConfig) -> Scene:
    rng = np.random.default_rng(cfg.rng_seed)
    bx, by, _ = cfg.bs_position
    bs_zone = ((bx - cfg.bs_clearance, by - cfg.bs_clearance, 0.0), (bx + cfg.bs_clearance, by + cfg.bs_clearance, 0.0))
    placed: list[Building] = []
    for _ in range(cfg.n_buildings):
        for _attempt in range(cfg.max_retries):
            w, d = rng.uniform(*cfg.building_footprint, size=2)
            if w >= cfg.extent_x or d >= cfg.extent_y:
                continue
            x0 = rng.uniform(0.0, cfg.extent_x - w)
            y0 = rng.uniform(0.0, cfg.extent_y - d)
            height = rng.uniform(*cfg.building_height)
            cand = ((x0, y0, 0.0), (x0 + w, y0 + d, height))
            if _footprints_overlap(cand, bs_zone, 0.0):
                continue
            if any(_footprints_overlap(cand, (b.min_corner, b.max_corner), cfg.street_gap) for b in placed):
                continue
            placed.append(Building(tuple(map(float, cand[0])), tuple(map(float, cand[1]))))
            break
        else:
            raise SceneTooDenseError(
                f"scene too dense: could not place building {len(placed) + 1} of {cfg.n_buildings}"
            )
    return Scene(cfg, tuple(placed))


def sample_vehicles(scene: Scene, n: int, rng, *, height=1.5, margin=1.5, min_bs_dist=5.0, speed=(2.0, 15.0), sensor_masks=None):
    """Drop ``n`` vehicles uniformly on the free ground of the scene."""
    cfg = scene.config
    boxes = scene.boxes
    out = []
    bs = scene.bs_position
    for k in range(n):
        while True:
            x = rng.uniform(0.0, cfg.extent_x)
            y = rng.uniform(0.0, cfg.extent_y)
            if np.hypot(x - bs[0], y - bs[1]) < min_bs_dist:
                continue
            if boxes.shape[0] and np.any(
                (x > boxes[:, 0, 0] - margin)
                & (x < boxes[:, 1, 0] + margin)
                & (y > boxes[:, 0, 1] - margin)
                & (y < boxes[:, 1, 1] + margin)
            ):
                continue
            break
        heading = rng.uniform(-np.pi, np.pi)
        v = rng.uniform(*speed)
        mask = frozenset() if sensor_masks is None else sensor_masks[k]
        out.append(
            VehicleState(k, (float(x), float(y), height), (v * np.cos(heading), v * np.sin(heading)), heading, mask)
        )
    return out


# ---------------------------------------------------------------------------
# radio channel


def steering_vector(theta, phi, n_v: int, n_h: int) -> np.ndarray:
    """Half-wavelength UPA response, vertical index major."""
    p = np.arange(n_v)[:, None]
    q = np.arange(n_h)[None, :]
    phase = np.pi * (q * np.sin(phi) * np.sin(theta) + p * np.cos(phi))
    return np.exp(1j * phase).reshape(-1)


_FACES = ((0, 0, -1.0), (0, 1, 1.0), (1, 0, -1.0), (1, 1, 1.0))  # (axis, min/max, outward sign)


def synthesize_channel(scene: Scene, vehicle: VehicleState, phase_seed: int = 0) -> ChannelVector:
    cfg = scene.config
    bs = scene.bs_position
    ue = np.asarray(vehicle.position, dtype=float)
    boxes = scene.boxes
    n_b = boxes.shape[0]
    # one phase slot per possible path so visibility changes never reshuffle the draws
    phases = np.random.default_rng([cfg.rng_seed, vehicle.id, phase_seed]).uniform(0.0, 2 * np.pi, size=1 + 4 * n_b)

    paths: list[Path] = []
    if not segment_blocked(bs, ue, boxes).any():
        theta, phi = departure_angles(ue, bs)
        d = float(np.linalg.norm(ue - bs))
        paths.append(Path(theta, phi, cfg.path_gain_ref / d * np.exp(1j * phases[0]), True))

    for b in range(n_b):
        for f, (axis, side, sign) in enumerate(_FACES):
            c = boxes[b, side, axis]
            # both endpoints on the outward side of the face plane
            if sign * (bs[axis] - c) <= 0 or sign * (ue[axis] - c) <= 0:
                continue
            img = bs.copy()
            img[axis] = 2 * c - bs[axis]
            t = (c - img[axis]) / (ue[axis] - img[axis])
            r = img + t * (ue - img)
            other = 1 - axis
            if not (boxes[b, 0, other] <= r[other] <= boxes[b, 1, other] and 0.0 <= r[2] <= boxes[b, 1, 2]):
                continue
            others = np.delete(boxes, b, axis=0)
            if segment_blocked(bs, r, others).any() or segment_blocked(r, ue, others).any():
                continue
            d1 = float(np.linalg.norm(r - bs))
            d2 = float(np.linalg.norm(ue - r))
            theta, phi = departure_angles(r, bs)
            g = cfg.reflection_coeff * cfg.path_gain_ref / (d1 + d2) * np.exp(1j * phases[1 + 4 * b + f])
            paths.append(Path(theta, phi, g, False, b))

    h = np.zeros(cfg.n_antennas, dtype=complex)
    for p in paths:
        h += p.gain * steering_vector(p.azimuth, p.elevation, cfg.n_v, cfg.n_h)
    return ChannelVector(h, tuple(paths))


# ---------------------------------------------------------------------------
# GPS


def in_gps_shadow(scene: Scene, x: float, y: float) -> bool:
    cfg = scene.config
    for b in scene.buildings:
        if b.height <= cfg.gps_shadow_height:
            continue
        dx = max(b.min_corner[0] - x, 0.0, x - b.max_corner[0])
        dy = max(b.min_corner[1] - y, 0.0, y - b.max_corner[1])
        if np.hypot(dx, dy) <= cfg.gps_shadow_distance:
            return True
    return False


def sample_gps(vehicle: VehicleState, scene: Scene, noise_std: float, rng) -> tuple[np.ndarray, bool]:
    if noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    p = np.asarray(vehicle.position, dtype=float)
    noisy = p.copy()
    noisy[:2] += rng.normal(0.0, noise_std, size=2) if noise_std > 0 else 0.0
    return noisy, not in_gps_shadow(scene, p[0], p[1])


# ---------------------------------------------------------------------------
# cameras


def _camera_axes(yaw):
    fwd = np.array([np.cos(yaw), np.sin(yaw), 0.0])
    right = np.array([np.sin(yaw), -np.cos(yaw), 0.0])
    down = np.array([0.0, 0.0, -1.0])
    return np.stack([right, down, fwd])


_EDGE_I = np.array([i for i, _ in BOX_EDGES])
_EDGE_J = np.array([j for _, j in BOX_EDGES])


def _project_boxes(corners_cam, intr: CameraIntrinsics, near=0.1):
    """Pixel bboxes of convex boxes (B, 8, 3) in camera coords, clipped at the near plane.

    Returns (B, 4) [u0, v0, u1, v1] and a (B,) flag for boxes with any part in front.
    """
    z = corners_cam[..., 2]
    front = z > near
    zi, zj = z[:, _EDGE_I], z[:, _EDGE_J]
    crossing = front[:, _EDGE_I] != front[:, _EDGE_J]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(crossing, (near - zi) / (zj - zi), 0.0)
    ci, cj = corners_cam[:, _EDGE_I], corners_cam[:, _EDGE_J]
    cuts = ci + t[..., None] * (cj - ci)
    pts = np.concatenate([corners_cam, cuts], axis=1)
    valid = np.concatenate([front, crossing], axis=1)
    zz = np.where(valid, pts[..., 2], 1.0)
    f = intr.focal
    u = f * pts[..., 0] / zz + intr.width / 2
    v = f * pts[..., 1] / zz + intr.height / 2
    bb = np.stack(
        [
            np.where(valid, u, np.inf).min(axis=1),
            np.where(valid, v, np.inf).min(axis=1),
            np.where(valid, u, -np.inf).max(axis=1),
            np.where(valid, v, -np.inf).max(axis=1),
        ],
        axis=1,
    )
    return bb, valid.any(axis=1)


def sample_detections(
    vehicle: VehicleState, scene: Scene, intrinsics: CameraIntrinsics = CameraIntrinsics(), max_range: float = 120.0
) -> dict[str, list[Detection]]:
    if abs(np.linalg.det(intrinsics.matrix)) < 1e-12:
        raise ValueError("camera intrinsics are not invertible")
    cam = np.asarray(vehicle.position, dtype=float)
    out: dict[str, list[Detection]] = {face: [] for face in CAMERA_FACES}
    boxes = scene.boxes
    if boxes.shape[0] == 0:
        return out
    dx = np.maximum.reduce([boxes[:, 0, 0] - cam[0], np.zeros(len(boxes)), cam[0] - boxes[:, 1, 0]])
    dy = np.maximum.reduce([boxes[:, 0, 1] - cam[1], np.zeros(len(boxes)), cam[1] - boxes[:, 1, 1]])
    near_idx = np.flatnonzero(np.hypot(dx, dy) <= max_range)
    if near_idx.size == 0:
        return out
    sel = boxes[near_idx]
    corners = np.stack([box_corners(b[0], b[1]) for b in sel])
    centres = np.stack([(sel[:, 0, 0] + sel[:, 1, 0]) / 2, (sel[:, 0, 1] + sel[:, 1, 1]) / 2, sel[:, 1, 2] / 2], axis=1)
    # sight line to each building centre, blocked by any other building
    t = ray_box_hits(np.broadcast_to(cam, centres.shape), centres - cam, boxes, t_min=1e-9, t_max=1.0 - 1e-9)
    t[np.arange(len(near_idx)), near_idx] = np.inf
    occluded = np.isfinite(t).any(axis=1)
    W, H = intrinsics.width, intrinsics.height
    for face in CAMERA_FACES:
        R = _camera_axes(vehicle.orientation + CAMERA_YAW[face])
        bb, seen = _project_boxes((corners - cam) @ R.T, intrinsics)
        for i in np.flatnonzero(seen):
            u0, v0, u1, v1 = bb[i]
            cu0, cv0, cu1, cv1 = max(u0, 0.0), max(v0, 0.0), min(u1, W), min(v1, H)
            if cu1 <= cu0 or cv1 <= cv0:
                continue
            frac = (cu1 - cu0) * (cv1 - cv0) / ((u1 - u0) * (v1 - v0))
            s = min(1.0, frac) * (0.5 if occluded[i] else 1.0)
            out[face].append(
                Detection((cu0 + cu1) / (2 * W), (cv0 + cv1) / (2 * H), (cu1 - cu0) / W, (cv1 - cv0) / H, float(s))
            )
    return out


# ---------------------------------------------------------------------------
# LiDAR


def lidar_directions(cfg: RayConfig) -> np.ndarray:
    """Unit ray directions in the vehicle frame (x forward, y left, z up)."""
    az = np.arange(cfg.n_azimuth) * (2 * np.pi / cfg.n_azimuth)
    if cfg.n_elevation == 1:
        el = np.array([np.deg2rad(cfg.elevation_min_deg)])
    else:
        el = np.deg2rad(np.linspace(cfg.elevation_min_deg, cfg.elevation_max_deg, cfg.n_elevation))
    A, E = np.meshgrid(az, el, indexing="ij")
    return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)


def sample_lidar(vehicle: VehicleState, scene: Scene, ray_config: RayConfig = RayConfig()) -> PointCloud:
    origin = np.asarray(vehicle.position, dtype=float)
    local = lidar_directions(ray_config)
    c, s = np.cos(vehicle.orientation), np.sin(vehicle.orientation)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    world = local @ rot.T
    t = ray_box_hits(np.broadcast_to(origin, world.shape), world, scene.boxes, t_min=1e-9, t_max=ray_config.max_range)
    t_hit = t.min(axis=1) if t.shape[1] else np.full(len(world), np.inf)
    with np.errstate(divide="ignore"):
        t_ground = np.where(world[:, 2] < 0, -origin[2] / world[:, 2], np.inf)
    t_ground = np.where((t_ground > 1e-9) & (t_ground <= ray_config.max_range), t_ground, np.inf)
    t_hit = np.minimum(t_hit, t_ground)
    keep = np.isfinite(t_hit)
    return PointCloud(local[keep] * t_hit[keep, None])


# ---------------------------------------------------------------------------
# serialization


def scene_to_dict(scene: Scene) -> dict:
    cfg = asdict(scene.config)
    return {
        "format": SCENE_FORMAT,
        "version": SCENE_VERSION,
        "seed": scene.config.rng_seed,
        "bs_position": list(scene.config.bs_position),
        "config": cfg,
        "buildings": [{"min": list(b.min_corner), "max": list(b.max_corner)} for b in scene.buildings],
    }


def scene_from_dict(d: dict) -> Scene:
    if d.get("format") != SCENE_FORMAT:
        raise ValueError("not a scene file")
    if d.get("version") != SCENE_VERSION:
        raise ValueError(f"unsupported scene version {d.get('version')}")
    raw = dict(d["config"])
    for key, val in raw.items():
        if isinstance(val, list):
            raw[key] = tuple(val)
    raw["rng_seed"] = d["seed"]
    raw["bs_position"] = tuple(d["bs_position"])
    cfg = SceneConfig(**raw)
    buildings = tuple(Building(tuple(b["min"]), tuple(b["max"])) for b in d["buildings"])
    return Scene(cfg, buildings)


def save_scene(scene: Scene, path) -> None:
    pathlib.Path(path).write_text(json.dumps(scene_to_dict(scene), indent=2, sort_keys=True) + "\n")


def load_scene(path) -> Scene:
    return scene_from_dict(json.loads(pathlib.Path(path).read_text()))

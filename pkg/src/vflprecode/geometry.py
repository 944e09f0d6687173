"""Small vector-geometry helpers shared by the scene simulator and preprocessing."""

from __future__ import annotations

import numpy as np


class DegenerateGeometryError(ValueError):
    pass


def departure_angles(target, origin) -> tuple[float, float]:
    """Azimuth and elevation of ``target`` seen from ``origin``.

    Azimuth is the quadrant-aware angle of the x-y offset. Elevation is measured
    from the downward vertical: ``arccos((z_origin - z_target) / distance)``.
    """
    target = np.asarray(target, dtype=float)
    origin = np.asarray(origin, dtype=float)
    d = target - origin
    dist = float(np.linalg.norm(d))
    if dist == 0.0:
        raise DegenerateGeometryError("degenerate geometry: coincident positions")
    theta = float(np.arctan2(d[1], d[0]))
    cos_phi = np.clip((origin[2] - target[2]) / dist, -1.0, 1.0)
    return theta, float(np.arccos(cos_phi))


def wrap_angle(a):
    """Wrap to [-pi, pi)."""
    return (np.asarray(a, dtype=float) + np.pi) % (2 * np.pi) - np.pi


def ray_box_hits(origins, dirs, boxes, t_min=0.0, t_max=np.inf):
    """Slab test for rays against axis-aligned boxes.

    origins, dirs: (R, 3); boxes: (B, 2, 3) as [min_corner, max_corner].
    Returns entry distances (R, B) along ``dirs`` (in units of |dir|), ``inf``
    where the ray misses or the hit lies outside [t_min, t_max].
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=float))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=float))
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 2, 3)
    if boxes.shape[0] == 0:
        return np.full((origins.shape[0], 0), np.inf)
    o = origins[:, None, :]
    d = dirs[:, None, :]
    lo = boxes[None, :, 0, :]
    hi = boxes[None, :, 1, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (lo - o) * inv
        t2 = (hi - o) * inv
    tn = np.minimum(t1, t2)
    tf = np.maximum(t1, t2)
    # axis-parallel rays: inside the slab -> unconstrained, outside -> miss
    parallel = d == 0.0
    inside = (o >= lo) & (o <= hi)
    tn = np.where(parallel, np.where(inside, -np.inf, np.inf), tn)
    tf = np.where(parallel, np.where(inside, np.inf, -np.inf), tf)
    t_enter = tn.max(axis=2)
    t_exit = tf.min(axis=2)
    hit = (t_enter <= t_exit) & (t_exit >= t_min)
    t = np.maximum(t_enter, t_min)
    hit &= t <= t_max
    return np.where(hit, t, np.inf)


def segment_blocked(p0, p1, boxes, eps=1e-9) -> np.ndarray:
    """Per-box flag: does the open segment p0->p1 pass through the box?"""
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    t = ray_box_hits(p0[None], (p1 - p0)[None], boxes, t_min=eps, t_max=1.0 - eps)
    return np.isfinite(t[0])


def box_corners(lo, hi) -> np.ndarray:
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    return np.array(
        [[(hi if i & 1 else lo)[0], (hi if i & 2 else lo)[1], (hi if i & 4 else lo)[2]] for i in range(8)]
    )


# corner index pairs differing in exactly one bit
BOX_EDGES = tuple((i, i | b) for i in range(8) for b in (1, 2, 4) if not i & b)

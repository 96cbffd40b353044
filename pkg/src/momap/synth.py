"""Synthetic ground truth: rigid bodies in front of a static background plane.

Every generated trajectory has a closed form, which is what the metric,
infill and compression tests lean on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import DEFAULT_TIME_STEP, Camera, MoMap, SegMap, ValidationError


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for a unit ``axis`` and ``angle`` in radians."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    K = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


@dataclass(frozen=True)
class LinearMotion:
    velocity: tuple[float, float, float]  # m/s

    def displace(self, points: np.ndarray, times: np.ndarray) -> np.ndarray:
        v = np.asarray(self.velocity, dtype=np.float64)
        return points[:, None, :] + times[None, :, None] * v


@dataclass(frozen=True)
class ScrewMotion:
    axis: tuple[float, float, float]
    angular_velocity: float  # rad/s
    pitch: float = 0.0  # m/rad, translation along the axis per radian
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)  # a point on the axis

    def displace(self, points: np.ndarray, times: np.ndarray) -> np.ndarray:
        axis = np.asarray(self.axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        c = np.asarray(self.center, dtype=np.float64)
        out = np.empty((points.shape[0], times.size, 3))
        for k, t in enumerate(times):
            theta = self.angular_velocity * t
            R = rotation_about_axis(axis, theta)
            out[:, k] = (points - c) @ R.T + c + self.pitch * theta * axis
        return out


@dataclass(frozen=True)
class WaypointMotion:
    """Piecewise-linear translation through ``(time_s, offset)`` waypoints.

    The offset at t=0 is subtracted so the body stays anchored at its
    back-projected position; times outside the waypoint range clamp.
    """

    times: tuple[float, ...]
    offsets: tuple[tuple[float, float, float], ...]

    def offset_at(self, times: np.ndarray) -> np.ndarray:
        wt = np.asarray(self.times, dtype=np.float64)
        wo = np.asarray(self.offsets, dtype=np.float64)
        off = np.stack([np.interp(times, wt, wo[:, a]) for a in range(3)], axis=-1)
        return off - np.array([np.interp(0.0, wt, wo[:, a]) for a in range(3)])

    def displace(self, points: np.ndarray, times: np.ndarray) -> np.ndarray:
        return points[:, None, :] + self.offset_at(times)[None]


Motion = LinearMotion | ScrewMotion | WaypointMotion


@dataclass(frozen=True)
class RigidBodySpec:
    """A rigid body occupying a pixel region at constant depth at t=0.

    ``region`` is either ``("rect", (row0, col0, row1, col1))`` with
    half-open bounds, or ``("pixels", ((row, col), ...))``.
    """

    region: tuple
    depth: float
    motion: Motion = LinearMotion((0.0, 0.0, 0.0))
    color: tuple[float, float, float] | None = None

    def mask(self, height: int, width: int) -> np.ndarray:
        kind, data = self.region
        m = np.zeros((height, width), dtype=bool)
        if kind == "rect":
            r0, c0, r1, c1 = (int(x) for x in data)
            m[max(r0, 0) : min(r1, height), max(c0, 0) : min(c1, width)] = True
        elif kind == "pixels":
            for r, c in data:
                if not (0 <= r < height and 0 <= c < width):
                    raise ValidationError(f"body pixel {(r, c)} outside {height}x{width} grid")
                m[r, c] = True
        else:
            raise ValidationError(f"unknown region kind {kind!r}")
        return m

    def is_static(self) -> bool:
        mo = self.motion
        if isinstance(mo, LinearMotion):
            return not any(mo.velocity)
        if isinstance(mo, ScrewMotion):
            return mo.angular_velocity == 0
        return bool(np.all(np.asarray(mo.offsets) == np.asarray(mo.offsets)[0]))


@dataclass(frozen=True)
class SceneSpec:
    height: int
    width: int
    frames: int
    camera: Camera
    bodies: Sequence[RigidBodySpec] = ()
    background_depth: float = 5.0
    time_step: float = DEFAULT_TIME_STEP
    seed: int = 0
    colors: bool = True


def _check(spec: SceneSpec) -> list[np.ndarray]:
    if min(spec.height, spec.width) < 1 or spec.frames < 2:
        raise ValidationError(f"scene needs H, W >= 1 and T >= 2, got {(spec.height, spec.width, spec.frames)}")
    if spec.camera.frames != spec.frames:
        raise ValidationError(f"camera has {spec.camera.frames} frames, scene has {spec.frames}")
    if not (np.isfinite(spec.background_depth) and spec.background_depth > 0):
        raise ValidationError("background depth must be positive")
    masks = []
    taken = np.zeros((spec.height, spec.width), dtype=bool)
    for k, body in enumerate(spec.bodies):
        m = body.mask(spec.height, spec.width)
        if not m.any():
            raise ValidationError(f"body {k}: empty pixel region")
        if (m & taken).any():
            raise ValidationError(f"body {k}: region overlaps an earlier body")
        if not (0 < body.depth < spec.background_depth):
            raise ValidationError(f"body {k}: depth must lie in (0, background_depth)")
        taken |= m
        masks.append(m)
    return masks


def generate(spec: SceneSpec) -> tuple[MoMap, SegMap, Camera]:
    """Render the scene's ground-truth MoMap, segmentation and camera."""
    masks = _check(spec)
    H, W, T = spec.height, spec.width, spec.frames
    cam = spec.camera
    rows, cols = np.mgrid[0:H, 0:W]
    depth = np.full((H, W), float(spec.background_depth))
    ids = np.zeros((H, W), dtype=np.uint32)
    for k, (body, m) in enumerate(zip(spec.bodies, masks), start=1):
        depth[m] = body.depth
        ids[m] = k
    anchor = cam.backproject(cols, rows, depth)
    positions = np.repeat(anchor[:, :, None, :], T, axis=2)
    times = np.arange(T) * spec.time_step
    for body, m in zip(spec.bodies, masks):
        traj = body.motion.displace(anchor[m], times)
        traj[:, 0] = anchor[m]  # t=0 is exact by definition
        positions[m] = traj
    if not np.all(np.isfinite(positions)):
        raise ValidationError("motion produced non-finite positions")

    colors = None
    if spec.colors:
        rng = np.random.default_rng(spec.seed)
        colors = np.clip(0.35 + 0.1 * rng.standard_normal((H, W, 3)), 0.0, 1.0)
        for body, m in zip(spec.bodies, masks):
            base = np.asarray(body.color) if body.color is not None else rng.uniform(0.2, 1.0, 3)
            colors[m] = np.clip(base + 0.05 * rng.standard_normal((int(m.sum()), 3)), 0.0, 1.0)
    momap = MoMap(positions, np.ones((H, W, T), dtype=bool), colors, time_step=spec.time_step)
    return momap, SegMap(ids), cam


def moving_body_mask(spec: SceneSpec) -> np.ndarray:
    """Union of body regions whose motion is non-trivial."""
    out = np.zeros((spec.height, spec.width), dtype=bool)
    for body in spec.bodies:
        if not body.is_static():
            out |= body.mask(spec.height, spec.width)
    return out


def occlude(m: MoMap, intervals: dict) -> MoMap:
    """Hide inclusive frame intervals per pixel.

    ``intervals`` maps ``(row, col)`` to a list of ``(t_start, t_end)``.
    Hidden positions are zeroed; the reference frame may not be hidden.
    """
    valid = m.valid.copy()
    pos = m.positions.copy()
    for (r, c), spans in intervals.items():
        for t0, t1 in spans:
            if t0 <= 0:
                raise ValidationError(f"interval {(t0, t1)} at pixel {(r, c)} covers the reference frame")
            if t1 < t0 or t1 >= m.frames:
                raise ValidationError(f"interval {(t0, t1)} at pixel {(r, c)} outside 1..{m.frames - 1}")
            valid[r, c, t0 : t1 + 1] = False
            pos[r, c, t0 : t1 + 1] = 0.0
    return m.replace(positions=pos, valid=valid)


def _runs(hidden: np.ndarray) -> list[tuple[int, int]]:
    spans = []
    start = None
    for t, h in enumerate(hidden):
        if h and start is None:
            start = t
        elif not h and start is not None:
            spans.append((start, t - 1))
            start = None
    if start is not None:
        spans.append((start, len(hidden) - 1))
    return spans


def random_intervals(m: MoMap, fraction: float, seed: int, pixels: np.ndarray | None = None) -> dict:
    """Hide each non-reference entry of the selected pixels with probability ``fraction``.

    Returns the interval dict accepted by :func:`occlude`; ``pixels`` is an
    optional (H, W) mask restricting which pixels are touched.
    """
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    hidden = rng.random(m.shape) < fraction
    hidden[:, :, 0] = False
    hidden &= m.covered[:, :, None]
    if pixels is not None:
        hidden &= np.asarray(pixels, dtype=bool)[:, :, None]
    out = {}
    for r, c in zip(*np.nonzero(hidden.any(axis=2))):
        out[(int(r), int(c))] = _runs(hidden[r, c])
    return out


def random_scene(
    seed: int,
    height: int = 64,
    width: int = 64,
    frames: int = 50,
    n_bodies: int = 3,
    speed: float = 0.3,
    time_step: float = DEFAULT_TIME_STEP,
) -> SceneSpec:
    """A random scene of moving rectangles, reproducible from ``seed``.

    Bodies are laid out in disjoint vertical strips; each gets one of the
    three motion kinds.  ``speed`` bounds linear speeds in m/s.
    """
    rng = np.random.default_rng(seed)
    f = 1.2 * max(height, width)
    cam = Camera.static(f, f, (width - 1) / 2, (height - 1) / 2, frames)
    strip = width // n_bodies
    if strip < 2 or height < 4:
        raise ValidationError("grid too small for the requested number of bodies")
    bodies = []
    for k in range(n_bodies):
        c0 = k * strip + int(rng.integers(0, max(1, strip // 4)))
        c1 = min((k + 1) * strip, c0 + max(2, int(rng.integers(strip // 2, strip + 1))))
        r0 = int(rng.integers(0, height // 3))
        r1 = min(height, r0 + max(2, int(rng.integers(height // 3, height - r0 + 1))))
        depth = float(rng.uniform(1.0, 3.0))
        kind = k % 3
        if kind == 0:
            v = rng.uniform(-speed, speed, 3)
            v[int(rng.integers(0, 3))] = speed * rng.choice([-1.0, 1.0])
            motion = LinearMotion(tuple(float(x) for x in v))
        elif kind == 1:
            axis = rng.standard_normal(3)
            center = cam.backproject((c0 + c1 - 1) / 2, (r0 + r1 - 1) / 2, depth)
            motion = ScrewMotion(
                tuple(float(x) for x in axis / np.linalg.norm(axis)),
                float(rng.uniform(0.3, 1.0) * rng.choice([-1.0, 1.0])),
                float(rng.uniform(0.0, 0.1)),
                tuple(float(x) for x in center),
            )
        else:
            n_way = 4
            times = np.sort(rng.uniform(0.0, frames * time_step, n_way))
            times[0] = 0.0
            offsets = np.cumsum(rng.uniform(-1.0, 1.0, (n_way, 3)) * speed * 2.0, axis=0)
            motion = WaypointMotion(tuple(float(t) for t in times), tuple(tuple(float(x) for x in o) for o in offsets))
        bodies.append(RigidBodySpec(("rect", (r0, c0, r1, c1)), depth, motion))
    return SceneSpec(height, width, frames, cam, tuple(bodies), background_depth=5.0, time_step=time_step, seed=seed)


# --------------------------------------------------------------------------
# JSON scene documents


def _motion_from_json(d: dict) -> Motion:
    kind = d.get("type")
    if kind == "linear":
        return LinearMotion(tuple(float(x) for x in d["velocity"]))
    if kind == "screw":
        return ScrewMotion(
            tuple(float(x) for x in d["axis"]),
            float(d["angular_velocity"]),
            float(d.get("pitch", 0.0)),
            tuple(float(x) for x in d.get("center", (0.0, 0.0, 0.0))),
        )
    if kind == "waypoints":
        pts = d["waypoints"]
        if not pts:
            raise ValidationError("waypoint motion needs at least one waypoint")
        times = [float(p["t"]) for p in pts]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValidationError("waypoint times must be strictly increasing")
        return WaypointMotion(tuple(times), tuple(tuple(float(x) for x in p["offset"]) for p in pts))
    raise ValidationError(f"unknown motion type {kind!r}")


def _motion_to_json(mo: Motion) -> dict:
    if isinstance(mo, LinearMotion):
        return {"type": "linear", "velocity": list(mo.velocity)}
    if isinstance(mo, ScrewMotion):
        return {
            "type": "screw",
            "axis": list(mo.axis),
            "angular_velocity": mo.angular_velocity,
            "pitch": mo.pitch,
            "center": list(mo.center),
        }
    return {"type": "waypoints", "waypoints": [{"t": t, "offset": list(o)} for t, o in zip(mo.times, mo.offsets)]}


def scene_from_json(doc: dict | str) -> SceneSpec:
    """Build a SceneSpec from its JSON form (see README for the schema)."""
    if isinstance(doc, str):
        doc = json.loads(doc)
    try:
        grid = doc["grid"]
        H, W, T = int(grid["height"]), int(grid["width"]), int(grid["frames"])
        c = doc["camera"]
        if "rotations" in c:
            cam = Camera(c["fx"], c["fy"], c["cx"], c["cy"], c["rotations"], c["translations"])
        else:
            cam = Camera.static(c["fx"], c["fy"], c["cx"], c["cy"], T)
        bodies = []
        for b in doc.get("bodies", []):
            if "rect" in b:
                region = ("rect", tuple(int(x) for x in b["rect"]))
            else:
                region = ("pixels", tuple((int(r), int(col)) for r, col in b["pixels"]))
            color = tuple(float(x) for x in b["color"]) if "color" in b else None
            motion = _motion_from_json(b.get("motion", {"type": "linear", "velocity": [0, 0, 0]}))
            bodies.append(RigidBodySpec(region, float(b["depth"]), motion, color))
        return SceneSpec(
            H,
            W,
            T,
            cam,
            tuple(bodies),
            background_depth=float(doc.get("background_depth", 5.0)),
            time_step=float(doc.get("time_step", DEFAULT_TIME_STEP)),
            seed=int(doc.get("seed", 0)),
            colors=bool(doc.get("colors", True)),
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed scene spec: {exc!r}") from exc


def scene_to_json(spec: SceneSpec) -> dict:
    cam = spec.camera
    bodies = []
    for b in spec.bodies:
        kind, data = b.region
        entry = {"rect": list(data)} if kind == "rect" else {"pixels": [list(p) for p in data]}
        entry["depth"] = b.depth
        entry["motion"] = _motion_to_json(b.motion)
        if b.color is not None:
            entry["color"] = list(b.color)
        bodies.append(entry)
    return {
        "grid": {"height": spec.height, "width": spec.width, "frames": spec.frames},
        "camera": {
            "fx": cam.fx,
            "fy": cam.fy,
            "cx": cam.cx,
            "cy": cam.cy,
            "rotations": cam.rotations.tolist(),
            "translations": cam.translations.tolist(),
        },
        "bodies": bodies,
        "background_depth": spec.background_depth,
        "time_step": spec.time_step,
        "seed": spec.seed,
        "colors": spec.colors,
    }

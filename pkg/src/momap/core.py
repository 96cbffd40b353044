"""Domain types and the ``.momap`` binary container.

A MoMap stores, for every pixel of a reference image, that point's 3D
trajectory over ``T`` frames expressed in the reference camera frame.
Index 0 of the time axis is the reference time.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_TIME_STEP = 1.0 / 3.0
ROTATION_TOL = 1e-9
# rotations stored as f32 lose orthonormality at the 1e-7 level
FILE_ROTATION_TOL = 1e-5

MAGIC = b"MOMP"
VERSION = 1
HEADER = struct.Struct("<4s7I")  # magic, version, H, W, T, flags, n_sections, reserved
SECTION = struct.Struct("<IQ")

FLAG_SEG = 1
FLAG_CAM = 2
FLAG_COLOR = 4

TAG_VALID = 1
TAG_POS = 2
TAG_SEG = 3
TAG_CAM = 4
TAG_COLOR = 5
TAG_NAMES = {TAG_VALID: "VALID", TAG_POS: "POS", TAG_SEG: "SEG", TAG_CAM: "CAM", TAG_COLOR: "COLOR"}


class MomapError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(MomapError, ValueError):
    """An object violates its structural invariants."""


class FormatError(MomapError):
    """A binary file could not be decoded."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class SectionLengthError(FormatError):
    pass


class NonFiniteError(FormatError):
    pass


def _frozen(a, dtype) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def rotation_error(R: np.ndarray) -> tuple[float, float]:
    """Return (max |RᵀR - I|, |det R - 1|)."""
    R = np.asarray(R, dtype=np.float64)
    return float(np.abs(R.T @ R - np.eye(3)).max()), float(abs(np.linalg.det(R) - 1.0))


def _check_rotation(R: np.ndarray, tol: float, what: str) -> None:
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise ValidationError(f"{what}: rotation must be a finite 3x3 matrix")
    ortho, det = rotation_error(R)
    if ortho > tol or det > tol:
        raise ValidationError(
            f"{what}: rotation not orthonormal (|RtR-I|={ortho:.3g}, |det-1|={det:.3g}, tol={tol:g})"
        )


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray
    tol: float = field(default=ROTATION_TOL, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation, np.float64))
        object.__setattr__(self, "translation", _frozen(self.translation, np.float64).reshape(3))
        _check_rotation(self.rotation, self.tol, "RigidTransform")

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    def compose(self, first: RigidTransform) -> RigidTransform:
        """``self ∘ first``: apply ``first`` then ``self``."""
        return RigidTransform(
            self.rotation @ first.rotation,
            self.rotation @ first.translation + self.translation,
            tol=max(self.tol, first.tol) * 4,
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


@dataclass(frozen=True, eq=False)
class MoMap:
    """Dense per-pixel 3D trajectories.

    ``positions`` has shape (H, W, T, 3) in meters, ``valid`` (H, W, T).
    Arrays are copied and made read-only on construction.
    """

    positions: np.ndarray
    valid: np.ndarray
    reference_colors: np.ndarray | None = None
    time_step: float = DEFAULT_TIME_STEP

    def __post_init__(self):
        pos = _frozen(self.positions, np.float64)
        valid = _frozen(self.valid, bool)
        if pos.ndim != 4 or pos.shape[-1] != 3:
            raise ValidationError(f"positions must be (H, W, T, 3), got {pos.shape}")
        if valid.shape != pos.shape[:3]:
            raise ValidationError(f"valid mask shape {valid.shape} != {pos.shape[:3]}")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "valid", valid)
        if self.reference_colors is not None:
            colors = _frozen(self.reference_colors, np.float64)
            if colors.shape != pos.shape[:2] + (3,):
                raise ValidationError(f"reference_colors shape {colors.shape} != {pos.shape[:2] + (3,)}")
            object.__setattr__(self, "reference_colors", colors)
        object.__setattr__(self, "time_step", float(self.time_step))

    @property
    def height(self) -> int:
        return self.positions.shape[0]

    @property
    def width(self) -> int:
        return self.positions.shape[1]

    @property
    def frames(self) -> int:
        return self.positions.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.positions.shape[:3]

    @property
    def covered(self) -> np.ndarray:
        """Pixels that carry a trajectory (anchored at the reference frame)."""
        return self.valid[:, :, 0]

    def replace(self, **changes) -> MoMap:
        kw = dict(
            positions=self.positions,
            valid=self.valid,
            reference_colors=self.reference_colors,
            time_step=self.time_step,
        )
        kw.update(changes)
        return MoMap(**kw)

    def __eq__(self, other):
        if not isinstance(other, MoMap):
            return NotImplemented
        if (self.reference_colors is None) != (other.reference_colors is None):
            return False
        return (
            self.time_step == other.time_step
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.valid, other.valid)
            and (self.reference_colors is None or np.array_equal(self.reference_colors, other.reference_colors))
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class SegMap:
    """Per-pixel patch identifiers; id 0 is the background."""

    ids: np.ndarray
    background_id: int = 0

    def __post_init__(self):
        ids = np.asarray(self.ids)
        if ids.ndim != 2:
            raise ValidationError(f"SegMap ids must be 2D, got shape {ids.shape}")
        if ids.size and (not np.issubdtype(ids.dtype, np.integer) and not np.all(ids == np.round(ids))):
            raise ValidationError("SegMap ids must be integers")
        if ids.size and ids.min() < 0:
            raise ValidationError("SegMap ids must be non-negative")
        object.__setattr__(self, "ids", _frozen(ids, np.uint32))

    @property
    def height(self) -> int:
        return self.ids.shape[0]

    @property
    def width(self) -> int:
        return self.ids.shape[1]

    def patch_ids(self) -> np.ndarray:
        """Sorted non-background ids present in the map."""
        ids = np.unique(self.ids)
        return ids[ids != self.background_id]

    def __eq__(self, other):
        if not isinstance(other, SegMap):
            return NotImplemented
        return self.background_id == other.background_id and np.array_equal(self.ids, other.ids)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole intrinsics plus per-frame world-to-camera extrinsics.

    ``rotations`` is (T, 3, 3), ``translations`` (T, 3).  The world frame is
    the reference camera frame of the MoMap.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotations: np.ndarray
    translations: np.ndarray
    rotation_tol: float = field(default=ROTATION_TOL, repr=False)

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not all(np.isfinite([self.cx, self.cy, self.fx, self.fy])):
            raise ValidationError("intrinsics must be finite")
        R = _frozen(self.rotations, np.float64)
        t = _frozen(self.translations, np.float64)
        if R.ndim != 3 or R.shape[1:] != (3, 3) or t.shape != (R.shape[0], 3):
            raise ValidationError(f"extrinsics must be (T,3,3) and (T,3), got {R.shape} and {t.shape}")
        if not np.all(np.isfinite(t)):
            raise ValidationError("translations must be finite")
        for k in range(R.shape[0]):
            _check_rotation(R[k], self.rotation_tol, f"Camera extrinsics[{k}]")
        object.__setattr__(self, "rotations", R)
        object.__setattr__(self, "translations", t)

    @classmethod
    def static(cls, fx: float, fy: float, cx: float, cy: float, frames: int) -> Camera:
        """Camera fixed at the reference pose for every frame."""
        return cls(fx, fy, cx, cy, np.tile(np.eye(3), (frames, 1, 1)), np.zeros((frames, 3)))

    @property
    def frames(self) -> int:
        return self.rotations.shape[0]

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def extrinsic(self, t: int) -> RigidTransform:
        return RigidTransform(self.rotations[t], self.translations[t], tol=self.rotation_tol)

    def project(self, points_cam: np.ndarray) -> np.ndarray:
        """Pinhole projection of camera-frame points to (u, v) pixel coordinates."""
        p = np.asarray(points_cam, dtype=np.float64)
        z = p[..., 2]
        return np.stack([self.fx * p[..., 0] / z + self.cx, self.fy * p[..., 1] / z + self.cy], axis=-1)

    def backproject(self, u, v, depth) -> np.ndarray:
        """Camera-frame point at pixel (u, v) (column, row) and the given depth."""
        u, v, depth = np.broadcast_arrays(
            np.asarray(u, np.float64), np.asarray(v, np.float64), np.asarray(depth, np.float64)
        )
        return np.stack([(u - self.cx) * depth / self.fx, (v - self.cy) * depth / self.fy, depth], axis=-1)

    def __eq__(self, other):
        if not isinstance(other, Camera):
            return NotImplemented
        return (
            (self.fx, self.fy, self.cx, self.cy) == (other.fx, other.fy, other.cx, other.cy)
            and np.array_equal(self.rotations, other.rotations)
            and np.array_equal(self.translations, other.translations)
        )

    __hash__ = None


def validate_momap(m: MoMap) -> list[str]:
    """List every violated MoMap invariant; an empty list means well-formed."""
    problems = []
    H, W, T = m.shape
    if min(H, W, T) < 1:
        problems.append(f"dimensions: H, W, T must be >= 1, got {(H, W, T)}")
        return problems
    bad = m.valid & ~np.all(np.isfinite(m.positions), axis=-1)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        problems.append(f"finite: non-finite position at valid entry {idx} ({int(bad.sum())} total)")
    orphan = ~m.valid[:, :, 0] & m.valid.any(axis=2)
    if orphan.any():
        idx = tuple(int(i) for i in np.argwhere(orphan)[0])
        problems.append(
            f"anchor: pixel {idx} has valid entries but is not valid at the reference frame ({int(orphan.sum())} total)"
        )
    if m.reference_colors is not None and not np.all(np.isfinite(m.reference_colors)):
        idx = tuple(int(i) for i in np.argwhere(~np.isfinite(m.reference_colors))[0])
        problems.append(f"colors: non-finite reference color at {idx}")
    if not (np.isfinite(m.time_step) and m.time_step > 0):
        problems.append(f"time_step: must be positive and finite, got {m.time_step}")
    return problems


def validate_segmap(seg: SegMap, m: MoMap | None = None) -> list[str]:
    problems = []
    if m is not None and seg.ids.shape != (m.height, m.width):
        problems.append(f"dimensions: SegMap {seg.ids.shape} != MoMap {(m.height, m.width)}")
    ids = seg.patch_ids()
    if ids.size:
        # ids are sorted and unique, so they are dense iff ids[k] == k + 1 everywhere
        gap = np.flatnonzero(ids != np.arange(1, ids.size + 1))
        if gap.size:
            problems.append(f"dense ids: id {int(gap[0]) + 1} labels no pixel")
    return problems


def apply_rigid(m: MoMap, g: RigidTransform) -> MoMap:
    """Rigidly move every valid position; the mask is unchanged."""
    moved = g.apply(m.positions)
    return m.replace(positions=np.where(m.valid[..., None], moved, m.positions))


# --------------------------------------------------------------------------
# binary container


def _sections(m: MoMap, seg: SegMap | None, cam: Camera | None) -> list[tuple[int, bytes]]:
    out = [
        (TAG_VALID, m.valid.astype(np.uint8).tobytes()),
        (TAG_POS, m.positions.astype("<f4").tobytes()),
    ]
    if seg is not None:
        out.append((TAG_SEG, seg.ids.astype("<u4").tobytes()))
    if cam is not None:
        extr = np.concatenate([cam.rotations.reshape(-1, 9), cam.translations], axis=1)
        payload = np.concatenate([[cam.fx, cam.fy, cam.cx, cam.cy], extr.ravel()])
        out.append((TAG_CAM, payload.astype("<f4").tobytes()))
    if m.reference_colors is not None:
        out.append((TAG_COLOR, m.reference_colors.astype("<f4").tobytes()))
    return out


def pack_sections(magic: bytes, dims: tuple[int, int, int, int], sections: list[tuple[int, bytes]]) -> bytes:
    """Header, section table, then payloads. ``dims`` fills the four u32 header slots after version."""
    head = HEADER.pack(magic, VERSION, *dims, len(sections), 0)
    table = b"".join(SECTION.pack(tag, len(data)) for tag, data in sections)
    return head + table + b"".join(data for _, data in sections)


def unpack_sections(buf: bytes, magic: bytes) -> tuple[tuple[int, int, int, int], dict[int, bytes]]:
    if len(buf) < HEADER.size:
        raise SectionLengthError(f"section length mismatch: file has {len(buf)} bytes, header needs {HEADER.size}")
    got_magic, version, a, b, c, d, n_sections, _ = HEADER.unpack_from(buf)
    if got_magic != magic:
        raise BadMagicError(f"bad magic {got_magic!r}, expected {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}, expected {VERSION}")
    table_end = HEADER.size + SECTION.size * n_sections
    if len(buf) < table_end:
        raise SectionLengthError("section length mismatch: truncated section table")
    sections = {}
    offset = table_end
    for k in range(n_sections):
        tag, length = SECTION.unpack_from(buf, HEADER.size + SECTION.size * k)
        if tag in sections:
            raise FormatError(f"duplicate section tag {tag}")
        sections[tag] = buf[offset : offset + length]
        offset += length
    if offset != len(buf):
        raise SectionLengthError(
            f"section length mismatch: table declares {offset} bytes, file has {len(buf)}"
        )
    return (a, b, c, d), sections


def _expect(sections: dict[int, bytes], tag: int, nbytes: int) -> bytes:
    name = TAG_NAMES.get(tag, str(tag))
    if tag not in sections:
        raise FormatError(f"missing {name} section")
    if len(sections[tag]) != nbytes:
        raise SectionLengthError(
            f"section length mismatch: {name} has {len(sections[tag])} bytes, expected {nbytes}"
        )
    return sections[tag]


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def encode_momap(m: MoMap, seg: SegMap | None = None, cam: Camera | None = None) -> bytes:
    problems = validate_momap(m)
    if seg is not None:
        problems += validate_segmap(seg, m)
    if cam is not None and cam.frames != m.frames:
        problems.append(f"camera frames {cam.frames} != MoMap frames {m.frames}")
    if problems:
        raise ValidationError("refusing to write invalid MoMap: " + "; ".join(problems))
    flags = (FLAG_SEG if seg is not None else 0) | (FLAG_CAM if cam is not None else 0)
    flags |= FLAG_COLOR if m.reference_colors is not None else 0
    return pack_sections(MAGIC, (m.height, m.width, m.frames, flags), _sections(m, seg, cam))


def write_momap(m: MoMap, path, seg: SegMap | None = None, cam: Camera | None = None) -> int:
    """Write ``m`` (and optional seg/camera) as ``.momap`` plus a JSON sidecar.

    Returns the size of the binary file in bytes.
    """
    data = encode_momap(m, seg, cam)
    path = Path(path)
    path.write_bytes(data)
    sidecar = {
        "format": "momap",
        "version": VERSION,
        "height": m.height,
        "width": m.width,
        "frames": m.frames,
        "time_step": m.time_step,
        "has_seg": seg is not None,
        "has_camera": cam is not None,
        "has_colors": m.reference_colors is not None,
        "bytes": len(data),
    }
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")
    return len(data)


def decode_momap(buf: bytes, time_step: float = DEFAULT_TIME_STEP):
    (H, W, T, flags), sections = unpack_sections(buf, MAGIC)
    n = H * W * T
    valid = np.frombuffer(_expect(sections, TAG_VALID, n), dtype=np.uint8).reshape(H, W, T)
    if valid.max(initial=0) > 1:
        raise FormatError("VALID section holds values other than 0/1")
    pos = np.frombuffer(_expect(sections, TAG_POS, n * 12), dtype="<f4").reshape(H, W, T, 3)
    valid = valid.astype(bool)
    bad = valid & ~np.all(np.isfinite(pos), axis=-1)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NonFiniteError(f"non-finite payload at valid entry {idx}")
    colors = None
    if flags & FLAG_COLOR:
        colors = np.frombuffer(_expect(sections, TAG_COLOR, H * W * 12), dtype="<f4").reshape(H, W, 3)
    seg = None
    if flags & FLAG_SEG:
        seg = SegMap(np.frombuffer(_expect(sections, TAG_SEG, H * W * 4), dtype="<u4").reshape(H, W))
    cam = None
    if flags & FLAG_CAM:
        raw = np.frombuffer(_expect(sections, TAG_CAM, (4 + 12 * T) * 4), dtype="<f4").astype(np.float64)
        extr = raw[4:].reshape(T, 12)
        cam = Camera(
            *raw[:4], extr[:, :9].reshape(T, 3, 3), extr[:, 9:], rotation_tol=FILE_ROTATION_TOL
        )
    m = MoMap(pos, valid, colors, time_step=time_step)
    return m, seg, cam


def read_momap(path):
    """Read a ``.momap`` file; returns ``(MoMap, SegMap | None, Camera | None)``.

    ``time_step`` is taken from the JSON sidecar when present.
    """
    path = Path(path)
    time_step = DEFAULT_TIME_STEP
    side = sidecar_path(path)
    if side.exists():
        try:
            time_step = float(json.loads(side.read_text(encoding="utf-8")).get("time_step", time_step))
        except (ValueError, TypeError, AttributeError):
            pass
    return decode_momap(path.read_bytes(), time_step=time_step)

"""Per-patch motion programs: three direction flags per patch.

Axis words are fixed in the reference camera frame (camera looks down +z,
image y points down)::

    x: left (-) / stay / right (+)
    y: up (-)   / stay / down (+)
    z: forward (-) / stay / backward (+)

Document form::

    {"horizon": T, "patches": [{"id": 1, "x": "right", "y": "stay", "z": "stay", "magnitude": 0.3}]}
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import MomapError, MoMap, SegMap

AXES = ("x", "y", "z")
AXIS_WORDS = {
    "x": ("left", "stay", "right"),
    "y": ("up", "stay", "down"),
    "z": ("forward", "stay", "backward"),
}
VOCABULARY = tuple(w for axis in AXES for w in AXIS_WORDS[axis])  # the nine flags


class DSLError(MomapError, ValueError):
    """Malformed or inconsistent motion program; ``path`` points at the offending field."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass(frozen=True)
class PatchMotion:
    patch_id: int
    flags: tuple[int, int, int]  # -1 / 0 / +1 per axis
    magnitude: float

    def words(self, axis_words: dict = AXIS_WORDS) -> dict[str, str]:
        return {a: axis_words[a][f + 1] for a, f in zip(AXES, self.flags)}


@dataclass(frozen=True)
class MotionDSL:
    horizon: int
    patches: tuple[PatchMotion, ...] = field(default_factory=tuple)
    frame_ref: int = 0

    def __post_init__(self):
        object.__setattr__(self, "patches", tuple(self.patches))
        seen = set()
        for k, p in enumerate(self.patches):
            if p.patch_id in seen:
                raise DSLError(f"duplicate patch id {p.patch_id}", f"patches[{k}].id")
            seen.add(p.patch_id)

    def by_id(self) -> dict[int, PatchMotion]:
        return {p.patch_id: p for p in self.patches}


def label(values: np.ndarray, eps: float) -> np.ndarray:
    """Sign labels with a closed stay band: |v| <= eps maps to 0."""
    values = np.asarray(values, dtype=np.float64)
    lab = np.sign(values).astype(np.int8)
    lab[np.abs(values) <= eps] = 0
    return lab


def emit_dsl(m: MoMap, seg: SegMap, eps: float = 0.02) -> MotionDSL:
    """Quantize each patch's centroid displacement over the whole horizon."""
    if seg.ids.shape != (m.height, m.width):
        raise DSLError("SegMap not aligned with MoMap")
    patches = []
    last = m.frames - 1
    for pid in seg.patch_ids():
        sel = seg.ids == pid
        v0 = sel & m.valid[:, :, 0]
        v1 = sel & m.valid[:, :, last]
        if not v0.any() or not v1.any():
            raise DSLError(f"patch {int(pid)} has no valid pixels at the reference or final frame")
        d = m.positions[:, :, last][v1].mean(axis=0) - m.positions[:, :, 0][v0].mean(axis=0)
        flags = tuple(int(f) for f in label(d, eps))
        patches.append(PatchMotion(int(pid), flags, float(np.linalg.norm(d))))
    return MotionDSL(m.frames, tuple(patches))


def to_dict(d: MotionDSL, axis_words: dict = AXIS_WORDS) -> dict:
    return {
        "horizon": d.horizon,
        "patches": [{"id": p.patch_id, **p.words(axis_words), "magnitude": p.magnitude} for p in d.patches],
    }


def serialize(d: MotionDSL, axis_words: dict = AXIS_WORDS, **json_kw) -> str:
    return json.dumps(to_dict(d, axis_words), **json_kw)


_TOP_KEYS = {"horizon", "patches", "frame_ref"}
_PATCH_KEYS = {"id", "x", "y", "z", "magnitude"}


def _unknown(keys, allowed, path, strict):
    extra = sorted(set(keys) - allowed)
    if not extra:
        return
    if strict:
        raise DSLError(f"unknown key {extra[0]!r}", f"{path}.{extra[0]}" if path else extra[0])
    warnings.warn(f"ignoring unknown keys {extra} at {path or '<root>'}", stacklevel=3)


def _int(v, path):
    if isinstance(v, bool) or not isinstance(v, int):
        raise DSLError(f"expected an integer, got {v!r}", path)
    return v


def parse_dsl(text: str | dict, strict: bool = True, axis_words: dict = AXIS_WORDS) -> MotionDSL:
    """Parse a JSON motion program, raising :class:`DSLError` with a field path on failure."""
    if isinstance(text, (str, bytes)):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DSLError(f"invalid JSON: {exc}") from exc
    else:
        doc = text
    if not isinstance(doc, dict):
        raise DSLError("top level must be an object")
    _unknown(doc, _TOP_KEYS, "", strict)
    for key in ("horizon", "patches"):
        if key not in doc:
            raise DSLError("missing field", key)
    horizon = _int(doc["horizon"], "horizon")
    if horizon < 1:
        raise DSLError("horizon must be >= 1", "horizon")
    if doc.get("frame_ref", 0) != 0:
        raise DSLError("reference frame must be 0", "frame_ref")
    if not isinstance(doc["patches"], list):
        raise DSLError("expected a list", "patches")
    patches = []
    seen = set()
    for k, entry in enumerate(doc["patches"]):
        path = f"patches[{k}]"
        if not isinstance(entry, dict):
            raise DSLError("expected an object", path)
        _unknown(entry, _PATCH_KEYS, path, strict)
        for key in ("id", "x", "y", "z", "magnitude"):
            if key not in entry:
                raise DSLError("missing field", f"{path}.{key}")
        pid = _int(entry["id"], f"{path}.id")
        if pid < 1:
            raise DSLError("patch id must be >= 1", f"{path}.id")
        if pid in seen:
            raise DSLError(f"duplicate patch id {pid}", f"{path}.id")
        seen.add(pid)
        flags = []
        for axis in AXES:
            word = entry[axis]
            if word not in axis_words[axis]:
                raise DSLError(
                    f"unknown label {word!r}, expected one of {list(axis_words[axis])}", f"{path}.{axis}"
                )
            flags.append(axis_words[axis].index(word) - 1)
        mag = entry["magnitude"]
        if isinstance(mag, bool) or not isinstance(mag, (int, float)) or not mag >= 0:
            raise DSLError(f"magnitude must be a non-negative number, got {mag!r}", f"{path}.magnitude")
        patches.append(PatchMotion(pid, tuple(flags), float(mag)))
    return MotionDSL(horizon, tuple(patches))


def check_against(d: MotionDSL, seg: SegMap) -> None:
    present = set(int(i) for i in seg.patch_ids())
    for k, p in enumerate(d.patches):
        if p.patch_id not in present:
            raise DSLError(f"patch id {p.patch_id} absent from segmentation", f"patches[{k}].id")


def ground_dsl(d: MotionDSL, seg: SegMap) -> np.ndarray:
    """Paint each patch's flags onto its pixels: (H, W, 3) int8, background all zero."""
    check_against(d, seg)
    out = np.zeros(seg.ids.shape + (3,), dtype=np.int8)
    for p in d.patches:
        out[seg.ids == p.patch_id] = p.flags
    return out


def readback(image: np.ndarray, seg: SegMap) -> dict[int, tuple[int, int, int]]:
    """Majority label per axis for every patch of a grounded image (ties resolve to the smaller label)."""
    out = {}
    for pid in seg.patch_ids():
        vals = image[seg.ids == pid].astype(np.int64) + 1  # (n, 3) in {0, 1, 2}
        counts = np.stack([np.bincount(vals[:, a], minlength=3) for a in range(3)])
        out[int(pid)] = tuple(int(i) - 1 for i in counts.argmax(axis=1))
    return out

"""Z-buffered disc splatting of MoMaps into target cameras.

Each valid point is moved into the camera of frame ``t``, projected with
the pinhole model and splatted onto every pixel whose centre lies inside a
disc of ``splat_radius`` pixels around the projection (the pixel containing
the projection is always hit).  Pixel ``(row, col)`` has its centre at
``u = col, v = row``.  The nearest depth wins; exact depth ties go to the
lower source pixel index, so output never depends on processing order.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Camera, MomapError, MoMap, SegMap

HOLE_ID = np.uint32(0xFFFFFFFF)
# depth PGM: value = round(depth / DEPTH_SCALE), 0 marks a hole, clipped to 65535
DEPTH_SCALE = 1e-3


class RenderError(MomapError):
    pass


@dataclass(frozen=True, eq=False)
class PartialFrame:
    color: np.ndarray  # (H, W, 3) in [0, 1], holes black
    seg: np.ndarray  # (H, W) uint32, HOLE_ID at holes
    hole: np.ndarray  # (H, W) bool
    depth: np.ndarray  # (H, W) meters, +inf at holes
    source: np.ndarray  # (H, W) flat index of the winning source pixel, -1 at holes

    def check(self) -> list[str]:
        problems = []
        if not np.array_equal(self.hole, np.isinf(self.depth)):
            problems.append("hole mask disagrees with infinite depth")
        if not np.array_equal(self.hole, self.seg == HOLE_ID):
            problems.append("hole mask disagrees with seg sentinel")
        if np.any(self.color[self.hole] != 0):
            problems.append("holes not painted black")
        return problems


def _stencil(radius: float) -> np.ndarray:
    """Integer offsets that can hold a pixel centre within ``radius`` of a point inside the base pixel."""
    r = int(np.ceil(radius)) + 1
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    return np.stack([dy.ravel(), dx.ravel()], axis=1)


def splat(
    uv: np.ndarray,
    depth: np.ndarray,
    source: np.ndarray,
    height: int,
    width: int,
    radius: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Resolve the z-buffer for projected points.

    Returns (depth image, winning source index image) with +inf / -1 at holes.
    """
    zbuf = np.full(height * width, np.inf)
    win = np.full(height * width, -1, dtype=np.int64)
    if len(uv) == 0:
        return zbuf.reshape(height, width), win.reshape(height, width)
    base_c = np.floor(uv[:, 0] + 0.5).astype(np.int64)
    base_r = np.floor(uv[:, 1] + 0.5).astype(np.int64)
    pix, dep, src = [], [], []
    r2 = radius * radius
    for dy, dx in _stencil(radius):
        rr = base_r + dy
        cc = base_c + dx
        inside = (rr - uv[:, 1]) ** 2 + (cc - uv[:, 0]) ** 2 <= r2
        if dy == 0 and dx == 0:
            inside = np.ones_like(inside)
        inside &= (rr >= 0) & (rr < height) & (cc >= 0) & (cc < width)
        pix.append(rr[inside] * width + cc[inside])
        dep.append(depth[inside])
        src.append(source[inside])
    pix = np.concatenate(pix)
    dep = np.concatenate(dep)
    src = np.concatenate(src)
    order = np.lexsort((src, dep, pix))
    pix, dep, src = pix[order], dep[order], src[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    zbuf[pix[first]] = dep[first]
    win[pix[first]] = src[first]
    return zbuf.reshape(height, width), win.reshape(height, width)


def render_frame(
    m: MoMap,
    seg: SegMap | None,
    cam: Camera,
    t: int,
    splat_radius: float = 1.0,
    out_size: tuple[int, int] | None = None,
) -> PartialFrame:
    if m.reference_colors is None:
        raise RenderError("MoMap has no reference colors to render")
    H, W = out_size if out_size is not None else (m.height, m.width)
    valid = m.valid[:, :, t].ravel()
    source = np.flatnonzero(valid)
    pts = m.positions[:, :, t].reshape(-1, 3)[source]
    pc = cam.extrinsic(t).apply(pts)
    front = pc[:, 2] > 0
    source, pc = source[front], pc[front]
    uv = cam.project(pc)
    ok = np.all(np.isfinite(uv), axis=1)
    zbuf, win = splat(uv[ok], pc[ok, 2], source[ok], H, W, splat_radius)
    hole = win < 0
    colors = m.reference_colors.reshape(-1, 3)
    color = np.zeros((H, W, 3))
    color[~hole] = colors[win[~hole]]
    seg_img = np.full((H, W), HOLE_ID, dtype=np.uint32)
    ids = seg.ids.ravel() if seg is not None else np.zeros(m.height * m.width, dtype=np.uint32)
    seg_img[~hole] = ids[win[~hole]]
    return PartialFrame(color, seg_img, hole, zbuf, win)


def render(
    m: MoMap,
    seg: SegMap | None,
    cam: Camera,
    splat_radius: float = 1.0,
    out_size: tuple[int, int] | None = None,
) -> list[PartialFrame]:
    """Render every frame of ``m`` into ``cam``; see module docstring for the rules."""
    if m.reference_colors is None:
        raise RenderError("MoMap has no reference colors to render")
    if cam.frames != m.frames:
        raise RenderError(f"camera has {cam.frames} frames, MoMap has {m.frames}")
    if seg is not None and seg.ids.shape != (m.height, m.width):
        raise RenderError("SegMap not aligned with MoMap")
    if splat_radius < 0:
        raise RenderError("splat radius must be >= 0")
    return [render_frame(m, seg, cam, t, splat_radius, out_size) for t in range(m.frames)]


def coverage(frames: list[PartialFrame]) -> list[float]:
    """Fraction of non-hole pixels in each frame."""
    return [float(np.count_nonzero(~f.hole) / f.hole.size) for f in frames]


def write_ppm(path, color: np.ndarray) -> None:
    img = np.clip(np.round(np.asarray(color) * 255.0), 0, 255).astype(np.uint8)
    H, W = img.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (W, H) + img.tobytes())


def depth_to_u16(depth: np.ndarray) -> np.ndarray:
    q = np.where(np.isinf(depth), 0.0, np.clip(np.round(depth / DEPTH_SCALE), 1, 65535))
    return q.astype(np.uint16)


def write_pgm16(path, values: np.ndarray) -> None:
    H, W = values.shape
    Path(path).write_bytes(b"P5\n%d %d\n65535\n" % (W, H) + values.astype(">u2").tobytes())


def read_pnm(path) -> np.ndarray:
    """Minimal reader for the P6 / 16-bit P5 files written here."""
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    body = data[pos + 1 :]  # exactly one whitespace byte after maxval
    kind, W, H, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if kind == b"P6":
        return np.frombuffer(body, dtype=np.uint8).reshape(H, W, 3)
    if kind == b"P5" and maxval > 255:
        return np.frombuffer(body, dtype=">u2").reshape(H, W).astype(np.uint16)
    raise RenderError(f"unsupported PNM variant {kind!r} maxval {maxval}")


def write_frames(frames: list[PartialFrame], outdir) -> list[Path]:
    """Write ``frame_{t:04}.ppm`` (color), ``.pgm`` (depth, mm) and ``.seg`` (raw u32 LE)."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    for t, f in enumerate(frames):
        stem = outdir / f"frame_{t:04d}"
        write_ppm(stem.with_suffix(".ppm"), f.color)
        write_pgm16(stem.with_suffix(".pgm"), depth_to_u16(f.depth))
        stem.with_suffix(".seg").write_bytes(f.seg.astype("<u4").tobytes())
        written += [stem.with_suffix(s) for s in (".ppm", ".pgm", ".seg")]
    return written

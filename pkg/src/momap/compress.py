"""Low-rank temporal compression of MoMaps.

Each covered pixel's trajectory is flattened to a length ``3T`` vector.
The mean trajectory is removed and the leading right singular vectors of
the centred (pixels x 3T) matrix form an orthonormal basis; each pixel
keeps its coefficients in that basis.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    DEFAULT_TIME_STEP,
    FormatError,
    MoMap,
    SectionLengthError,
    ValidationError,
    pack_sections,
    unpack_sections,
)

DEFAULT_CHANNELS = 32

MAGIC_Z = b"MOMZ"
TAG_MEAN = 1
TAG_BASIS = 2
TAG_COEF = 3
TAG_VALID = 4


@dataclass(frozen=True, eq=False)
class CompressedMoMap:
    basis: np.ndarray  # (C, 3T), orthonormal rows
    coefficients: np.ndarray  # (H, W, C)
    mean: np.ndarray  # (3T,)
    valid_t0: np.ndarray  # (H, W)

    def __post_init__(self):
        basis = np.array(self.basis, dtype=np.float64)
        coef = np.array(self.coefficients, dtype=np.float64)
        mean = np.array(self.mean, dtype=np.float64)
        valid = np.array(self.valid_t0, dtype=bool)
        if basis.ndim != 2 or mean.shape != (basis.shape[1],):
            raise ValidationError(f"basis {basis.shape} and mean {mean.shape} disagree")
        if coef.ndim != 3 or coef.shape[2] != basis.shape[0] or valid.shape != coef.shape[:2]:
            raise ValidationError(f"coefficients {coef.shape} / valid {valid.shape} / basis {basis.shape} disagree")
        if basis.shape[0] > basis.shape[1]:
            raise ValidationError("more channels than trajectory coordinates")
        for name, arr in (("basis", basis), ("coefficients", coef), ("mean", mean), ("valid_t0", valid)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def height(self) -> int:
        return self.coefficients.shape[0]

    @property
    def width(self) -> int:
        return self.coefficients.shape[1]

    @property
    def channels(self) -> int:
        return self.basis.shape[0]

    @property
    def frames(self) -> int:
        return self.basis.shape[1] // 3

    def orthonormality_error(self) -> float:
        return float(np.abs(self.basis @ self.basis.T - np.eye(self.channels)).max(initial=0.0))

    def __eq__(self, other):
        if not isinstance(other, CompressedMoMap):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in ("basis", "coefficients", "mean", "valid_t0")
        )

    __hash__ = None


def _trajectory_matrix(m: MoMap) -> np.ndarray:
    return m.positions[m.covered].reshape(-1, 3 * m.frames)


def canonical_signs(basis: np.ndarray) -> np.ndarray:
    """Flip rows so each row's largest-magnitude entry (first on ties) is positive."""
    lead = basis[np.arange(len(basis)), np.argmax(np.abs(basis), axis=1)]
    return basis * np.where(lead < 0, -1.0, 1.0)[:, None]


def compress(m: MoMap, channels: int = DEFAULT_CHANNELS) -> CompressedMoMap:
    """Project every covered trajectory onto the top ``channels`` principal directions."""
    T3 = 3 * m.frames
    if not 1 <= channels <= T3:
        raise ValidationError(f"channels must lie in [1, {T3}], got {channels}")
    cov = m.covered
    if not np.array_equal(m.valid, np.broadcast_to(cov[:, :, None], m.shape)):
        raise ValidationError("compress needs fully valid trajectories on covered pixels; run infill first")
    X = _trajectory_matrix(m)
    if len(X) == 0:
        basis = np.eye(T3)[:channels]
        return CompressedMoMap(basis, np.zeros(m.shape[:2] + (channels,)), np.zeros(T3), cov)
    mean = X.mean(axis=0)
    Xc = X - mean
    _, _, vt = np.linalg.svd(Xc, full_matrices=True)
    basis = canonical_signs(vt[:channels])
    coef = np.zeros(m.shape[:2] + (channels,))
    coef[cov] = Xc @ basis.T
    return CompressedMoMap(basis, coef, mean, cov)


def decompress(c: CompressedMoMap, frames: int | None = None, time_step: float = DEFAULT_TIME_STEP) -> MoMap:
    frames = c.frames if frames is None else frames
    if 3 * frames != c.basis.shape[1]:
        raise ValidationError(f"{frames} frames need {3 * frames} basis columns, have {c.basis.shape[1]}")
    X = c.mean + c.coefficients @ c.basis
    X = np.where(c.valid_t0[:, :, None], X, 0.0)
    pos = X.reshape(c.height, c.width, frames, 3)
    valid = np.broadcast_to(c.valid_t0[:, :, None], (c.height, c.width, frames))
    return MoMap(pos, valid, time_step=time_step)


def reconstruction_rmse(m: MoMap, c: CompressedMoMap) -> float:
    """Root-mean-square coordinate error over covered pixels."""
    if (m.height, m.width) != (c.height, c.width) or 3 * m.frames != c.basis.shape[1]:
        raise ValidationError("MoMap and compressed map have incompatible shapes")
    rec = decompress(c, m.frames)
    cov = m.covered
    if not cov.any():
        return 0.0
    diff = m.positions[cov] - rec.positions[cov]
    return float(np.sqrt(np.mean(diff * diff)))


def compression_ratio(c: CompressedMoMap, include_basis: bool = False) -> float:
    """Raw float count over stored float count (coefficients, optionally plus basis and mean)."""
    raw = c.height * c.width * c.basis.shape[1]
    stored = c.height * c.width * c.channels
    if include_basis:
        stored += c.basis.size + c.mean.size
    return raw / stored


def encode_momapz(c: CompressedMoMap) -> bytes:
    sections = [
        (TAG_MEAN, c.mean.astype("<f4").tobytes()),
        (TAG_BASIS, c.basis.astype("<f4").tobytes()),
        (TAG_COEF, c.coefficients.astype("<f4").tobytes()),
        (TAG_VALID, c.valid_t0.astype(np.uint8).tobytes()),
    ]
    return pack_sections(MAGIC_Z, (c.height, c.width, c.channels, c.basis.shape[1]), sections)


def decode_momapz(buf: bytes) -> CompressedMoMap:
    (H, W, C, T3), sections = unpack_sections(buf, MAGIC_Z)

    def take(tag, n, dtype):
        if tag not in sections:
            raise FormatError(f"missing section {tag}")
        if len(sections[tag]) != n * np.dtype(dtype).itemsize:
            raise SectionLengthError(f"section length mismatch in section {tag}")
        return np.frombuffer(sections[tag], dtype=dtype)

    mean = take(TAG_MEAN, T3, "<f4")
    basis = take(TAG_BASIS, C * T3, "<f4").reshape(C, T3)
    coef = take(TAG_COEF, H * W * C, "<f4").reshape(H, W, C)
    valid = take(TAG_VALID, H * W, np.uint8).reshape(H, W)
    if valid.max(initial=0) > 1:
        raise FormatError("VALID section holds values other than 0/1")
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(basis)) and np.all(np.isfinite(coef))):
        raise FormatError("non-finite payload in compressed map")
    return CompressedMoMap(basis, coef, mean, valid.astype(bool))


def write_momapz(c: CompressedMoMap, path) -> int:
    data = encode_momapz(c)
    Path(path).write_bytes(data)
    return len(data)


def read_momapz(path) -> CompressedMoMap:
    return decode_momapz(Path(path).read_bytes())

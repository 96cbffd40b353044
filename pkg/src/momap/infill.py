"""Occlusion infill for dense trajectories.

Hidden entries are treated as free variables and chosen to minimize

    w_accel * sum_p sum_t |x_p(t-1) - 2 x_p(t) + x_p(t+1)|^2
  + w_arap  * sum_(p,q) sum_t (|x_p(t) - x_q(t)| - |x_p(0) - x_q(0)|)^2

where (p, q) runs over a K-nearest-neighbour graph of foreground points at
the reference frame.  Observed entries are hard constraints.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .core import MomapError, MoMap, ValidationError


class InfillError(MomapError):
    pass


@dataclass(frozen=True)
class InfillConfig:
    w_accel: float = 1.0
    w_arap: float = 1.0
    knn: int = 8
    max_iters: int = 500
    grad_tol: float = 1e-6
    step: float = 1e-2
    # pixels whose observed displacement never exceeds this are held static
    fg_threshold: float = 0.0
    armijo_c: float = 1e-4

    def __post_init__(self):
        if self.w_accel < 0 or self.w_arap < 0:
            raise ValidationError("energy weights must be >= 0")
        if self.knn < 1 or self.max_iters < 1:
            raise ValidationError("knn and max_iters must be >= 1")
        if not (self.step > 0 and self.grad_tol > 0):
            raise ValidationError("step and grad_tol must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> InfillConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown InfillConfig keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> InfillConfig:
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        return asdict(self)


class InfillResult(NamedTuple):
    momap: MoMap
    energy: float
    iterations: int
    converged: bool
    history: list[float]


def knn_edges(points: np.ndarray, k: int) -> np.ndarray:
    """Undirected edges (i < j) joining each point to its ``k`` nearest neighbours."""
    n = len(points)
    k = min(k, n - 1)
    if k < 1:
        return np.zeros((0, 2), dtype=np.intp)
    _, nbr = cKDTree(points).query(points, k=k + 1)
    src = np.repeat(np.arange(n), k)
    dst = nbr[:, 1:].ravel()
    pairs = np.sort(np.stack([src, dst], axis=1), axis=1)
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    return np.unique(pairs, axis=0)


def foreground_pixels(m: MoMap, threshold: float) -> np.ndarray:
    """(H, W) mask of covered pixels whose observed positions move beyond ``threshold``."""
    disp = np.linalg.norm(m.positions - m.positions[:, :, :1], axis=-1)
    disp = np.where(m.valid, disp, 0.0)
    return m.covered & (disp.max(axis=2) > threshold)


def _energy_grad(x: np.ndarray, rest: np.ndarray, edges: np.ndarray, cfg: InfillConfig, want_grad: bool = True):
    """Energy over trajectories ``x`` of shape (N, T, 3)."""
    energy = 0.0
    grad = np.zeros_like(x) if want_grad else None
    if cfg.w_accel and x.shape[1] >= 3:
        acc = x[:, :-2] - 2.0 * x[:, 1:-1] + x[:, 2:]
        energy += cfg.w_accel * float(np.sum(acc * acc))
        if want_grad:
            g = 2.0 * cfg.w_accel * acc
            grad[:, :-2] += g
            grad[:, 1:-1] -= 2.0 * g
            grad[:, 2:] += g
    if cfg.w_arap and len(edges):
        p, q = edges[:, 0], edges[:, 1]
        diff = x[p] - x[q]
        dist = np.linalg.norm(diff, axis=-1)
        r = dist - rest[:, None]
        energy += cfg.w_arap * float(np.sum(r * r))
        if want_grad:
            with np.errstate(invalid="ignore", divide="ignore"):
                coef = np.where(dist > 0, 2.0 * cfg.w_arap * r / dist, 0.0)
            ge = coef[..., None] * diff
            np.add.at(grad, p, ge)
            np.subtract.at(grad, q, ge)
    return energy, grad


def energy_and_gradient(
    m: MoMap,
    free: np.ndarray,
    cfg: InfillConfig = InfillConfig(),
    foreground: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Infill energy at the current positions of ``m`` and its gradient.

    ``free`` is an (H, W, T) mask of the free entries; the returned
    gradient has the shape of ``m.positions`` and is zero elsewhere.
    The acceleration term covers every covered pixel.  The rigidity graph
    joins ``foreground`` pixels (default: all covered pixels).
    """
    free = np.asarray(free, dtype=bool)
    if free.shape != m.shape:
        raise ValidationError(f"free mask shape {free.shape} != {m.shape}")
    if not np.all(np.isfinite(m.positions[m.covered])):
        raise InfillError("non-finite positions in energy evaluation")
    fg = m.covered if foreground is None else np.asarray(foreground, dtype=bool) & m.covered
    cov = np.flatnonzero(m.covered.ravel())
    x = m.positions.reshape(-1, m.frames, 3)[cov]
    in_fg = fg.ravel()[cov]
    sub = np.flatnonzero(in_fg)
    edges = sub[knn_edges(x[sub, 0], cfg.knn)] if len(sub) > 1 else np.zeros((0, 2), dtype=np.intp)
    rest = np.linalg.norm(x[edges[:, 0], 0] - x[edges[:, 1], 0], axis=-1)
    energy, g = _energy_grad(x, rest, edges, cfg)
    full = np.zeros((m.height * m.width, m.frames, 3))
    full[cov] = g
    full = full.reshape(m.positions.shape)
    full[~free] = 0.0
    return energy, full


def initial_guess(x: np.ndarray, known: np.ndarray) -> np.ndarray:
    """Fill unknown entries of each trajectory by linear interpolation.

    Gaps after the last observation extend the last observed velocity; a
    trajectory observed only at its anchor stays constant.
    """
    out = x.copy()
    t = np.arange(x.shape[1], dtype=np.float64)
    for i in np.flatnonzero(~known.all(axis=1)):
        obs = np.flatnonzero(known[i])
        hid = np.flatnonzero(~known[i])
        for a in range(3):
            out[i, hid, a] = np.interp(t[hid], t[obs], x[i, obs, a])
        if len(obs) >= 2:
            tail = hid[hid > obs[-1]]
            if tail.size:
                v = (x[i, obs[-1]] - x[i, obs[-2]]) / (obs[-1] - obs[-2])
                out[i, tail] = x[i, obs[-1]] + (t[tail, None] - obs[-1]) * v
    return out


def infill(m: MoMap, cfg: InfillConfig = InfillConfig(), foreground: np.ndarray | None = None) -> InfillResult:
    """Fill every hidden entry of covered pixels.

    Background pixels (not in ``foreground``, which defaults to the moving
    pixels found by :func:`foreground_pixels`) are held at their anchor.
    Foreground hidden entries start from linear interpolation and are
    refined by gradient descent with Armijo backtracking.
    """
    if not m.valid.any(axis=2).all():
        r, c = np.argwhere(~m.valid.any(axis=2))[0]
        raise InfillError(f"pixel {(int(r), int(c))} has no valid entry")
    if not m.covered.all():
        r, c = np.argwhere(~m.covered)[0]
        raise InfillError(f"pixel {(int(r), int(c))} is not anchored at the reference frame")
    if foreground is None:
        foreground = foreground_pixels(m, cfg.fg_threshold)
    fg = np.asarray(foreground, dtype=bool)
    H, W, T = m.shape

    x_all = m.positions.reshape(-1, T, 3).copy()
    known_all = m.valid.reshape(-1, T)
    bg = ~fg.ravel()
    x_all[bg] = np.where(known_all[bg][..., None], x_all[bg], x_all[bg][:, :1])

    idx = np.flatnonzero(fg.ravel())
    x = x_all[idx]
    known = known_all[idx]
    free = ~known
    edges = knn_edges(x[:, 0], cfg.knn)
    rest = np.linalg.norm(x[edges[:, 0], 0] - x[edges[:, 1], 0], axis=-1)

    def finish(xf, energy, iterations, converged, history):
        x_all[idx] = xf
        out = m.replace(positions=x_all.reshape(H, W, T, 3), valid=np.ones((H, W, T), dtype=bool))
        return InfillResult(out, energy, iterations, converged, history)

    if not free.any():
        energy, _ = _energy_grad(x, rest, edges, cfg, want_grad=False)
        return finish(x, energy, 0, True, [energy])

    x = initial_guess(x, known)
    energy, grad = _energy_grad(x, rest, edges, cfg)
    grad[known] = 0.0
    history = [energy]
    step = cfg.step
    it = 0
    converged = False
    while True:
        if not np.isfinite(energy):
            raise InfillError(f"non-finite energy at iterate {it}")
        gnorm = float(np.abs(grad).max())
        if gnorm <= cfg.grad_tol:
            converged = True
            break
        if it >= cfg.max_iters:
            break
        g2 = float(np.sum(grad * grad))
        while True:
            trial = x - step * grad
            e_trial, _ = _energy_grad(trial, rest, edges, cfg, want_grad=False)
            if np.isfinite(e_trial) and e_trial <= energy - cfg.armijo_c * step * g2:
                break
            step *= 0.5
            if step < 1e-30:
                # no descent possible at machine precision
                return finish(x, energy, it, False, history)
        x = trial
        energy, grad = _energy_grad(x, rest, edges, cfg)
        grad[known] = 0.0
        history.append(energy)
        it += 1
        step *= 2.0
    return finish(x, energy, it, converged, history)

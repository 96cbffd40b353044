"""Trajectory evaluation: six metrics and best-of-N selection.

All motion metrics are averaged over the ground-truth moving mask.  When
that mask is empty (or a metric's precondition is unmet by the data) the
metric is not applicable and comes back as NaN, serialized as ``null``.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .core import MomapError, MoMap, SegMap, ValidationError

NA = math.nan


class MetricError(MomapError, ValueError):
    pass


@dataclass(frozen=True)
class MetricConfig:
    fg_threshold: float = 0.05
    knn: int = 8
    quantize_eps: float = 0.02
    dt_values: tuple[int, ...] = (1, 4, 16)
    n_samples: int = 10

    def __post_init__(self):
        object.__setattr__(self, "dt_values", tuple(int(d) for d in self.dt_values))
        if self.fg_threshold <= 0 or self.quantize_eps <= 0:
            raise ValidationError("thresholds must be positive")
        if self.knn < 1 or self.n_samples < 1:
            raise ValidationError("knn and n_samples must be >= 1")
        if any(d < 1 for d in self.dt_values):
            raise ValidationError("dt values must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> MetricConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown MetricConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dt_values"] = list(self.dt_values)
        return d


# ---------------------------------------------------------------------------
# moving mask / IoU


def _check_dims(gt: MoMap, pred: MoMap) -> None:
    if gt.shape != pred.shape:
        raise MetricError(f"dimension mismatch: {gt.shape} vs {pred.shape}")


def moving_mask(m: MoMap, cfg: MetricConfig = MetricConfig()) -> np.ndarray:
    """Covered pixels whose max displacement from the reference position exceeds the threshold."""
    disp = np.linalg.norm(m.positions - m.positions[:, :, :1], axis=-1)
    disp = np.where(m.valid, disp, 0.0)
    return m.covered & (disp.max(axis=2) > cfg.fg_threshold)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def fg_mask_iou(gt: MoMap, pred: MoMap, cfg: MetricConfig = MetricConfig()) -> float:
    _check_dims(gt, pred)
    return mask_iou(moving_mask(gt, cfg), moving_mask(pred, cfg))


# ---------------------------------------------------------------------------
# DTW


def dtw_batch(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched DTW between sequences ``a`` (P, n, D) and ``b`` (P, m, D).

    Steps (1,0), (0,1), (1,1); both endpoints matched; local cost is the
    Euclidean distance.  Returns the minimum total cost and the length
    (number of matched pairs) of the optimal path.  Among equal-cost
    paths the longest is taken.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    P, n, _ = a.shape
    m = b.shape[1]
    # pixel axis last so each anti-diagonal gathers contiguous rows
    d = np.linalg.norm(a.transpose(1, 0, 2)[:, None] - b.transpose(1, 0, 2)[None], axis=-1)  # (n, m, P)
    cost = np.full((n + 1, m + 1, P), np.inf)
    length = np.zeros((n + 1, m + 1, P), dtype=np.int64)
    cost[0, 0] = 0.0
    for k in range(2, n + m + 1):
        i = np.arange(max(1, k - m), min(n, k - 1) + 1)
        j = k - i
        c_diag, c_up, c_left = cost[i - 1, j - 1], cost[i - 1, j], cost[i, j - 1]
        l_diag, l_up, l_left = length[i - 1, j - 1], length[i - 1, j], length[i, j - 1]
        best = np.minimum(np.minimum(c_diag, c_up), c_left)
        best_len = np.maximum(
            np.maximum(np.where(c_diag == best, l_diag, -1), np.where(c_up == best, l_up, -1)),
            np.where(c_left == best, l_left, -1),
        )
        cost[i, j] = best + d[i - 1, j - 1]
        length[i, j] = best_len + 1
    return cost[n, m], length[n, m]


def dtw_score(a: np.ndarray, b: np.ndarray) -> float:
    """Mean matched-pair distance along the optimal alignment of two (T, 3) sequences."""
    c, L = dtw_batch(np.asarray(a)[None], np.asarray(b)[None])
    return float(c[0] / L[0])


def _mean(values: np.ndarray) -> float:
    # math.fsum keeps the reduction independent of summation order
    return math.fsum(values.tolist()) / len(values) if len(values) else NA


def ate_dtw(gt: MoMap, pred: MoMap, cfg: MetricConfig = MetricConfig(), fg: np.ndarray | None = None) -> float:
    _check_dims(gt, pred)
    fg = moving_mask(gt, cfg) if fg is None else fg
    if not fg.any():
        return NA
    c, L = dtw_batch(gt.positions[fg], pred.positions[fg])
    return _mean(c / L)


def ate(gt: MoMap, pred: MoMap, cfg: MetricConfig = MetricConfig(), fg: np.ndarray | None = None) -> float:
    """Mean per-frame Euclidean error over the foreground without temporal alignment."""
    _check_dims(gt, pred)
    fg = moving_mask(gt, cfg) if fg is None else fg
    if not fg.any():
        return NA
    err = np.linalg.norm(gt.positions[fg] - pred.positions[fg], axis=-1).mean(axis=1)
    return _mean(err)


# ---------------------------------------------------------------------------
# distance-matrix signature


def distance_matrices(traj: np.ndarray) -> np.ndarray:
    """(P, T, 3) trajectories -> (P, T, T) intra-trajectory distance matrices."""
    diff = traj[:, :, None, :] - traj[:, None, :, :]
    return np.sqrt(np.einsum("ptsk,ptsk->pts", diff, diff))


def _dsig_scores(gt_traj: np.ndarray, pred_traj: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = np.empty(len(gt_traj))
    for s in range(0, len(gt_traj), chunk):
        dg = distance_matrices(gt_traj[s : s + chunk])
        dp = distance_matrices(pred_traj[s : s + chunk])
        out[s : s + chunk] = np.abs(dg - dp).mean(axis=(1, 2))
    return out


def d_sig(gt: MoMap, pred: MoMap, cfg: MetricConfig = MetricConfig(), fg: np.ndarray | None = None) -> float:
    _check_dims(gt, pred)
    fg = moving_mask(gt, cfg) if fg is None else fg
    if not fg.any():
        return NA
    return _mean(_dsig_scores(gt.positions[fg], pred.positions[fg]))


# ---------------------------------------------------------------------------
# local distance difference


def knn_pairs(points: np.ndarray, k: int) -> np.ndarray:
    """Directed (p, q) pairs: each point to its ``k`` nearest other points."""
    n = len(points)
    if n < k + 1:
        raise MetricError(f"need at least {k + 1} foreground pixels for K={k}, have {n}")
    _, nbr = cKDTree(points).query(points, k=k + 1)
    src = np.repeat(np.arange(n), k)
    dst = nbr[:, 1:].ravel()
    return np.stack([src, dst], axis=1)


def local_dist_diff(
    gt: MoMap, pred: MoMap, cfg: MetricConfig = MetricConfig(), fg: np.ndarray | None = None
) -> float:
    _check_dims(gt, pred)
    fg = moving_mask(gt, cfg) if fg is None else fg
    if not fg.any():
        return NA
    g = gt.positions[fg]
    p = pred.positions[fg]
    pairs = knn_pairs(g[:, 0], cfg.knn)
    return _local_dist_diff(g, p, pairs)


def _local_dist_diff(g: np.ndarray, p: np.ndarray, pairs: np.ndarray) -> float:
    a, b = pairs[:, 0], pairs[:, 1]
    dg = np.linalg.norm(g[a] - g[b], axis=-1)
    dp = np.linalg.norm(p[a] - p[b], axis=-1)
    return _mean(np.abs(dp - dg).mean(axis=1))


# ---------------------------------------------------------------------------
# patch nearest accuracy


def patch_centroids(m: MoMap, seg: SegMap, ids: np.ndarray) -> np.ndarray:
    """(len(ids), T, 3) centroids over each patch's valid member pixels (NaN if none)."""
    lab = seg.ids.ravel()
    pos = m.positions.reshape(-1, m.frames, 3)
    val = m.valid.reshape(-1, m.frames)
    out = np.empty((len(ids), m.frames, 3))
    for k, pid in enumerate(ids):
        sel = lab == pid
        w = val[sel].astype(np.float64)
        cnt = w.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            out[k] = np.einsum("nt,ntk->tk", w, pos[sel]) / cnt[:, None]
    return out


def nearest_patch(centroids: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """For (P, T, 3) centroids, the id of each patch's nearest other patch per frame.

    Ties go to the smaller id (``ids`` must be sorted ascending).
    """
    d = np.linalg.norm(centroids[:, None] - centroids[None], axis=-1)  # (P, P, T)
    d = np.where(np.isnan(d), np.inf, d)
    idx = np.arange(len(ids))
    d[idx, idx] = np.inf
    return np.asarray(ids)[np.argmin(d, axis=1)]  # (P, T); argmin picks the first minimum


def moving_patches(gt_fg: np.ndarray, seg: SegMap, ids: np.ndarray) -> np.ndarray:
    """Boolean per id: strict majority of the patch's pixels lie in the moving mask."""
    out = np.zeros(len(ids), dtype=bool)
    for k, pid in enumerate(ids):
        sel = seg.ids == pid
        out[k] = 2 * np.count_nonzero(gt_fg & sel) > np.count_nonzero(sel)
    return out


def patch_nearest_acc(
    gt: MoMap, pred: MoMap, seg: SegMap, cfg: MetricConfig = MetricConfig(), fg: np.ndarray | None = None
) -> float:
    _check_dims(gt, pred)
    if seg.ids.shape != (gt.height, gt.width):
        raise MetricError(f"SegMap {seg.ids.shape} not aligned with MoMap {(gt.height, gt.width)}")
    ids = seg.patch_ids()
    if len(ids) < 2:
        raise MetricError(f"patch_nearest_acc needs at least 2 patches, have {len(ids)}")
    fg = moving_mask(gt, cfg) if fg is None else fg
    moving = moving_patches(fg, seg, ids)
    if not moving.any():
        return NA
    ng = nearest_patch(patch_centroids(gt, seg, ids), ids)[moving]
    npred = nearest_patch(patch_centroids(pred, seg, ids), ids)[moving]
    return np.count_nonzero(ng == npred) / ng.size


# ---------------------------------------------------------------------------
# quantized direction accuracy


def direction_labels(traj: np.ndarray, dt: int, eps: float) -> np.ndarray:
    """Per-axis labels in {-1, 0, +1} of displacements over ``dt`` frames.

    A component with magnitude <= ``eps`` is "stay" (0).
    """
    disp = traj[:, dt:] - traj[:, :-dt]
    lab = np.sign(disp).astype(np.int8)
    lab[np.abs(disp) <= eps] = 0
    return lab


def quantize_acc(
    gt: MoMap,
    pred: MoMap,
    dt: int,
    cfg: MetricConfig = MetricConfig(),
    fg: np.ndarray | None = None,
    joint: bool = False,
) -> float:
    """Fraction of (pixel, start time, axis) direction labels that agree.

    With ``joint=True`` the three axis labels form one of 27 cells and a
    (pixel, start time) counts only if all three agree.
    """
    _check_dims(gt, pred)
    if not 1 <= dt < gt.frames:
        raise MetricError(f"dt must lie in [1, {gt.frames - 1}], got {dt}")
    fg = moving_mask(gt, cfg) if fg is None else fg
    if not fg.any():
        return NA
    lg = direction_labels(gt.positions[fg], dt, cfg.quantize_eps)
    lp = direction_labels(pred.positions[fg], dt, cfg.quantize_eps)
    agree = lg == lp
    if joint:
        agree = agree.all(axis=-1)
    return np.count_nonzero(agree) / agree.size


# ---------------------------------------------------------------------------
# best-of-N

HIGHER_IS_BETTER = {
    "fg_mask_iou": True,
    "ate_dtw": False,
    "D_sig": False,
    "local_dist_diff": False,
    "patch_nearest_acc": True,
}


def metric_names(cfg: MetricConfig) -> list[str]:
    return list(HIGHER_IS_BETTER) + [f"quantize_acc_{dt}" for dt in cfg.dt_values]


def higher_is_better(name: str) -> bool:
    return HIGHER_IS_BETTER.get(name, True)


@dataclass
class GroundTruthContext:
    """Quantities that depend only on the ground truth, shared across candidates."""

    gt: MoMap
    seg: SegMap | None
    cfg: MetricConfig
    fg: np.ndarray = field(init=False)
    pairs: np.ndarray | None = field(init=False)
    patch_ids: np.ndarray | None = field(init=False)
    moving: np.ndarray | None = field(init=False)
    gt_nearest: np.ndarray | None = field(init=False)

    def __post_init__(self):
        self.fg = moving_mask(self.gt, self.cfg)
        g = self.gt.positions[self.fg]
        self.pairs = knn_pairs(g[:, 0], self.cfg.knn) if len(g) >= self.cfg.knn + 1 else None
        self.patch_ids = self.moving = self.gt_nearest = None
        if self.seg is not None:
            if self.seg.ids.shape != (self.gt.height, self.gt.width):
                raise MetricError("SegMap not aligned with ground truth")
            ids = self.seg.patch_ids()
            if len(ids) >= 2:
                self.patch_ids = ids
                self.moving = moving_patches(self.fg, self.seg, ids)
                self.gt_nearest = nearest_patch(patch_centroids(self.gt, self.seg, ids), ids)[self.moving]


def evaluate(gt: MoMap, pred: MoMap, seg: SegMap | None = None, cfg: MetricConfig = MetricConfig(),
             ctx: GroundTruthContext | None = None) -> dict[str, float]:
    """All metrics for a single candidate; inapplicable ones are NaN."""
    _check_dims(gt, pred)
    ctx = GroundTruthContext(gt, seg, cfg) if ctx is None else ctx
    fg = ctx.fg
    out = {"fg_mask_iou": mask_iou(fg, moving_mask(pred, cfg))}
    if fg.any():
        g = gt.positions[fg]
        p = pred.positions[fg]
        c, L = dtw_batch(g, p)
        out["ate_dtw"] = _mean(c / L)
        out["D_sig"] = _mean(_dsig_scores(g, p))
        out["local_dist_diff"] = _local_dist_diff(g, p, ctx.pairs) if ctx.pairs is not None else NA
    else:
        out["ate_dtw"] = out["D_sig"] = out["local_dist_diff"] = NA
    if ctx.patch_ids is not None and ctx.moving.any():
        npred = nearest_patch(patch_centroids(pred, ctx.seg, ctx.patch_ids), ctx.patch_ids)[ctx.moving]
        out["patch_nearest_acc"] = np.count_nonzero(ctx.gt_nearest == npred) / npred.size
    else:
        out["patch_nearest_acc"] = NA
    for dt in cfg.dt_values:
        key = f"quantize_acc_{dt}"
        out[key] = quantize_acc(gt, pred, dt, cfg, fg=fg) if dt < gt.frames else NA
    return {k: float(v) for k, v in out.items()}


@dataclass
class MetricReport:
    """Best value per metric over the candidates, and which candidate achieved it."""

    values: dict[str, float]
    selected: dict[str, int | None]
    per_candidate: list[dict[str, float]]

    def to_dict(self) -> dict:
        def clean(v):
            return None if v is None or (isinstance(v, float) and math.isnan(v)) else v

        return {
            "metrics": {k: clean(v) for k, v in self.values.items()},
            "selected": dict(self.selected),
            "n_candidates": len(self.per_candidate),
            "per_candidate": [{k: clean(v) for k, v in row.items()} for row in self.per_candidate],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def table(self) -> str:
        """Aligned text table, one row per metric with direction arrow and selected index."""
        width = max(len(k) for k in self.values) + 2
        lines = [f"{'metric':<{width}}  {'best':>10}  sample"]
        for k, v in self.values.items():
            arrow = "↑" if higher_is_better(k) else "↓"
            val = "n/a" if math.isnan(v) else f"{v:.4f}"
            idx = self.selected[k]
            lines.append(f"{k + arrow:<{width}}  {val:>10}  {'-' if idx is None else idx}")
        return "\n".join(lines)


def select_best(per_candidate: list[dict[str, float]], names: list[str]) -> tuple[dict, dict]:
    """Per-metric best over candidates; first index wins ties, NaN entries are skipped."""
    values, selected = {}, {}
    for name in names:
        best, best_i = NA, None
        hi = higher_is_better(name)
        for i, row in enumerate(per_candidate):
            v = row[name]
            if math.isnan(v):
                continue
            if best_i is None or (v > best if hi else v < best):
                best, best_i = v, i
        values[name] = best
        selected[name] = best_i
    return values, selected


def evaluate_best_of_n(
    gt: MoMap,
    candidates: list[MoMap],
    seg: SegMap | None = None,
    cfg: MetricConfig = MetricConfig(),
    threads: int = 1,
) -> MetricReport:
    """Score every candidate and keep, per metric, the one closest to ``gt``."""
    if not candidates:
        raise MetricError("empty candidate list")
    for c in candidates:
        _check_dims(gt, c)
    ctx = GroundTruthContext(gt, seg, cfg)
    if threads > 1 and len(candidates) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per = list(pool.map(lambda c: evaluate(gt, c, seg, cfg, ctx), candidates))
    else:
        per = [evaluate(gt, c, seg, cfg, ctx) for c in candidates]
    values, selected = select_best(per, metric_names(cfg))
    return MetricReport(values, selected, per)

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from momap.core import MoMap, RigidTransform, SegMap, apply_rigid
from momap.metrics import (
    MetricConfig,
    MetricError,
    ate,
    ate_dtw,
    d_sig,
    dtw_batch,
    evaluate,
    evaluate_best_of_n,
    fg_mask_iou,
    local_dist_diff,
    mask_iou,
    metric_names,
    moving_mask,
    nearest_patch,
    patch_nearest_acc,
    quantize_acc,
)
from momap.synth import generate, random_scene


def brute_dtw(a, b):
    """Exhaustive search over monotone endpoint-matched alignments.

    Returns (score, cost, length) of the min-cost path, longest path on exact ties.
    """
    n, m = len(a), len(b)
    best = [math.inf, -1]

    def walk(i, j, cost, length):
        cost = cost + float(np.linalg.norm(a[i] - b[j]))
        length += 1
        if i == n - 1 and j == m - 1:
            if cost < best[0] or (cost == best[0] and length > best[1]):
                best[0], best[1] = cost, length
            return
        if i + 1 < n and j + 1 < m:
            walk(i + 1, j + 1, cost, length)
        if i + 1 < n:
            walk(i + 1, j, cost, length)
        if j + 1 < m:
            walk(i, j + 1, cost, length)

    walk(0, 0, 0.0, 0)
    return best[0] / best[1], best[0], best[1]


def traj_momap(trajs):
    """(P, T, 3) trajectories laid out as a 1 x P MoMap."""
    trajs = np.asarray(trajs, dtype=float)
    return MoMap(trajs[None], np.ones(trajs.shape[:2], bool)[None])


def test_moving_mask_static_and_threshold(small_scene):
    _, m, _, _ = small_scene
    static = m.replace(positions=np.repeat(m.positions[:, :, :1], m.frames, axis=2))
    assert not moving_mask(static).any()
    assert not moving_mask(m, MetricConfig(fg_threshold=100.0)).any()


def test_iou_cases(small_scene):
    _, m, _, _ = small_scene
    assert fg_mask_iou(m, m) == 1.0
    a = np.zeros((4, 4), bool)
    b = np.zeros((4, 4), bool)
    a[0, :2] = True
    b[1, :2] = True
    assert mask_iou(a, b) == 0.0
    assert mask_iou(a & False, b & False) == 1.0


def test_iou_half_overlap():
    k = 3
    a = np.zeros((4, 8), bool)
    b = np.zeros((4, 8), bool)
    a.ravel()[: 2 * k] = True
    b.ravel()[k : 3 * k] = True
    sa = set(np.flatnonzero(a))
    sb = set(np.flatnonzero(b))
    assert mask_iou(a, b) == len(sa & sb) / len(sa | sb) == pytest.approx(1 / 3)


def test_dtw_identity_and_offset():
    rng = np.random.default_rng(0)
    T = 12
    # motion in the xy-plane, offset along z: every matched pair is at least d apart
    xy = np.cumsum(rng.normal(0, 0.3, (5, T, 2)), axis=1)
    gt = np.concatenate([xy, np.zeros((5, T, 1))], axis=2)
    d = 0.37
    pred = gt + [0.0, 0.0, d]
    g, p = traj_momap(gt), traj_momap(pred)
    cfg = MetricConfig(fg_threshold=1e-3)
    assert ate_dtw(g, g, cfg) == 0.0
    assert ate_dtw(g, p, cfg) == pytest.approx(d, abs=1e-12)


def test_dtw_half_speed():
    t = np.arange(5, dtype=float)
    gt = np.stack([t, 0 * t, 0 * t], axis=1)
    slow = gt[[0, 0, 1, 1, 2]]  # half speed by duplication
    c, L = dtw_batch(gt[None], slow[None])
    score, cost, length = brute_dtw(gt, slow)
    assert c[0] == cost and L[0] == length
    assert ate_dtw(traj_momap([gt]), traj_momap([slow]), MetricConfig()) == pytest.approx(score, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_dtw_matches_enumeration_any_lengths(n, m, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n, 3))
    b = rng.normal(size=(m, 3))
    c, L = dtw_batch(a[None], b[None])
    score, cost, length = brute_dtw(a, b)
    assert abs(c[0] / L[0] - score) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ate_dtw_bounded_by_plain_ate(seed):
    rng = np.random.default_rng(seed)
    gt = np.cumsum(rng.normal(0, 0.2, (6, 15, 3)), axis=1)
    pred = gt + rng.normal(0, 0.3, gt.shape)
    g, p = traj_momap(gt), traj_momap(pred)
    cfg = MetricConfig(fg_threshold=1e-6)
    assert ate_dtw(g, p, cfg) <= ate(g, p, cfg) + 1e-12


def test_dsig_identity_and_rigid(small_scene):
    _, m, _, _ = small_scene
    assert d_sig(m, m) == 0.0
    g = RigidTransform(Rotation.from_euler("xyz", [0.3, -1.1, 2.0]).as_matrix(), [1.0, -2.0, 0.5])
    assert d_sig(m, apply_rigid(m, g)) < 1e-9


def test_dsig_hand_example():
    gt = traj_momap([[[0, 0, 0], [0, 0, 0]]])
    pred = traj_momap([[[0, 0, 0], [1, 0, 0]]])
    # D_gt = 0, D_pred = [[0,1],[1,0]]: mean abs diff 2/4 (gt foreground given explicitly: gt is static)
    assert d_sig(gt, pred, fg=np.ones((1, 1), bool)) == 0.5
    assert math.isnan(d_sig(gt, pred))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dsig_invariant_to_moving_pred(seed):
    rng = np.random.default_rng(seed)
    gt = traj_momap(np.cumsum(rng.normal(0, 0.2, (8, 10, 3)), axis=1))
    pred = traj_momap(np.cumsum(rng.normal(0, 0.2, (8, 10, 3)), axis=1))
    g = RigidTransform(Rotation.random(random_state=seed % 2**31).as_matrix(), rng.normal(0, 5, 3))
    cfg = MetricConfig(fg_threshold=1e-6)
    assert abs(d_sig(gt, apply_rigid(pred, g), cfg) - d_sig(gt, pred, cfg)) < 1e-9


def brute_knn_pairs(points, k):
    d = np.linalg.norm(points[:, None] - points[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    return [(p, q) for p in range(len(points)) for q in np.argsort(d[p], kind="stable")[:k]]


def test_local_dist_diff_scale():
    rng = np.random.default_rng(2)
    gt = np.cumsum(rng.normal(0, 0.3, (20, 6, 3)), axis=1)
    g, p = traj_momap(gt), traj_momap(2.0 * gt)
    cfg = MetricConfig(fg_threshold=1e-6, knn=4)
    assert moving_mask(g, cfg).all()
    pairs = brute_knn_pairs(gt[:, 0], 4)
    expected = np.mean([np.linalg.norm(gt[a, t] - gt[b, t]) for a, b in pairs for t in range(6)])
    assert local_dist_diff(g, g, cfg) == 0.0
    assert local_dist_diff(g, p, cfg) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_local_dist_diff_noise_worse_than_rigid(seed):
    rng = np.random.default_rng(seed)
    gt = np.cumsum(rng.normal(0, 0.2, (40, 8, 3)), axis=1)
    g = traj_momap(gt)
    sigma = 0.05
    noisy = traj_momap(gt + rng.normal(0, sigma, gt.shape))
    # a pure translation with the same mean per-frame error as the noisy prediction
    err = ate(g, noisy, MetricConfig(fg_threshold=1e-6))
    rigid = apply_rigid(g, RigidTransform(np.eye(3), [err, 0, 0]))
    cfg = MetricConfig(fg_threshold=1e-6)
    assert local_dist_diff(g, noisy, cfg) > local_dist_diff(g, rigid, cfg)


def test_local_dist_diff_too_few():
    gt = traj_momap(np.cumsum(np.ones((3, 4, 3)), axis=1))
    with pytest.raises(MetricError):
        local_dist_diff(gt, gt, MetricConfig(knn=8))


def test_nearest_patch_collinear_example():
    ids = np.array([1, 2, 3])
    gt = np.array([[0.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0]])[:, None]
    pred = np.array([[0.0, 0, 0], [2.5, 0, 0], [3.0, 0, 0]])[:, None]
    assert nearest_patch(gt, ids)[1, 0] == 1  # gap 1 < 2
    assert nearest_patch(pred, ids)[1, 0] == 3  # gap 0.5 < 2.5


def test_nearest_patch_ties_smaller_id():
    ids = np.array([1, 2, 3])
    c = np.array([[-1.0, 0, 0], [0.0, 0, 0], [1.0, 0, 0]])[:, None]
    assert nearest_patch(c, ids)[1, 0] == 1


def _patch_scene(pred_x_mid, gt_x_mid, T=4):
    """Three 2x2 patches on a row; middle patch x-centroid follows the given per-frame values."""
    H, W = 2, 6
    seg = SegMap(np.repeat(np.array([[1, 1, 2, 2, 3, 3]]), 2, axis=0))

    def build(xmid):
        pos = np.zeros((H, W, T, 3))
        pos[:, 0:2, :, 0] = 0.0
        pos[:, 4:6, :, 0] = 3.0
        pos[:, 2:4, :, 0] = np.asarray(xmid)[None, None, :]
        pos[..., 2] = 2.0
        return MoMap(pos, np.ones((H, W, T), bool))

    return build(gt_x_mid), build(pred_x_mid), seg


def test_patch_nearest_acc_cases():
    gt, pred, seg = _patch_scene([1.0, 2.5, 2.5, 2.5], [1.0, 1.1, 1.2, 1.3])
    assert patch_nearest_acc(gt, gt, seg) == 1.0
    # only the middle patch moves in gt; its nearest is patch 1 in gt at every t, patch 3 in pred for t >= 1
    assert patch_nearest_acc(gt, pred, seg) == 0.25


def test_patch_nearest_two_patches():
    rng = np.random.default_rng(0)
    pos = np.cumsum(rng.normal(0, 0.5, (2, 4, 5, 3)), axis=2)
    gt = MoMap(pos, np.ones((2, 4, 5), bool))
    pred = MoMap(pos + rng.normal(0, 3, pos.shape), np.ones((2, 4, 5), bool))
    seg = SegMap(np.repeat(np.array([[1, 1, 2, 2]]), 2, axis=0))
    assert patch_nearest_acc(gt, pred, seg, MetricConfig(fg_threshold=1e-6)) == 1.0
    with pytest.raises(MetricError):
        patch_nearest_acc(gt, pred, SegMap(np.ones((2, 4), int)))


def _pair(gt_disp, pred_disp, T=2):
    g = np.zeros((1, T, 3))
    p = np.zeros((1, T, 3))
    g[0, 1] = gt_disp
    p[0, 1] = pred_disp
    return traj_momap(g), traj_momap(p)


def test_quantize_cases():
    cfg = MetricConfig(quantize_eps=0.02, fg_threshold=1e-3)
    g, p = _pair([0.5, 0.01, -0.01], [-0.5, 0.0, 0.015])
    assert quantize_acc(g, p, 1, cfg) == pytest.approx(2 / 3)
    assert quantize_acc(g, g, 1, cfg) == 1.0
    fg = np.ones((1, 1), bool)
    g, p = _pair([0.01, 0.0, -0.02], [-0.02, 0.015, 0.0])
    assert quantize_acc(g, p, 1, cfg, fg=fg) == 1.0  # all within (closed) stay band
    g, p = _pair([0.5, 0.5, 0.0], [0.5, -0.5, 0.0])
    assert quantize_acc(g, p, 1, cfg, joint=True) == 0.0
    with pytest.raises(MetricError):
        quantize_acc(g, p, 2, cfg)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 2, 5]))
def test_quantize_symmetric(seed, dt):
    rng = np.random.default_rng(seed)
    a = traj_momap(np.cumsum(rng.normal(0, 0.05, (10, 8, 3)), axis=1))
    b = traj_momap(np.cumsum(rng.normal(0, 0.05, (10, 8, 3)), axis=1))
    fg = np.ones((1, 10), bool)
    assert quantize_acc(a, b, dt, fg=fg) == quantize_acc(b, a, dt, fg=fg)


def test_dimension_mismatch():
    a = traj_momap(np.zeros((2, 4, 3)))
    b = traj_momap(np.zeros((3, 4, 3)))
    with pytest.raises(MetricError):
        fg_mask_iou(a, b)


# ---------------------------------------------------------------------------
# best-of-N


@pytest.fixture(scope="module")
def scene():
    m, seg, _ = generate(random_scene(3, 24, 24, 20))
    return m, seg


def corrupt(m, rng, sigma):
    return m.replace(positions=m.positions + rng.normal(0, sigma, m.positions.shape))


def test_single_candidate(scene):
    m, seg = scene
    c = corrupt(m, np.random.default_rng(0), 0.05)
    rep = evaluate_best_of_n(m, [c], seg)
    assert rep.values == evaluate(m, c, seg)
    assert all(v == 0 for v in rep.selected.values())


def test_gt_candidate_wins(scene):
    m, seg = scene
    rep = evaluate_best_of_n(m, [m, corrupt(m, np.random.default_rng(1), 0.1)], seg)
    assert all(i == 0 for i in rep.selected.values())
    assert rep.values["ate_dtw"] == 0 and rep.values["fg_mask_iou"] == 1.0


def test_best_of_ten_brute_force_and_dominance(scene):
    m, seg = scene
    rng = np.random.default_rng(7)
    cands = [corrupt(m, rng, s) for s in rng.uniform(0.01, 0.3, 10)]
    cfg = MetricConfig()
    rep = evaluate_best_of_n(m, cands, seg, cfg)
    rows = [evaluate(m, c, seg, cfg) for c in cands]
    for name in metric_names(cfg):
        col = [r[name] for r in rows]
        hi = name in ("fg_mask_iou", "patch_nearest_acc") or name.startswith("quantize")
        best = max(col) if hi else min(col)
        assert rep.values[name] == best
        assert col[rep.selected[name]] == best
    rep11 = evaluate_best_of_n(m, cands + [corrupt(m, rng, 0.02)], seg, cfg)
    for name in metric_names(cfg):
        hi = name in ("fg_mask_iou", "patch_nearest_acc") or name.startswith("quantize")
        assert (rep11.values[name] >= rep.values[name]) if hi else (rep11.values[name] <= rep.values[name])


def test_threads_do_not_change_report(scene):
    m, seg = scene
    rng = np.random.default_rng(3)
    cands = [corrupt(m, rng, 0.1) for _ in range(4)]
    a = evaluate_best_of_n(m, cands, seg, threads=1).to_json()
    b = evaluate_best_of_n(m, cands, seg, threads=4).to_json()
    assert a == b


def test_not_applicable_on_static_gt():
    pos = np.repeat(np.random.default_rng(0).normal(size=(4, 4, 1, 3)), 6, axis=2)
    gt = MoMap(pos, np.ones((4, 4, 6), bool))
    rep = evaluate_best_of_n(gt, [gt], SegMap(np.zeros((4, 4), int)))
    assert math.isnan(rep.values["ate_dtw"]) and rep.selected["ate_dtw"] is None
    d = json.loads(rep.to_json())
    assert d["metrics"]["ate_dtw"] is None and d["metrics"]["fg_mask_iou"] == 1.0
    assert "ate_dtw↓" in rep.table() and "n/a" in rep.table()


def test_empty_candidates(scene):
    with pytest.raises(MetricError):
        evaluate_best_of_n(scene[0], [], scene[1])

import numpy as np
import pytest

from momap.core import Camera, MoMap
from momap.infill import InfillConfig, InfillError, energy_and_gradient, infill, knn_edges
from momap.synth import LinearMotion, RigidBodySpec, SceneSpec, ScrewMotion, generate, occlude, random_intervals


def second_difference(T):
    D = np.zeros((T - 2, T))
    for t in range(T - 2):
        D[t, t : t + 3] = [1.0, -2.0, 1.0]
    return D


def qp_oracle(traj, known):
    """Minimize |D x|^2 over the hidden entries of one trajectory by least squares."""
    D = second_difference(len(traj))
    free = ~known
    A = D[:, free]
    b = -D[:, known] @ traj[known]
    sol, *_ = np.linalg.lstsq(A, b, rcond=None)
    out = traj.copy()
    out[free] = sol
    return out


def one_pixel(traj, known):
    traj = np.asarray(traj, dtype=float)
    return MoMap(np.where(known[:, None], traj, 0.0)[None, None], known[None, None])


def fd_gradient(m, free, cfg, h=1e-5):
    g = np.zeros(m.positions.shape)
    base = m.positions
    for idx in zip(*np.nonzero(free)):
        for a in range(3):
            plus = base.copy()
            minus = base.copy()
            plus[idx + (a,)] += h
            minus[idx + (a,)] -= h
            ep, _ = energy_and_gradient(m.replace(positions=plus), free, cfg)
            em, _ = energy_and_gradient(m.replace(positions=minus), free, cfg)
            g[idx + (a,)] = (ep - em) / (2 * h)
    return g


def test_no_occlusion_is_identity():
    m, _, _ = generate(SceneSpec(8, 8, 5, Camera.static(10, 10, 3.5, 3.5, 5),
                                 (RigidBodySpec(("rect", (1, 1, 5, 5)), 2.0, LinearMotion((0.2, 0, 0))),)))
    res = infill(m)
    assert res.momap == m
    assert res.iterations == 0
    assert res.energy >= 0


def test_zero_positions_zero_energy():
    m = MoMap(np.zeros((3, 3, 5, 3)), np.ones((3, 3, 5), bool))
    free = np.zeros((3, 3, 5), bool)
    free[:, :, 2:] = True
    e, g = energy_and_gradient(m, free)
    assert e == 0.0
    assert not g.any()


@pytest.mark.parametrize("seed", range(20))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    H, W, T = 3, 3, 5
    m = MoMap(rng.normal(0, 0.5, (H, W, T, 3)), np.ones((H, W, T), bool))
    free = rng.random((H, W, T)) < 0.4
    free[:, :, 0] = False
    cfg = InfillConfig(w_accel=rng.uniform(0.5, 2), w_arap=rng.uniform(0.5, 2), knn=3)
    _, g = energy_and_gradient(m, free, cfg)
    g_fd = fd_gradient(m, free, cfg)
    rel = np.abs(g - g_fd).max() / np.abs(g_fd).max()
    assert rel < 1e-4
    assert not g[~free].any()


def test_energy_linear_in_accel_weight():
    rng = np.random.default_rng(3)
    m = MoMap(rng.normal(size=(2, 3, 6, 3)), np.ones((2, 3, 6), bool))
    free = np.ones((2, 3, 6), bool)
    e1, g1 = energy_and_gradient(m, free, InfillConfig(w_accel=1.0, w_arap=0.0))
    e2, g2 = energy_and_gradient(m, free, InfillConfig(w_accel=2.0, w_arap=0.0))
    assert e2 == 2 * e1
    np.testing.assert_array_equal(g2, 2 * g1)


def test_isolated_pixel_affine_recovery():
    T = 5
    traj = np.stack([np.arange(T, dtype=float), np.zeros(T), np.zeros(T)], axis=1)
    known = np.array([True, False, False, False, True])
    expected = qp_oracle(traj, known)
    np.testing.assert_allclose(expected, traj, atol=1e-12)  # oracle agrees with linear interpolation
    res = infill(one_pixel(traj, known), InfillConfig(w_arap=0.0))
    np.testing.assert_allclose(res.momap.positions[0, 0], traj, atol=1e-5)
    assert res.momap.valid.all()


def test_isolated_pixel_nonaffine_matches_qp():
    # quadratic in time: the optimum is not linear interpolation
    T = 9
    t = np.arange(T, dtype=float)
    traj = np.stack([0.02 * t**2, 0.1 * t, -0.01 * t**2], axis=1)
    known = np.array([1, 1, 0, 0, 0, 1, 0, 0, 1], bool)
    expected = qp_oracle(traj, known)
    res = infill(one_pixel(traj, known), InfillConfig(w_arap=0.0, max_iters=5000, grad_tol=1e-10))
    np.testing.assert_allclose(res.momap.positions[0, 0], expected, atol=1e-6)


def test_isolated_pixel_trailing_gap_extends_line():
    T = 6
    traj = np.stack([0.3 * np.arange(T), np.ones(T), np.zeros(T)], axis=1)
    known = np.array([1, 1, 1, 0, 0, 0], bool)
    res = infill(one_pixel(traj, known), InfillConfig(w_arap=0.0))
    np.testing.assert_allclose(res.momap.positions[0, 0], traj, atol=1e-9)


def test_pixel_without_anchor_rejected():
    valid = np.ones((1, 2, 3), bool)
    valid[0, 1] = False
    with pytest.raises(InfillError):
        infill(MoMap(np.zeros((1, 2, 3, 3)), valid))


def rigid_body_scene(motion, H=32, W=32, T=50):
    # body of 0.2 m extent: 10 px at f=100 px and 2 m depth
    cam = Camera.static(100.0, 100.0, (W - 1) / 2, (H - 1) / 2, T)
    body = RigidBodySpec(("rect", (11, 11, 21, 21)), 2.0, motion)
    return generate(SceneSpec(H, W, T, cam, (body,), background_depth=5.0, time_step=1.0))[0]


def test_rigid_body_recovery_and_monotone_energy():
    m = rigid_body_scene(LinearMotion((0.1, 0.0, 0.0)))
    occ = occlude(m, random_intervals(m, 0.4, seed=5))
    res = infill(occ)
    err = np.linalg.norm(res.momap.positions - m.positions, axis=-1).max()
    assert err < 1e-2
    assert all(b <= a for a, b in zip(res.history, res.history[1:]))
    # hard constraints are bit-identical
    np.testing.assert_array_equal(res.momap.positions[occ.valid], occ.positions[occ.valid])
    assert res.momap.valid.all()


def _drift(out, truth, hidden, body):
    """Mean |d_pq(t) - d_pq(0)| over body point pairs where p is hidden at t."""
    idx = np.flatnonzero(body.ravel())
    x = out.positions.reshape(-1, out.frames, 3)[idx]
    hid = hidden.reshape(-1, out.frames)[idx]
    edges = knn_edges(truth.positions.reshape(-1, out.frames, 3)[idx, 0], 8)
    p, q = edges[:, 0], edges[:, 1]
    d = np.linalg.norm(x[p] - x[q], axis=-1)
    dev = np.abs(d - d[:, :1])
    sel = hid[p] | hid[q]
    return dev[sel].mean()


def test_rigidity_term_reduces_drift():
    m = rigid_body_scene(ScrewMotion((0.3, 0.2, 1.0), 0.15, 0.0, (0.0, 0.0, 2.0)), H=24, W=24, T=30)
    body = np.zeros((24, 24), bool)
    body[11:21, 11:21] = True
    occ = occlude(m, random_intervals(m, 0.5, seed=2, pixels=body))
    hidden = ~occ.valid
    with_arap = infill(occ, InfillConfig(w_arap=1.0), foreground=body)
    without = infill(occ, InfillConfig(w_arap=0.0), foreground=body)
    assert _drift(with_arap.momap, m, hidden, body) < _drift(without.momap, m, hidden, body)


def test_background_held_at_anchor():
    m = rigid_body_scene(LinearMotion((0.1, 0.0, 0.0)), H=16, W=16, T=8)
    occ = occlude(m, {(0, 0): [(2, 5)]})
    res = infill(occ)
    np.testing.assert_array_equal(res.momap.positions[0, 0], np.repeat(m.positions[0, 0, :1], 8, axis=0))


def test_slow_pixel_is_not_pinned():
    # total motion of 0.01 m is small but real; the hidden entry must follow it
    T = 6
    traj = np.stack([0.002 * np.arange(T), np.zeros(T), np.full(T, 2.0)], axis=1)
    known = np.array([1, 1, 1, 0, 1, 1], bool)
    res = infill(one_pixel(traj, known))
    np.testing.assert_allclose(res.momap.positions[0, 0], traj, atol=1e-12)

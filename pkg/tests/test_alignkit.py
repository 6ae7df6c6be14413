"""Global alignment: losses, graph construction, solver recovery, exports."""

import json

import numpy as np
import pytest

from recx import alignkit as ak
from recx import scenegen as sg
from recx.rotation import matrix_to_quat, quat_angle, quat_to_matrix
from recx.scenegen import ConfidenceMap, NoiseModel, PointMap


def _pm(points, valid=None):
    points = np.asarray(points, dtype=np.float64)
    if valid is None:
        valid = np.ones(points.shape[:-1], dtype=bool)
    return PointMap(points, valid)


# ---------------------------------------------------------------------------
# pointmap_norm / pairwise_regression_loss
# ---------------------------------------------------------------------------

def test_pointmap_norm_two_points():
    a = _pm([[[2.0, 0.0, 0.0]]])
    b = _pm([[[0.0, 0.0, 4.0]]])
    assert ak.pointmap_norm([a, b]) == pytest.approx(3.0, abs=1e-15)


def test_pointmap_norm_all_origin():
    a = _pm(np.zeros((2, 3, 3)))
    assert ak.pointmap_norm([a]) == 0.0


def test_pointmap_norm_no_valid_points_raises():
    a = _pm(np.ones((2, 2, 3)), valid=np.zeros((2, 2), dtype=bool))
    with pytest.raises(ValueError):
        ak.pointmap_norm([a])


def test_pointmap_norm_matches_bruteforce():
    rng = np.random.default_rng(11)
    pts_a = rng.standard_normal((2, 2, 3))
    pts_b = rng.standard_normal((2, 2, 3))
    got = ak.pointmap_norm([_pm(pts_a), _pm(pts_b)])
    want = np.mean([np.linalg.norm(p) for p in
                    np.concatenate([pts_a.reshape(-1, 3), pts_b.reshape(-1, 3)])])
    assert got == pytest.approx(want, rel=1e-12)


def _loss_pair(pred_pts, gt_pts, w=None):
    pred = _pm(pred_pts)
    gt = _pm(gt_pts)
    if w is None:
        w = np.ones(pred_pts.shape[:-1])
    conf = ConfidenceMap(np.asarray(w, dtype=np.float64))
    return ak.pairwise_regression_loss(pred, pred, gt, gt, conf, conf)


def test_regression_loss_zero_when_equal():
    rng = np.random.default_rng(0)
    pts = rng.standard_normal((3, 4, 3)) + 3.0
    assert _loss_pair(pts, pts) == pytest.approx(0.0, abs=1e-14)


def test_regression_loss_uniform_scale_invariance():
    # the normalization cancels any positive rescaling of either side
    rng = np.random.default_rng(1)
    gt = rng.standard_normal((3, 4, 3)) + 3.0
    pred = gt + 0.1 * rng.standard_normal((3, 4, 3))
    base = _loss_pair(pred, gt)
    assert _loss_pair(2.0 * pred, gt) == pytest.approx(base, abs=1e-10)
    assert _loss_pair(pred, 7.5 * gt) == pytest.approx(base, abs=1e-10)
    assert _loss_pair(2.0 * gt, gt) == pytest.approx(0.0, abs=1e-10)


def test_regression_loss_offset_matches_direct_formula():
    rng = np.random.default_rng(2)
    gt = rng.standard_normal((2, 3, 3)) + 4.0
    pred = gt + np.array([0.3, -0.2, 0.1])
    w = rng.uniform(0.1, 1.0, (2, 3))
    got = _loss_pair(pred, gt, w)
    z_pred = np.mean(np.linalg.norm(pred.reshape(-1, 3), axis=1))
    z_gt = np.mean(np.linalg.norm(gt.reshape(-1, 3), axis=1))
    err = np.linalg.norm(pred / z_pred - gt / z_gt, axis=-1)
    want = (w * err).sum() / w.sum()
    assert got == pytest.approx(want, rel=1e-12)


def test_regression_loss_resolution_mismatch_raises():
    a = _pm(np.ones((2, 2, 3)))
    b = _pm(np.ones((3, 2, 3)))
    conf = ConfidenceMap(np.ones((2, 2)))
    with pytest.raises(Exception):
        ak.pairwise_regression_loss(a, a, b, b, conf, conf)


# ---------------------------------------------------------------------------
# graph construction
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def scene():
    return sg.generate_scene(5, "easy")


def test_build_graph_two_overlapping_views(scene):
    views = sg.sample_trajectory(scene, "interpolate", 2, seed=1)

    def source(i, j):
        return sg.simulate_pairwise_pointmaps(scene, views[i], views[j],
                                              NoiseModel(0.0, 0.0), seed=0)

    graph = ak.build_view_graph(2, source)
    assert len(graph.edges) == 1
    assert (graph.edges[0].i, graph.edges[0].j) == (0, 1)


def test_build_graph_chain_drops_far_pair(scene):
    # three orbit stops 90 degrees apart: the 180-degree end pair falls
    # under the overlap threshold, leaving a two-edge chain
    orbit = sg.sample_trajectory(scene, "orbit", 4, seed=9)
    chain = [orbit[0], orbit[1], orbit[2]]

    def source(i, j):
        return sg.simulate_pairwise_pointmaps(scene, chain[i], chain[j],
                                              NoiseModel(0.0, 0.0), seed=0)

    graph = ak.build_view_graph(3, source)
    assert sorted((e.i, e.j) for e in graph.edges) == [(0, 1), (1, 2)]


def test_build_graph_duplicate_view_full_overlap(scene):
    views = sg.sample_trajectory(scene, "orbit", 4, seed=9)

    def source(i, j):
        return sg.simulate_pairwise_pointmaps(scene, views[0], views[0],
                                              NoiseModel(0.0, 0.0), seed=0)

    graph = ak.build_view_graph(2, source)
    assert graph.edges[0].overlap == 1.0


def test_build_graph_disconnected_raises(scene):
    views = sg.sample_trajectory(scene, "orbit", 4, seed=9)

    def source(i, j):
        if (i, j) in ((0, 1), (2, 3)):
            return sg.simulate_pairwise_pointmaps(scene, views[i], views[j],
                                                  NoiseModel(0.0, 0.0), seed=0)
        raise sg.ZeroOverlapError(0.0)

    with pytest.raises(ak.GraphDisconnectedError) as exc:
        ak.build_view_graph(4, source)
    assert sorted(map(tuple, exc.value.components)) == [(0, 1), (2, 3)]


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def single_edge_graph(scene):
    va, vb = sg.sample_trajectory(scene, "interpolate", 2, seed=1)
    sim = sg.simulate_pairwise_pointmaps(scene, va, vb, NoiseModel(0.0, 0.0),
                                         seed=0)
    return ak.ViewGraph(2, [ak.Edge(0, 1, sim.pm_a, sim.pm_b,
                                    sim.conf_a, sim.conf_b)])


def test_align_single_edge_identity(single_edge_graph):
    res = ak.global_align(single_edge_graph, iters=50)
    t0 = res.transforms[0]
    assert res.loss < 1e-10
    assert quat_angle(t0.rotation, np.array([1.0, 0, 0, 0])) < 1e-6
    assert np.linalg.norm(t0.translation) < 1e-6
    assert t0.scale == pytest.approx(1.0, abs=1e-6)
    assert abs(np.linalg.norm(t0.rotation) - 1.0) < 1e-9
    assert np.all(np.diff(res.trace) <= 0)


def _transformed_edge_graph(scene, m):
    """Gauge edge (0,1) plus a probe edge (1,2) whose maps were pushed
    through the similarity ``m``, so the solver must recover it."""
    views = sg.sample_trajectory(scene, "interpolate", 3, seed=2)
    sim01 = sg.simulate_pairwise_pointmaps(scene, views[0], views[1],
                                           NoiseModel(0.0, 0.0), seed=0)
    sim12 = sg.simulate_pairwise_pointmaps(scene, views[1], views[2],
                                           NoiseModel(0.0, 0.0), seed=0)

    def push(pm):
        moved = m.apply(pm.points.reshape(-1, 3)).reshape(pm.points.shape)
        return PointMap(np.where(pm.valid[..., None], moved, 0.0),
                        pm.valid.copy())

    graph = ak.ViewGraph(3, [
        ak.Edge(0, 1, sim01.pm_a, sim01.pm_b, sim01.conf_a, sim01.conf_b),
        ak.Edge(1, 2, push(sim12.pm_a), push(sim12.pm_b),
                sim12.conf_a, sim12.conf_b),
    ])
    # the probe edge's maps are m-transformed view-1-frame coordinates; the
    # world frame is view 0's camera frame, so the optimum transform is
    # (cam0 <- cam1) composed with m^{-1}
    r_a, t_a = quat_to_matrix(views[0].qvec), views[0].tvec
    r_b, t_b = quat_to_matrix(views[1].qvec), views[1].tvec
    r_ab = r_a @ r_b.T
    t_ab = ak.EdgeTransform(matrix_to_quat(r_ab), t_a - r_ab @ t_b, 1.0)
    return graph, t_ab.compose(m.inverse())


def test_align_recovers_known_similarity(scene):
    rng = np.random.default_rng(3)
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    quat = np.array([np.cos(0.3), *(np.sin(0.3) * axis)])
    m = ak.EdgeTransform(quat, np.array([0.3, -0.2, 0.5]), 1.4)
    graph, expected = _transformed_edge_graph(scene, m)
    res = ak.global_align(graph, iters=500)
    got = res.transforms[1]
    assert quat_angle(got.rotation, expected.rotation) < 1e-3
    assert np.linalg.norm(got.translation - expected.translation) < 1e-3
    assert abs(got.scale - expected.scale) < 1e-3


@pytest.fixture(scope="module")
def ring(scene):
    views = sg.sample_trajectory(scene, "orbit", 5, seed=4)

    def source(i, j):
        return sg.simulate_pairwise_pointmaps(scene, views[i], views[j],
                                              NoiseModel(0.01, 0.0),
                                              seed=100 + 10 * i + j)

    graph = ak.build_view_graph(5, source)
    result = ak.global_align(graph, iters=800)
    return views, graph, result


def test_align_ring_error_below_noise(ring):
    views, graph, res = ring
    ref = views[graph.edges[0].i]
    errs, sigmas = [], []
    for v in range(5):
        render = sg.render_analytic(sg.generate_scene(5, "easy"), views[v])
        fused = res.cloud.view_points[v]
        both = fused.valid & render.pointmap.valid
        gt_world = render.pointmap.points[both]
        gt_ref = ref.cam_from_world(gt_world)
        errs.append(np.linalg.norm(fused.points[both] - gt_ref, axis=1))
        sigmas.append(0.01 * render.depth[both])
    errs = np.concatenate(errs)
    sigmas = np.concatenate(sigmas)
    rms = float(np.sqrt((errs ** 2).mean()))
    noise = float(np.sqrt((sigmas ** 2).mean()))
    assert rms < 3.0 * noise


def test_align_ring_trace_monotone(ring):
    _, _, res = ring
    assert np.all(np.diff(res.trace) <= 0)
    assert res.loss == res.trace[-1]


def test_align_gauge_symmetry_of_loss(ring):
    # rotating every pairwise input and transporting the state must leave
    # the objective bit-for-bit equal up to roundoff
    _, graph, _ = ring
    q0 = np.array([np.cos(0.4), 0.0, np.sin(0.4), 0.0])
    r0 = quat_to_matrix(q0)

    def rot_pm(pm):
        return PointMap(pm.points @ r0.T, pm.valid.copy())

    rotated = ak.ViewGraph(graph.n_views, [
        ak.Edge(e.i, e.j, rot_pm(e.pm_i), rot_pm(e.pm_j),
                e.conf_i, e.conf_j, e.overlap) for e in graph.edges])
    prob_a = ak._Problem(graph)
    prob_b = ak._Problem(rotated)
    n_e = len(graph.edges)
    rng = np.random.default_rng(0)
    quats = rng.standard_normal((n_e, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    trans = 0.3 * rng.standard_normal((n_e, 3))
    logs = 0.2 * rng.standard_normal(n_e)
    xs = prob_a.init_points(quats, trans, logs)
    loss_a = prob_a.loss(xs, quats, trans, logs)
    quats_b = np.array([matrix_to_quat(r0 @ quat_to_matrix(q) @ r0.T)
                        for q in quats])
    loss_b = prob_b.loss([x @ r0.T for x in xs], quats_b, trans @ r0.T, logs)
    assert abs(loss_a - loss_b) < 1e-9 * max(1.0, loss_a)


def test_align_gauge_end_to_end(scene):
    # a common pre-rotation of all inputs must not change the final loss
    rng = np.random.default_rng(5)
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    m = ak.EdgeTransform(np.array([np.cos(0.25), *(np.sin(0.25) * axis)]),
                         np.array([0.1, 0.2, -0.3]), 1.2)
    graph, _ = _transformed_edge_graph(scene, m)
    q0 = np.array([np.cos(0.7), np.sin(0.7), 0.0, 0.0])
    r0 = quat_to_matrix(q0)

    def rot_pm(pm):
        return PointMap(pm.points @ r0.T, pm.valid.copy())

    rotated = ak.ViewGraph(graph.n_views, [
        ak.Edge(e.i, e.j, rot_pm(e.pm_i), rot_pm(e.pm_j),
                e.conf_i, e.conf_j, e.overlap) for e in graph.edges])
    res_a = ak.global_align(graph, iters=500)
    res_b = ak.global_align(rotated, iters=500)
    assert abs(res_a.loss - res_b.loss) < 1e-8


def test_align_zero_confidence_pixels_inert(single_edge_graph):
    # a pixel whose confidence is zero must not influence anything, no
    # matter how absurd its predicted position is
    def variant(junk):
        e = single_edge_graph.edges[0]
        conf = e.conf_i.weights.copy()
        conf[7, 9] = 0.0
        pts = e.pm_i.points.copy()
        pts[7, 9] = junk
        edge = ak.Edge(0, 1, PointMap(pts, e.pm_i.valid.copy()),
                       e.pm_j, ConfidenceMap(conf), e.conf_j)
        return ak.global_align(ak.ViewGraph(2, [edge]), iters=30)

    res_a = variant(np.array([0.0, 0.0, 0.0]))
    res_b = variant(np.array([1e6, -1e6, 1e6]))
    assert res_a.loss == res_b.loss
    for t_a, t_b in zip(res_a.transforms, res_b.transforms):
        assert np.array_equal(t_a.rotation, t_b.rotation)
        assert np.array_equal(t_a.translation, t_b.translation)
    # and the zapped pixel is simply absent from the fused cloud
    assert not res_a.cloud.view_points[0].valid[7, 9]


def test_align_deterministic(single_edge_graph):
    res_a = ak.global_align(single_edge_graph, iters=40)
    res_b = ak.global_align(single_edge_graph, iters=40)
    assert res_a.loss == res_b.loss
    assert np.array_equal(res_a.trace, res_b.trace)


# ---------------------------------------------------------------------------
# exports
# ---------------------------------------------------------------------------

def test_cloud_ply_export(tmp_path, single_edge_graph):
    res = ak.global_align(single_edge_graph, iters=30)
    path = tmp_path / "cloud.ply"
    ak.save_cloud_ply(path, res.cloud)
    text = path.read_text().splitlines()
    assert text[0] == "ply"
    n = int(next(l for l in text if l.startswith("element vertex")).split()[-1])
    header_end = text.index("end_header")
    props = [l.split()[-1] for l in text[:header_end] if l.startswith("property")]
    assert props == ["x", "y", "z", "confidence"]
    body = text[header_end + 1:]
    assert len(body) == n
    pts, conf = res.cloud.merged()
    first = np.array(body[0].split(), dtype=np.float64)
    assert np.allclose(first[:3], pts[0], atol=1e-6)
    assert first[3] == pytest.approx(conf[0], abs=1e-6)


def test_cloud_ply_export_with_colors(tmp_path, single_edge_graph):
    res = ak.global_align(single_edge_graph, iters=30)
    pts, _ = res.cloud.merged()
    colors = np.tile([0.25, 0.5, 1.0], (pts.shape[0], 1))
    path = tmp_path / "cloud_rgb.ply"
    ak.save_cloud_ply(path, res.cloud, colors=colors)
    text = path.read_text().splitlines()
    header_end = text.index("end_header")
    props = [l.split()[-1] for l in text[:header_end] if l.startswith("property")]
    assert props == ["x", "y", "z", "confidence", "red", "green", "blue"]
    assert text[header_end + 1].split()[-3:] == ["64", "128", "255"]


def test_alignment_report_export(tmp_path, single_edge_graph):
    res = ak.global_align(single_edge_graph, iters=30)
    path = tmp_path / "report.json"
    ak.save_alignment_report(path, res)
    report = json.loads(path.read_text())
    assert report["n_views"] == 2
    assert report["n_edges"] == 1
    tr = report["transforms"][0]
    assert len(tr["rotation"]) == 4
    assert len(tr["translation"]) == 3
    assert tr["scale"] == pytest.approx(1.0, abs=1e-6)
    assert report["loss"] == pytest.approx(res.loss)

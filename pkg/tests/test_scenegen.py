"""Scene generation, analytic rendering, and the pairwise simulator."""

import numpy as np
import pytest

from recx import scenegen as sg
from recx.rotation import look_at, matrix_to_quat


def _single_sphere_scene(radius=0.5, albedo=(0.9, 0.2, 0.1)):
    prim = sg.Primitive("sphere", np.zeros(3), radius, np.array(albedo))
    return sg.SceneSpec(seed=0, difficulty="easy",
                        background=np.array([0.2, 0.3, 0.4]), primitives=[prim])


def _front_view(width=65, height=65, dist=3.0):
    fx, fy, cx, cy = sg._default_intrinsics(width, height)
    rot, t = look_at(np.array([0.0, 0.0, -dist]), np.zeros(3))
    return sg.CameraView(width, height, fx, fy, cx, cy, matrix_to_quat(rot), t)


def test_generate_scene_deterministic_and_counted():
    a = sg.generate_scene(42, "easy")
    b = sg.generate_scene(42, "easy")
    assert len(a.primitives) == len(b.primitives)
    for pa, pb in zip(a.primitives, b.primitives):
        assert pa.kind == pb.kind
        np.testing.assert_array_equal(pa.center, pb.center)
    assert 4 <= len(a.primitives) <= 8
    hard = sg.generate_scene(7, "hard")
    assert 16 <= len(hard.primitives) <= 64


def test_generate_scene_rejects_unknown_difficulty():
    with pytest.raises(ValueError):
        sg.generate_scene(0, "medium")


def test_center_pixel_hits_sphere_with_exact_depth():
    scene = _single_sphere_scene(radius=0.5)
    view = _front_view(width=65, height=65, dist=3.0)
    res = sg.render_analytic(scene, view)
    # odd resolution => center pixel ray passes exactly through the origin
    ci = 32
    np.testing.assert_allclose(res.rgb[ci, ci], scene.primitives[0].albedo)
    np.testing.assert_allclose(res.depth[ci, ci], 2.5, atol=1e-12)
    corner = res.rgb[0, 0]
    np.testing.assert_allclose(corner, scene.background)
    assert res.depth[0, 0] == np.inf
    assert res.prim_index[ci, ci] == 0 and res.prim_index[0, 0] == -1


def test_sphere_hit_points_lie_on_surface():
    scene = _single_sphere_scene(radius=0.37)
    view = _front_view()
    res = sg.render_analytic(scene, view)
    pts = res.pointmap.valid_points()
    assert pts.shape[0] > 50
    np.testing.assert_allclose(np.linalg.norm(pts, axis=1), 0.37, atol=1e-9)


def test_box_hit_points_lie_on_surface():
    prim = sg.Primitive("box", np.array([0.1, -0.05, 0.2]), 0.6,
                        np.array([0.3, 0.8, 0.5]))
    scene = sg.SceneSpec(0, "easy", np.array([0.5, 0.5, 0.5]), [prim])
    view = _front_view()
    res = sg.render_analytic(scene, view)
    pts = res.pointmap.valid_points()
    assert pts.shape[0] > 50
    face_dist = np.abs(pts - prim.center).max(axis=1)
    np.testing.assert_allclose(face_dist, 0.3, atol=1e-9)


def test_nearest_hit_matches_ray_march_oracle():
    """Brute-force ray marching agrees with the closed-form intersections."""
    scene = sg.generate_scene(3, "easy")
    view = _front_view(width=9, height=9)
    res = sg.render_analytic(scene, view)
    origin, dirs = view.pixel_rays()

    def inside(p):
        for k, prim in enumerate(scene.primitives):
            if prim.kind == "sphere":
                if np.linalg.norm(p - prim.center) <= prim.size:
                    return k
            else:
                if np.abs(p - prim.center).max() <= prim.size / 2:
                    return k
        return -1

    ts = np.linspace(1.0, 6.0, 20001)
    for i in range(0, 9, 2):
        for j in range(0, 9, 2):
            march = np.inf
            for t in ts:
                if inside(origin + t * dirs[i, j]) >= 0:
                    march = t
                    break
            if np.isfinite(res.depth[i, j]) and np.isfinite(march):
                assert abs(res.depth[i, j] - march) < 3e-4
            else:
                assert np.isinf(res.depth[i, j]) == np.isinf(march)


def test_pointmap_reprojects_onto_pixel_grid():
    scene = sg.generate_scene(11, "easy")
    views = sg.sample_trajectory(scene, "interpolate", 3, seed=5)
    for view in views:
        res = sg.render_analytic(scene, view)
        pix, z = view.project(res.pointmap.points[res.hit])
        ii, jj = np.nonzero(res.hit)
        np.testing.assert_allclose(pix[:, 0], jj + 0.5, atol=1e-9)
        np.testing.assert_allclose(pix[:, 1], ii + 0.5, atol=1e-9)
        np.testing.assert_allclose(z, res.depth[res.hit], atol=1e-9)


def test_orbit_azimuth_steps_exact():
    scene = sg.generate_scene(1, "easy")
    n = 7
    views = sg.sample_trajectory(scene, "orbit", n, seed=9)
    yaws = np.array([v.yaw() for v in views])
    steps = np.diff(np.unwrap(yaws))
    np.testing.assert_allclose(np.abs(steps), 2 * np.pi / n, atol=1e-6)
    radii = [np.linalg.norm(v.camera_center()) for v in views]
    np.testing.assert_allclose(radii, radii[0], atol=1e-9)


def test_orbit_keeps_primitives_in_frame():
    hits = 0
    total = 0
    for seed in range(4):
        scene = sg.generate_scene(seed, "hard")
        centers = np.stack([p.center for p in scene.primitives])
        for view in sg.sample_trajectory(scene, "orbit", 8, seed=seed):
            pix, z = view.project(centers)
            ok = (z > 0) & (pix[:, 0] >= 0) & (pix[:, 0] < view.width) \
                & (pix[:, 1] >= 0) & (pix[:, 1] < view.height)
            hits += int(ok.sum())
            total += len(scene.primitives)
    assert hits / total >= 0.9


def test_interpolate_two_views_are_the_endpoints():
    scene = sg.generate_scene(2, "easy")
    two = sg.sample_trajectory(scene, "interpolate", 2, seed=3)
    ten = sg.sample_trajectory(scene, "interpolate", 10, seed=3)
    np.testing.assert_allclose(two[0].camera_center(), ten[0].camera_center(),
                               atol=1e-12)
    np.testing.assert_allclose(two[1].camera_center(), ten[-1].camera_center(),
                               atol=1e-12)


def test_trajectory_quaternions_are_sign_continuous():
    scene = sg.generate_scene(4, "easy")
    for kind in ("interpolate", "orbit"):
        views = sg.sample_trajectory(scene, kind, 12, seed=8)
        for a, b in zip(views, views[1:]):
            assert float(np.dot(a.qvec, b.qvec)) > 0


def test_simulate_noise_free_matches_ground_truth():
    scene = sg.generate_scene(5, "easy")
    va, vb = sg.sample_trajectory(scene, "interpolate", 2, seed=1)
    sim = sg.simulate_pairwise_pointmaps(
        scene, va, vb, sg.NoiseModel(sigma_scale=0.0, dropout=0.0), seed=0)
    ra = sg.render_analytic(scene, va)
    rb = sg.render_analytic(scene, vb)
    np.testing.assert_array_equal(sim.pm_a.valid, ra.hit)
    np.testing.assert_allclose(sim.pm_a.points[sim.pm_a.valid],
                               va.cam_from_world(ra.pointmap.points)[ra.hit],
                               atol=1e-12)
    np.testing.assert_allclose(sim.pm_b.points[sim.pm_b.valid],
                               va.cam_from_world(rb.pointmap.points)[rb.hit],
                               atol=1e-12)
    assert 0.0 < sim.overlap <= 1.0


def test_simulate_confidence_structure():
    scene = sg.generate_scene(6, "hard")
    va, vb = sg.sample_trajectory(scene, "interpolate", 2, seed=2)
    sim = sg.simulate_pairwise_pointmaps(scene, va, vb, sg.NoiseModel(), seed=3)
    conf = sim.conf_a.weights
    assert conf.max() <= 1.0 + 1e-12
    # zero exactly where invalid
    np.testing.assert_array_equal(conf > 0, sim.pm_a.valid)
    ra = sg.render_analytic(scene, va)
    band = sg._boundary_band(ra)
    valid = sim.pm_a.valid
    mean_band = conf[band & valid].mean()
    mean_interior = conf[~band & valid].mean()
    assert mean_band < mean_interior


def test_simulate_dropout_fraction():
    scene = sg.generate_scene(8, "easy")
    va, vb = sg.sample_trajectory(scene, "interpolate", 2, seed=4)
    noise = sg.NoiseModel(sigma_scale=0.0, dropout=0.3)
    sim = sg.simulate_pairwise_pointmaps(scene, va, vb, noise, seed=5)
    ra = sg.render_analytic(scene, va)
    kept = sim.pm_a.valid.sum() / ra.hit.sum()
    assert 0.6 < kept < 0.8


def test_simulate_zero_overlap_raises_with_fraction():
    prim = sg.Primitive("sphere", np.array([0.0, 0.0, 0.0]), 0.3,
                        np.array([0.5, 0.5, 0.5]))
    scene = sg.SceneSpec(0, "easy", np.array([0.5, 0.5, 0.5]), [prim])
    va = _front_view(dist=3.0)
    rot, t = look_at(np.array([0.0, 0.0, 3.0]), np.zeros(3))
    vb = sg.CameraView(va.width, va.height, va.fx, va.fy, va.cx, va.cy,
                       matrix_to_quat(rot), t)
    with pytest.raises(sg.ZeroOverlapError) as exc:
        sg.simulate_pairwise_pointmaps(scene, va, vb, sg.NoiseModel(), seed=0)
    assert exc.value.overlap == 0.0


def test_simulate_deterministic_for_seed():
    scene = sg.generate_scene(9, "easy")
    va, vb = sg.sample_trajectory(scene, "interpolate", 2, seed=6)
    s1 = sg.simulate_pairwise_pointmaps(scene, va, vb, sg.NoiseModel(), seed=7)
    s2 = sg.simulate_pairwise_pointmaps(scene, va, vb, sg.NoiseModel(), seed=7)
    np.testing.assert_array_equal(s1.pm_a.points, s2.pm_a.points)
    np.testing.assert_array_equal(s1.conf_b.weights, s2.conf_b.weights)


def test_scene_file_round_trip_exact(tmp_path):
    scene = sg.generate_scene(13, "hard")
    p = tmp_path / "scene.txt"
    sg.save_scene(p, scene)
    back = sg.load_scene(p)
    assert back.seed == scene.seed and back.difficulty == scene.difficulty
    np.testing.assert_array_equal(back.background, scene.background)
    assert len(back.primitives) == len(scene.primitives)
    for a, b in zip(scene.primitives, back.primitives):
        assert a.kind == b.kind and a.size == b.size
        np.testing.assert_array_equal(a.center, b.center)
        np.testing.assert_array_equal(a.albedo, b.albedo)


def test_scene_file_rejects_garbage(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("not a scene\n")
    with pytest.raises(ValueError):
        sg.load_scene(p)


def test_png_round_trip_within_quantization(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.random((16, 24, 3))
    p = tmp_path / "img.png"
    sg.save_png(p, img)
    back = sg.load_png(p)
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-9


def test_camera_dict_round_trip():
    scene = sg.generate_scene(1, "easy")
    view = sg.sample_trajectory(scene, "orbit", 4, seed=0)[2]
    back = sg.camera_from_dict(sg.camera_to_dict(view))
    np.testing.assert_array_equal(back.qvec, view.qvec)
    np.testing.assert_array_equal(back.tvec, view.tvec)
    assert (back.fx, back.fy, back.cx, back.cy) == (view.fx, view.fy, view.cx, view.cy)

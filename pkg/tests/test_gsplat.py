"""Gaussian splatting: covariance math, SH, compositing, rasterizer, grads."""

import numpy as np
import pytest

from recx import gsplat as gs
from recx import scenegen as sg
from recx.rotation import quat_to_matrix
from recx.scenegen import CameraView

IDENT_Q = np.array([1.0, 0.0, 0.0, 0.0])


def _random_cloud(n, seed, logit_lo=-2.0, logit_hi=2.0):
    r = np.random.default_rng(seed)
    return gs.GaussianCloud(
        r.uniform(-0.7, 0.7, (n, 3)),
        r.standard_normal((n, 4)),
        r.uniform(-2.2, -1.2, (n, 3)),
        r.uniform(logit_lo, logit_hi, n),
        0.3 * r.standard_normal((n, 3, 9)),
    )


@pytest.fixture(scope="module")
def view():
    scene = sg.generate_scene(1, "easy")
    return sg.sample_trajectory(scene, "orbit", 3, seed=1)[0]


def _axis_view(z_eye=0.0, f=50.0, size=32):
    # camera at (0,0,z_eye) looking straight down +z, pixel grid centered
    return CameraView(size, size, f, f, size / 2.0, size / 2.0,
                      IDENT_Q.copy(), np.array([0.0, 0.0, -z_eye]))


# ---------------------------------------------------------------------------
# covariance
# ---------------------------------------------------------------------------

def test_covariance_identity_unit_scale():
    assert np.allclose(gs.covariance_3d(IDENT_Q, np.zeros(3)), np.eye(3),
                       atol=1e-15)


def test_covariance_identity_axis_scale():
    sigma = gs.covariance_3d(IDENT_Q, np.log([2.0, 1.0, 1.0]))
    assert np.allclose(sigma, np.diag([4.0, 1.0, 1.0]), atol=1e-12)


def test_covariance_eigenvalues_are_squared_scales():
    rng = np.random.default_rng(5)
    for _ in range(10):
        quat = rng.standard_normal(4)
        log_s = rng.uniform(-1.0, 1.0, 3)
        sigma = gs.covariance_3d(quat, log_s)
        assert np.abs(sigma - sigma.T).max() < 1e-12
        eig = np.sort(np.linalg.eigvalsh(sigma))
        assert np.allclose(eig, np.sort(np.exp(2 * log_s)), atol=1e-10)
        assert eig.min() >= np.exp(2 * log_s).min() - 1e-12


def test_project_covariance_orthographic_hook():
    rng = np.random.default_rng(6)
    sigma = gs.covariance_3d(rng.standard_normal(4), rng.uniform(-1, 0, 3))
    jac = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    out = gs.project_covariance_linear(sigma, jac, np.eye(3))
    assert np.allclose(out, sigma[:2, :2], atol=1e-14)


def test_project_covariance_on_axis_isotropic():
    s, z, f = 0.2, 4.0, 50.0
    view = _axis_view(f=f)
    sigma = gs.covariance_3d(IDENT_Q, np.full(3, np.log(s)))
    out = gs.project_covariance(sigma, view, np.array([0.0, 0.0, z]))
    want = (f * s / z) ** 2
    assert np.allclose(out, np.diag([want + 0.3, want + 0.3]), atol=1e-10)
    # doubling the focal length doubles the projected extent (no low-pass)
    base = gs.project_covariance(sigma, view, np.array([0.0, 0.0, z]),
                                 lowpass=0.0)
    doubled = gs.project_covariance(sigma, _axis_view(f=2 * f),
                                    np.array([0.0, 0.0, z]), lowpass=0.0)
    assert np.allclose(np.sqrt(doubled[0, 0]), 2 * np.sqrt(base[0, 0]),
                       rtol=1e-12)


def test_project_covariance_culls_behind_camera():
    sigma = np.eye(3)
    view = _axis_view()
    assert gs.project_covariance(sigma, view, np.array([0.0, 0.0, -1.0])) is None
    assert gs.project_covariance(sigma, view, np.array([0.0, 0.0, 0.01])) is None


# ---------------------------------------------------------------------------
# spherical harmonics
# ---------------------------------------------------------------------------

def test_sh_dc_only_is_view_independent():
    sh = np.zeros((3, 9))
    sh[:, 0] = [1.0, 2.0, 3.0]
    rng = np.random.default_rng(7)
    dirs = rng.standard_normal((16, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    colors = gs.sh_eval(np.broadcast_to(sh, (16, 3, 9)), dirs)
    want = np.array([1.0, 2.0, 3.0]) * 0.28209479177387814 + 0.5
    assert np.allclose(colors, want, atol=1e-14)


def test_sh_degree_one_has_odd_parity():
    sh = np.zeros((3, 9))
    sh[0, 2] = 0.8     # linear-in-z term on the red channel
    d = np.array([0.0, 0.0, 1.0])
    up = gs.sh_eval(sh, d)
    down = gs.sh_eval(sh, -d)
    assert abs(up[0] - down[0]) > 0.1
    assert up[1] == down[1] == 0.5


def test_sh_matches_direct_polynomial():
    # independent table, written out longhand
    rng = np.random.default_rng(8)
    sh = rng.standard_normal((3, 9)) * 0.3
    d = rng.standard_normal(3)
    d /= np.linalg.norm(d)
    x, y, z = d
    basis = np.array([
        0.28209479177387814,
        -0.4886025119029199 * y,
        0.4886025119029199 * z,
        -0.4886025119029199 * x,
        1.0925484305920792 * x * y,
        -1.0925484305920792 * y * z,
        0.31539156525252005 * (3 * z * z - 1),
        -1.0925484305920792 * x * z,
        0.5462742152960396 * (x * x - y * y),
    ])
    want = np.maximum(sh @ basis + 0.5, 0.0)
    assert np.allclose(gs.sh_eval(sh, d), want, atol=1e-14)


# ---------------------------------------------------------------------------
# compositing
# ---------------------------------------------------------------------------

def test_composite_single_opaque_splat():
    c = np.array([[0.2, 0.4, 0.6]])
    assert np.allclose(gs.composite_pixel(c, [1.0]), c[0], atol=1e-15)


def test_composite_two_half_splats():
    colors = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    out = gs.composite_pixel(colors, [0.5, 0.5])
    assert np.allclose(out, [0.5, 0.25, 0.0], atol=1e-15)


def test_composite_matches_no_early_exit_oracle():
    rng = np.random.default_rng(9)
    for _ in range(20):
        n = rng.integers(1, 40)
        colors = rng.uniform(0, 1, (n, 3))
        alphas = rng.uniform(0, 0.99, n)
        got = gs.composite_pixel(colors, alphas)
        t = 1.0
        want = np.zeros(3)
        for c, a in zip(colors, alphas):
            want += c * a * t
            t *= 1 - a
        assert np.abs(got - want).max() < 1e-4


def test_composite_weights_plus_transmittance_sum_to_one():
    rng = np.random.default_rng(10)
    alphas = rng.uniform(0, 0.999, 60)
    ones = np.ones((60, 3))
    covered = gs.composite_pixel(ones, alphas, stop_transmittance=0.0)
    leftover = np.prod(1 - alphas)
    assert abs(covered[0] + leftover - 1.0) < 1e-10


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

def test_rasterize_empty_cloud_raises(view):
    cloud = _random_cloud(3, 0)
    empty = gs.GaussianCloud(np.zeros((0, 3)), np.zeros((0, 4)),
                             np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3, 9)))
    with pytest.raises(ValueError):
        gs.rasterize(empty, view)
    del cloud


def test_rasterize_uncovered_pixel_is_background(view):
    # single tiny splat dead center: the corners stay pure background
    cloud = gs.GaussianCloud([[0, 0, 0]], [IDENT_Q], [np.full(3, -3.0)],
                             [2.0], np.zeros((1, 3, 9)))
    img = gs.rasterize(cloud, view, background=[0.3, 0.6, 0.9])
    assert np.allclose(img.rgb[0, 0], [0.3, 0.6, 0.9], atol=1e-15)
    assert img.transmittance[0, 0] == 1.0
    assert img.splat_count[0, 0] == 0
    assert img.rgb.min() >= 0 and np.isfinite(img.rgb).all()
    assert img.transmittance.min() >= 0 and img.transmittance.max() <= 1.0


def test_rasterize_opaque_splat_hits_sh_color(view):
    # back-project a pixel center and park an opaque Gaussian there
    i, j = 30, 25
    depth = 3.0
    xc = (j + 0.5 - view.cx) / view.fx * depth
    yc = (i + 0.5 - view.cy) / view.fy * depth
    mu = view.world_from_cam(np.array([xc, yc, depth]))
    sh = np.zeros((1, 3, 9))
    sh[0, :, 0] = [0.4, -0.2, 0.9]
    cloud = gs.GaussianCloud([mu], [IDENT_Q], [np.full(3, np.log(0.05))],
                             [20.0], sh)
    img = gs.rasterize(cloud, view)
    direction = (mu - view.camera_center())
    direction /= np.linalg.norm(direction)
    want = gs.sh_eval(sh[0], direction)
    assert np.abs(img.rgb[i, j] - want).max() < 1e-6


def test_tiled_matches_brute_force_on_random_scenes(view):
    rng = np.random.default_rng(11)
    worst = 0.0
    for trial in range(20):
        n = int(rng.choice([20, 100, 500]))
        cloud = _random_cloud(n, 1000 + trial, logit_lo=-3.0, logit_hi=3.0)
        bg = rng.uniform(0, 1, 3)
        a = gs.rasterize(cloud, view, background=bg)
        b = gs.brute_force_rasterize(cloud, view, background=bg)
        worst = max(worst, np.abs(a.rgb - b.rgb).max())
    assert worst < 1e-5


def test_rasterize_weights_sum_to_one_per_pixel(view):
    # make every splat pure white on black: rgb + transmittance == 1
    cloud = _random_cloud(120, 12)
    sh = np.zeros_like(cloud.sh)
    sh[:, :, 0] = 0.5 / 0.28209479177387814
    cloud = gs.GaussianCloud(cloud.positions, cloud.rotations,
                             cloud.log_scales, cloud.opacity_logits, sh)
    img = gs.brute_force_rasterize(cloud, view)
    total = img.rgb[..., 0] + img.transmittance
    assert np.abs(total - 1.0).max() < 1e-10


def test_rasterize_permutation_invariant_with_distinct_depths(view):
    cloud = _random_cloud(64, 13)
    prep = gs._Prepared(cloud, view, gs.NEAR)
    assert np.diff(np.sort(prep.cam[:, 2])).min() > 1e-6
    perm = np.random.default_rng(14).permutation(64)
    shuffled = gs.GaussianCloud(cloud.positions[perm], cloud.rotations[perm],
                                cloud.log_scales[perm],
                                cloud.opacity_logits[perm], cloud.sh[perm])
    a = gs.rasterize(cloud, view)
    b = gs.rasterize(shuffled, view)
    assert np.array_equal(a.rgb, b.rgb)
    assert np.array_equal(a.transmittance, b.transmittance)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _rim_mask(cloud, view, margin=0.05):
    """Zero out pixels close to any splat's hard 3-sigma boundary, where
    the rendered image is legitimately discontinuous and finite
    differences spike."""
    prep = gs._Prepared(cloud, view, gs.NEAR)
    h, w = view.height, view.width
    jj, ii = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    mask = np.ones((h, w), dtype=bool)
    for k in range(prep.center.shape[0]):
        dx = jj - prep.center[k, 0]
        dy = ii - prep.center[k, 1]
        q = (prep.conic[k, 0] * dx * dx + 2 * prep.conic[k, 1] * dx * dy
             + prep.conic[k, 2] * dy * dy)
        mask &= np.abs(q - gs.SUPPORT_Q) > margin
    return mask


def _fd_check(cloud, view, gproj, bg, h=1e-5):
    grads = gs.rasterize_backward(cloud, view, gproj, background=bg)

    def scalar():
        return float((gs.rasterize(cloud, view, background=bg).rgb
                      * gproj).sum())

    worst = {}
    for field in ("positions", "rotations", "log_scales",
                  "opacity_logits", "sh"):
        arr = getattr(cloud, field)
        ana = grads[field]
        num = np.zeros_like(ana)
        flat_a, flat_n = arr.reshape(-1), num.reshape(-1)
        for k in range(flat_a.size):
            old = flat_a[k]
            flat_a[k] = old + h
            plus = scalar()
            flat_a[k] = old - h
            minus = scalar()
            flat_a[k] = old
            flat_n[k] = (plus - minus) / (2 * h)
        rel = np.abs(ana - num) / np.maximum(1.0, np.abs(num))
        worst[field] = float(rel.max())
    return worst


def test_backward_matches_finite_differences(view):
    cloud = _random_cloud(12, 7)
    bg = np.array([0.15, 0.25, 0.35])
    mask = _rim_mask(cloud, view)
    gproj = (np.random.default_rng(9).standard_normal(
        (view.height, view.width, 3)) * mask[:, :, None])
    worst = _fd_check(cloud, view, gproj, bg)
    for field, err in worst.items():
        assert err < 1e-3, (field, err)


def test_backward_single_gaussian_l1_loss(view):
    cloud = _random_cloud(1, 21, logit_lo=0.5, logit_hi=1.5)
    target = gs.rasterize(_random_cloud(1, 22), view).rgb
    mask = _rim_mask(cloud, view)

    def l1():
        img = gs.rasterize(cloud, view).rgb
        return float((np.abs(img - target) * mask[:, :, None]).sum())

    render = gs.rasterize(cloud, view).rgb
    grad_rgb = np.sign(render - target) * mask[:, :, None]
    grads = gs.rasterize_backward(cloud, view, grad_rgb)
    h = 1e-5
    for field in ("positions", "rotations", "log_scales",
                  "opacity_logits", "sh"):
        arr = getattr(cloud, field)
        ana = grads[field]
        flat = arr.reshape(-1)
        num = np.zeros(flat.size)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            plus = l1()
            flat[k] = old - h
            minus = l1()
            flat[k] = old
            num[k] = (plus - minus) / (2 * h)
        rel = np.abs(ana.reshape(-1) - num) / np.maximum(1.0, np.abs(num))
        assert rel.max() < 1e-3, field


def test_backward_culled_gaussian_gets_zero_grads(view):
    cloud = _random_cloud(5, 15)
    behind = view.camera_center() - 2.0 * view.rotation()[2]  # z < 0 in cam
    cloud.positions[3] = behind
    grad_rgb = np.ones((view.height, view.width, 3))
    grads = gs.rasterize_backward(cloud, view, grad_rgb)
    for field in grads:
        assert np.all(grads[field][3] == 0.0), field
    # and at least one visible Gaussian has non-zero gradient
    assert np.abs(grads["positions"]).max() > 0


def test_backward_opacity_gradient_vanishes_toward_negative_logit(view):
    mags = []
    for logit in (-2.0, -4.0, -6.0):
        cloud = _random_cloud(4, 16)
        cloud.opacity_logits[:] = logit
        grads = gs.rasterize_backward(
            cloud, view, np.ones((view.height, view.width, 3)))
        mags.append(np.abs(grads["opacity_logits"]).max())
    assert mags[0] > mags[1] > mags[2]


def test_backward_rejects_bad_grad_shape(view):
    cloud = _random_cloud(2, 17)
    with pytest.raises(ValueError):
        gs.rasterize_backward(cloud, view, np.ones((3, 3, 3)))


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def test_ply_round_trip_bit_exact(tmp_path):
    cloud = _random_cloud(17, 18)
    path = tmp_path / "cloud.ply"
    gs.save_gaussians_ply(path, cloud)
    loaded = gs.load_gaussians_ply(path)
    assert np.array_equal(loaded.positions, cloud.positions)
    assert np.array_equal(loaded.rotations, cloud.rotations)
    assert np.array_equal(loaded.log_scales, cloud.log_scales)
    assert np.array_equal(loaded.opacity_logits, cloud.opacity_logits)
    assert np.array_equal(loaded.sh, cloud.sh)


def test_ply_header_property_order(tmp_path):
    cloud = _random_cloud(2, 19)
    path = tmp_path / "cloud.ply"
    gs.save_gaussians_ply(path, cloud)
    header = path.read_bytes().split(b"end_header")[0].decode().splitlines()
    props = [l.split()[-1] for l in header if l.startswith("property")]
    assert props[:3] == ["x", "y", "z"]
    assert props[3:7] == ["rot_0", "rot_1", "rot_2", "rot_3"]
    assert props[7:10] == ["scale_0", "scale_1", "scale_2"]
    assert props[10] == "opacity"
    assert props[11:] == [f"sh_{k}" for k in range(27)]


def test_ply_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.ply"
    bad.write_bytes(b"not a ply at all")
    with pytest.raises(ValueError):
        gs.load_gaussians_ply(bad)
    cloud = _random_cloud(3, 20)
    path = tmp_path / "trunc.ply"
    gs.save_gaussians_ply(path, cloud)
    data = path.read_bytes()
    path.write_bytes(data[:-16])
    with pytest.raises(ValueError):
        gs.load_gaussians_ply(path)


def test_cloud_helpers_round_trip():
    cloud = _random_cloud(4, 23)
    g = cloud.gaussian(2)
    rebuilt = gs.GaussianCloud.from_gaussians(
        [cloud.gaussian(k) for k in range(4)])
    assert np.array_equal(rebuilt.positions, cloud.positions)
    assert g.sh.shape == (3, 9)
    lo, hi = cloud.bounds()
    assert np.all(lo <= hi)
    with pytest.raises(ValueError):
        gs.GaussianCloud([[np.nan, 0, 0]], [IDENT_Q], [np.zeros(3)], [0.0],
                         [np.zeros((3, 9))])

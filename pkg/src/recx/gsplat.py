"""Differentiable 3D Gaussian splatting.

A Gaussian carries a world position, a (freely parameterized)
quaternion, per-axis log-scales, an opacity logit, and degree-2
spherical-harmonics color coefficients.  Rendering projects each
Gaussian's covariance R S S^T R^T through the perspective Jacobian at
its mean, sorts by camera-space depth, and alpha-composites
front-to-back.

The splat kernel is a definition shared by every code path here: a
Gaussian contributes to a pixel iff its camera z exceeds the near
plane, the Mahalanobis form q = d^T Sigma'^{-1} d is at most 9 (the 3
sigma ellipse), and the resulting alpha = sigmoid(logit) * exp(-q/2)
is at least 1e-6.  The tiled rasterizer and the exhaustive per-pixel
oracle therefore agree to the early-exit threshold (1e-7 transmittance
in the tiled path; the oracle never exits early).

The backward pass recomputes the forward state per pixel and walks the
contributors back-to-front, then chains screen-space gradients through
the projection Jacobian (including its dependence on the mean), the
covariance construction, and the view-direction of the SH evaluation.
All kernels are serial numba, so results are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit

from .rotation import quat_to_matrix, quat_to_matrix_jacobian_batch
from .scenegen import CameraView

__all__ = [
    "Gaussian3D",
    "GaussianCloud",
    "SplatImage",
    "covariance_3d",
    "project_covariance_linear",
    "project_covariance",
    "sh_eval",
    "composite_pixel",
    "rasterize",
    "brute_force_rasterize",
    "rasterize_backward",
    "save_gaussians_ply",
    "load_gaussians_ply",
]

TILE = 16
LOWPASS = 0.3          # px^2 added to the projected covariance diagonal
SUPPORT_Q = 9.0        # 3 sigma ellipse: d^T Sigma'^{-1} d <= 9
MIN_ALPHA = 1e-6
NEAR = 0.05
TILED_STOP_T = 1e-7    # internal early-exit, far below contract tolerances

# real spherical harmonics, degree <= 2, in the usual splatting order
_SH_C0 = 0.28209479177387814
_SH_C1 = 0.4886025119029199
_SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
          -1.0925484305920792, 0.5462742152960396)


@dataclass
class Gaussian3D:
    position: np.ndarray       # (3,) world
    rotation: np.ndarray       # (4,) quaternion (w, x, y, z), any norm
    log_scale: np.ndarray      # (3,)
    opacity_logit: float
    sh: np.ndarray             # (3, 9) per-channel coefficients


class GaussianCloud:
    """Struct-of-arrays Gaussian collection."""

    def __init__(self, positions, rotations, log_scales, opacity_logits, sh):
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = self.positions.shape[0]
        self.rotations = np.asarray(rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(opacity_logits,
                                         dtype=np.float64).reshape(n)
        self.sh = np.asarray(sh, dtype=np.float64).reshape(n, 3, 9)
        for name in ("positions", "rotations", "log_scales",
                     "opacity_logits", "sh"):
            if not np.isfinite(getattr(self, name)).all():
                raise ValueError(f"GaussianCloud: non-finite {name}")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @staticmethod
    def from_gaussians(gaussians) -> "GaussianCloud":
        return GaussianCloud(
            np.stack([g.position for g in gaussians]),
            np.stack([g.rotation for g in gaussians]),
            np.stack([g.log_scale for g in gaussians]),
            np.array([g.opacity_logit for g in gaussians]),
            np.stack([g.sh for g in gaussians]),
        )

    def gaussian(self, k: int) -> Gaussian3D:
        return Gaussian3D(self.positions[k].copy(), self.rotations[k].copy(),
                          self.log_scales[k].copy(),
                          float(self.opacity_logits[k]), self.sh[k].copy())

    def bounds(self):
        return self.positions.min(axis=0), self.positions.max(axis=0)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(self.positions.copy(), self.rotations.copy(),
                             self.log_scales.copy(),
                             self.opacity_logits.copy(), self.sh.copy())


@dataclass
class SplatImage:
    rgb: np.ndarray             # (H, W, 3)
    transmittance: np.ndarray   # (H, W)
    splat_count: np.ndarray     # (H, W) contributing splats per pixel


# ---------------------------------------------------------------------------
# covariance math
# ---------------------------------------------------------------------------

def covariance_3d(rotation: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """Sigma = R S S^T R^T; symmetric by construction (symmetrized exactly)."""
    r = quat_to_matrix(rotation)
    d = np.exp(2.0 * np.asarray(log_scale, dtype=np.float64))
    sigma = (r * d) @ r.T
    return 0.5 * (sigma + sigma.T)


def project_covariance_linear(sigma: np.ndarray, jac: np.ndarray,
                              w_rot: np.ndarray) -> np.ndarray:
    """Plain J W Sigma W^T J^T, no low-pass: the algebra unit-test hook."""
    b = np.asarray(jac) @ np.asarray(w_rot)
    out = b @ np.asarray(sigma) @ b.T
    return 0.5 * (out + out.T)


def _perspective_jacobian(fx: float, fy: float, cam: np.ndarray) -> np.ndarray:
    x, y, z = cam
    return np.array([[fx / z, 0.0, -fx * x / (z * z)],
                     [0.0, fy / z, -fy * y / (z * z)]])


def project_covariance(sigma: np.ndarray, view: CameraView,
                       mu_world: np.ndarray, near: float = NEAR,
                       lowpass: float = LOWPASS):
    """Screen-space 2x2 covariance at the projected mean, or None if culled.

    Adds ``lowpass`` px^2 to the diagonal so sub-pixel splats still
    cover their pixel.
    """
    cam = view.cam_from_world(np.asarray(mu_world, dtype=np.float64))
    if cam[2] <= near:
        return None
    jac = _perspective_jacobian(view.fx, view.fy, cam)
    return (project_covariance_linear(sigma, jac, view.rotation())
            + lowpass * np.eye(2))


# ---------------------------------------------------------------------------
# spherical harmonics
# ---------------------------------------------------------------------------

def _sh_basis(dirs: np.ndarray) -> np.ndarray:
    """Degree-2 real SH values for unit directions: (..., 9)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    return np.stack([
        np.full_like(x, _SH_C0),
        -_SH_C1 * y,
        _SH_C1 * z,
        -_SH_C1 * x,
        _SH_C2[0] * x * y,
        _SH_C2[1] * y * z,
        _SH_C2[2] * (3.0 * z * z - 1.0),
        _SH_C2[3] * x * z,
        _SH_C2[4] * (x * x - y * y),
    ], axis=-1)


def _sh_basis_grad(dirs: np.ndarray) -> np.ndarray:
    """d(basis)/d(direction): (..., 9, 3)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    zero = np.zeros_like(x)
    rows = [
        (zero, zero, zero),
        (zero, np.full_like(x, -_SH_C1), zero),
        (zero, zero, np.full_like(x, _SH_C1)),
        (np.full_like(x, -_SH_C1), zero, zero),
        (_SH_C2[0] * y, _SH_C2[0] * x, zero),
        (zero, _SH_C2[1] * z, _SH_C2[1] * y),
        (zero, zero, 6.0 * _SH_C2[2] * z),
        (_SH_C2[3] * z, zero, _SH_C2[3] * x),
        (2.0 * _SH_C2[4] * x, -2.0 * _SH_C2[4] * y, zero),
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def sh_eval(sh: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    """Color from SH coefficients: basis . coeffs + 0.5, clipped at 0.

    ``sh`` is (..., 3, 9), ``view_dir`` a matching (..., 3) unit vector.
    """
    basis = _sh_basis(view_dir)
    return np.maximum(
        np.einsum("...ck,...k->...c", np.asarray(sh, dtype=np.float64), basis)
        + 0.5, 0.0)


# ---------------------------------------------------------------------------
# compositing
# ---------------------------------------------------------------------------

def composite_pixel(colors: np.ndarray, alphas: np.ndarray,
                    stop_transmittance: float = 1e-4) -> np.ndarray:
    """Front-to-back alpha compositing of pre-sorted splats.

    C = sum_i c_i a_i prod_{j<i} (1 - a_j), terminating once the running
    transmittance drops below ``stop_transmittance``.
    """
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    alphas = np.asarray(alphas, dtype=np.float64).reshape(-1)
    out = np.zeros(3)
    t = 1.0
    for c, a in zip(colors, alphas):
        out += c * (a * t)
        t *= 1.0 - a
        if t < stop_transmittance:
            break
    return out


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

class _Prepared:
    """Visible splats in depth order plus every projection intermediate."""

    def __init__(self, cloud: GaussianCloud, view: CameraView, near: float):
        w_rot = view.rotation()
        cam_all = cloud.positions @ w_rot.T + view.tvec
        vis = cam_all[:, 2] > near
        idx = np.nonzero(vis)[0]
        z = cam_all[idx, 2]
        order = np.lexsort((idx, z))
        self.src = idx[order]                 # sorted-visible -> cloud index
        self.cam = cam_all[self.src]
        self.w_rot = w_rot
        v = self.src.shape[0]
        self.n_total = len(cloud)

        x, y, zz = self.cam[:, 0], self.cam[:, 1], self.cam[:, 2]
        self.center = np.stack([view.fx * x / zz + view.cx,
                                view.fy * y / zz + view.cy], axis=-1)

        # 3D covariance from (quaternion, log-scale); the quaternion
        # jacobian is deferred until the backward pass asks for it
        self._rots = cloud.rotations[self.src]
        self.rot_m = quat_to_matrix(self._rots)
        self._rot_jac = None
        self.eig2 = np.exp(2.0 * cloud.log_scales[self.src])     # (V, 3)
        sigma = np.einsum("nab,nb,ncb->nac", self.rot_m, self.eig2, self.rot_m)
        self.sigma3 = 0.5 * (sigma + np.swapaxes(sigma, 1, 2))

        # screen-space covariance via the perspective Jacobian at the mean
        jac = np.zeros((v, 2, 3))
        jac[:, 0, 0] = view.fx / zz
        jac[:, 0, 2] = -view.fx * x / zz ** 2
        jac[:, 1, 1] = view.fy / zz
        jac[:, 1, 2] = -view.fy * y / zz ** 2
        self.jac = jac
        self.b = jac @ w_rot
        sig2 = np.einsum("nab,nbc,ndc->nad", self.b, self.sigma3, self.b)
        sig2 = 0.5 * (sig2 + np.swapaxes(sig2, 1, 2))
        sig2[:, 0, 0] += LOWPASS
        sig2[:, 1, 1] += LOWPASS
        self.sigma2 = sig2

        a, bb, c = sig2[:, 0, 0], sig2[:, 0, 1], sig2[:, 1, 1]
        det = a * c - bb * bb
        self.conic = np.stack([c / det, -bb / det, a / det], axis=-1)
        half_tr = 0.5 * (a + c)
        lam_max = half_tr + np.sqrt(np.maximum(
            half_tr ** 2 - det, 0.0))
        self.radius = 3.0 * np.sqrt(lam_max)

        # per-splat view-dependent color
        delta = cloud.positions[self.src] - view.camera_center()
        self.dist = np.linalg.norm(delta, axis=1)
        self.dirs = delta / self.dist[:, None]
        self.basis = _sh_basis(self.dirs)
        self.sh = cloud.sh[self.src]
        self.pre_color = (np.einsum("nck,nk->nc", self.sh, self.basis) + 0.5)
        self.color = np.maximum(self.pre_color, 0.0)

        self.op_scale = 1.0 / (1.0 + np.exp(-cloud.opacity_logits[self.src]))
        self.fx, self.fy = view.fx, view.fy

    @property
    def rot_jac(self) -> np.ndarray:
        if self._rot_jac is None:
            self._rot_jac = quat_to_matrix_jacobian_batch(self._rots)[1]
        return self._rot_jac


def _tile_lists(prep: _Prepared, height: int, width: int):
    """(tile_starts, tile_items): depth-ordered splat ids per 16x16 tile."""
    ntx = -(-width // TILE)
    nty = -(-height // TILE)
    n_tiles = ntx * nty
    cx, cy, r = prep.center[:, 0], prep.center[:, 1], prep.radius
    tx0 = np.clip(((cx - r) // TILE).astype(np.int64), 0, ntx - 1)
    tx1 = np.clip(((cx + r) // TILE).astype(np.int64), 0, ntx - 1)
    ty0 = np.clip(((cy - r) // TILE).astype(np.int64), 0, nty - 1)
    ty1 = np.clip(((cy + r) // TILE).astype(np.int64), 0, nty - 1)
    # drop splats entirely off-screen
    on = (cx + r >= 0) & (cx - r < width) & (cy + r >= 0) & (cy - r < height)

    keep = np.nonzero(on)[0]
    nx = tx1[keep] - tx0[keep] + 1
    ny = ty1[keep] - ty0[keep] + 1
    counts = nx * ny
    total = int(counts.sum())
    if total:
        # flat (tile, splat) pair list without a per-splat python loop
        slot = np.repeat(keep, counts)
        first = np.repeat(np.cumsum(counts) - counts, counts)
        local = np.arange(total) - first
        nx_rep = np.repeat(nx, counts)
        row = ty0[slot] + local // nx_rep
        col = tx0[slot] + local % nx_rep
        tiles = row * ntx + col
        items = slot
        order = np.lexsort((items, tiles))
        tiles, items = tiles[order], items[order]
    else:
        tiles = np.zeros(0, dtype=np.int64)
        items = np.zeros(0, dtype=np.int64)
    starts = np.searchsorted(tiles, np.arange(n_tiles + 1))
    return starts.astype(np.int64), items


@njit(cache=True)
def _forward_kernel(height, width, starts, items, centers, conics, ops,
                    colors, bg, stop_t, rgb, trans, count, last):
    ntx = (width + TILE - 1) // TILE
    nty = (height + TILE - 1) // TILE
    for ty in range(nty):
        for tx in range(ntx):
            tid = ty * ntx + tx
            for i in range(ty * TILE, min((ty + 1) * TILE, height)):
                for j in range(tx * TILE, min((tx + 1) * TILE, width)):
                    px = j + 0.5
                    py = i + 0.5
                    t = 1.0
                    r = 0.0
                    g = 0.0
                    b = 0.0
                    cnt = 0
                    lst = -1
                    for m in range(starts[tid], starts[tid + 1]):
                        k = items[m]
                        dx = px - centers[k, 0]
                        dy = py - centers[k, 1]
                        q = (conics[k, 0] * dx * dx
                             + 2.0 * conics[k, 1] * dx * dy
                             + conics[k, 2] * dy * dy)
                        if q > SUPPORT_Q:
                            continue
                        alpha = ops[k] * np.exp(-0.5 * q)
                        if alpha < MIN_ALPHA:
                            continue
                        r += colors[k, 0] * alpha * t
                        g += colors[k, 1] * alpha * t
                        b += colors[k, 2] * alpha * t
                        t *= 1.0 - alpha
                        cnt += 1
                        lst = m
                        if t < stop_t:
                            break
                    rgb[i, j, 0] = r + t * bg[0]
                    rgb[i, j, 1] = g + t * bg[1]
                    rgb[i, j, 2] = b + t * bg[2]
                    trans[i, j] = t
                    count[i, j] = cnt
                    last[i, j] = lst


@njit(cache=True)
def _brute_force_kernel(height, width, centers, conics, ops, colors, bg,
                        rgb, trans, count):
    n = centers.shape[0]
    for i in range(height):
        for j in range(width):
            px = j + 0.5
            py = i + 0.5
            t = 1.0
            r = 0.0
            g = 0.0
            b = 0.0
            cnt = 0
            for k in range(n):
                dx = px - centers[k, 0]
                dy = py - centers[k, 1]
                q = (conics[k, 0] * dx * dx + 2.0 * conics[k, 1] * dx * dy
                     + conics[k, 2] * dy * dy)
                if q > SUPPORT_Q:
                    continue
                alpha = ops[k] * np.exp(-0.5 * q)
                if alpha < MIN_ALPHA:
                    continue
                r += colors[k, 0] * alpha * t
                g += colors[k, 1] * alpha * t
                b += colors[k, 2] * alpha * t
                t *= 1.0 - alpha
                cnt += 1
            rgb[i, j, 0] = r + t * bg[0]
            rgb[i, j, 1] = g + t * bg[1]
            rgb[i, j, 2] = b + t * bg[2]
            trans[i, j] = t
            count[i, j] = cnt


@njit(cache=True)
def _backward_kernel(height, width, starts, items, centers, conics, ops,
                     colors, bg, trans, last, grad_rgb,
                     g_center, g_conic, g_ops, g_color):
    ntx = (width + TILE - 1) // TILE
    nty = (height + TILE - 1) // TILE
    for ty in range(nty):
        for tx in range(ntx):
            tid = ty * ntx + tx
            for i in range(ty * TILE, min((ty + 1) * TILE, height)):
                for j in range(tx * TILE, min((tx + 1) * TILE, width)):
                    lst = last[i, j]
                    if lst < 0:
                        continue
                    px = j + 0.5
                    py = i + 0.5
                    gr = grad_rgb[i, j, 0]
                    gg = grad_rgb[i, j, 1]
                    gb = grad_rgb[i, j, 2]
                    t_run = trans[i, j]
                    suf_r = t_run * bg[0]
                    suf_g = t_run * bg[1]
                    suf_b = t_run * bg[2]
                    for m in range(lst, starts[tid] - 1, -1):
                        k = items[m]
                        dx = px - centers[k, 0]
                        dy = py - centers[k, 1]
                        q = (conics[k, 0] * dx * dx
                             + 2.0 * conics[k, 1] * dx * dy
                             + conics[k, 2] * dy * dy)
                        if q > SUPPORT_Q:
                            continue
                        gauss = np.exp(-0.5 * q)
                        alpha = ops[k] * gauss
                        if alpha < MIN_ALPHA:
                            continue
                        one_minus = 1.0 - alpha
                        t_run /= one_minus      # transmittance before splat k
                        at = alpha * t_run
                        g_color[k, 0] += gr * at
                        g_color[k, 1] += gg * at
                        g_color[k, 2] += gb * at
                        g_alpha = (
                            gr * (colors[k, 0] * t_run - suf_r / one_minus)
                            + gg * (colors[k, 1] * t_run - suf_g / one_minus)
                            + gb * (colors[k, 2] * t_run - suf_b / one_minus))
                        suf_r += colors[k, 0] * at
                        suf_g += colors[k, 1] * at
                        suf_b += colors[k, 2] * at
                        g_ops[k] += g_alpha * gauss
                        gq = -0.5 * g_alpha * alpha
                        g_conic[k, 0] += gq * dx * dx
                        g_conic[k, 1] += gq * 2.0 * dx * dy
                        g_conic[k, 2] += gq * dy * dy
                        gdx = gq * 2.0 * (conics[k, 0] * dx + conics[k, 1] * dy)
                        gdy = gq * 2.0 * (conics[k, 1] * dx + conics[k, 2] * dy)
                        g_center[k, 0] -= gdx
                        g_center[k, 1] -= gdy


def _resolve(view: CameraView, res):
    if res is None:
        return view.height, view.width
    return int(res[0]), int(res[1])


def _background(background):
    if background is None:
        return np.zeros(3)
    return np.asarray(background, dtype=np.float64).reshape(3)


def rasterize(cloud: GaussianCloud, view: CameraView, res=None,
              background=None, near: float = NEAR) -> SplatImage:
    """Tile-based forward rasterization (16x16 tiles, depth-sorted)."""
    if len(cloud) == 0:
        raise ValueError("rasterize: empty cloud")
    height, width = _resolve(view, res)
    prep = _Prepared(cloud, view, near)
    starts, items = _tile_lists(prep, height, width)
    rgb = np.zeros((height, width, 3))
    trans = np.ones((height, width))
    count = np.zeros((height, width), dtype=np.int64)
    last = np.full((height, width), -1, dtype=np.int64)
    _forward_kernel(height, width, starts, items, prep.center, prep.conic,
                    prep.op_scale, prep.color, _background(background),
                    TILED_STOP_T, rgb, trans, count, last)
    return SplatImage(rgb=rgb, transmittance=trans, splat_count=count)


def brute_force_rasterize(cloud: GaussianCloud, view: CameraView, res=None,
                          background=None, near: float = NEAR) -> SplatImage:
    """Per-pixel exhaustive oracle: global sort, no tiling, no early exit."""
    if len(cloud) == 0:
        raise ValueError("brute_force_rasterize: empty cloud")
    height, width = _resolve(view, res)
    prep = _Prepared(cloud, view, near)
    rgb = np.zeros((height, width, 3))
    trans = np.ones((height, width))
    count = np.zeros((height, width), dtype=np.int64)
    _brute_force_kernel(height, width, prep.center, prep.conic, prep.op_scale,
                        prep.color, _background(background), rgb, trans, count)
    return SplatImage(rgb=rgb, transmittance=trans, splat_count=count)


def rasterize_backward(cloud: GaussianCloud, view: CameraView,
                       grad_rgb: np.ndarray, res=None, background=None,
                       near: float = NEAR) -> dict:
    """Gradients of sum(grad_rgb * rendered_rgb) for every cloud field.

    Recomputes the forward pass internally, then chains per-pixel
    screen-space gradients through projection, covariance, opacity, and
    spherical harmonics.  Returns arrays keyed like GaussianCloud's
    attributes.  Culled Gaussians get exact zeros.
    """
    if len(cloud) == 0:
        raise ValueError("rasterize_backward: empty cloud")
    height, width = _resolve(view, res)
    grad_rgb = np.ascontiguousarray(grad_rgb, dtype=np.float64)
    if grad_rgb.shape != (height, width, 3):
        raise ValueError(f"rasterize_backward: grad shape {grad_rgb.shape} "
                         f"!= {(height, width, 3)}")
    prep = _Prepared(cloud, view, near)
    starts, items = _tile_lists(prep, height, width)
    bg = _background(background)

    rgb = np.zeros((height, width, 3))
    trans = np.ones((height, width))
    count = np.zeros((height, width), dtype=np.int64)
    last = np.full((height, width), -1, dtype=np.int64)
    _forward_kernel(height, width, starts, items, prep.center, prep.conic,
                    prep.op_scale, prep.color, bg, TILED_STOP_T,
                    rgb, trans, count, last)

    v = prep.src.shape[0]
    g_center = np.zeros((v, 2))
    g_conic = np.zeros((v, 3))
    g_ops = np.zeros(v)
    g_color = np.zeros((v, 3))
    _backward_kernel(height, width, starts, items, prep.center, prep.conic,
                     prep.op_scale, prep.color, bg, trans, last, grad_rgb,
                     g_center, g_conic, g_ops, g_color)

    # ---- chain screen-space gradients to the Gaussian parameters ----
    x, y, z = prep.cam[:, 0], prep.cam[:, 1], prep.cam[:, 2]
    fx, fy = prep.fx, prep.fy

    # conic -> Sigma' (2x2 inverse)
    a_mat = np.zeros((v, 2, 2))
    a_mat[:, 0, 0] = prep.conic[:, 0]
    a_mat[:, 0, 1] = a_mat[:, 1, 0] = prep.conic[:, 1]
    a_mat[:, 1, 1] = prep.conic[:, 2]
    g_a = np.zeros((v, 2, 2))
    g_a[:, 0, 0] = g_conic[:, 0]
    g_a[:, 0, 1] = g_a[:, 1, 0] = 0.5 * g_conic[:, 1]
    g_a[:, 1, 1] = g_conic[:, 2]
    g_sig2 = -np.einsum("nab,nbc,ncd->nad", a_mat, g_a, a_mat)

    # Sigma' = B Sigma B^T (+ const): gradients for Sigma and B
    g_sig3 = np.einsum("nba,nbc,ncd->nad", prep.b, g_sig2, prep.b)
    g_b = 2.0 * np.einsum("nab,nbc,ncd->nad", g_sig2, prep.b, prep.sigma3)

    # B = J W: gradient for J, then J's dependence on the camera-space mean
    g_jac = np.einsum("nab,cb->nac", g_b, prep.w_rot)
    g_cam = np.zeros((v, 3))
    g_cam[:, 0] = g_jac[:, 0, 2] * (-fx / z ** 2)
    g_cam[:, 1] = g_jac[:, 1, 2] * (-fy / z ** 2)
    g_cam[:, 2] = (g_jac[:, 0, 0] * (-fx / z ** 2)
                   + g_jac[:, 1, 1] * (-fy / z ** 2)
                   + g_jac[:, 0, 2] * (2.0 * fx * x / z ** 3)
                   + g_jac[:, 1, 2] * (2.0 * fy * y / z ** 3))

    # projected center -> camera-space mean
    g_cam[:, 0] += g_center[:, 0] * fx / z
    g_cam[:, 1] += g_center[:, 1] * fy / z
    g_cam[:, 2] += (-g_center[:, 0] * fx * x / z ** 2
                    - g_center[:, 1] * fy * y / z ** 2)

    g_pos = g_cam @ prep.w_rot

    # Sigma = R diag(e^{2s}) R^T
    rt_g_r = np.einsum("nba,nbc,ncd->nad", prep.rot_m, g_sig3, prep.rot_m)
    g_log_scale = (2.0 * prep.eig2
                   * np.einsum("nkk->nk", rt_g_r))
    g_rot_m = 2.0 * np.einsum("nab,nbc,nc->nac", g_sig3, prep.rot_m, prep.eig2)
    g_quat = np.einsum("nab,nabq->nq", g_rot_m, prep.rot_jac)

    # color -> SH coefficients and view direction -> world position
    g_pre = g_color * (prep.pre_color > 0.0)
    g_sh = np.einsum("nc,nk->nck", g_pre, prep.basis)
    g_dir = np.einsum("nc,nck,nkd->nd", g_pre, prep.sh,
                      _sh_basis_grad(prep.dirs))
    g_dir -= prep.dirs * np.einsum("nd,nd->n", prep.dirs, g_dir)[:, None]
    g_pos += g_dir / prep.dist[:, None]

    # opacity logit through the sigmoid
    g_logit = g_ops * prep.op_scale * (1.0 - prep.op_scale)

    out = {
        "positions": np.zeros((prep.n_total, 3)),
        "rotations": np.zeros((prep.n_total, 4)),
        "log_scales": np.zeros((prep.n_total, 3)),
        "opacity_logits": np.zeros(prep.n_total),
        "sh": np.zeros((prep.n_total, 3, 9)),
    }
    out["positions"][prep.src] = g_pos
    out["rotations"][prep.src] = g_quat
    out["log_scales"][prep.src] = g_log_scale
    out["opacity_logits"][prep.src] = g_logit
    out["sh"][prep.src] = g_sh
    return out


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

_PLY_FIELDS = (["x", "y", "z"]
               + [f"rot_{k}" for k in range(4)]
               + [f"scale_{k}" for k in range(3)]
               + ["opacity"]
               + [f"sh_{k}" for k in range(27)])


def save_gaussians_ply(path, cloud: GaussianCloud) -> None:
    """Binary little-endian PLY, one double per field, bit-exact round trip."""
    n = len(cloud)
    header = ["ply", "format binary_little_endian 1.0",
              f"element vertex {n}"]
    header += [f"property double {f}" for f in _PLY_FIELDS]
    header.append("end_header")
    table = np.concatenate([
        cloud.positions,
        cloud.rotations,
        cloud.log_scales,
        cloud.opacity_logits[:, None],
        cloud.sh.reshape(n, 27),
    ], axis=1)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(table.astype("<f8").tobytes(order="C"))


def load_gaussians_ply(path) -> GaussianCloud:
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise ValueError(f"load_gaussians_ply: {path} is not a PLY file")
    header = raw[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise ValueError("load_gaussians_ply: expected binary little-endian")
    n = next(int(line.split()[-1]) for line in header
             if line.startswith("element vertex"))
    props = [line.split()[-1] for line in header
             if line.startswith("property")]
    if props != _PLY_FIELDS:
        raise ValueError(f"load_gaussians_ply: unexpected properties {props}")
    body = raw[end + len(b"end_header\n"):]
    want = n * len(_PLY_FIELDS) * 8
    if len(body) < want:
        raise ValueError(f"load_gaussians_ply: body has {len(body)} bytes, "
                         f"expected {want}")
    table = np.frombuffer(body[:want], dtype="<f8").reshape(n, len(_PLY_FIELDS))
    return GaussianCloud(table[:, 0:3], table[:, 3:7], table[:, 7:10],
                         table[:, 10], table[:, 11:38].reshape(n, 3, 9))

"""Procedurally generated synthetic scenes and their analytic oracle.

Scenes are small collections of spheres and axis-aligned boxes with flat
albedos inside a fixed bounding cube.  Because intersections are closed
form, every render comes with exact per-pixel depth (along the optical
axis) and an exact world-frame pointmap — the ground truth that the
rest of the pipeline is validated against.

The module also simulates the output of a two-view stereo pointmap
predictor: pairwise pointmaps expressed in the first view's camera
frame, corrupted by depth-proportional Gaussian noise and pixel
dropout, with confidence maps that dip near depth discontinuities and
in regions the other view cannot see.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .rotation import look_at, matrix_to_quat, quat_to_matrix

__all__ = [
    "Primitive",
    "SceneSpec",
    "CameraView",
    "RenderResult",
    "PointMap",
    "ConfidenceMap",
    "NoiseModel",
    "PairwisePointmaps",
    "ZeroOverlapError",
    "generate_scene",
    "sample_trajectory",
    "render_analytic",
    "simulate_pairwise_pointmaps",
    "save_scene",
    "load_scene",
    "save_png",
    "load_png",
]

SCENE_BOUND = 1.0          # primitives live inside [-1, 1]^3
_RAY_EPS = 1e-9


class ZeroOverlapError(RuntimeError):
    """Two views share no visible surface; carries the overlap fraction."""

    def __init__(self, overlap: float):
        self.overlap = float(overlap)
        super().__init__(f"views share no visible surface (overlap={overlap:.4f})")


@dataclass
class Primitive:
    kind: str            # "sphere" | "box"
    center: np.ndarray   # (3,)
    size: float          # sphere radius, or box edge length
    albedo: np.ndarray   # (3,) rgb in [0, 1]

    def __post_init__(self):
        if self.kind not in ("sphere", "box"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        self.center = np.asarray(self.center, dtype=np.float64)
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        self.size = float(self.size)


@dataclass
class SceneSpec:
    seed: int
    difficulty: str
    background: np.ndarray
    primitives: list

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64)


@dataclass
class CameraView:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    qvec: np.ndarray          # world-to-camera rotation (w, x, y, z)
    tvec: np.ndarray          # world-to-camera translation

    def __post_init__(self):
        self.qvec = np.asarray(self.qvec, dtype=np.float64)
        self.tvec = np.asarray(self.tvec, dtype=np.float64)

    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.qvec)

    def camera_center(self) -> np.ndarray:
        r = self.rotation()
        return -r.T @ self.tvec

    def cam_from_world(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation().T + self.tvec

    def world_from_cam(self, points: np.ndarray) -> np.ndarray:
        return (points - self.tvec) @ self.rotation()

    def project(self, points_world: np.ndarray):
        """Pixel coordinates (u, v) and camera-frame depth of world points."""
        pc = self.cam_from_world(points_world)
        z = pc[..., 2]
        u = self.fx * pc[..., 0] / z + self.cx
        v = self.fy * pc[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1), z

    def pixel_rays(self):
        """World-frame ray origins/directions; directions have unit camera z.

        With unit camera-z directions, the ray parameter t is exactly the
        depth along the optical axis, which is the depth convention used
        throughout.
        """
        j = np.arange(self.width) + 0.5
        i = np.arange(self.height) + 0.5
        xs = (j[None, :] - self.cx) / self.fx
        ys = (i[:, None] - self.cy) / self.fy
        dirs_cam = np.stack(
            [np.broadcast_to(xs, (self.height, self.width)),
             np.broadcast_to(ys, (self.height, self.width)),
             np.ones((self.height, self.width))], axis=-1)
        dirs_world = dirs_cam @ self.rotation()
        origin = self.camera_center()
        return origin, dirs_world

    def yaw(self) -> float:
        """Azimuth of the camera position around the world y axis."""
        c = self.camera_center()
        return float(np.arctan2(c[0], c[2]))


@dataclass
class PointMap:
    points: np.ndarray       # (H, W, 3)
    valid: np.ndarray        # (H, W) bool

    def valid_points(self) -> np.ndarray:
        return self.points[self.valid]


@dataclass
class ConfidenceMap:
    weights: np.ndarray      # (H, W), >= 0; exactly 0 where invalid

    @property
    def valid(self) -> np.ndarray:
        return self.weights > 0.0


@dataclass
class RenderResult:
    rgb: np.ndarray          # (H, W, 3) in [0, 1]
    depth: np.ndarray        # (H, W), +inf where no hit
    pointmap: PointMap       # world-frame intersection points
    prim_index: np.ndarray   # (H, W) int, -1 where no hit

    @property
    def hit(self) -> np.ndarray:
        return self.prim_index >= 0


@dataclass
class NoiseModel:
    sigma_scale: float = 0.01        # per-point noise std = sigma_scale * depth
    dropout: float = 0.05            # fraction of valid pixels invalidated
    boundary_factor: float = 0.4     # confidence multiplier near depth edges
    nonoverlap_factor: float = 0.25  # multiplier where the other view is blind


@dataclass
class PairwisePointmaps:
    """Simulated two-view prediction; both maps live in view_a's camera frame."""
    pm_a: PointMap
    pm_b: PointMap
    conf_a: ConfidenceMap
    conf_b: ConfidenceMap
    overlap: float


# ---------------------------------------------------------------------------
# scene generation
# ---------------------------------------------------------------------------

def generate_scene(seed: int, difficulty: str = "easy") -> SceneSpec:
    """Deterministic procedural scene.

    easy: 4-8 well-separated primitives; hard: 16-64 primitives placed in
    clusters so occlusions are common.
    """
    if difficulty not in ("easy", "hard"):
        raise ValueError(f"difficulty must be easy|hard, got {difficulty!r}")
    rng = np.random.default_rng(seed)
    background = rng.uniform(0.35, 0.9, size=3)
    prims: list[Primitive] = []

    if difficulty == "easy":
        n = int(rng.integers(4, 9))
        placed = []
        while len(prims) < n:
            size = float(rng.uniform(0.18, 0.38))
            center = rng.uniform(-0.62, 0.62, size=3)
            if any(np.linalg.norm(center - c) < size + s + 0.05 for c, s in placed):
                continue
            kind = "sphere" if rng.random() < 0.6 else "box"
            prims.append(Primitive(kind, center, size, rng.uniform(0.08, 0.95, 3)))
            placed.append((center, size))
    else:
        n = int(rng.integers(16, 65))
        n_clusters = int(rng.integers(3, 6))
        cluster_centers = rng.uniform(-0.55, 0.55, size=(n_clusters, 3))
        for _ in range(n):
            c = cluster_centers[rng.integers(0, n_clusters)]
            center = np.clip(c + rng.normal(0, 0.22, size=3), -0.8, 0.8)
            size = float(rng.uniform(0.08, 0.28))
            kind = "sphere" if rng.random() < 0.6 else "box"
            prims.append(Primitive(kind, center, size, rng.uniform(0.08, 0.95, 3)))

    return SceneSpec(seed=seed, difficulty=difficulty,
                     background=background, primitives=prims)


def _default_intrinsics(width: int, height: int):
    # 60 degree horizontal field of view
    fx = 0.5 * width / np.tan(np.deg2rad(30.0))
    return fx, fx, width / 2.0, height / 2.0


def _view_from_position(pos: np.ndarray, width: int, height: int) -> CameraView:
    fx, fy, cx, cy = _default_intrinsics(width, height)
    rot, t = look_at(pos, np.zeros(3))
    return CameraView(width, height, fx, fy, cx, cy, matrix_to_quat(rot), t)


def _slerp_dir(d0: np.ndarray, d1: np.ndarray, t: float) -> np.ndarray:
    dot = np.clip(np.dot(d0, d1), -1.0, 1.0)
    theta = np.arccos(dot)
    if theta < 1e-9:
        v = (1 - t) * d0 + t * d1
        return v / np.linalg.norm(v)
    return (np.sin((1 - t) * theta) * d0 + np.sin(t * theta) * d1) / np.sin(theta)


def sample_trajectory(scene: SceneSpec, kind: str, n: int, seed: int,
                      width: int = 64, height: int = 64) -> list:
    """Camera trajectory looking at the scene center.

    kind="interpolate": smooth arc between two sampled endpoint views
    (n=2 returns exactly the endpoints).  kind="orbit": n evenly spaced
    azimuths at fixed radius/elevation; successive azimuth steps are
    exactly 2*pi/n.
    """
    if n < 2:
        raise ValueError("trajectories need at least 2 views")
    rng = np.random.default_rng(seed)

    def on_sphere(azim, elev, radius):
        return radius * np.array([
            np.cos(elev) * np.sin(azim),
            np.sin(elev),
            np.cos(elev) * np.cos(azim),
        ])

    views = []
    if kind == "orbit":
        radius = float(rng.uniform(3.1, 3.5))
        elev = float(rng.uniform(np.deg2rad(10), np.deg2rad(30)))
        start = float(rng.uniform(0, 2 * np.pi))
        for k in range(n):
            azim = start + 2 * np.pi * k / n
            views.append(_view_from_position(on_sphere(azim, elev, radius),
                                             width, height))
    elif kind == "interpolate":
        az0 = float(rng.uniform(0, 2 * np.pi))
        az1 = az0 + float(rng.uniform(np.deg2rad(50), np.deg2rad(90)))
        e0 = float(rng.uniform(np.deg2rad(5), np.deg2rad(35)))
        e1 = float(rng.uniform(np.deg2rad(5), np.deg2rad(35)))
        r0 = float(rng.uniform(3.1, 3.5))
        r1 = float(rng.uniform(3.1, 3.5))
        d0 = on_sphere(az0, e0, 1.0)
        d1 = on_sphere(az1, e1, 1.0)
        for k in range(n):
            t = k / (n - 1)
            pos = _slerp_dir(d0, d1, t) * ((1 - t) * r0 + t * r1)
            views.append(_view_from_position(pos, width, height))
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")

    # keep quaternion signs continuous along the path
    for a, b in zip(views, views[1:]):
        if float(np.dot(a.qvec, b.qvec)) < 0:
            b.qvec = -b.qvec
    return views


# ---------------------------------------------------------------------------
# analytic rendering
# ---------------------------------------------------------------------------

def _sphere_hits(origin, dirs, center, radius):
    oc = origin - center
    a = np.einsum("hwc,hwc->hw", dirs, dirs)
    b = 2.0 * np.einsum("hwc,c->hw", dirs, oc)
    c = float(oc @ oc) - radius * radius
    disc = b * b - 4 * a * c
    t = np.full(dirs.shape[:2], np.inf)
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t_near = (-b - sq) / (2 * a)
    t_far = (-b + sq) / (2 * a)
    near_ok = ok & (t_near > _RAY_EPS)
    far_ok = ok & ~near_ok & (t_far > _RAY_EPS)
    t[near_ok] = t_near[near_ok]
    t[far_ok] = t_far[far_ok]
    return t


def _box_hits(origin, dirs, center, edge):
    half = edge / 2.0
    lo, hi = center - half, center + half
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    tmin = np.minimum(t1, t2).max(axis=-1)
    tmax = np.maximum(t1, t2).min(axis=-1)
    t = np.full(dirs.shape[:2], np.inf)
    hit = tmax >= np.maximum(tmin, _RAY_EPS)
    use_near = hit & (tmin > _RAY_EPS)
    use_far = hit & ~use_near
    t[use_near] = tmin[use_near]
    t[use_far] = tmax[use_far]
    return t


def render_analytic(scene: SceneSpec, view: CameraView) -> RenderResult:
    """Exact ray-traced render: flat albedo, depth, world pointmap."""
    origin, dirs = view.pixel_rays()
    h, w = dirs.shape[:2]
    best_t = np.full((h, w), np.inf)
    best_idx = np.full((h, w), -1, dtype=np.int64)
    for idx, prim in enumerate(scene.primitives):
        t = (_sphere_hits(origin, dirs, prim.center, prim.size)
             if prim.kind == "sphere"
             else _box_hits(origin, dirs, prim.center, prim.size))
        closer = t < best_t
        best_t[closer] = t[closer]
        best_idx[closer] = idx

    hit = best_idx >= 0
    rgb = np.broadcast_to(scene.background, (h, w, 3)).copy()
    if scene.primitives:
        albedos = np.stack([p.albedo for p in scene.primitives])
        rgb[hit] = albedos[best_idx[hit]]
    points = origin + np.where(hit[..., None], best_t[..., None], 0.0) * dirs
    points = np.where(hit[..., None], points, 0.0)
    return RenderResult(
        rgb=rgb,
        depth=best_t,
        pointmap=PointMap(points=points, valid=hit),
        prim_index=best_idx,
    )


# ---------------------------------------------------------------------------
# simulated pairwise pointmaps
# ---------------------------------------------------------------------------

def _dilate(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    out[1:] |= mask[:-1]
    out[:-1] |= mask[1:]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


def _boundary_band(render: RenderResult) -> np.ndarray:
    """Pixels near depth discontinuities / silhouette edges."""
    idx = render.prim_index
    edge = np.zeros_like(idx, dtype=bool)
    edge[:-1] |= idx[:-1] != idx[1:]
    edge[:, :-1] |= idx[:, :-1] != idx[:, 1:]
    d = np.where(np.isfinite(render.depth), render.depth, 0.0)
    jump = np.zeros_like(edge)
    jump[:-1] |= np.abs(d[:-1] - d[1:]) > 0.05 * np.maximum(d[:-1], 1e-6)
    jump[:, :-1] |= np.abs(d[:, :-1] - d[:, 1:]) > 0.05 * np.maximum(d[:, :-1], 1e-6)
    return _dilate(edge | jump)


def _visible_in(view: CameraView, depth_map: np.ndarray,
                points_world: np.ndarray) -> np.ndarray:
    """Occlusion-aware visibility of world points in another view."""
    pix, z = view.project(points_world)
    h, w = depth_map.shape
    ok = (z > _RAY_EPS)
    u = np.clip(np.floor(pix[..., 0]).astype(np.int64), 0, w - 1)
    v = np.clip(np.floor(pix[..., 1]).astype(np.int64), 0, h - 1)
    inside = (pix[..., 0] >= 0) & (pix[..., 0] < w) & \
             (pix[..., 1] >= 0) & (pix[..., 1] < h)
    ref = depth_map[v, u]
    unoccluded = z <= ref * 1.005 + 1e-6
    return ok & inside & unoccluded


def simulate_pairwise_pointmaps(scene: SceneSpec, view_a: CameraView,
                                view_b: CameraView, noise: NoiseModel,
                                seed: int) -> PairwisePointmaps:
    """Stand-in for a stereo pointmap network on views (a, b).

    Both returned maps are expressed in view_a's camera frame.  Noise is
    isotropic Gaussian with per-pixel std sigma_scale * depth (depth in
    the observing camera), plus uniform pixel dropout.  Confidence is
    1/(1 + sigma^2) normalized to max 1, reduced near depth edges and
    where the other view has no line of sight.  Raises ZeroOverlapError
    when the views share no visible surface.
    """
    rng = np.random.default_rng(seed)
    ra = render_analytic(scene, view_a)
    rb = render_analytic(scene, view_b)

    vis_a = np.zeros_like(ra.hit)
    vis_b = np.zeros_like(rb.hit)
    vis_a[ra.hit] = _visible_in(view_b, rb.depth, ra.pointmap.points[ra.hit])
    vis_b[rb.hit] = _visible_in(view_a, ra.depth, rb.pointmap.points[rb.hit])
    counts = int(ra.hit.sum() + rb.hit.sum())
    overlap = float((vis_a.sum() + vis_b.sum()) / counts) if counts else 0.0
    if overlap <= 0.0:
        raise ZeroOverlapError(overlap)

    def one_map(render: RenderResult, vis_other: np.ndarray):
        pts_a_frame = view_a.cam_from_world(render.pointmap.points)
        valid = render.hit.copy()
        depth = np.where(valid, render.depth, 0.0)
        sigma = noise.sigma_scale * depth
        noisy = pts_a_frame + rng.normal(size=pts_a_frame.shape) * sigma[..., None]
        if noise.dropout > 0:
            drop = (rng.random(valid.shape) < noise.dropout) & valid
            valid &= ~drop
        conf = np.where(valid, 1.0 / (1.0 + sigma * sigma), 0.0)
        peak = conf.max()
        if peak > 0:
            conf = conf / peak
        band = _boundary_band(render)
        conf[band & valid] *= noise.boundary_factor
        conf[valid & ~vis_other] *= noise.nonoverlap_factor
        noisy = np.where(valid[..., None], noisy, 0.0)
        return PointMap(noisy, valid), ConfidenceMap(conf)

    pm_a, conf_a = one_map(ra, vis_a)
    pm_b, conf_b = one_map(rb, vis_b)
    return PairwisePointmaps(pm_a, pm_b, conf_a, conf_b, overlap)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def save_scene(path, scene: SceneSpec) -> None:
    """Human-readable scene file; floats use repr so loads are exact."""
    lines = ["recx-scene 1",
             f"seed {scene.seed}",
             f"difficulty {scene.difficulty}",
             "background " + " ".join(repr(float(v)) for v in scene.background)]
    for p in scene.primitives:
        vals = [*p.center, p.size, *p.albedo]
        lines.append(f"primitive {p.kind} " + " ".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def load_scene(path) -> SceneSpec:
    text = Path(path).read_text().strip().splitlines()
    if not text or text[0].strip() != "recx-scene 1":
        raise ValueError(f"{path}: not a recx scene file")
    seed, difficulty, background = None, None, None
    prims = []
    for line in text[1:]:
        parts = line.split()
        if not parts:
            continue
        key = parts[0]
        if key == "seed":
            seed = int(parts[1])
        elif key == "difficulty":
            difficulty = parts[1]
        elif key == "background":
            background = np.array([float(v) for v in parts[1:4]])
        elif key == "primitive":
            kind = parts[1]
            vals = [float(v) for v in parts[2:]]
            if len(vals) != 7:
                raise ValueError(f"{path}: malformed primitive line {line!r}")
            prims.append(Primitive(kind, np.array(vals[0:3]), vals[3],
                                   np.array(vals[4:7])))
        else:
            raise ValueError(f"{path}: unknown scene key {key!r}")
    if seed is None or difficulty is None or background is None:
        raise ValueError(f"{path}: incomplete scene file")
    return SceneSpec(seed=seed, difficulty=difficulty,
                     background=background, primitives=prims)


def save_png(path, img: np.ndarray) -> None:
    """Write an (H, W, 3) float image in [0, 1] as 8-bit PNG."""
    arr = np.clip(np.asarray(img) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(Path(path), format="PNG")


def load_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(Path(path)).convert("RGB"), dtype=np.float64)
    return arr / 255.0


def camera_to_dict(view: CameraView) -> dict:
    return {
        "width": view.width, "height": view.height,
        "fx": view.fx, "fy": view.fy, "cx": view.cx, "cy": view.cy,
        "qvec": [float(v) for v in view.qvec],
        "tvec": [float(v) for v in view.tvec],
    }


def camera_from_dict(d: dict) -> CameraView:
    return CameraView(d["width"], d["height"], d["fx"], d["fy"],
                      d["cx"], d["cy"], np.array(d["qvec"]), np.array(d["tvec"]))

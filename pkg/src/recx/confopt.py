"""Confidence-aware scene optimization and image-quality metrics.

Fits a Gaussian cloud to a set of supervision frames whose reliability
varies per pixel: the loss is a confidence-weighted blend of L1 (pixel
granularity), structural similarity (window granularity) and a fixed
random-feature perceptual distance (frame granularity), with the
confidence map normalized to mean 1 over its valid pixels so the
absolute confidence scale never changes learning-rate semantics.
Zero-confidence pixels are hard-masked out of the gradient: they
contribute exactly nothing to any Gaussian parameter.

The loss is built from diffarray ops, so its gradient with respect to
the rendered image comes off the verified tape; that per-pixel gradient
is then pushed through the splatting backward pass.  Optimization uses
per-group adaptive-moment updates (no densification or pruning) with an
exponentially decayed position rate, plus a step-halving guard on a
global rate multiplier: whenever a step fails to improve on the best
loss seen so far the multiplier halves, and it recovers geometrically
on improvement.

Per-frame loss/gradient evaluation is independent and runs on a thread
pool when the RECX_THREADS environment variable allows it; results are
reduced in frame order, so the outcome is identical for any thread
count.
"""

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import diffarray as da
from . import gsplat as gs
from .scenegen import ConfidenceMap, save_png

__all__ = [
    "LossWeights",
    "SupervisionSet",
    "OptimizationDivergedError",
    "LEARNING_RATES",
    "POSITION_LR_DECAY",
    "PERCEPTUAL_SEED",
    "MAX_INIT_GAUSSIANS",
    "init_from_endpoints",
    "ssim",
    "perceptual_distance",
    "confidence_loss",
    "uncertainty_nll",
    "sigma_from_confidence",
    "psnr",
    "optimize_scene",
    "export_scene_outputs",
]

PERCEPTUAL_SEED = 0xC0FFEE
MAX_INIT_GAUSSIANS = 50_000
PSNR_CAP = 99.0

LEARNING_RATES = {
    "positions": 1.6e-4,
    "rotations": 5e-3,
    "log_scales": 5e-3,
    "opacity_logits": 5e-2,
    "sh": 2.5e-3,
}
POSITION_LR_DECAY = 0.01   # final/initial position rate over the run

# Below this loss the fit is exact to rounding noise and adaptive-moment
# steps would just follow ulp jitter (their update direction normalizes
# away gradient magnitude), so the optimizer holds position.
FIXED_POINT_FLOOR = 1e-12

_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_WINDOW = 11
_WINDOW_SIGMA = 1.5


@dataclass
class LossWeights:
    l_rgb: float = 0.8
    l_ssim: float = 0.2
    l_lpips: float = 0.5

    def __post_init__(self):
        if min(self.l_rgb, self.l_ssim, self.l_lpips) < 0:
            raise ValueError(f"loss weights must be non-negative: {self}")


@dataclass
class SupervisionSet:
    """Frames to fit, their confidences and cameras, plus the two
    endpoint pointmaps (world frame) used for initialization."""

    frames: np.ndarray              # (K', H, W, 3) in [0, 1]
    confidences: list               # K' ConfidenceMaps or (H, W) arrays
    views: list                     # K' CameraView
    endpoint_pointmaps: list        # 2 scenegen.PointMap

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        k = self.frames.shape[0]
        if k < 2:
            raise ValueError(f"need at least two supervision frames, got {k}")
        if not (len(self.confidences) == len(self.views) == k):
            raise ValueError("frames / confidences / views counts differ")
        if len(self.endpoint_pointmaps) != 2:
            raise ValueError("exactly two endpoint pointmaps required")
        for c in self.confidences:
            if np.asarray(self.conf_array(c)).min() < 0:
                raise ValueError("confidence must be non-negative")

    @staticmethod
    def conf_array(conf) -> np.ndarray:
        arr = conf.weights if isinstance(conf, ConfidenceMap) else conf
        return np.asarray(arr, dtype=np.float64)


class OptimizationDivergedError(RuntimeError):
    def __init__(self, step: int, value: float, trace):
        self.trace = np.asarray(trace)
        super().__init__(f"non-finite loss {value!r} at step {step}")


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def init_from_endpoints(supervision: SupervisionSet,
                        max_gaussians: int = MAX_INIT_GAUSSIANS
                        ) -> gs.GaussianCloud:
    """One Gaussian per valid endpoint pointmap pixel (evenly subsampled
    to the cap): mean at the point, isotropic scale from the nearest-
    neighbor distance, opacity logit 0, DC color from the frame pixel."""
    points, colors = [], []
    frame_ids = (0, supervision.frames.shape[0] - 1)
    for pm, fid in zip(supervision.endpoint_pointmaps, frame_ids):
        if pm.valid.any():
            points.append(pm.points[pm.valid])
            colors.append(supervision.frames[fid][pm.valid])
    if not points:
        raise ValueError("no valid endpoint points to initialize from")
    points = np.concatenate(points, axis=0)
    colors = np.concatenate(colors, axis=0)
    n = points.shape[0]
    if n > max_gaussians:
        keep = np.round(np.linspace(0, n - 1, max_gaussians)).astype(int)
        points, colors = points[keep], colors[keep]
        n = max_gaussians
    if n > 1:
        nn = cKDTree(points).query(points, k=2)[0][:, 1]
    else:
        nn = np.full(1, 0.1)
    log_scales = np.log(np.clip(nn, 1e-4, 1.0))[:, None] * np.ones(3)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    sh = np.zeros((n, 3, 9))
    sh[:, :, 0] = (colors - 0.5) / gs._SH_C0
    return gs.GaussianCloud(points, rotations, log_scales,
                            np.zeros(n), sh)


# ---------------------------------------------------------------------------
# image metrics
# ---------------------------------------------------------------------------

def _gaussian_1d() -> np.ndarray:
    half = (_WINDOW - 1) / 2.0
    x = np.arange(_WINDOW) - half
    k = np.exp(-0.5 * (x / _WINDOW_SIGMA) ** 2)
    return k / k.sum()

_K1D = _gaussian_1d()
_KV = da.tensor(_K1D.reshape(1, 1, _WINDOW, 1))
_KH = da.tensor(_K1D.reshape(1, 1, 1, _WINDOW))


def _window(x):
    # separable 11x11 Gaussian window average, valid extent
    return x.conv2d(_KV).conv2d(_KH)


def _require_image(arr, name: str) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"{name}: expected (H, W, 3), got {arr.shape}")
    return arr


def _ssim_window_map(r, t_arr: np.ndarray):
    """Per-window, per-channel similarity as a (3, Hw, Ww) Tensor of the
    render Tensor ``r``; the target enters as a constant."""
    h, w, _ = t_arr.shape
    if h < _WINDOW or w < _WINDOW:
        raise ValueError(f"image {h}x{w} smaller than the {_WINDOW} window")
    rr = r.permute(2, 0, 1).reshape(3, 1, h, w)
    tt = da.tensor(np.ascontiguousarray(t_arr.transpose(2, 0, 1))
                   .reshape(3, 1, h, w))
    mu_r = _window(rr)
    mu_t = _window(tt)
    var_r = _window(rr * rr) - mu_r * mu_r
    var_t = _window(tt * tt) - mu_t * mu_t
    cov = _window(rr * tt) - mu_r * mu_t
    c1, c2 = _SSIM_K1 ** 2, _SSIM_K2 ** 2
    num = (mu_r * mu_t * 2.0 + c1) * (cov * 2.0 + c2)
    den = (mu_r * mu_r + mu_t * mu_t + c1) * (var_r + var_t + c2)
    hw, ww = num.shape[2], num.shape[3]
    return (num / den).reshape(3, hw, ww)


def ssim(a, b) -> float:
    """Mean structural similarity, 11x11 Gaussian windows (sigma 1.5),
    stabilizers (0.01, 0.03) at unit dynamic range."""
    a = _require_image(a, "ssim a")
    b = _require_image(b, "ssim b")
    if a.shape != b.shape:
        raise ValueError(f"ssim: resolution mismatch {a.shape} vs {b.shape}")
    # constant tensors build no tape, so this is pure evaluation
    return _ssim_window_map(da.tensor(a), b).mean().item()


def _filter_banks():
    rng = np.random.default_rng(PERCEPTUAL_SEED)
    banks = []
    for _ in range(3):
        w = rng.standard_normal((16, 3, 3, 3))
        w /= np.linalg.norm(w.reshape(16, -1), axis=1)[:, None, None, None]
        banks.append(da.tensor(w))
    return banks

_BANKS = _filter_banks()


def _expand_channels(x, n: int):
    return da.concat([x] * n, axis=1)


def _perceptual_tensor(r, t_arr: np.ndarray):
    h, w, _ = t_arr.shape
    if h < 12 or w < 12 or h % 4 or w % 4:
        raise ValueError(f"image {h}x{w} unsuitable for 3 halving feature "
                         f"scales (needs extents >= 12, divisible by 4)")
    ra = r.permute(2, 0, 1).reshape(1, 3, h, w)
    ta = da.tensor(np.ascontiguousarray(t_arr.transpose(2, 0, 1))
                   .reshape(1, 3, h, w))
    total = None
    for scale, bank in enumerate(_BANKS):
        if scale:
            ra = ra.avg_pool2d(2)
            ta = ta.avg_pool2d(2)
        dist = None
        for img in (ra, ta):
            feat = img.conv2d(bank)
            norm = ((feat * feat).sum(axis=1, keepdims=True)
                    + 1e-12).sqrt()
            unit = feat / _expand_channels(norm, 16)
            dist = unit if dist is None else dist - unit
        term = (dist * dist).mean()
        total = term if total is None else total + term
    return total * (1.0 / len(_BANKS))


def perceptual_distance(a, b) -> float:
    """Squared distance between unit-normalized random conv features at
    three scales; deterministic (fixed filter seed), zero at equality."""
    a = _require_image(a, "perceptual a")
    b = _require_image(b, "perceptual b")
    if a.shape != b.shape:
        raise ValueError(f"perceptual: resolution mismatch "
                         f"{a.shape} vs {b.shape}")
    return _perceptual_tensor(da.tensor(a), b).item()


def psnr(a, b) -> float:
    """10 log10(1 / MSE), capped at the 99 dB identical-image sentinel."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(-10.0 * np.log10(mse), PSNR_CAP)


# ---------------------------------------------------------------------------
# confidence-weighted loss
# ---------------------------------------------------------------------------

def confidence_loss(render, target, conf, weights: LossWeights = None,
                    uniform: bool = False):
    """Confidence-weighted L1 + (1 - SSIM) + perceptual blend, as a
    diffarray scalar.

    The confidence map is normalized to mean 1 over its valid (> 0)
    pixels, then applied per pixel to L1, window-averaged to the SSIM
    term, and frame-averaged to the perceptual term.  Pixels at exactly
    zero confidence are excluded from the gradient entirely.  With
    ``uniform`` the map is replaced by ones, giving the unweighted loss.
    """
    weights = weights or LossWeights()
    t_arr = _require_image(target, "confidence_loss target")
    r = render if isinstance(render, da.Tensor) else da.tensor(
        np.asarray(render, dtype=np.float64))
    if r.shape != t_arr.shape:
        raise ValueError(f"confidence_loss: render {r.shape} vs target "
                         f"{t_arr.shape}")
    c_arr = SupervisionSet.conf_array(conf)
    if uniform:
        c_arr = np.ones(t_arr.shape[:2])
    if c_arr.shape != t_arr.shape[:2]:
        raise ValueError(f"confidence_loss: confidence {c_arr.shape} vs "
                         f"image {t_arr.shape[:2]}")
    if c_arr.min() < 0:
        raise ValueError("confidence must be non-negative")
    valid = c_arr > 0
    if not valid.any():
        raise ValueError("degenerate supervision: all-zero confidence")
    cnorm = c_arr / c_arr[valid].mean()

    if not valid.all():
        # hard gradient mask: zero-confidence pixels keep their rendered
        # value but contribute no gradient to anything
        mask3 = np.repeat(valid[:, :, None], 3, axis=2).astype(np.float64)
        r = r * mask3 + da.tensor(r.data * (1.0 - mask3))

    loss = None
    if weights.l_rgb:
        cpx = np.repeat(cnorm[:, :, None], 3, axis=2)
        loss = ((r - t_arr).abs() * cpx).mean() * weights.l_rgb
    if weights.l_ssim:
        smap = _ssim_window_map(r, t_arr)
        # the confidence tensor carries no grad, so no tape is built here
        cwin = _window(da.tensor(cnorm.reshape(1, 1, *cnorm.shape)))
        cwin = np.broadcast_to(cwin.numpy().reshape(1, *smap.shape[1:]),
                               smap.shape)
        term = ((-smap + 1.0) * np.ascontiguousarray(cwin)).mean()
        term = term * weights.l_ssim
        loss = term if loss is None else loss + term
    if weights.l_lpips:
        term = _perceptual_tensor(r, t_arr) * (float(cnorm.mean())
                                               * weights.l_lpips)
        loss = term if loss is None else loss + term
    if loss is None:
        loss = (r - t_arr).abs().mean() * 0.0
    return loss


def sigma_from_confidence(conf) -> float:
    """Per-frame uncertainty: sqrt of the mean inverse confidence over
    valid pixels."""
    c = SupervisionSet.conf_array(conf)
    valid = c > 0
    if not valid.any():
        raise ValueError("no valid confidence to derive sigma from")
    return float(np.sqrt(np.mean(1.0 / c[valid])))


def uncertainty_nll(renders, targets, sigmas) -> float:
    """Gaussian negative log-likelihood summed over frames:
    0.5 log(2 pi sigma_i^2) + ||render_i - target_i||^2 / (2 sigma_i^2)."""
    renders = np.asarray(renders, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if renders.shape != targets.shape:
        raise ValueError(f"uncertainty_nll: {renders.shape} vs "
                         f"{targets.shape}")
    if sigmas.shape != (renders.shape[0],):
        raise ValueError("one sigma per frame required")
    if (sigmas <= 0).any():
        raise ValueError("sigmas must be positive")
    total = 0.0
    for i, sig in enumerate(sigmas):
        sq = float(((renders[i] - targets[i]) ** 2).sum())
        total += 0.5 * np.log(2.0 * np.pi * sig * sig) + sq / (2.0 * sig * sig)
    return float(total)


# ---------------------------------------------------------------------------
# scene optimization
# ---------------------------------------------------------------------------

class _LossContext:
    """All supervision frames folded into one loss graph per step.

    Target-side window statistics, normalized confidence at each
    granularity, perceptual target features and the zero-confidence
    mask are constant over a run, so they are computed once here.  The
    per-frame losses this produces match confidence_loss() on the same
    frame to float precision (the single-frame path stays the reference
    implementation).
    """

    def __init__(self, supervision: SupervisionSet, weights: LossWeights,
                 uniform: bool):
        self.weights = weights
        frames = supervision.frames
        k, h, w, _ = frames.shape
        if weights.l_ssim and (h < _WINDOW or w < _WINDOW):
            raise ValueError(f"frames {h}x{w} smaller than the SSIM window")
        if weights.l_lpips and (h < 12 or w < 12 or h % 4 or w % 4):
            raise ValueError(f"frames {h}x{w} unsuitable for 3 halving "
                             f"feature scales")
        self.k, self.h, self.w = k, h, w
        self.targets = frames

        conf = np.stack([SupervisionSet.conf_array(c)
                         for c in supervision.confidences])
        if uniform:
            conf = np.ones_like(conf)
        if conf.shape != (k, h, w):
            raise ValueError(f"confidence stack {conf.shape} does not match "
                             f"frames {(k, h, w)}")
        cnorm = np.empty_like(conf)
        for i in range(k):
            valid = conf[i] > 0
            if not valid.any():
                raise ValueError("degenerate supervision: all-zero "
                                 f"confidence in frame {i}")
            cnorm[i] = conf[i] / conf[i][valid].mean()
        self.valid = conf > 0
        self.all_valid = bool(self.valid.all())
        if not self.all_valid:
            self.mask4 = np.repeat(self.valid[:, :, :, None], 3,
                                   axis=3).astype(np.float64)
        self.cpx = np.repeat(cnorm[:, :, :, None], 3, axis=3)
        self.cfr = cnorm.reshape(k, -1).mean(axis=1)

        # frame-major channel stack (f0c0, f0c1, f0c2, f1c0, ...)
        t_ch = np.ascontiguousarray(frames.transpose(0, 3, 1, 2)
                                    ).reshape(3 * k, 1, h, w)
        self.t_ch = da.tensor(t_ch)
        self.mu_t = _window(self.t_ch)
        self.var_t = _window(self.t_ch * self.t_ch) - self.mu_t * self.mu_t
        cwin = _window(da.tensor(cnorm.reshape(k, 1, h, w))).numpy()
        self.cwin = np.repeat(cwin, 3, axis=0)

        ta = da.tensor(np.ascontiguousarray(frames.transpose(0, 3, 1, 2)))
        self.unit_t = []
        for scale, bank in enumerate(_BANKS):
            if scale:
                ta = ta.avg_pool2d(2)
            feat = ta.conv2d(bank)
            norm = ((feat * feat).sum(axis=1, keepdims=True) + 1e-12).sqrt()
            self.unit_t.append(feat / _expand_channels(norm, 16))

    def loss(self, render):
        """(per-frame loss vector as ndarray, scalar mean-loss Tensor)."""
        k, h, w = self.k, self.h, self.w
        r = render
        if r.shape != (k, h, w, 3):
            raise ValueError(f"render batch {r.shape} does not match "
                             f"supervision {(k, h, w, 3)}")
        if not self.all_valid:
            r = r * self.mask4 + da.tensor(r.data * (1.0 - self.mask4))
        wts = self.weights
        per_frame = None

        def add(term):
            return term if per_frame is None else per_frame + term

        if wts.l_rgb:
            l1 = ((r - self.targets).abs() * self.cpx
                  ).reshape(k, -1).mean(axis=1)
            per_frame = add(l1 * wts.l_rgb)
        if wts.l_ssim or wts.l_lpips:
            r_nchw = r.permute(0, 3, 1, 2)
        if wts.l_ssim:
            r_ch = r_nchw.reshape(3 * k, 1, h, w)
            mu_r = _window(r_ch)
            var_r = _window(r_ch * r_ch) - mu_r * mu_r
            cov = _window(r_ch * self.t_ch) - mu_r * self.mu_t
            c1, c2 = _SSIM_K1 ** 2, _SSIM_K2 ** 2
            num = (mu_r * self.mu_t * 2.0 + c1) * (cov * 2.0 + c2)
            den = ((mu_r * mu_r + self.mu_t * self.mu_t + c1)
                   * (var_r + self.var_t + c2))
            smap = num / den
            term = ((-smap + 1.0) * self.cwin).reshape(k, -1).mean(axis=1)
            per_frame = add(term * wts.l_ssim)
        if wts.l_lpips:
            ra = r_nchw
            acc = None
            for scale, bank in enumerate(_BANKS):
                if scale:
                    ra = ra.avg_pool2d(2)
                feat = ra.conv2d(bank)
                norm = ((feat * feat).sum(axis=1, keepdims=True)
                        + 1e-12).sqrt()
                dist = feat / _expand_channels(norm, 16) - self.unit_t[scale]
                d = (dist * dist).reshape(k, -1).mean(axis=1)
                acc = d if acc is None else acc + d
            per_frame = add(acc * (wts.l_lpips / len(_BANKS)) * self.cfr)
        if per_frame is None:
            per_frame = (r - self.targets).abs().reshape(k, -1
                                                         ).mean(axis=1) * 0.0
        return per_frame.data.copy(), per_frame.mean()


def _thread_count() -> int:
    try:
        return max(1, int(os.environ.get("RECX_THREADS", "1")))
    except ValueError:
        return 1


def optimize_scene(supervision: SupervisionSet, init: gs.GaussianCloud,
                   steps: int = 1000, weights: LossWeights = None,
                   uniform_confidence: bool = False, background=None,
                   learning_rates: dict = None):
    """Fit a cloud to all supervision frames; no densification/pruning.

    Returns (cloud, loss trace, metrics): the trace holds the mean
    per-frame loss at every step, metrics the final per-frame PSNR /
    SSIM / perceptual distances.  Raises OptimizationDivergedError
    (carrying the partial trace) if the loss goes non-finite.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    weights = weights or LossWeights()
    rates = dict(LEARNING_RATES)
    if learning_rates:
        rates.update(learning_rates)
    cloud = init.copy()
    fields = ("positions", "rotations", "log_scales", "opacity_logits", "sh")
    m_state = {f: np.zeros_like(getattr(cloud, f)) for f in fields}
    v_state = {f: np.zeros_like(getattr(cloud, f)) for f in fields}
    ctx = _LossContext(supervision, weights, uniform_confidence)
    views = supervision.views
    k = ctx.k
    pool = ThreadPoolExecutor(_thread_count()) if _thread_count() > 1 else None
    run = pool.map if pool is not None else map

    def render_job(i):
        return gs.rasterize(cloud, views[i], background=background).rgb

    trace = []
    best = np.inf
    best_state = None
    lr_mult = 1.0
    t_adam = 0
    try:
        for step in range(1, steps + 1):
            rgb = np.stack(list(run(render_job, range(k))))
            leaf = da.Tensor(rgb, requires_grad=True)
            _frame_losses, total_t = ctx.loss(leaf)
            total = total_t.item()
            if not np.isfinite(total):
                raise OptimizationDivergedError(step, total, trace)
            trace.append(total)
            if total < FIXED_POINT_FLOOR:
                continue
            if total > best:
                # step-halving guard: drop back to the best state seen,
                # restart the moment integrator there, and continue more
                # cautiously, so the accepted loss is non-increasing by
                # construction
                for f in fields:
                    getattr(cloud, f)[...] = best_state[f]
                    m_state[f][...] = 0.0
                    v_state[f][...] = 0.0
                t_adam = 0
                lr_mult = max(lr_mult * 0.5, 1e-6)
                rgb = np.stack(list(run(render_job, range(k))))
                leaf = da.Tensor(rgb, requires_grad=True)
                _frame_losses, total_t = ctx.loss(leaf)
            else:
                best = total
                best_state = {f: getattr(cloud, f).copy() for f in fields}
                lr_mult = min(lr_mult * 1.1, 1.0)
            total_t.backward()
            grad = leaf.grad

            def grad_job(i):
                return gs.rasterize_backward(cloud, views[i], grad[i],
                                             background=background)

            results = list(run(grad_job, range(k)))
            # fixed-order reduction: identical for any thread count
            acc = {f: np.zeros_like(getattr(cloud, f)) for f in fields}
            for grads_i in results:
                for f in fields:
                    acc[f] += grads_i[f]
            decay = POSITION_LR_DECAY ** (step / steps)
            t_adam += 1
            for f in fields:
                lr = rates[f] * lr_mult * (decay if f == "positions" else 1.0)
                da.adam_update(getattr(cloud, f), acc[f] / k,
                               m_state[f], v_state[f], t_adam, lr)
    finally:
        if pool is not None:
            pool.shutdown()

    metrics = evaluate_renders(cloud, supervision, background=background)
    return cloud, np.asarray(trace), metrics


def evaluate_renders(cloud: gs.GaussianCloud, supervision: SupervisionSet,
                     background=None) -> dict:
    per_psnr, per_ssim, per_perc = [], [], []
    for i, view in enumerate(supervision.views):
        img = gs.rasterize(cloud, view, background=background).rgb
        target = supervision.frames[i]
        per_psnr.append(psnr(img, target))
        per_ssim.append(ssim(img, target))
        per_perc.append(perceptual_distance(img, target))
    return {
        "psnr": per_psnr,
        "ssim": per_ssim,
        "perceptual": per_perc,
        "mean_psnr": float(np.mean(per_psnr)),
        "mean_ssim": float(np.mean(per_ssim)),
        "mean_perceptual": float(np.mean(per_perc)),
    }


def export_scene_outputs(outdir, cloud: gs.GaussianCloud,
                         supervision: SupervisionSet, metrics: dict,
                         trace, background=None) -> dict:
    """Write the optimized cloud (PLY), metrics JSON, loss-trace CSV and
    per-frame render PNGs; returns the path map."""
    from pathlib import Path
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"cloud": out / "cloud.ply", "metrics": out / "metrics.json",
             "trace": out / "loss_trace.csv"}
    gs.save_gaussians_ply(paths["cloud"], cloud)
    paths["metrics"].write_text(json.dumps(metrics, indent=2, sort_keys=True))
    with open(paths["trace"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, val in enumerate(np.asarray(trace), start=1):
            writer.writerow([i, repr(float(val))])
    renders = []
    for i, view in enumerate(supervision.views):
        img = gs.rasterize(cloud, view, background=background).rgb
        p = out / f"render_{i:02d}.png"
        save_png(p, np.clip(img, 0.0, 1.0))
        renders.append(p)
    paths["renders"] = renders
    return paths

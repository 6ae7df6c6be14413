"""Toy latent video diffusion with dual cross-attention conditioning.

The model interpolates between two reference views: a clip of T+2 frames
whose first and last frames are the references, mapped into a latent
space by an invertible 2x2 patchify (no trained autoencoder at this
scale).  A small factorized U-Net denoiser predicts the forward-process
noise; inside it, every spatial token cross-attends twice per block —
once into tokens derived from the two reference frames and once into
structure tokens describing the fused point cloud — with the structure
branch scaled by a learnable tanh gate that starts at zero, so a fresh
model is numerically the image-conditioned model.

Both conditions can independently be replaced by learned null
embeddings (condition dropout during training, the unconditional
branches of guided sampling).  Guidance combines three denoiser
evaluations in factored form

    (1 - s_view) * e(null, null) + (s_view - s_struc) * e(view, null)
                                 + s_struc * e(view, struc)

which is algebraically the usual telescoped rule but is exact at the
degenerate scales (0, 0) and (1, 1).  Sampling is deterministic DDIM;
the endpoint latents are re-anchored to the forward trajectory of the
references (using the sampler's own initial noise) at every step and
clamped exactly at the end.

Training runs one gradient-accumulating pass over the batch followed by
a single parameter update, and is deterministic: the per-step RNG is
keyed by (seed, step), so a resumed run replays the same noise, the
same timesteps, and the same dropout decisions.  Sampling trajectories
are independent across seeds and sequential in t.
"""

import csv
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffarray as da

__all__ = [
    "LATENT_CHANNELS",
    "DEFAULT_T_STEPS",
    "DEFAULT_FRAMES",
    "DEFAULT_MODEL_WIDTH",
    "DEFAULT_DDIM_STEPS",
    "DEFAULT_DROP_PROB",
    "DEFAULT_CFG_SCALES",
    "NoiseSchedule",
    "LatentVideo",
    "Conditioning",
    "DenoiserParams",
    "TrainExample",
    "StepStats",
    "TrainingDivergedError",
    "Checkpoint",
    "make_schedule",
    "to_latent",
    "from_latent",
    "seeded_noise",
    "forward_diffuse",
    "init_denoiser_params",
    "encode_view_condition",
    "denoise",
    "train_step",
    "cfg_denoise",
    "ddim_sample",
    "save_checkpoint",
    "load_checkpoint",
    "restore_optimizer",
    "write_train_log",
    "read_train_log",
]

LATENT_CHANNELS = 12          # 2x2 rgb patches
DEFAULT_T_STEPS = 1000
DEFAULT_FRAMES = 16           # T + 2 including both reference endpoints
DEFAULT_MODEL_WIDTH = 32
DEFAULT_DDIM_STEPS = 50
DEFAULT_DROP_PROB = 0.1
DEFAULT_CFG_SCALES = (2.0, 1.5)


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass
class NoiseSchedule:
    """Cumulative signal fractions ᾱ_0..ᾱ_T, strictly decreasing in (0, 1]."""

    t_steps: int
    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        self.alpha_bar = ab
        if ab.shape != (self.t_steps + 1,):
            raise ValueError(f"schedule length {ab.shape} != t_steps+1")
        if abs(ab[0] - 1.0) > 1e-9:
            raise ValueError(f"alpha_bar[0] = {ab[0]!r}, expected 1")
        if not (np.diff(ab) < 0).all():
            raise ValueError("alpha_bar must be strictly decreasing")
        if ab[-1] <= 0.0 or ab[0] > 1.0:
            raise ValueError("alpha_bar values must stay in (0, 1]")


def make_schedule(t_steps: int = DEFAULT_T_STEPS,
                  offset: float = 0.008) -> NoiseSchedule:
    """Offset-cosine schedule: ᾱ_t = cos²((π/2)·(t/T)/(1+offset)).

    The offset keeps ᾱ_T strictly positive (≈1.5e-4 at the default) so
    the x₀ reconstruction in the sampler never divides by zero.
    """
    if t_steps < 1:
        raise ValueError("t_steps must be >= 1")
    frac = np.arange(t_steps + 1, dtype=np.float64) / t_steps
    ab = np.cos((np.pi / 2.0) * frac / (1.0 + offset)) ** 2
    ab[0] = 1.0
    return NoiseSchedule(t_steps, ab)


@dataclass
class LatentVideo:
    """(T+2, C_l, h, w) latent frames; mask marks the two reference frames.

    Clips from :func:`to_latent` are reference-bracketed (first and last
    flagged); the intermediate-conditioning sampler variant instead
    flags the first and a mid-clip frame.  Either way there are exactly
    two references and the clip starts at one of them.
    """

    frames: np.ndarray
    endpoint_mask: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.endpoint_mask = np.asarray(self.endpoint_mask, dtype=bool)
        if self.frames.ndim != 4 or self.frames.shape[0] < 3:
            raise ValueError(f"latent video needs >= 3 frames, got "
                             f"{self.frames.shape}")
        n = self.frames.shape[0]
        if (self.endpoint_mask.shape != (n,)
                or self.endpoint_mask.sum() != 2
                or not self.endpoint_mask[0]):
            raise ValueError("endpoint mask must flag exactly two frames, "
                             "the first included")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def _latent_video(frames: np.ndarray, slots=None) -> LatentVideo:
    mask = np.zeros(frames.shape[0], dtype=bool)
    mask[list(slots) if slots is not None else [0, frames.shape[0] - 1]] = True
    return LatentVideo(frames, mask)


def _resolve_slots(cond_slots, n_frames: int):
    """Conditioning-slot pair: default is the clip endpoints, but a
    checkpoint variant may pin the second reference to an interior frame
    (e.g. the middle, splitting the clip into an interpolation half and
    an extrapolation half)."""
    if cond_slots is None:
        return 0, n_frames - 1
    i0, i1 = int(cond_slots[0]), int(cond_slots[1])
    if i1 < 0:
        i1 += n_frames
    if not 0 <= i0 < i1 < n_frames:
        raise ValueError(f"conditioning slots {cond_slots} invalid for "
                         f"{n_frames} frames")
    return i0, i1


@dataclass
class Conditioning:
    """Token inputs for the two cross-attention branches.

    ``c_view`` are tokens from the reference-frame tokenizer, ``c_struc``
    structure tokens (or anything with a ``.tokens`` attribute).  A
    dropped condition is replaced inside the denoiser by a learned null
    token, never by zeros.
    """

    c_view: object = None
    c_struc: object = None
    drop_view: bool = False
    drop_struc: bool = False


@dataclass
class DenoiserParams:
    """Denoiser weights: conv stacks, per-block dual attention, gates,
    a time-embedding table and the condition tokenizer."""

    width: int
    n_frames: int
    t_steps: int
    struct_width: int
    use_structure: bool
    tensors: dict = field(default_factory=dict)

    @property
    def view_width(self) -> int:
        return 2 * self.width

    def parameters(self) -> dict:
        return self.tensors


# ---------------------------------------------------------------------------
# latent transform
# ---------------------------------------------------------------------------

def to_latent(frames) -> LatentVideo:
    """Pack (F, 3, H, W) rgb in [0,1] into (F, 12, H/2, W/2) latents.

    Pure re-indexing of 2x2 pixel blocks: channel group = (rgb channel,
    block row, block col), so the round trip is bit-exact.
    """
    arr = np.asarray(frames, dtype=np.float64)
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ValueError(f"expected (F, 3, H, W) frames, got {arr.shape}")
    f, _, h, w = arr.shape
    if f < 3:
        raise ValueError("need at least 3 frames (two references + one)")
    if h % 2 or w % 2:
        raise ValueError(f"spatial extents must be even, got {h}x{w}")
    if arr.min() < -1e-9 or arr.max() > 1.0 + 1e-9:
        raise ValueError("frame values must lie in [0, 1]")
    lat = arr.reshape(f, 3, h // 2, 2, w // 2, 2)
    lat = lat.transpose(0, 1, 3, 5, 2, 4).reshape(f, LATENT_CHANNELS,
                                                  h // 2, w // 2)
    return _latent_video(np.ascontiguousarray(lat))


def from_latent(video) -> np.ndarray:
    """Inverse of :func:`to_latent`; accepts a LatentVideo or raw array."""
    lat = video.frames if isinstance(video, LatentVideo) else np.asarray(
        video, dtype=np.float64)
    if lat.ndim != 4 or lat.shape[1] != LATENT_CHANNELS:
        raise ValueError(f"expected (F, 12, h, w) latents, got {lat.shape}")
    f, _, hh, ww = lat.shape
    rgb = lat.reshape(f, 3, 2, 2, hh, ww)
    rgb = rgb.transpose(0, 1, 4, 2, 5, 3).reshape(f, 3, 2 * hh, 2 * ww)
    return np.ascontiguousarray(rgb)


# ---------------------------------------------------------------------------
# forward process
# ---------------------------------------------------------------------------

def seeded_noise(shape, seed) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(shape)


def forward_diffuse(x0, t: int, eps, schedule: NoiseSchedule):
    """x_t = √ᾱ_t · x₀ + √(1−ᾱ_t) · ε, elementwise and exact."""
    t = int(t)
    if not 1 <= t <= schedule.t_steps:
        raise ValueError(f"t = {t} outside [1, {schedule.t_steps}]")
    is_video = isinstance(x0, LatentVideo)
    base = x0.frames if is_video else np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != base.shape:
        raise ValueError(f"noise shape {eps.shape} != data shape {base.shape}")
    ab = schedule.alpha_bar[t]
    noisy = np.sqrt(ab) * base + np.sqrt(1.0 - ab) * eps
    return _latent_video(noisy) if is_video else noisy


# ---------------------------------------------------------------------------
# denoiser parameters
# ---------------------------------------------------------------------------

def init_denoiser_params(seed: int = 0,
                         width: int = DEFAULT_MODEL_WIDTH,
                         n_frames: int = DEFAULT_FRAMES,
                         t_steps: int = DEFAULT_T_STEPS,
                         struct_width: int = 64,
                         use_structure: bool = True) -> DenoiserParams:
    """Fresh weights.  The structure-branch tensors are drawn from an
    independent stream appended after everything else, so an image-only
    twin (``use_structure=False``) with the same seed shares every other
    tensor bit-for-bit.  The output convolution starts at zero, making
    the initial prediction 0 and the initial loss the noise second
    moment (about 1.0)."""
    if width < 2 or n_frames < 3:
        raise ValueError("width must be >= 2 and n_frames >= 3")
    rng = np.random.default_rng(seed)
    w, dv = width, 2 * width
    t: dict = {}

    def conv(name, cout, cin, kh, kw, gen, zero=False):
        if zero:
            data = np.zeros((cout, cin, kh, kw))
        else:
            data = gen.standard_normal((cout, cin, kh, kw)) * np.sqrt(
                2.0 / (cin * kh * kw))
        t[name + ".w"] = da.tensor(data, requires_grad=True)
        t[name + ".b"] = da.tensor(np.zeros(cout), requires_grad=True)

    def mat(name, fan_in, fan_out, gen):
        t[name] = da.tensor(
            gen.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in),
            requires_grad=True)

    t["time_emb"] = da.tensor(0.02 * rng.standard_normal((t_steps + 1, w)),
                              requires_grad=True)
    t["frame_emb"] = da.tensor(0.02 * rng.standard_normal((n_frames, w)),
                               requires_grad=True)
    conv("conv_in", w, LATENT_CHANNELS, 3, 3, rng)
    conv("down1", w, w, 3, 3, rng)
    conv("down2", dv, w, 3, 3, rng)
    conv("temporal", dv, dv, 3, 1, rng)
    conv("view_tok.c1", w, LATENT_CHANNELS, 3, 3, rng)
    conv("view_tok.c2", dv, w, 3, 3, rng)
    mat("attn1.wq", dv, dv, rng)
    mat("attn1.wk", dv, dv, rng)
    mat("attn1.wv", dv, dv, rng)
    mat("attn1.wo", dv, dv, rng)
    mat("attn2.wq", w, w, rng)
    mat("attn2.wk", dv, w, rng)
    mat("attn2.wv", dv, w, rng)
    mat("attn2.wo", w, w, rng)
    conv("up1", w, dv + w, 3, 3, rng)
    conv("up2", w, w + w, 3, 3, rng)
    conv("conv_out", LATENT_CHANNELS, w, 3, 3, rng, zero=True)
    t["null_view"] = da.tensor(0.02 * rng.standard_normal((1, dv)),
                               requires_grad=True)
    if use_structure:
        rs = np.random.default_rng((seed, 7))
        mat("attn1.wk2", struct_width, dv, rs)
        mat("attn1.wv2", struct_width, dv, rs)
        mat("attn2.wk2", struct_width, w, rs)
        mat("attn2.wv2", struct_width, w, rs)
        t["attn1.gate"] = da.tensor(0.0, requires_grad=True)
        t["attn2.gate"] = da.tensor(0.0, requires_grad=True)
        t["null_struc"] = da.tensor(
            0.02 * rs.standard_normal((1, struct_width)), requires_grad=True)
    return DenoiserParams(width, n_frames, t_steps, struct_width,
                          use_structure, t)


# ---------------------------------------------------------------------------
# denoiser forward
# ---------------------------------------------------------------------------

def _tokens(x):
    """(F, C, H, W) -> (F, H·W, C)."""
    f, c, h, w = x.shape
    return x.reshape(f, c, h * w).permute(0, 2, 1)


def _grid(tokens, h, w):
    f, _, c = tokens.shape
    return tokens.permute(0, 2, 1).reshape(f, c, h, w)


def encode_view_condition(endpoints, params: DenoiserParams):
    """Conv tokenizer over reference-frame latents -> (N, 2·width) tokens."""
    te = params.tensors
    x = endpoints if isinstance(endpoints, da.Tensor) else da.tensor(
        np.asarray(endpoints, dtype=np.float64))
    if x.ndim != 4 or x.shape[1] != LATENT_CHANNELS:
        raise da.ShapeError("view tokenizer", x.shape)
    h = x.conv2d(te["view_tok.c1.w"], te["view_tok.c1.b"],
                 stride=2, padding=1).silu()
    h = h.conv2d(te["view_tok.c2.w"], te["view_tok.c2.b"],
                 stride=2, padding=1).silu()
    n, c, hh, ww = h.shape
    return h.reshape(n, c, hh * ww).permute(0, 2, 1).reshape(n * hh * ww, c)


def _as_token_tensor(x):
    if isinstance(x, da.Tensor):
        return x
    if hasattr(x, "tokens"):
        return _as_token_tensor(x.tokens)
    return da.tensor(np.asarray(x, dtype=np.float64))


def _branch_tokens(cond: Conditioning, params: DenoiserParams, which: str):
    te = params.tensors
    if which == "view":
        if cond.drop_view or cond.c_view is None:
            return te["null_view"]
        return _as_token_tensor(cond.c_view)
    if cond.drop_struc or cond.c_struc is None:
        return te["null_struc"]
    return _as_token_tensor(cond.c_struc)


def _dual_attention(x, cond: Conditioning, params: DenoiserParams,
                    prefix: str):
    te = params.tensors
    f, c, h, w = x.shape
    tokens = _tokens(x)
    q = tokens.layernorm() @ te[prefix + ".wq"]

    kv = _branch_tokens(cond, params, "view")
    if kv.ndim != 2 or kv.shape[1] != te[prefix + ".wk"].shape[0]:
        raise da.ShapeError("cross-attention view tokens", kv.shape,
                            te[prefix + ".wk"].shape)
    out = da.attention(q, kv @ te[prefix + ".wk"], kv @ te[prefix + ".wv"])

    if params.use_structure:
        sv = _branch_tokens(cond, params, "struc")
        if sv.ndim != 2 or sv.shape[1] != te[prefix + ".wk2"].shape[0]:
            raise da.ShapeError("cross-attention structure tokens", sv.shape,
                                te[prefix + ".wk2"].shape)
        gate = te[prefix + ".gate"].tanh()
        out = out + gate * da.attention(q, sv @ te[prefix + ".wk2"],
                                        sv @ te[prefix + ".wv2"])
    tokens = tokens + out @ te[prefix + ".wo"]
    return _grid(tokens, h, w)


def _temporal_mix(x, params: DenoiserParams):
    # frame-axis 1D convolution (the temporal leg of a factorized 3D conv)
    te = params.tensors
    f, c, h, w = x.shape
    seq = x.reshape(f, c, h * w).permute(1, 0, 2).reshape(1, c, f, h * w)
    pad = da.tensor(np.zeros((1, c, 1, h * w)))
    seq = da.concat([pad, seq, pad], axis=2)
    mixed = seq.conv2d(te["temporal.w"], te["temporal.b"])
    mixed = mixed.reshape(c, f, h * w).permute(1, 0, 2).reshape(f, c, h, w)
    return x + mixed.silu()


def denoise(x_t, t: int, cond: Conditioning, params: DenoiserParams):
    """Predict the forward-process noise ε̂ for one noisy clip.

    Two-level U-Net over per-frame latents with a temporal convolution
    and dual cross-attention at the 1/4 scale, dual cross-attention
    again at the 1/2 scale, and skip connections by concatenation.
    """
    t = int(t)
    if not 1 <= t <= params.t_steps:
        raise ValueError(f"t = {t} outside [1, {params.t_steps}]")
    x = x_t if isinstance(x_t, da.Tensor) else da.tensor(
        np.asarray(x_t, dtype=np.float64))
    if x.ndim != 4 or x.shape[1] != LATENT_CHANNELS:
        raise da.ShapeError("denoise", x.shape)
    f, _, h, w = x.shape
    if f != params.n_frames:
        raise ValueError(f"clip has {f} frames, model expects "
                         f"{params.n_frames}")
    if h % 4 or w % 4 or h < 4 or w < 4:
        raise ValueError(f"latent extent {h}x{w} must be a multiple of 4")
    te = params.tensors

    h0 = x.conv2d(te["conv_in.w"], te["conv_in.b"], padding=1)
    tok = _tokens(h0) + te["time_emb"][t]
    ones = da.tensor(np.ones((h * w, 1)))
    tok = tok + ones @ te["frame_emb"].reshape(f, 1, params.width)
    h0 = _grid(tok, h, w).silu()

    d1 = h0.avg_pool2d(2).conv2d(te["down1.w"], te["down1.b"],
                                 padding=1).silu()
    d2 = d1.avg_pool2d(2).conv2d(te["down2.w"], te["down2.b"],
                                 padding=1).silu()
    b = _temporal_mix(d2, params)
    b = _dual_attention(b, cond, params, "attn1")
    u1 = da.concat([b.upsample2x(), d1], axis=1).conv2d(
        te["up1.w"], te["up1.b"], padding=1).silu()
    u1 = _dual_attention(u1, cond, params, "attn2")
    u2 = da.concat([u1.upsample2x(), h0], axis=1).conv2d(
        te["up2.w"], te["up2.b"], padding=1).silu()
    return u2.conv2d(te["conv_out.w"], te["conv_out.b"], padding=1)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainExample:
    """One clip plus its structure condition.

    ``structure`` may be None, a token array/Tensor, anything with a
    ``.tokens`` attribute, or a zero-argument callable producing one of
    those — the callable form rebuilds the encoder graph every step so
    the structure encoder trains jointly with the denoiser.
    """

    video: LatentVideo
    structure: object = None


@dataclass
class StepStats:
    step: int
    loss: float
    lr: float
    dropped_view: int
    dropped_struc: int


class TrainingDivergedError(RuntimeError):
    def __init__(self, batch_index: int, value: float):
        self.batch_index = batch_index
        super().__init__(
            f"non-finite training loss {value!r} on batch item {batch_index}")


def train_step(params: DenoiserParams, batch, schedule: NoiseSchedule,
               optimizer, step: int = 0,
               drop_prob: float = DEFAULT_DROP_PROB,
               seed: int = 0, cond_slots=None) -> StepStats:
    """One optimization step: per-item noise MSE, accumulated gradients,
    one parameter update.

    Per item, in fixed RNG order keyed by (seed, step): a uniform
    timestep, the noise draw, then two independent dropout decisions.
    The view condition is recomputed from the clean reference frames
    (``cond_slots``, default the clip endpoints) so the tokenizer trains
    with everything else.
    """
    if not 0.0 <= drop_prob < 1.0:
        raise ValueError(f"drop_prob {drop_prob} outside [0, 1)")
    if not batch:
        raise ValueError("empty batch")
    rng = np.random.default_rng((seed, step))
    optimizer.zero_grad()
    per_item = []
    n_drop_view = n_drop_struc = 0
    for i, ex in enumerate(batch):
        video = ex.video
        i0, i1 = _resolve_slots(cond_slots, video.n_frames)
        t = int(rng.integers(1, schedule.t_steps + 1))
        eps = rng.standard_normal(video.frames.shape)
        drop_v = bool(rng.random() < drop_prob)
        drop_s = bool(rng.random() < drop_prob)
        n_drop_view += drop_v
        n_drop_struc += drop_s
        x_t = forward_diffuse(video.frames, t, eps, schedule)
        structure = ex.structure() if callable(ex.structure) else ex.structure
        cond = Conditioning(
            c_view=encode_view_condition(video.frames[[i0, i1]], params),
            c_struc=structure, drop_view=drop_v, drop_struc=drop_s)
        diff = denoise(x_t, t, cond, params) - da.tensor(eps)
        item_loss = (diff * diff).mean()
        if not np.isfinite(item_loss.item()):
            raise TrainingDivergedError(i, item_loss.item())
        per_item.append(item_loss)
    total = per_item[0]
    for extra in per_item[1:]:
        total = total + extra
    total = total * (1.0 / len(batch))
    total.backward()
    optimizer.step()
    return StepStats(step, total.item(), optimizer.lr,
                     n_drop_view, n_drop_struc)


# ---------------------------------------------------------------------------
# guided sampling
# ---------------------------------------------------------------------------

def cfg_denoise(x_t, t: int, cond: Conditioning, scales,
                params: DenoiserParams):
    """Multi-condition guidance from three denoiser evaluations.

    Factored combination (1−s_v)·e∅∅ + (s_v−s_s)·e_v∅ + s_s·e_vs; the
    telescoped form e∅∅ + s_v(e_v∅ − e∅∅) + s_s(e_vs − e_v∅) is the
    same polynomial, but factoring makes scales (0,0) and (1,1) return
    a single branch exactly.
    """
    s_view, s_struc = float(scales[0]), float(scales[1])
    if s_view < 0 or s_struc < 0:
        raise ValueError(f"guidance scales must be >= 0, got {scales}")
    e_null = denoise(x_t, t, replace(cond, drop_view=True, drop_struc=True),
                     params)
    e_view = denoise(x_t, t, replace(cond, drop_view=False, drop_struc=True),
                     params)
    e_full = denoise(x_t, t, replace(cond, drop_view=False, drop_struc=False),
                     params)
    return (e_null * (1.0 - s_view) + e_view * (s_view - s_struc)
            + e_full * s_struc)


def ddim_sample(params: DenoiserParams, cond: Conditioning, endpoints,
                schedule: NoiseSchedule, n_steps: int = DEFAULT_DDIM_STEPS,
                scales=DEFAULT_CFG_SCALES, seed: int = 0,
                cond_slots=None) -> LatentVideo:
    """Deterministic (η = 0) sampling of one clip.

    ``endpoints`` are the two clean reference latents (2, C_l, h, w).
    At every step the two reference slots (``cond_slots``, default
    first/last) are reset onto the forward trajectory of the references
    using the trajectory's initial noise, and after the final step they
    are clamped to the references exactly, so decoding returns the
    reference views bit-for-bit.

    The denoised estimate x̂₀ is clamped into [0, 1] each step — the
    latent space is an exact pixel re-indexing, so that is the data
    range, and without the clamp the 1/√ᾱ factor at early steps turns
    any prediction error into an unrecoverable blow-up.
    """
    ab = schedule.alpha_bar
    if not 1 <= n_steps <= schedule.t_steps:
        raise ValueError(f"n_steps {n_steps} outside [1, {schedule.t_steps}]")
    refs = np.asarray(endpoints, dtype=np.float64)
    if refs.ndim != 4 or refs.shape[0] != 2:
        raise ValueError(f"expected (2, C, h, w) endpoint latents, "
                         f"got {refs.shape}")
    f = params.n_frames
    i0, i1 = _resolve_slots(cond_slots, f)
    shape = (f,) + refs.shape[1:]
    eps0 = np.random.default_rng(seed).standard_normal(shape)
    x = eps0.copy()
    times = np.linspace(schedule.t_steps, 0, n_steps + 1).round().astype(int)
    with da.no_grad():
        for t_hi, t_lo in zip(times[:-1], times[1:]):
            for idx, ref in ((i0, refs[0]), (i1, refs[1])):
                x[idx] = (np.sqrt(ab[t_hi]) * ref
                          + np.sqrt(1.0 - ab[t_hi]) * eps0[idx])
            eps_hat = cfg_denoise(x, int(t_hi), cond, scales, params).numpy()
            x0_hat = np.clip(
                (x - np.sqrt(1.0 - ab[t_hi]) * eps_hat) / np.sqrt(ab[t_hi]),
                0.0, 1.0)
            x = np.sqrt(ab[t_lo]) * x0_hat + np.sqrt(1.0 - ab[t_lo]) * eps_hat
    x[i0] = refs[0]
    x[i1] = refs[1]
    return _latent_video(x, slots=(i0, i1))


# ---------------------------------------------------------------------------
# checkpoints and logs
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "recx-denoiser-v1"


@dataclass
class Checkpoint:
    params: DenoiserParams
    schedule: NoiseSchedule
    step: int
    optimizer_state: dict
    manifest: dict


def _safe_name(name: str) -> str:
    return name.replace(".", "_").replace("/", "_")


def save_checkpoint(dirpath, params: DenoiserParams,
                    schedule: NoiseSchedule, step: int,
                    optimizer=None, extra_config: dict = None) -> None:
    """RXT1 tensor bundle plus a JSON manifest (step, schedule, config
    hash); optionally includes optimizer moments for exact resume."""
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    tensor_files = {}
    for name, tens in params.tensors.items():
        fn = _safe_name(name) + ".rxt"
        da.save_array(d / fn, tens.data)
        tensor_files[name] = fn
    da.save_array(d / "alpha_bar.rxt", schedule.alpha_bar)
    config = {
        "width": params.width,
        "n_frames": params.n_frames,
        "t_steps": params.t_steps,
        "struct_width": params.struct_width,
        "use_structure": params.use_structure,
    }
    if extra_config:
        config.update(extra_config)
    manifest = dict(config)
    manifest.update({
        "format": CHECKPOINT_FORMAT,
        "step": int(step),
        "config_hash": hashlib.sha256(
            json.dumps(config, sort_keys=True).encode()).hexdigest(),
        "tensors": tensor_files,
        "alpha_bar": "alpha_bar.rxt",
        "optimizer": None,
    })
    if optimizer is not None:
        state = optimizer.state_dict()
        files = {}
        for key, arr in state.items():
            if key == "t":
                continue
            fn = "opt_" + _safe_name(key) + ".rxt"
            da.save_array(d / fn, arr)
            files[key] = fn
        manifest["optimizer"] = {"t": state["t"], "lr": optimizer.lr,
                                 "files": files}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2,
                                                sort_keys=True))


def load_checkpoint(dirpath) -> Checkpoint:
    d = Path(dirpath)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except FileNotFoundError:
        raise da.FormatError(f"{d}: no checkpoint manifest")
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise da.FormatError(f"{d}: unknown checkpoint format "
                             f"{manifest.get('format')!r}")
    tensors = {name: da.load_tensor(d / fn, requires_grad=True)
               for name, fn in manifest["tensors"].items()}
    params = DenoiserParams(
        width=int(manifest["width"]),
        n_frames=int(manifest["n_frames"]),
        t_steps=int(manifest["t_steps"]),
        struct_width=int(manifest["struct_width"]),
        use_structure=bool(manifest["use_structure"]),
        tensors=tensors)
    alpha_bar = da.load_array(d / manifest["alpha_bar"])
    schedule = NoiseSchedule(alpha_bar.shape[0] - 1, alpha_bar)
    opt_state = None
    if manifest.get("optimizer"):
        meta = manifest["optimizer"]
        opt_state = {"t": int(meta["t"]), "lr": float(meta["lr"])}
        for key, fn in meta["files"].items():
            opt_state[key] = da.load_array(d / fn)
    return Checkpoint(params, schedule, int(manifest["step"]),
                      opt_state, manifest)


def restore_optimizer(params: DenoiserParams, opt_state: dict,
                      **kwargs) -> da.AdamW:
    """AdamW over the checkpointed parameters with its moments restored."""
    opt = da.AdamW(params.parameters(), lr=opt_state["lr"], **kwargs)
    opt.load_state_dict({k: v for k, v in opt_state.items() if k != "lr"})
    return opt


def write_train_log(path, stats) -> None:
    """CSV log: step, loss, lr, and per-step condition-drop counts."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "lr", "drop_view", "drop_struc"])
        for s in stats:
            writer.writerow([s.step, repr(s.loss), repr(s.lr),
                             s.dropped_view, s.dropped_struc])


def read_train_log(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [StepStats(int(r["step"]), float(r["loss"]), float(r["lr"]),
                      int(r["drop_view"]), int(r["drop_struc"]))
            for r in rows]

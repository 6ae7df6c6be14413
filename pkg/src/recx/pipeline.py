"""End-to-end orchestration: from two synthetic views to novel renders.

Each command is a plain function over a :class:`~recx.config.RunConfig`;
the CLI wraps them with exit codes.  Commands decompose into named
stages, each timed and fault-isolated: an exception inside stage X
surfaces as ``StageError("X", ...)`` so a failing run reports *where* it
died.  Configuration errors (bad values, missing checkpoints) pass
through untouched — they are the caller's problem, not the pipeline's.

Artifacts and traceability.  Every file a command writes is registered
with its SHA-256 in the run's manifest or report, and every reported
metric is recomputed from (or persisted next to) one of those files:
``evaluate`` re-verifies the whole chain — checksums first, then the
metrics themselves from the stored Gaussian cloud.

Determinism.  A single global seed expands into per-purpose streams via
``SeedSequence``; re-running any command with identical config and seed
reproduces every metric exactly (stage timings are wall-clock and
excluded from that contract).

The 360° mode follows the incremental sliding-window procedure: each
iteration generates a clip conditioned on two images at slots
(0, T/2) — the second reference sits mid-clip, so frames before it
interpolate and frames after it extrapolate — then selects the
interpolation midpoint and the extrapolation midpoint as the next
window's conditioning pair.  The final iteration pairs the current
interpolation-part selection with the original first input image,
closing the ring at 360°.  Planned cameras advance one window span per
iteration along the orbit ring; a window whose generated frames fail
the content gate (non-finite, static, or temporally incoherent) counts
as zero yaw progress, and three consecutive such iterations abort the
run as a stalled orbit.
"""

import contextlib
import csv
import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import alignkit as ak
from . import confopt as co
from . import config as cf
from . import diffarray as da
from . import gsplat as gs
from . import scenegen as sg
from . import structenc as se
from . import viddiff as vd

__all__ = [
    "CORPUS_FORMAT",
    "ABLATION_ROWS",
    "StageError",
    "RunReport",
    "gen_data",
    "train",
    "reconstruct",
    "orbit360",
    "ablate",
    "evaluate",
    "render_novel",
    "holdout_indices",
]

CORPUS_FORMAT = "recx-corpus-v1"
ALIGN_ITERS = 500

# Confidence assigned to generated-frame pixels not covered by any
# aligned point: low, but not excluded outright.
COVERAGE_FLOOR = 0.05

# Orbit content gate: interior frames must differ from the first
# reference (else the model collapsed to copying) and consecutive
# frames must not jump more than a scene rotation plausibly can
# (independent per-frame noise sits near 0.5 mean absolute step).
GATE_MIN_NOVELTY = 1e-3
GATE_MAX_JUMP = 0.35
STALL_MIN_PROGRESS_DEG = 5.0
STALL_MAX_ITERS = 3

# (name, diffusion, structure, endpoint_init, confidence, perceptual);
# seven rows, full configuration last and flagged as the reference.
ABLATION_ROWS = [
    ("base", False, False, True, False, False),
    ("diffusion-only", True, False, True, False, False),
    ("no-structure", True, False, True, True, True),
    ("no-endpoint-init", True, True, False, True, True),
    ("no-confidence", True, True, True, False, True),
    ("no-perceptual", True, True, True, True, False),
    ("full", True, True, True, True, True),
]


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name for the exit path."""

    def __init__(self, stage: str, message):
        self.stage = stage
        super().__init__(f"stage {stage} failed: {message}")


@contextlib.contextmanager
def _stage(name: str, timings: dict):
    t0 = time.perf_counter()
    try:
        yield
    except (StageError, cf.ConfigError):
        raise
    except Exception as e:
        raise StageError(name, e) from e
    finally:
        timings[name] = time.perf_counter() - t0


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _sub_seed(*parts) -> int:
    """Stable derived seed for one purpose (purpose code, indices...)."""
    ss = np.random.SeedSequence([int(p) for p in parts])
    return int(ss.generate_state(1)[0])


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


@dataclass
class RunReport:
    """What one run did: stage timings, residuals, metrics, artifacts.

    ``artifacts`` maps a name to a path (relative to the run directory)
    plus the file's SHA-256; ``metric_view`` strips the wall-clock
    timings, leaving exactly the part that must be identical when the
    same config and seed run again.
    """

    command: str
    config_hash: str
    seed: int
    timings: dict = field(default_factory=dict)
    alignment: dict = field(default_factory=dict)
    diffusion: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)

    def metric_view(self) -> dict:
        return {
            "command": self.command,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "alignment": self.alignment,
            "diffusion": self.diffusion,
            "metrics": self.metrics,
            "artifacts": self.artifacts,
        }

    def save(self, path) -> None:
        out = dict(self.metric_view())
        out["timings"] = self.timings
        _write_json(path, out)

    @classmethod
    def load(cls, path) -> "RunReport":
        d = json.loads(Path(path).read_text())
        return cls(command=d["command"], config_hash=d["config_hash"],
                   seed=d["seed"], timings=d.get("timings", {}),
                   alignment=d["alignment"], diffusion=d["diffusion"],
                   metrics=d["metrics"], artifacts=d["artifacts"])


class _Artifacts:
    """Checksummed registry of files under one run directory."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.table = {}

    def add(self, path) -> Path:
        p = Path(path)
        rel = str(p.relative_to(self.root))
        self.table[rel] = {"path": rel, "sha256": _sha256(p)}
        return p


# ---------------------------------------------------------------------------
# shared stage building blocks
# ---------------------------------------------------------------------------

def holdout_indices(n_frames: int) -> list:
    """Every 4th trajectory frame is excluded from supervision and kept
    for evaluation; the offset keeps both endpoint frames supervised."""
    return [i for i in range(n_frames) if i % 4 == 2]


def _ring_views(scene, cfg: cf.RunConfig, seed: int):
    """Dense orbit ring whose spacing matches one generation window:
    ``turns`` windows of ``n_frames`` cameras tile the full circle."""
    turns = int(round(360.0 / cfg.window_yaw))
    n_ring = turns * (cfg.n_frames - 1)
    ring = sg.sample_trajectory(scene, "orbit", n_ring, seed=seed,
                                width=cfg.width, height=cfg.height)
    return ring, n_ring


def _scene_and_views(cfg: cf.RunConfig, scene_index: int = 0):
    """One scene plus its clip cameras.  ``interpolate`` asks scenegen
    directly; ``orbit`` slices one window-span arc out of a dense ring,
    so clips match the sliding-window geometry of the 360° mode."""
    scene = sg.generate_scene(cfg.scene_seed + scene_index, cfg.difficulty)
    seed = _sub_seed(cfg.seed, 1, scene_index)
    if cfg.trajectory == "orbit":
        ring, n_ring = _ring_views(scene, cfg, seed)
        rng = np.random.default_rng(_sub_seed(cfg.seed, 7, scene_index))
        start = int(rng.integers(0, n_ring))
        views = [ring[(start + k) % n_ring] for k in range(cfg.n_frames)]
    else:
        views = sg.sample_trajectory(scene, cfg.trajectory, cfg.n_frames,
                                     seed=seed,
                                     width=cfg.width, height=cfg.height)
    return scene, views


def _align_pair(scene, view_a, view_b, seed: int):
    """Simulate two-view pointmaps, align, and express them in the world
    frame of ``view_a`` (the alignment gauge is view_a's camera frame)."""
    noise = sg.NoiseModel()

    def source(i, j):
        return sg.simulate_pairwise_pointmaps(scene, view_a, view_b, noise,
                                              seed=seed)

    graph = ak.build_view_graph(2, source)
    res = ak.global_align(graph, iters=ALIGN_ITERS,
                          seed=_sub_seed(seed, 11))
    world_pms = [sg.PointMap(view_a.world_from_cam(pm.points), pm.valid.copy())
                 for pm in res.cloud.view_points]
    confs = [sg.ConfidenceMap(cm.weights.copy()) for cm in res.cloud.view_conf]
    cloud = ak.GlobalCloud(world_pms, confs)
    info = {"loss": float(res.loss), "iterations": int(res.iterations),
            "overlap": float(graph.edges[0].overlap)}
    return cloud, info


def _coverage_confidence(points, conf, view, floor: float = COVERAGE_FLOOR):
    """Per-pixel confidence for a generated frame: the best aligned-point
    confidence landing in each pixel, ``floor`` where nothing projects."""
    h, w = view.height, view.width
    out = np.full((h, w), floor)
    if len(points) == 0:
        return out
    uv, z = view.project(points)
    cols = np.floor(uv[:, 0]).astype(int)
    rows = np.floor(uv[:, 1]).astype(int)
    ok = (z > 0) & (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
    np.maximum.at(out, (rows[ok], cols[ok]), np.minimum(conf[ok], 1.0))
    return out


def _endpoint_confidence(pm: sg.PointMap, cm: sg.ConfidenceMap) -> np.ndarray:
    return np.where(pm.valid, cm.weights, 0.0)


def _reference_latents(img_a, img_b) -> np.ndarray:
    """(2, C_l, h, w) latents of the two reference images.  The latent
    packing is per-frame, but ``to_latent`` speaks whole clips, so pad
    to three frames and slice."""
    stack = np.stack([img_a, img_b, img_b]).transpose(0, 3, 1, 2)
    return vd.to_latent(stack).frames[[0, 1]]


def _load_bundle(dirpath):
    ckpt = vd.load_checkpoint(dirpath)
    encdir = Path(dirpath) / "encoder"
    enc = se.load_encoder(encdir) if encdir.exists() else None
    return ckpt, enc


def _save_bundle(dirpath, params, schedule, step, optimizer, enc_params,
                 cond_slots, structure_cond, cfg) -> None:
    extra = {
        "structure_cond": bool(structure_cond),
        "cond_slots": [int(cond_slots[0]), int(cond_slots[1])],
        "token_ratio": cfg.token_ratio,
        "run_config_hash": cf.config_hash(cfg),
    }
    vd.save_checkpoint(dirpath, params, schedule, step, optimizer=optimizer,
                       extra_config=extra)
    if enc_params is not None:
        se.save_encoder(Path(dirpath) / "encoder", enc_params)


def _joint_optimizer(params: vd.DenoiserParams, enc_params, lr: float):
    from . import diffarray as da
    named = dict(params.parameters())
    if enc_params is not None:
        for k, t in enc_params.tensors.items():
            named["enc/" + k] = t
    return da.AdamW(named, lr=lr)


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def gen_data(cfg: cf.RunConfig, out_dir=None) -> Path:
    """Write the synthetic corpus: per scene a spec file, a camera
    trajectory, rendered frames, and the aligned two-view pointmaps, all
    hashed into ``manifest.json``."""
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    timings = {}
    files = {}
    alignment = {}
    with _stage("gen-data", timings):
        out.mkdir(parents=True, exist_ok=True)

        def put(relpath):
            files[str(relpath)] = _sha256(out / relpath)

        for i in range(cfg.n_scenes):
            sdir = f"scene_{i:03d}"
            (out / sdir).mkdir(exist_ok=True)
            scene, views = _scene_and_views(cfg, i)
            sg.save_scene(out / sdir / "scene.json", scene)
            put(f"{sdir}/scene.json")
            _write_json(out / sdir / "cameras.json",
                        {"cameras": [sg.camera_to_dict(v) for v in views]})
            put(f"{sdir}/cameras.json")
            for k, view in enumerate(views):
                name = f"{sdir}/frame_{k:02d}.png"
                sg.save_png(out / name, sg.render_analytic(scene, view).rgb)
                put(name)
            cloud, info = _align_pair(scene, views[0], views[-1],
                                      seed=_sub_seed(cfg.seed, 2, i))
            alignment[sdir] = info
            for tag, pm, cm in (("first", cloud.view_points[0],
                                 cloud.view_conf[0]),
                                ("last", cloud.view_points[1],
                                 cloud.view_conf[1])):
                np.save(out / sdir / f"pm_{tag}.npy", pm.points)
                np.save(out / sdir / f"valid_{tag}.npy", pm.valid)
                np.save(out / sdir / f"conf_{tag}.npy", cm.weights)
                for stem in ("pm", "valid", "conf"):
                    put(f"{sdir}/{stem}_{tag}.npy")

        manifest = {
            "format": CORPUS_FORMAT,
            "config_hash": cf.config_hash(cfg),
            "n_scenes": cfg.n_scenes,
            "n_frames": cfg.n_frames,
            "difficulty": cfg.difficulty,
            "trajectory": cfg.trajectory,
            "resolution": [cfg.height, cfg.width],
            "alignment": alignment,
            "files": files,
        }
        _write_json(out / "manifest.json", manifest)
    return out


def _load_corpus(corpus_dir):
    d = Path(corpus_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest.get("format") != CORPUS_FORMAT:
        raise cf.ConfigError(f"{d}: not a corpus directory "
                             f"(format {manifest.get('format')!r})")
    scenes = []
    for i in range(manifest["n_scenes"]):
        sdir = d / f"scene_{i:03d}"
        frames = np.stack([sg.load_png(sdir / f"frame_{k:02d}.png")
                           for k in range(manifest["n_frames"])])
        latent = vd.to_latent(frames.transpose(0, 3, 1, 2))
        pts = []
        for tag in ("first", "last"):
            pm = np.load(sdir / f"pm_{tag}.npy")
            valid = np.load(sdir / f"valid_{tag}.npy")
            pts.append(pm[valid])
        scenes.append({"latent": latent,
                       "points": np.concatenate(pts, axis=0)})
    return manifest, scenes


def _split_corpus(scenes):
    """Deterministic train/validation split: one scene in ten held out,
    taken from the end, at least one whenever the corpus has > 1 scene."""
    if len(scenes) < 2:
        return scenes, []
    n_val = max(1, len(scenes) // 10)
    return scenes[:-n_val], scenes[-n_val:]


def validation_mse(params, enc, schedule, val_scenes, *, cond_slots,
                   token_ratio, seed, n_probe_t=4):
    """Deterministic noise-prediction MSE on held-out scenes.

    Noise draws and probe timesteps depend only on ``seed`` and the
    scene index — two models evaluated with the same seed see identical
    inputs, so the comparison between them is paired.
    """
    if not val_scenes:
        return None
    probes = np.unique(np.linspace(
        1, schedule.t_steps, n_probe_t).round().astype(int))
    total = 0.0
    count = 0
    with da.no_grad():
        for k, item in enumerate(val_scenes):
            video = item["latent"]
            i0, i1 = cond_slots
            tokens = None
            if enc is not None:
                tokens = se.encode_structure(item["points"], enc,
                                             ratio=token_ratio)
            cond = vd.Conditioning(
                c_view=vd.encode_view_condition(video.frames[[i0, i1]],
                                                params),
                c_struc=tokens)
            for t in probes:
                rng = np.random.default_rng(_sub_seed(seed, 9, k, int(t)))
                eps = rng.standard_normal(video.frames.shape)
                x_t = vd.forward_diffuse(video.frames, int(t), eps, schedule)
                pred = vd.denoise(x_t, int(t), cond, params).numpy()
                total += float(np.mean((pred - eps) ** 2))
                count += 1
    return total / count


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def train(cfg: cf.RunConfig, out_dir=None, no_structure: bool = False) -> Path:
    """Joint training of the view tokenizer, structure encoder and
    denoiser over a generated corpus; periodic checkpoints, CSV log.

    ``no_structure`` trains the image-only twin (the structure branch
    and its gates never exist, so the baseline stays gate-frozen by
    construction).  A NaN loss aborts with the last periodic checkpoint
    named in the error.
    """
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    cf.require_paths(cfg, "corpus")
    timings = {}
    structure_on = not no_structure
    with _stage("train", timings):
        out.mkdir(parents=True, exist_ok=True)
        manifest, scenes = _load_corpus(cfg.corpus)
        if manifest["n_frames"] != cfg.n_frames:
            raise cf.ConfigError(
                f"corpus clips have {manifest['n_frames']} frames, "
                f"config expects {cfg.n_frames}")
        scenes, val_scenes = _split_corpus(scenes)
        n_frames = cfg.n_frames
        cond_slots = ((0, n_frames - 1) if cfg.conditioning == "endpoint"
                      else (0, n_frames // 2))

        if cfg.resume:
            cf.require_paths(cfg, "resume")
            ckpt, enc = _load_bundle(cfg.resume)
            if bool(ckpt.manifest.get("structure_cond")) != structure_on:
                raise cf.ConfigError(
                    "resume checkpoint structure conditioning does not "
                    "match this run")
            if tuple(ckpt.manifest.get("cond_slots")) != cond_slots:
                raise cf.ConfigError(
                    f"resume checkpoint conditions slots "
                    f"{ckpt.manifest.get('cond_slots')}, config wants "
                    f"{list(cond_slots)}")
            params, schedule, start = ckpt.params, ckpt.schedule, ckpt.step
            opt = _joint_optimizer(params, enc, cfg.lr)
            if ckpt.optimizer_state:
                opt.load_state_dict({k: v
                                     for k, v in ckpt.optimizer_state.items()
                                     if k != "lr"})
        else:
            params = vd.init_denoiser_params(
                seed=cfg.seed, width=cfg.model_width, n_frames=n_frames,
                t_steps=cfg.t_steps, struct_width=cfg.struct_width,
                use_structure=structure_on)
            enc = (se.init_encoder_params(seed=cfg.seed + 1,
                                          width=cfg.struct_width)
                   if structure_on else None)
            schedule = vd.make_schedule(cfg.t_steps)
            start = 0
            opt = _joint_optimizer(params, enc, cfg.lr)

        stats = []
        last_good = None
        ckroot = out / "checkpoints"
        for s in range(start + 1, cfg.train_steps + 1):
            batch = []
            for j in range(cfg.batch_size):
                item = scenes[((s - 1) * cfg.batch_size + j) % len(scenes)]
                structure = None
                if structure_on:
                    structure = (lambda pts=item["points"]:
                                 se.encode_structure(pts, enc,
                                                     ratio=cfg.token_ratio))
                batch.append(vd.TrainExample(video=item["latent"],
                                             structure=structure))
            try:
                st = vd.train_step(params, batch, schedule, opt, step=s,
                                   drop_prob=cfg.drop_prob, seed=cfg.seed,
                                   cond_slots=cond_slots)
            except vd.TrainingDivergedError as e:
                vd.write_train_log(out / "train_log.csv", stats)
                raise StageError(
                    "train", f"{e}; last good checkpoint: "
                             f"{last_good if last_good else 'none'}")
            stats.append(st)
            if s % cfg.checkpoint_every == 0:
                ckdir = ckroot / f"step_{s:05d}"
                _save_bundle(ckdir, params, schedule, s, opt, enc,
                             cond_slots, structure_on, cfg)
                last_good = ckdir

        final = out / "checkpoint"
        _save_bundle(final, params, schedule, cfg.train_steps, opt, enc,
                     cond_slots, structure_on, cfg)
        vd.write_train_log(out / "train_log.csv", stats)
        val_mse = validation_mse(params, enc, schedule, val_scenes,
                                 cond_slots=cond_slots,
                                 token_ratio=cfg.token_ratio, seed=cfg.seed)
        _write_json(out / "train_summary.json", {
            "config_hash": cf.config_hash(cfg),
            "steps": cfg.train_steps,
            "final_loss": stats[-1].loss if stats else None,
            "val_mse": val_mse,
            "val_scenes": len(val_scenes),
            "structure_cond": structure_on,
            "cond_slots": list(cond_slots),
            "timings": timings,
        })
    return final


# ---------------------------------------------------------------------------
# reconstruct
# ---------------------------------------------------------------------------

def _random_cloud(points, count, seed) -> gs.GaussianCloud:
    """Ablation baseline: Gaussians scattered uniformly in the aligned
    cloud's bounding box instead of at the pointmap surface."""
    rng = np.random.default_rng(seed)
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    n = int(count)
    positions = rng.uniform(lo, hi, size=(n, 3))
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    sh = np.zeros((n, 3, 9))   # zero DC renders mid-gray
    return gs.GaussianCloud(
        positions=positions,
        rotations=rotations,
        log_scales=np.full((n, 3), np.log(0.08)),
        opacity_logits=np.zeros(n),
        sh=sh,
    )


def reconstruct(cfg: cf.RunConfig, out_dir=None, *,
                bypass_diffusion: bool = False,
                no_structure: bool = False,
                uniform_confidence: bool = False,
                two_view_only: bool = False,
                endpoint_init: bool = True,
                checkpoint_path=None) -> RunReport:
    """Full pipeline over one scene: simulate and align the two input
    views, encode structure, sample the in-between frames, weight them
    by aligned confidence, fit the Gaussian cloud, and evaluate on the
    held-out ground-truth views.

    The bypass knobs isolate stages: ``bypass_diffusion`` substitutes
    ground-truth frames and oracle pointmaps (pure 3DGS test),
    ``two_view_only`` drops the generative stage entirely and fits only
    the two input views (the sparse-view baseline), ``no_structure``
    samples without structure tokens, ``endpoint_init=False`` swaps the
    pointmap initialization for a random cloud.
    """
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}
    art = _Artifacts(out)
    use_diffusion = not (bypass_diffusion or two_view_only)
    n = cfg.n_frames

    with _stage("scene", timings):
        scene, views = _scene_and_views(cfg)
        gt = [sg.render_analytic(scene, v) for v in views]
        (out / "inputs").mkdir(exist_ok=True)
        sg.save_png(out / "inputs" / "input_0.png", gt[0].rgb)
        sg.save_png(out / "inputs" / "input_1.png", gt[-1].rgb)
        art.add(out / "inputs" / "input_0.png")
        art.add(out / "inputs" / "input_1.png")
        sg.save_scene(out / "scene.json", scene)
        art.add(out / "scene.json")
        _write_json(out / "cameras.json",
                    {"cameras": [sg.camera_to_dict(v) for v in views]})
        art.add(out / "cameras.json")

    with _stage("alignment", timings):
        if bypass_diffusion:
            # oracle pointmaps, unit confidence where the ray hit
            pms = [gt[0].pointmap, gt[-1].pointmap]
            cms = [sg.ConfidenceMap(pm.valid.astype(float)) for pm in pms]
            cloud = ak.GlobalCloud([sg.PointMap(pm.points.copy(),
                                                pm.valid.copy())
                                    for pm in pms], cms)
            align_info = {"bypassed": True}
        else:
            cloud, align_info = _align_pair(
                scene, views[0], views[-1], seed=_sub_seed(cfg.seed, 2, 0))
        ak.save_cloud_ply(out / "fused_cloud.ply", cloud)
        art.add(out / "fused_cloud.ply")
        merged_pts, merged_conf = cloud.merged()
        pm_first, pm_last = cloud.view_points

    ckpt = enc = None
    if use_diffusion:
        if checkpoint_path is None:
            cf.require_paths(cfg, "checkpoint")
            checkpoint_path = cfg.checkpoint
        ckpt, enc = _load_bundle(checkpoint_path)
        if ckpt.params.n_frames != n:
            raise cf.ConfigError(
                f"checkpoint generates {ckpt.params.n_frames}-frame clips, "
                f"config expects {n}")
        slots = ckpt.manifest.get("cond_slots", [0, n - 1])
        if list(slots) != [0, n - 1]:
            raise cf.ConfigError(
                f"reconstruct needs an endpoint-conditioned checkpoint, "
                f"got condition slots {slots}")

    tokens = None
    with _stage("structure", timings):
        if use_diffusion and not no_structure and enc is not None:
            ratio = float(ckpt.manifest.get("token_ratio", cfg.token_ratio))
            tokens = se.encode_structure(merged_pts, enc, ratio=ratio)
            np.save(out / "structure_tokens.npy", tokens.tokens.data)
            art.add(out / "structure_tokens.npy")

    with _stage("diffusion", timings):
        if two_view_only:
            frames = np.stack([gt[0].rgb, gt[-1].rgb])
            diff_info = {"bypassed": True, "two_view_only": True}
        elif bypass_diffusion:
            frames = np.stack([r.rgb for r in gt])
            diff_info = {"bypassed": True}
        else:
            lat_refs = _reference_latents(gt[0].rgb, gt[-1].rgb)
            cond = vd.Conditioning(
                c_view=vd.encode_view_condition(lat_refs, ckpt.params),
                c_struc=tokens)
            video = vd.ddim_sample(
                ckpt.params, cond, lat_refs, ckpt.schedule,
                n_steps=min(cfg.ddim_steps, ckpt.schedule.t_steps),
                scales=(cfg.cfg_view, cfg.cfg_struc),
                seed=_sub_seed(cfg.seed, 3, 0))
            frames = np.clip(
                vd.from_latent(video).transpose(0, 2, 3, 1), 0.0, 1.0)
            t_probe = max(1, ckpt.schedule.t_steps // 2)
            eps = np.random.default_rng(
                _sub_seed(cfg.seed, 4, 0)).standard_normal(
                    video.frames.shape)
            x_t = vd.forward_diffuse(video.frames, t_probe, eps,
                                     ckpt.schedule)
            pred = vd.denoise(x_t, t_probe, cond, ckpt.params).numpy()
            diff_info = {
                "bypassed": False,
                "checkpoint_step": ckpt.step,
                "probe_noise_mse": float(np.mean((pred - eps) ** 2)),
            }
        (out / "generated").mkdir(exist_ok=True)
        for k in range(frames.shape[0]):
            sg.save_png(out / "generated" / f"frame_{k:02d}.png", frames[k])
            art.add(out / "generated" / f"frame_{k:02d}.png")
        np.save(out / "generated_frames.npy", frames)
        art.add(out / "generated_frames.npy")

    with _stage("confidence", timings):
        conf_first = _endpoint_confidence(pm_first, cloud.view_conf[0])
        conf_last = _endpoint_confidence(pm_last, cloud.view_conf[1])
        if two_view_only:
            sup_idx = [0, n - 1]
            confs = [conf_first, conf_last]
        else:
            held = set(holdout_indices(n))
            sup_idx = [i for i in range(n) if i not in held]
            confs = []
            for i in sup_idx:
                if i == 0:
                    confs.append(conf_first)
                elif i == n - 1:
                    confs.append(conf_last)
                else:
                    confs.append(_coverage_confidence(
                        merged_pts, merged_conf, views[i]))
        sup_frames = (frames if two_view_only
                      else frames[np.asarray(sup_idx)])
        np.save(out / "confidences.npy", np.stack(confs))
        art.add(out / "confidences.npy")

    with _stage("init", timings):
        supervision = co.SupervisionSet(
            frames=sup_frames,
            confidences=confs,
            views=[views[i] for i in sup_idx],
            endpoint_pointmaps=[pm_first, pm_last])
        if endpoint_init:
            cloud0 = co.init_from_endpoints(supervision)
        else:
            count = min(int(pm_first.valid.sum() + pm_last.valid.sum()),
                        co.MAX_INIT_GAUSSIANS)
            cloud0 = _random_cloud(merged_pts, count,
                                   seed=_sub_seed(cfg.seed, 6, 0))
        init_info = {"n_gaussians": int(cloud0.positions.shape[0]),
                     "endpoint_init": bool(endpoint_init)}

    with _stage("optimize", timings):
        weights = co.LossWeights(cfg.w_rgb, cfg.w_ssim, cfg.w_perceptual)
        cloud_fit, trace, opt_metrics = co.optimize_scene(
            supervision, cloud0, steps=cfg.opt_steps, weights=weights,
            uniform_confidence=uniform_confidence,
            background=scene.background)
        gs.save_gaussians_ply(out / "cloud.ply", cloud_fit)
        art.add(out / "cloud.ply")
        with open(out / "loss_trace.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"])
            for i, v in enumerate(trace, start=1):
                w.writerow([i, repr(float(v))])
        art.add(out / "loss_trace.csv")

    with _stage("render", timings):
        held = holdout_indices(n)
        (out / "renders").mkdir(exist_ok=True)
        per_view = {"view_indices": held, "psnr": [], "ssim": [],
                    "perceptual": []}
        for i in held:
            img = gs.rasterize(cloud_fit, views[i],
                               background=scene.background).rgb
            sg.save_png(out / "renders" / f"heldout_{i:02d}.png", img)
            art.add(out / "renders" / f"heldout_{i:02d}.png")
            per_view["psnr"].append(co.psnr(img, gt[i].rgb))
            per_view["ssim"].append(co.ssim(img, gt[i].rgb))
            per_view["perceptual"].append(
                co.perceptual_distance(img, gt[i].rgb))
        metrics = {
            "per_view": per_view,
            "mean_psnr": float(np.mean(per_view["psnr"])),
            "mean_ssim": float(np.mean(per_view["ssim"])),
            "mean_perceptual": float(np.mean(per_view["perceptual"])),
            "final_loss": float(trace[-1]),
            "initial_loss": float(trace[0]),
            "supervision_frames": len(sup_idx),
            "uniform_confidence": bool(uniform_confidence),
            **init_info,
            **{k: v for k, v in opt_metrics.items()
               if isinstance(v, (int, float))},
        }
        _write_json(out / "metrics.json", metrics)
        art.add(out / "metrics.json")

    report = RunReport(command="reconstruct", config_hash=cf.config_hash(cfg),
                       seed=cfg.seed, timings=timings, alignment=align_info,
                       diffusion=diff_info, metrics=metrics,
                       artifacts=art.table)
    report.save(out / "report.json")
    return report


# ---------------------------------------------------------------------------
# orbit360
# ---------------------------------------------------------------------------

def _window_gate(frames: np.ndarray) -> dict:
    """Content check for one generated window; see module docstring."""
    if not np.isfinite(frames).all():
        return {"ok": False, "reason": "non-finite frames"}
    interior = frames[1:]
    novelty = float(np.mean([np.mean(np.abs(f - frames[0]))
                             for f in interior]))
    jump = float(max(np.mean(np.abs(frames[k + 1] - frames[k]))
                     for k in range(frames.shape[0] - 1)))
    ok = novelty > GATE_MIN_NOVELTY and jump < GATE_MAX_JUMP
    reason = None
    if not ok:
        reason = ("static content" if novelty <= GATE_MIN_NOVELTY
                  else "temporally incoherent content")
    return {"ok": ok, "reason": reason, "novelty": novelty, "jump": jump}


def orbit360(cfg: cf.RunConfig, out_dir=None) -> RunReport:
    """Incremental 360° generation and fusion around one scene."""
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}
    art = _Artifacts(out)

    ckpt_field = "orbit_checkpoint" if cfg.orbit_checkpoint else "checkpoint"
    cf.require_paths(cfg, ckpt_field)
    ckpt, enc = _load_bundle(getattr(cfg, ckpt_field))
    n = ckpt.params.n_frames
    slots = list(ckpt.manifest.get("cond_slots", [0, n - 1]))
    if slots != [0, n // 2]:
        raise cf.ConfigError(
            f"orbit360 needs the intermediate-conditioning checkpoint "
            f"variant (condition slots [0, {n // 2}]), got {slots}")
    if n != cfg.n_frames:
        raise cf.ConfigError(
            f"checkpoint generates {n}-frame clips, config expects "
            f"{cfg.n_frames}")

    window = float(cfg.window_yaw)
    turns = int(round(360.0 / window))
    n_ring = turns * (n - 1)
    step_deg = 360.0 / n_ring
    mid = n // 2
    sel_interp, sel_extrap = n // 4, (3 * n) // 4

    with _stage("scene", timings):
        scene = sg.generate_scene(cfg.scene_seed, cfg.difficulty)
        ring, _ = _ring_views(scene, cfg, _sub_seed(cfg.seed, 1, 0))
        img0 = sg.render_analytic(scene, ring[0]).rgb
        img_mid = sg.render_analytic(scene, ring[mid]).rgb
        (out / "inputs").mkdir(exist_ok=True)
        sg.save_png(out / "inputs" / "input_0.png", img0)
        sg.save_png(out / "inputs" / "input_1.png", img_mid)
        art.add(out / "inputs" / "input_0.png")
        art.add(out / "inputs" / "input_1.png")
        sg.save_scene(out / "scene.json", scene)
        art.add(out / "scene.json")

    with _stage("alignment", timings):
        cloud, align_info = _align_pair(scene, ring[0], ring[mid],
                                        seed=_sub_seed(cfg.seed, 2, 0))
        merged_pts, merged_conf = cloud.merged()
        pm_a, pm_b = cloud.view_points
        tokens = None
        if enc is not None:
            ratio = float(ckpt.manifest.get("token_ratio", cfg.token_ratio))
            tokens = se.encode_structure(merged_pts, enc, ratio=ratio)

    def generate(pair, seed):
        lat = _reference_latents(pair[0], pair[1])
        cond = vd.Conditioning(
            c_view=vd.encode_view_condition(lat, ckpt.params),
            c_struc=tokens)
        video = vd.ddim_sample(
            ckpt.params, cond, lat, ckpt.schedule,
            n_steps=min(cfg.ddim_steps, ckpt.schedule.t_steps),
            scales=(cfg.cfg_view, cfg.cfg_struc), seed=seed,
            cond_slots=(0, mid))
        return np.clip(vd.from_latent(video).transpose(0, 2, 3, 1), 0, 1)

    windows = []        # accepted windows: dict(frames, ring indices, kind)
    selections = []
    progress_log = []
    closure_info = None

    with _stage("orbit", timings):
        pair = (img0, img_mid)
        iteration = 0
        accepted = 0
        stall = 0
        yaw_reached = 0.0
        sel1_abs = None  # unwrapped ring index of the current selection 1
        while True:
            closing = (accepted + 1) * window >= 360.0
            if closing:
                start = sel1_abs if sel1_abs is not None else 0
                span = n_ring - start
                idx = [start + int(round(k * span / mid))
                       for k in range(mid + 1)]
                tail_step = idx[-1] - idx[-2] if mid > 0 else 1
                idx += [idx[-1] + tail_step * (k - mid)
                        for k in range(mid + 1, n)]
                window_pair = (pair[0], img0)
                kept = mid + 1
            else:
                base = accepted * (n - 1)
                idx = [base + k for k in range(n)]
                window_pair = pair
                kept = n
            frames = generate(window_pair,
                              seed=_sub_seed(cfg.seed, 5, iteration))
            gate = _window_gate(frames)
            progress_log.append({
                "iteration": iteration,
                "closing": closing,
                "gate": gate,
                "yaw_progress_deg": (idx[kept - 1] - idx[0]) * step_deg
                                    if gate["ok"] else 0.0,
            })
            iteration += 1
            if not gate["ok"]:
                stall += 1
                if stall >= STALL_MAX_ITERS:
                    raise StageError(
                        "orbit",
                        f"stalled orbit: yaw progress < "
                        f"{STALL_MIN_PROGRESS_DEG}° for {stall} consecutive "
                        f"iterations ({gate['reason']})")
                continue
            stall = 0
            wdir = out / "windows" / f"window_{len(windows):02d}"
            wdir.mkdir(parents=True, exist_ok=True)
            for k in range(n):
                sg.save_png(wdir / f"frame_{k:02d}.png", frames[k])
                art.add(wdir / f"frame_{k:02d}.png")
            _write_json(wdir / "cameras.json", {
                "ring_indices": idx,
                "kept": kept,
                "yaw_deg": [i * step_deg for i in idx],
                "cameras": [sg.camera_to_dict(ring[i % n_ring])
                            for i in idx],
            })
            art.add(wdir / "cameras.json")
            windows.append({"frames": frames, "idx": idx, "kept": kept,
                            "closing": closing})
            if closing:
                yaw_reached = idx[kept - 1] * step_deg
                closure_info = {
                    "pair": [
                        f"windows/window_{len(windows) - 2:02d}/"
                        f"frame_{sel_interp:02d}.png",
                        "inputs/input_0.png",
                    ],
                    "kept_frames": kept,
                    "closure_yaw_deg": yaw_reached,
                }
                break
            yaw_reached = idx[-1] * step_deg
            selections.append({
                "window": len(windows) - 1,
                "interp_index": sel_interp,
                "extrap_index": sel_extrap,
                "interp_ring_index": idx[sel_interp],
                "extrap_ring_index": idx[sel_extrap],
                "interp_yaw_deg": idx[sel_interp] * step_deg,
                "extrap_yaw_deg": idx[sel_extrap] * step_deg,
            })
            pair = (frames[sel_interp], frames[sel_extrap])
            sel1_abs = idx[sel_interp]
            accepted += 1
        _write_json(out / "selections.json", {
            "selections": selections,
            "closure": closure_info,
            "progress": progress_log,
            "first_frame_yaw_deg": 0.0,
            "final_frame_yaw_deg": yaw_reached,
        })
        art.add(out / "selections.json")

    with _stage("fuse", timings):
        sup_frames, sup_views, confs = [], [], []
        for w in windows:
            keep = [k for k in (0, n // 4, mid, (3 * n) // 4)
                    if k < w["kept"]]
            for k in keep:
                cam = ring[w["idx"][k] % n_ring]
                sup_frames.append(w["frames"][k])
                sup_views.append(cam)
                confs.append(_coverage_confidence(merged_pts, merged_conf,
                                                  cam))
        # real input content carries the aligned endpoint confidences, and
        # the second reference view goes last so initialization reads its
        # colors from the matching frame
        confs[0] = _endpoint_confidence(pm_a, cloud.view_conf[0])
        sup_frames.append(img_mid)
        sup_views.append(ring[mid])
        confs.append(_endpoint_confidence(pm_b, cloud.view_conf[1]))
        supervision = co.SupervisionSet(
            frames=np.stack(sup_frames), confidences=confs, views=sup_views,
            endpoint_pointmaps=[pm_a, pm_b])
        cloud0 = co.init_from_endpoints(supervision)
        weights = co.LossWeights(cfg.w_rgb, cfg.w_ssim, cfg.w_perceptual)
        cloud_fit, trace, _ = co.optimize_scene(
            supervision, cloud0, steps=cfg.opt_steps, weights=weights,
            background=scene.background)
        gs.save_gaussians_ply(out / "cloud.ply", cloud_fit)
        art.add(out / "cloud.ply")

    with _stage("render", timings):
        (out / "renders").mkdir(exist_ok=True)
        per_view = {"ring_indices": [], "psnr": []}
        for w in windows:
            if w["closing"]:
                continue
            ri = w["idx"][2] % n_ring
            img = gs.rasterize(cloud_fit, ring[ri],
                               background=scene.background).rgb
            sg.save_png(out / "renders" / f"probe_{ri:03d}.png", img)
            art.add(out / "renders" / f"probe_{ri:03d}.png")
            per_view["ring_indices"].append(ri)
            per_view["psnr"].append(
                co.psnr(img, sg.render_analytic(scene, ring[ri]).rgb))
        metrics = {
            "iterations": iteration,
            "accepted_windows": len(windows),
            "yaw_reached_deg": yaw_reached,
            "closure_yaw_error_deg": abs(yaw_reached - 360.0 * round(
                yaw_reached / 360.0)),
            "probe_psnr": per_view,
            "mean_probe_psnr": float(np.mean(per_view["psnr"]))
            if per_view["psnr"] else None,
            "final_loss": float(trace[-1]),
        }
        _write_json(out / "metrics.json", metrics)
        art.add(out / "metrics.json")

    report = RunReport(command="orbit360", config_hash=cf.config_hash(cfg),
                       seed=cfg.seed, timings=timings, alignment=align_info,
                       diffusion={"checkpoint_step": ckpt.step,
                                  "cond_slots": slots},
                       metrics=metrics, artifacts=art.table)
    report.save(out / "report.json")
    return report


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

def ablate(cfg: cf.RunConfig, out_dir=None) -> Path:
    """Leave-one-out grid over the four pipeline ingredients, one row
    per configuration, metrics averaged over ``cfg.ablate_seeds``."""
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    timings = {}
    for name, diffusion, structure, _i, _c, _p in ABLATION_ROWS:
        if diffusion and structure and not cfg.checkpoint:
            raise cf.ConfigError(
                f"ablation row {name!r} requires the 'checkpoint' variant")
        if diffusion and not structure and not cfg.no_structure_checkpoint:
            raise cf.ConfigError(
                f"ablation row {name!r} requires the "
                f"'no_structure_checkpoint' variant")
    cf.require_paths(cfg, "checkpoint", "no_structure_checkpoint")

    rows = []
    detail = {}
    with _stage("ablate", timings):
        out.mkdir(parents=True, exist_ok=True)
        for name, diffusion, structure, endpoint_init, confidence, \
                perceptual in ABLATION_ROWS:
            per_seed = []
            for seed in cfg.ablate_seeds:
                sub = replace(
                    cfg, seed=seed,
                    w_perceptual=cfg.w_perceptual if perceptual else 0.0)
                rdir = out / "rows" / name / f"seed_{seed}"
                rep = reconstruct(
                    sub, rdir,
                    two_view_only=not diffusion,
                    no_structure=not structure,
                    endpoint_init=endpoint_init,
                    uniform_confidence=not confidence,
                    checkpoint_path=(None if not diffusion
                                     else (cfg.checkpoint if structure
                                           else cfg.no_structure_checkpoint)))
                per_seed.append(rep.metrics)
            rows.append({
                "variant": name,
                "psnr": float(np.mean([m["mean_psnr"] for m in per_seed])),
                "ssim": float(np.mean([m["mean_ssim"] for m in per_seed])),
                "perceptual": float(np.mean([m["mean_perceptual"]
                                             for m in per_seed])),
                "reference": name == "full",
            })
            detail[name] = per_seed
        csv_path = out / "ablation.csv"
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "psnr", "ssim", "perceptual", "reference"])
            for r in rows:
                w.writerow([r["variant"], repr(r["psnr"]), repr(r["ssim"]),
                            repr(r["perceptual"]),
                            "yes" if r["reference"] else "no"])
        _write_json(out / "ablation.json", {
            "config_hash": cf.config_hash(cfg),
            "seeds": cfg.ablate_seeds,
            "rows": rows,
            "per_seed": detail,
        })
    return csv_path


# ---------------------------------------------------------------------------
# eval / render
# ---------------------------------------------------------------------------

def evaluate(cfg: cf.RunConfig, run_dir) -> dict:
    """Audit a finished run: verify every artifact checksum, then
    recompute the held-out metrics from the persisted cloud and compare
    them against the report."""
    rd = Path(run_dir)
    timings = {}
    with _stage("eval", timings):
        report = RunReport.load(rd / "report.json")
        if report.config_hash != cf.config_hash(cfg):
            raise cf.ConfigError(
                f"config hash {cf.config_hash(cfg)[:12]} does not match "
                f"the run's {report.config_hash[:12]}")
        for name, entry in report.artifacts.items():
            p = rd / entry["path"]
            if not p.exists():
                raise StageError("eval", f"artifact {name} missing: {p}")
            if _sha256(p) != entry["sha256"]:
                raise StageError("eval",
                                 f"artifact {name} checksum mismatch: {p}")
        if report.command != "reconstruct":
            result = {"verified_artifacts": len(report.artifacts),
                      "metrics_recomputed": False}
            _write_json(rd / "eval.json", result)
            return result
        scene, views = _scene_and_views(cfg)
        cloud = gs.load_gaussians_ply(rd / "cloud.ply")
        recomputed = {"psnr": [], "ssim": [], "perceptual": []}
        for i in holdout_indices(cfg.n_frames):
            img = gs.rasterize(cloud, views[i],
                               background=scene.background).rgb
            gt = sg.render_analytic(scene, views[i]).rgb
            recomputed["psnr"].append(co.psnr(img, gt))
            recomputed["ssim"].append(co.ssim(img, gt))
            recomputed["perceptual"].append(co.perceptual_distance(img, gt))
        stored = report.metrics["per_view"]
        for key in ("psnr", "ssim", "perceptual"):
            if not np.allclose(recomputed[key], stored[key], atol=1e-9):
                raise StageError(
                    "eval", f"recomputed {key} disagrees with the report")
        result = {
            "verified_artifacts": len(report.artifacts),
            "metrics_recomputed": True,
            "mean_psnr": float(np.mean(recomputed["psnr"])),
            "mean_ssim": float(np.mean(recomputed["ssim"])),
            "mean_perceptual": float(np.mean(recomputed["perceptual"])),
        }
        _write_json(rd / "eval.json", result)
    return result


def render_novel(cfg: cf.RunConfig, run_dir) -> Path:
    """Render the config trajectory from a run's persisted cloud."""
    rd = Path(run_dir)
    timings = {}
    with _stage("render", timings):
        cloud = gs.load_gaussians_ply(rd / "cloud.ply")
        scene, views = _scene_and_views(cfg)
        outdir = rd / "renders_novel"
        outdir.mkdir(exist_ok=True)
        files = {}
        for i, view in enumerate(views):
            p = outdir / f"render_{i:02d}.png"
            sg.save_png(p, gs.rasterize(cloud, view,
                                        background=scene.background).rgb)
            files[p.name] = _sha256(p)
        _write_json(outdir / "index.json", {
            "config_hash": cf.config_hash(cfg),
            "files": files,
        })
    return outdir

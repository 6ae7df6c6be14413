"""Run configuration: one TOML file per run, hashed into every output.

The file is organized in sections ([scene], [trajectory], [diffusion],
...) that flatten onto the :class:`RunConfig` dataclass.  Parsing is
strict — an unknown section or key is a :class:`ConfigError`, not a
warning — and every numeric field is range-checked up front so a typo
fails before any stage runs.  ``config_hash`` digests the complete
flattened config; commands stamp it into manifests, checkpoints and
reports so artifacts can be traced back to the exact configuration that
produced them.

Input paths (checkpoints, corpus directories) are validated for
existence by the command that reads them, not at parse time: a single
config file may describe a whole workflow whose later stages reference
outputs that earlier stages have not produced yet.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:          # Python < 3.11
    import tomli as tomllib

__all__ = [
    "ConfigError",
    "RunConfig",
    "load_config",
    "validate_config",
    "require_paths",
    "config_hash",
    "config_dict",
]


class ConfigError(ValueError):
    """Bad configuration: unknown key, out-of-range value, missing path."""


@dataclass
class RunConfig:
    # [scene]
    scene_seed: int = 0
    difficulty: str = "easy"
    # [trajectory]
    trajectory: str = "interpolate"
    n_frames: int = 16                # clip length T+2, both references included
    width: int = 64
    height: int = 64
    # [data]
    n_scenes: int = 50
    corpus: str = ""                  # corpus directory (training input)
    # [diffusion]
    checkpoint: str = ""
    no_structure_checkpoint: str = ""
    orbit_checkpoint: str = ""
    ddim_steps: int = 25
    cfg_view: float = 2.0
    cfg_struc: float = 1.5
    # [train]
    train_steps: int = 60
    batch_size: int = 2
    lr: float = 1e-3
    checkpoint_every: int = 20
    drop_prob: float = 0.1
    resume: str = ""
    conditioning: str = "endpoint"    # or "intermediate" (orbit variant)
    model_width: int = 16
    struct_width: int = 16
    token_ratio: float = 0.02
    t_steps: int = 1000
    # [loss]
    w_rgb: float = 0.8
    w_ssim: float = 0.2
    w_perceptual: float = 0.5
    # [optimize]
    opt_steps: int = 300
    # [orbit]
    window_yaw: float = 90.0
    # [ablate]
    ablate_seeds: list = field(default_factory=lambda: [0])
    # top level
    seed: int = 0
    out_dir: str = "out"


# (section, toml key) -> dataclass field
_KEYS = {
    ("scene", "seed"): "scene_seed",
    ("scene", "difficulty"): "difficulty",
    ("trajectory", "kind"): "trajectory",
    ("trajectory", "frames"): "n_frames",
    ("trajectory", "width"): "width",
    ("trajectory", "height"): "height",
    ("data", "scenes"): "n_scenes",
    ("data", "corpus"): "corpus",
    ("diffusion", "checkpoint"): "checkpoint",
    ("diffusion", "no_structure_checkpoint"): "no_structure_checkpoint",
    ("diffusion", "orbit_checkpoint"): "orbit_checkpoint",
    ("diffusion", "ddim_steps"): "ddim_steps",
    ("diffusion", "cfg_view"): "cfg_view",
    ("diffusion", "cfg_struc"): "cfg_struc",
    ("train", "steps"): "train_steps",
    ("train", "batch"): "batch_size",
    ("train", "lr"): "lr",
    ("train", "save_every"): "checkpoint_every",
    ("train", "drop_prob"): "drop_prob",
    ("train", "resume"): "resume",
    ("train", "conditioning"): "conditioning",
    ("train", "width"): "model_width",
    ("train", "struct_width"): "struct_width",
    ("train", "token_ratio"): "token_ratio",
    ("train", "t_steps"): "t_steps",
    ("loss", "rgb"): "w_rgb",
    ("loss", "ssim"): "w_ssim",
    ("loss", "perceptual"): "w_perceptual",
    ("optimize", "steps"): "opt_steps",
    ("orbit", "window_yaw"): "window_yaw",
    ("ablate", "seeds"): "ablate_seeds",
    (None, "seed"): "seed",
    (None, "out_dir"): "out_dir",
}

_PATH_FIELDS = ("corpus", "checkpoint", "no_structure_checkpoint",
                "orbit_checkpoint", "resume")


def _coerce(field_name: str, value, where: str):
    """TOML value -> field value with strict typing (bool is not an int)."""
    want = RunConfig.__dataclass_fields__[field_name].type
    if not isinstance(want, str):
        want = want.__name__
    if field_name == "ablate_seeds":
        if (not isinstance(value, list) or not value
                or any(isinstance(v, bool) or not isinstance(v, int)
                       for v in value)):
            raise ConfigError(f"{where}: expected a non-empty list of ints")
        return list(value)
    if isinstance(value, bool):
        raise ConfigError(f"{where}: expected {want}, got a bool")
    if want == "int":
        if not isinstance(value, int):
            raise ConfigError(f"{where}: expected an int, got {value!r}")
        return value
    if want == "float":
        if not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if want == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported field type {want}")


def load_config(path, overrides: dict = None) -> RunConfig:
    """Parse and validate one run's TOML file.

    ``overrides`` maps RunConfig field names to replacement values
    (command-line --seed/--out land here, after the file is read).
    """
    p = Path(path)
    try:
        raw = tomllib.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}")
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{p}: invalid TOML: {e}")

    values = {}
    for key, val in raw.items():
        if isinstance(val, dict):
            for sub, subval in val.items():
                fname = _KEYS.get((key, sub))
                if fname is None:
                    raise ConfigError(f"{p}: unknown key [{key}] {sub}")
                values[fname] = _coerce(fname, subval, f"[{key}] {sub}")
        else:
            fname = _KEYS.get((None, key))
            if fname is None:
                raise ConfigError(f"{p}: unknown top-level key {key!r}")
            values[fname] = _coerce(fname, val, key)
    if overrides:
        for fname, val in overrides.items():
            if fname not in RunConfig.__dataclass_fields__:
                raise ConfigError(f"unknown config field {fname!r}")
            values[fname] = val
    cfg = RunConfig(**values)
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    def fail(msg):
        raise ConfigError(msg)

    if cfg.difficulty not in ("easy", "hard"):
        fail(f"difficulty must be easy or hard, got {cfg.difficulty!r}")
    if cfg.trajectory not in ("orbit", "interpolate"):
        fail(f"trajectory kind must be orbit or interpolate, "
             f"got {cfg.trajectory!r}")
    if cfg.conditioning not in ("endpoint", "intermediate"):
        fail(f"conditioning must be endpoint or intermediate, "
             f"got {cfg.conditioning!r}")
    if cfg.n_frames < 6:
        fail(f"frames must be >= 6, got {cfg.n_frames}")
    for name in ("width", "height"):
        v = getattr(cfg, name)
        # perceptual pyramid needs three halvings worth of pixels
        if v < 12 or v % 4:
            fail(f"{name} must be >= 12 and divisible by 4, got {v}")
    for name, lo in (("n_scenes", 1), ("ddim_steps", 1), ("train_steps", 1),
                     ("batch_size", 1), ("checkpoint_every", 1),
                     ("opt_steps", 1), ("t_steps", 8), ("model_width", 2),
                     ("struct_width", 2)):
        if getattr(cfg, name) < lo:
            fail(f"{name} must be >= {lo}, got {getattr(cfg, name)}")
    for name in ("cfg_view", "cfg_struc", "w_rgb", "w_ssim", "w_perceptual"):
        if getattr(cfg, name) < 0:
            fail(f"{name} must be >= 0, got {getattr(cfg, name)}")
    if cfg.lr <= 0:
        fail(f"lr must be > 0, got {cfg.lr}")
    if not 0.0 <= cfg.drop_prob < 1.0:
        fail(f"drop_prob must be in [0, 1), got {cfg.drop_prob}")
    if not 0.0 < cfg.token_ratio <= 1.0:
        fail(f"token_ratio must be in (0, 1], got {cfg.token_ratio}")
    if not 0.0 < cfg.window_yaw <= 180.0 or 360.0 % cfg.window_yaw:
        fail(f"window_yaw must divide 360 and lie in (0, 180], "
             f"got {cfg.window_yaw}")
    if not cfg.out_dir:
        fail("out_dir must be non-empty")


def require_paths(cfg: RunConfig, *fields: str) -> None:
    """Existence check for the input paths a command actually reads."""
    for name in fields:
        if name not in _PATH_FIELDS:
            raise ValueError(f"{name} is not a path field")
        value = getattr(cfg, name)
        if not value:
            raise ConfigError(f"config field {name} is required "
                              f"for this command")
        if not Path(value).exists():
            raise ConfigError(f"{name}: path does not exist: {value}")


def config_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(config_dict(cfg), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()

"""Point-cloud structure encoder.

Turns an aligned global point cloud into a fixed-length token sequence:
farthest-point downsampling picks M = ceil(N/8) anchor points, every
point gets a sinusoidal position embedding refined by a small MLP, and
one single-head cross-attention block (anchors as queries, full cloud
as keys/values) followed by a feed-forward block distills the cloud
into M tokens of width C.

All learned pieces are ``diffarray`` tensors so the encoder trains
jointly with whatever consumes its tokens.  Coordinates are normalized
into [-1, 1]^3 by the cloud's own bounding box before embedding, since
the sinusoidal basis needs bounded inputs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffarray as da

__all__ = [
    "DEFAULT_WIDTH",
    "DEFAULT_OCTAVES",
    "StructureTokens",
    "EncoderParams",
    "downsample_count",
    "fps_downsample",
    "sinusoidal_basis",
    "normalize_points",
    "init_encoder_params",
    "pos_embed",
    "encode_structure",
    "save_encoder",
    "load_encoder",
]

DEFAULT_WIDTH = 64
DEFAULT_OCTAVES = 6


@dataclass
class StructureTokens:
    """M x C token matrix plus the size of the cloud it came from."""
    tokens: da.Tensor
    source_count: int


@dataclass
class EncoderParams:
    """Named tensors of the embedding MLP, attention, and FFN blocks."""
    width: int
    octaves: int
    tensors: dict

    def parameters(self) -> dict:
        return self.tensors


def downsample_count(n: int) -> int:
    return math.ceil(n / 8)


def fps_downsample(points: np.ndarray, ratio: float = 0.125,
                   start: int = 0) -> np.ndarray:
    """Greedy farthest-point sampling indices, deterministic.

    Starting from ``start``, each pick maximizes the minimum distance to
    everything already chosen (first index wins ties).  Returns
    ceil(N * ratio) indices in pick order.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    if n < 8:
        raise ValueError(f"fps_downsample: need at least 8 points, got {n}")
    m = math.ceil(n * ratio)
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start
    dist = np.linalg.norm(points - points[start], axis=1)
    for k in range(1, m):
        nxt = int(np.argmax(dist))
        chosen[k] = nxt
        dist = np.minimum(dist, np.linalg.norm(points - points[nxt], axis=1))
    return chosen


def sinusoidal_basis(points: np.ndarray, octaves: int = DEFAULT_OCTAVES) -> np.ndarray:
    """[sin(2^o pi p), cos(2^o pi p)] over all octaves and axes: N x 6*octaves."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    freqs = (2.0 ** np.arange(octaves)) * np.pi
    ang = (points[:, :, None] * freqs).reshape(points.shape[0], -1)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def normalize_points(points: np.ndarray):
    """Map into [-1, 1]^3 by the bounding box; returns (normed, center, half)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    center = 0.5 * (lo + hi)
    half = max(float(np.max(hi - lo)) * 0.5, 1e-12)
    return (points - center) / half, center, half


def init_encoder_params(seed: int = 0, width: int = DEFAULT_WIDTH,
                        octaves: int = DEFAULT_OCTAVES) -> EncoderParams:
    rng = np.random.default_rng(seed)
    in_dim = 6 * octaves + 3

    def lin(name, fan_in, fan_out, tensors):
        scale = math.sqrt(2.0 / (fan_in + fan_out))
        tensors[name + ".w"] = da.Tensor(
            rng.standard_normal((fan_in, fan_out)) * scale, requires_grad=True)
        tensors[name + ".b"] = da.Tensor(np.zeros(fan_out), requires_grad=True)

    tensors: dict = {}
    lin("pos.fc1", in_dim, width, tensors)
    lin("pos.fc2", width, width, tensors)
    for name in ("attn.wq", "attn.wk", "attn.wv", "attn.wo"):
        scale = math.sqrt(1.0 / width)
        tensors[name] = da.Tensor(
            rng.standard_normal((width, width)) * scale, requires_grad=True)
    lin("ffn.fc1", width, 2 * width, tensors)
    lin("ffn.fc2", 2 * width, width, tensors)
    return EncoderParams(width=width, octaves=octaves, tensors=tensors)


def pos_embed(points: np.ndarray, params: EncoderParams) -> da.Tensor:
    """Sinusoidal basis concat raw coords, through the two-layer MLP: N x C."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.isfinite(points).all():
        raise ValueError("pos_embed: non-finite coordinates")
    feats = np.concatenate(
        [sinusoidal_basis(points, params.octaves), points], axis=1)
    t = params.tensors
    h = da.tensor(feats) @ t["pos.fc1.w"] + t["pos.fc1.b"]
    return h.silu() @ t["pos.fc2.w"] + t["pos.fc2.b"]


def encode_structure(cloud, params: EncoderParams, ratio: float = 0.125,
                     query_points: np.ndarray = None) -> StructureTokens:
    """Distill a point cloud into ceil(N*ratio) tokens of width C.

    ``cloud`` is anything with a ``merged()`` -> (points, conf) method or
    a plain N x 3 array.  Queries default to the FPS anchors; passing
    ``query_points`` overrides them (used by the key-permutation tests).
    Attention weights per query sum to 1 by construction (softmax).
    """
    if hasattr(cloud, "merged"):
        points = cloud.merged()[0]
    else:
        points = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    if n == 0:
        raise ValueError("encode_structure: empty cloud")

    normed, center, half = normalize_points(points)
    if query_points is None:
        anchors = normed[fps_downsample(points, ratio=ratio)]
    else:
        anchors = (np.asarray(query_points, dtype=np.float64).reshape(-1, 3)
                   - center) / half

    emb_keys = pos_embed(normed, params)
    emb_query = pos_embed(anchors, params)
    t = params.tensors
    att = da.attention(emb_query @ t["attn.wq"],
                       emb_keys @ t["attn.wk"],
                       emb_keys @ t["attn.wv"]) @ t["attn.wo"]
    h = att @ t["ffn.fc1.w"] + t["ffn.fc1.b"]
    tokens = h.silu() @ t["ffn.fc2.w"] + t["ffn.fc2.b"]
    if not np.isfinite(tokens.data).all():
        raise ValueError("encode_structure: non-finite tokens")
    return StructureTokens(tokens=tokens, source_count=n)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_encoder(dirpath, params: EncoderParams) -> None:
    """One RXT1 file per tensor plus a manifest.json with shapes and sizes."""
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {"width": params.width, "octaves": params.octaves, "tensors": {}}
    for name, tens in sorted(params.tensors.items()):
        fname = name.replace(".", "_") + ".rxt"
        da.save_array(d / fname, tens.data)
        manifest["tensors"][name] = {
            "file": fname,
            "shape": list(tens.data.shape),
        }
    (d / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_encoder(dirpath) -> EncoderParams:
    d = Path(dirpath)
    manifest = json.loads((d / "manifest.json").read_text())
    tensors = {}
    for name, entry in manifest["tensors"].items():
        arr = da.load_array(d / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise da.FormatError(
                f"load_encoder: {name} shape {list(arr.shape)} != manifest "
                f"{entry['shape']}")
        tensors[name] = da.Tensor(arr, requires_grad=True)
    return EncoderParams(width=manifest["width"],
                         octaves=manifest["octaves"], tensors=tensors)

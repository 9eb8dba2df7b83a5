"""Transformer encoder over token grids, the feature neck, and frozen
teacher providers for cross-modal distillation.

Teacher feature files (".hvt", little-endian): magic "HVT1", u32 rows,
u32 cols, u32 dim, then rows*cols*dim f32.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from .cube import RgbImage
from .masks import FormatError
from .numerics import Tensor
from .spectral_embed import TokenGrid

TEACHER_MAGIC = b"HVT1"

STAGES = ("tokens", "backbone", "neck", "student", "teacher")


@dataclass
class FeatureMap:
    """A (rows, cols, dim) activation grid tagged with its pipeline stage."""

    rows: int
    cols: int
    dim: int
    data: Tensor
    stage: str

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.data.shape != (self.rows, self.cols, self.dim):
            raise ValueError(f"feature shape {self.data.shape} != declared dims")


@dataclass(frozen=True)
class EncoderParams:
    depth: int = 4
    token_dim: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    max_grid: int = 16

    def __post_init__(self):
        if self.depth < 0:
            raise ValueError("depth must be >= 0")
        if self.token_dim % self.heads:
            raise ValueError("token_dim must be divisible by heads")


def bilinear_matrix(src: int, dst: int, dtype) -> np.ndarray:
    """(dst, src) interpolation weights along one axis, endpoints aligned."""
    m = np.zeros((dst, src), dtype=dtype)
    if dst == 1:
        m[0, 0] = 1.0
        return m
    for i in range(dst):
        pos = i * (src - 1) / (dst - 1)
        lo = int(math.floor(pos))
        hi = min(lo + 1, src - 1)
        frac = pos - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    return m


def _init_linear(rng, fan_in, fan_out, dtype):
    w = rng.normal(0.0, 0.02, size=(fan_in, fan_out)).astype(dtype)
    b = np.zeros(fan_out, dtype=dtype)
    return w, b


def multihead_attention(x_q: Tensor, x_kv: Tensor, p: dict[str, Tensor], heads: int) -> Tensor:
    """Standard scaled dot-product attention; (nq, d) x (nk, d) -> (nq, d).

    Key projections carry no bias: a key bias shifts every score of a query
    by the same amount, which softmax cancels, leaving a dead parameter.
    """
    nq, d = x_q.shape
    nk = x_kv.shape[0]
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)

    def split(t, n):
        return nm.transpose(nm.reshape(t, (n, heads, dh)), (1, 0, 2))

    q = split(nm.linear(x_q, p["q.w"], p["q.b"]), nq)
    k = split(nm.linear(x_kv, p["k.w"]), nk)
    v = split(nm.linear(x_kv, p["v.w"], p["v.b"]), nk)
    scores = nm.matmul(q, nm.transpose(k, (0, 2, 1))) * scale
    attn = nm.softmax(scores, axis=-1)
    mixed = nm.matmul(attn, v)  # (heads, nq, dh)
    merged = nm.reshape(nm.transpose(mixed, (1, 0, 2)), (nq, d))
    return nm.linear(merged, p["o.w"], p["o.b"])


def transformer_block(x: Tensor, p: dict[str, Tensor], heads: int) -> Tensor:
    """Pre-norm self-attention block with a gelu MLP."""
    normed = nm.layernorm(x, p["ln1.g"], p["ln1.b"])
    h = nm.add(x, multihead_attention(normed, normed, p, heads))
    normed = nm.layernorm(h, p["ln2.g"], p["ln2.b"])
    mlp = nm.linear(nm.gelu(nm.linear(normed, p["mlp1.w"], p["mlp1.b"])), p["mlp2.w"], p["mlp2.b"])
    return nm.add(h, mlp)


class Encoder:
    """Multi-layer pre-norm transformer; output dims equal input dims."""

    def __init__(self, cfg: EncoderParams, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        d = cfg.token_dim
        self.pos = Tensor(
            rng.normal(0.0, 0.02, size=(cfg.max_grid, cfg.max_grid, d)).astype(dtype),
            requires_grad=True,
        )
        self.layers: list[dict[str, Tensor]] = []
        hidden = d * cfg.mlp_ratio
        for _ in range(cfg.depth):
            layer = {}
            for name in ("q", "k", "v", "o"):
                w, b = _init_linear(rng, d, d, dtype)
                layer[f"{name}.w"] = Tensor(w, requires_grad=True)
                if name != "k":
                    layer[f"{name}.b"] = Tensor(b, requires_grad=True)
            w1, b1 = _init_linear(rng, d, hidden, dtype)
            w2, b2 = _init_linear(rng, hidden, d, dtype)
            layer["mlp1.w"] = Tensor(w1, requires_grad=True)
            layer["mlp1.b"] = Tensor(b1, requires_grad=True)
            layer["mlp2.w"] = Tensor(w2, requires_grad=True)
            layer["mlp2.b"] = Tensor(b2, requires_grad=True)
            for g_name in ("ln1", "ln2"):
                layer[f"{g_name}.g"] = Tensor(np.ones(d, dtype=dtype), requires_grad=True)
                layer[f"{g_name}.b"] = Tensor(np.zeros(d, dtype=dtype), requires_grad=True)
            self.layers.append(layer)

    def named_params(self) -> dict[str, Tensor]:
        out = {"encoder.pos": self.pos}
        for i, layer in enumerate(self.layers):
            for k, v in layer.items():
                out[f"encoder.{i}.{k}"] = v
        return out

    def positional(self, rows: int, cols: int) -> Tensor:
        """Positional grid resized to (rows, cols) by bilinear interpolation."""
        g = self.cfg.max_grid
        if rows > g or cols > g:
            raise ValueError(f"grid {rows}x{cols} exceeds positional capacity {g}x{g}")
        if rows == g and cols == g:
            return self.pos
        dtype = self.pos.data.dtype
        mr = Tensor(bilinear_matrix(g, rows, dtype))
        mc = Tensor(bilinear_matrix(g, cols, dtype))
        d = self.cfg.token_dim
        flat = nm.matmul(mr, nm.reshape(self.pos, (g, g * d)))  # (rows, g*d)
        byrow = nm.reshape(flat, (rows * g, d))
        grid = nm.reshape(byrow, (rows, g, d))
        swapped = nm.reshape(nm.transpose(grid, (1, 0, 2)), (g, rows * d))
        interp = nm.matmul(mc, swapped)  # (cols, rows*d)
        return nm.transpose(nm.reshape(interp, (cols, rows, d)), (1, 0, 2))

    def forward(self, tokens: TokenGrid) -> FeatureMap:
        r, c, d = tokens.rows, tokens.cols, tokens.dim
        x = nm.add(tokens.data, self.positional(r, c))
        x = nm.reshape(x, (r * c, d))
        for layer in self.layers:
            x = transformer_block(x, layer, self.cfg.heads)
        return FeatureMap(rows=r, cols=c, dim=d, data=nm.reshape(x, (r, c, d)), stage="backbone")


class Neck:
    """1x1 projection to the decoder width followed by layernorm."""

    def __init__(self, token_dim: int, neck_dim: int, rng: np.random.Generator, dtype=np.float32):
        self.token_dim = token_dim
        self.neck_dim = neck_dim
        w, b = _init_linear(rng, token_dim, neck_dim, dtype)
        self.proj_w = Tensor(w, requires_grad=True)
        self.proj_b = Tensor(b, requires_grad=True)
        self.ln_g = Tensor(np.ones(neck_dim, dtype=dtype), requires_grad=True)
        self.ln_b = Tensor(np.zeros(neck_dim, dtype=dtype), requires_grad=True)

    def named_params(self) -> dict[str, Tensor]:
        return {
            "neck.proj.w": self.proj_w,
            "neck.proj.b": self.proj_b,
            "neck.ln.g": self.ln_g,
            "neck.ln.b": self.ln_b,
        }

    def forward(self, feat: FeatureMap) -> FeatureMap:
        r, c, d = feat.rows, feat.cols, feat.dim
        x = nm.reshape(feat.data, (r * c, d))
        y = nm.layernorm(nm.linear(x, self.proj_w, self.proj_b), self.ln_g, self.ln_b)
        return FeatureMap(rows=r, cols=c, dim=self.neck_dim,
                          data=nm.reshape(y, (r, c, self.neck_dim)), stage="neck")


# ---------------------------------------------------------------------------
# teachers


def write_teacher_features(feat: FeatureMap, path: str | Path) -> None:
    r, c, d = feat.rows, feat.cols, feat.dim
    out = bytearray()
    out += TEACHER_MAGIC
    out += struct.pack("<III", r, c, d)
    out += np.ascontiguousarray(feat.data.data, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def read_teacher_features(path: str | Path) -> FeatureMap:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    if raw[:4] != TEACHER_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    r, c, d = struct.unpack_from("<III", raw, 4)
    need = 16 + 4 * r * c * d
    if len(raw) != need:
        raise FormatError(f"{path}: payload is {len(raw)} bytes, expected {need}")
    data = np.frombuffer(raw, dtype="<f4", count=r * c * d, offset=16).reshape(r, c, d)
    return FeatureMap(rows=r, cols=c, dim=d, data=Tensor(data.copy()), stage="teacher")


def _sinusoid_freqs(n: int) -> np.ndarray:
    # log-spaced, detuned from integer multiples of common grid sizes so no
    # channel is constant over a regular grid
    return (2.0 * math.pi) * 0.53 * (44.7 ** (np.arange(n) / max(n - 1, 1)))


def sinusoid_pair(row_norm, col_norm, dim: int) -> np.ndarray:
    """Fixed sin/cos features of normalized 2-d coordinates.

    `row_norm`/`col_norm` may be scalars or broadcastable arrays in [0, 1];
    the result appends a trailing axis of length `dim`."""
    half = dim // 2
    n_freq = max(1, half // 2)
    freqs = _sinusoid_freqs(n_freq)
    rr = np.asarray(row_norm, dtype=np.float64)[..., None] * freqs
    cc = np.asarray(col_norm, dtype=np.float64)[..., None] * freqs
    lead = np.broadcast_shapes(np.shape(row_norm), np.shape(col_norm))
    out = np.zeros(lead + (dim,), dtype=np.float64)
    out[..., 0 : 2 * n_freq : 2] = np.sin(rr)
    out[..., 1 : 2 * n_freq : 2] = np.cos(rr)
    out[..., half : half + 2 * n_freq : 2] = np.sin(cc)
    out[..., half + 1 : half + 2 * n_freq : 2] = np.cos(cc)
    return out


def sinusoid_grid(rows: int, cols: int, dim: int, dtype=np.float32) -> np.ndarray:
    """Position features for a token grid, evaluated at cell centers so they
    live in the same normalized coordinate frame as pixel prompts."""
    rr = (np.arange(rows) + 0.5) / rows
    cc = (np.arange(cols) + 0.5) / cols
    out = sinusoid_pair(rr[:, None], cc[None, :], dim)
    return out.astype(dtype)


class ToyTeacher:
    """Deterministic frozen feature extractor: a fixed-seed patch projection
    plus two plain-numpy transformer layers. Holds no Tensors, so gradients
    cannot reach it by construction.
    """

    def __init__(self, dim: int = 32, patch: int = 8, seed: int = 1234, heads: int = 4,
                 sharpen: float = 7.0):
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.patch = patch
        self.heads = heads
        # output gain keeps token distributions peaked, which keeps the
        # irreducible entropy floor of distillation small
        self.sharpen = sharpen
        d = dim
        self.w0 = rng.normal(0.0, 1.0 / math.sqrt(3 * patch * patch), size=(3 * patch * patch, d)).astype(np.float32)
        self.layers = []
        for _ in range(2):
            layer = {
                name: rng.normal(0.0, 0.08, size=(d, d)).astype(np.float32)
                for name in ("q", "k", "v", "o")
            }
            layer["m1"] = rng.normal(0.0, 0.08, size=(d, 2 * d)).astype(np.float32)
            layer["m2"] = rng.normal(0.0, 0.08, size=(2 * d, d)).astype(np.float32)
            self.layers.append(layer)

    @staticmethod
    def _ln(x):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5)

    def features(self, rgb: RgbImage, key: str | None = None) -> FeatureMap:
        p = self.patch
        h, w = rgb.height, rgb.width
        if h % p or w % p:
            raise ValueError(f"rgb dims {h}x{w} not divisible by patch {p}")
        r, c = h // p, w // p
        patches = rgb.data.reshape(r, p, c, p, 3).transpose(0, 2, 1, 3, 4).reshape(r * c, 3 * p * p)
        x = patches.astype(np.float32) @ self.w0
        x = x + sinusoid_grid(r, c, self.dim).reshape(r * c, self.dim)
        dh = self.dim // self.heads
        for layer in self.layers:
            xn = self._ln(x)
            q = (xn @ layer["q"]).reshape(-1, self.heads, dh).transpose(1, 0, 2)
            k = (xn @ layer["k"]).reshape(-1, self.heads, dh).transpose(1, 0, 2)
            v = (xn @ layer["v"]).reshape(-1, self.heads, dh).transpose(1, 0, 2)
            s = q @ k.transpose(0, 2, 1) / math.sqrt(dh)
            s = s - s.max(axis=-1, keepdims=True)
            a = np.exp(s)
            a /= a.sum(axis=-1, keepdims=True)
            x = x + (a @ v).transpose(1, 0, 2).reshape(-1, self.dim) @ layer["o"]
            xn = self._ln(x)
            x = x + np.maximum(xn @ layer["m1"], 0.0) @ layer["m2"]
        x = self._ln(x) * self.sharpen
        return FeatureMap(rows=r, cols=c, dim=self.dim,
                          data=Tensor(x.reshape(r, c, self.dim).astype(np.float32)),
                          stage="teacher")


class FileTeacher:
    """Serves precomputed features from a directory of .hvt files keyed by
    the cube's file stem."""

    def __init__(self, directory: str | Path, patch: int = 8):
        self.directory = Path(directory)
        self.patch = patch

    def features(self, rgb: RgbImage, key: str | None = None) -> FeatureMap:
        if key is None:
            raise ValueError("file teacher needs the cube name as key")
        path = self.directory / f"{key}.hvt"
        if not path.exists():
            raise FormatError(f"missing teacher feature file {path}")
        feat = read_teacher_features(path)
        p = self.patch
        if (feat.rows, feat.cols) != (rgb.height // p, rgb.width // p):
            raise FormatError(
                f"{path}: teacher grid {feat.rows}x{feat.cols} does not match "
                f"image grid {rgb.height // p}x{rgb.width // p}"
            )
        return feat

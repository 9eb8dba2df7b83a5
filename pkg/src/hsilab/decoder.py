"""Point-prompt encoding and the lightweight mask decoder.

One foreground point per mask: the prompt token is a fixed sinusoidal
encoding of the normalized point plus a learned foreground embedding.
Two two-way cross-attention blocks refine token and features; logits are
the dot product of the output token (through a small MLP) with each
spatial feature vector, at token resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .backbone import FeatureMap, _init_linear, multihead_attention, sinusoid_grid, sinusoid_pair
from .masks import InstanceMask
from .numerics import Tensor


@dataclass(frozen=True)
class Prompt:
    """A foreground point prompt in pixel coordinates."""

    row: int
    col: int
    kind: str = "foreground"


@dataclass
class PromptToken:
    data: Tensor  # (1, dim)


@dataclass
class PredictedMask:
    """Mask logits at token resolution."""

    logits: Tensor  # (rows, cols)

    def upsample(self, height: int, width: int) -> np.ndarray:
        """Bilinear upsample of the logits to pixel resolution (output only,
        not differentiable)."""
        from .backbone import bilinear_matrix

        g = self.logits.data
        mr = bilinear_matrix(g.shape[0], height, np.float64)
        mc = bilinear_matrix(g.shape[1], width, np.float64)
        return (mr @ g.astype(np.float64) @ mc.T).astype(np.float32)


def sinusoid_point(row_norm: float, col_norm: float, dim: int, dtype=np.float32) -> np.ndarray:
    """Fixed sin/cos features of a normalized 2-d point, shape (1, dim)."""
    return sinusoid_pair(row_norm, col_norm, dim).astype(dtype)[None, :]


class PromptEncoder:
    """Sinusoidal point encoding plus a learned foreground embedding."""

    def __init__(self, dim: int, rng: np.random.Generator, dtype=np.float32):
        self.dim = dim
        self.fg = Tensor(rng.normal(0.0, 0.02, size=(1, dim)).astype(dtype), requires_grad=True)

    def named_params(self) -> dict[str, Tensor]:
        return {"prompt.fg": self.fg}

    def encode(self, prompt: Prompt, height: int, width: int) -> PromptToken:
        if not (0 <= prompt.row < height and 0 <= prompt.col < width):
            raise ValueError(f"prompt point {(prompt.row, prompt.col)} outside {height}x{width}")
        pos = sinusoid_point(prompt.row / height, prompt.col / width, self.dim,
                             dtype=self.fg.data.dtype)
        return PromptToken(data=nm.add(Tensor(pos), self.fg))


def _attn_params(rng, dim, dtype):
    p = {}
    for name in ("q", "k", "v", "o"):
        w, b = _init_linear(rng, dim, dim, dtype)
        p[f"{name}.w"] = Tensor(w, requires_grad=True)
        if name != "k":
            p[f"{name}.b"] = Tensor(b, requires_grad=True)
    return p


class MaskDecoderNet:
    """Two two-way blocks, then token-feature dot-product logits."""

    def __init__(self, dim: int, rng: np.random.Generator, n_blocks: int = 2, dtype=np.float32):
        self.dim = dim
        self.blocks = []
        for _ in range(n_blocks):
            block = {"t2f": _attn_params(rng, dim, dtype), "f2t": _attn_params(rng, dim, dtype)}
            for name in ("ln_t", "ln_f", "ln_m"):
                block[f"{name}.g"] = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
                block[f"{name}.b"] = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
            w1, b1 = _init_linear(rng, dim, 2 * dim, dtype)
            w2, b2 = _init_linear(rng, 2 * dim, dim, dtype)
            block["mlp1.w"] = Tensor(w1, requires_grad=True)
            block["mlp1.b"] = Tensor(b1, requires_grad=True)
            block["mlp2.w"] = Tensor(w2, requires_grad=True)
            block["mlp2.b"] = Tensor(b2, requires_grad=True)
            self.blocks.append(block)
        wo1, bo1 = _init_linear(rng, dim, dim, dtype)
        wo2, bo2 = _init_linear(rng, dim, dim, dtype)
        self.out = {
            "out1.w": Tensor(wo1, requires_grad=True),
            "out1.b": Tensor(bo1, requires_grad=True),
            "out2.w": Tensor(wo2, requires_grad=True),
            "out2.b": Tensor(bo2, requires_grad=True),
        }

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, block in enumerate(self.blocks):
            for side in ("t2f", "f2t"):
                for k, v in block[side].items():
                    out[f"decoder.{i}.{side}.{k}"] = v
            for k, v in block.items():
                if isinstance(v, Tensor):
                    out[f"decoder.{i}.{k}"] = v
        for k, v in self.out.items():
            out[f"decoder.{k}"] = v
        return out

    def forward(self, feat: FeatureMap, token: PromptToken) -> PredictedMask:
        r, c, d = feat.rows, feat.cols, feat.dim
        if d != self.dim:
            raise ValueError(f"feature dim {d} != decoder dim {self.dim}")
        # fixed cell-center position features on the feature stream, in the
        # same coordinate frame as the prompt encoding, so prompt-location
        # matching is expressible from the start
        pos = Tensor(sinusoid_grid(r, c, d, dtype=feat.data.data.dtype).reshape(r * c, d))
        f = nm.add(nm.reshape(feat.data, (r * c, d)), pos)
        t = token.data
        for block in self.blocks:
            t_n = nm.layernorm(t, block["ln_t.g"], block["ln_t.b"])
            f_n = nm.layernorm(f, block["ln_f.g"], block["ln_f.b"])
            t = nm.add(t, multihead_attention(t_n, f_n, block["t2f"], heads=1))
            f = nm.add(f, multihead_attention(f_n, nm.layernorm(t, block["ln_t.g"], block["ln_t.b"]), block["f2t"], heads=1))
            t_m = nm.layernorm(t, block["ln_m.g"], block["ln_m.b"])
            t = nm.add(t, nm.linear(nm.gelu(nm.linear(t_m, block["mlp1.w"], block["mlp1.b"])),
                                    block["mlp2.w"], block["mlp2.b"]))
        probe = nm.linear(nm.gelu(nm.linear(t, self.out["out1.w"], self.out["out1.b"])),
                          self.out["out2.w"], self.out["out2.b"])  # (1, d)
        logits = nm.matmul(f, nm.transpose(probe, (1, 0)))  # (n, 1)
        return PredictedMask(logits=nm.reshape(logits, (r, c)))


def downsample_target(mask: InstanceMask | np.ndarray, patch: int) -> np.ndarray:
    """Token-resolution binary target: a cell is true iff the mean of its
    patch block is strictly above one half."""
    bits = mask.bits if isinstance(mask, InstanceMask) else np.asarray(mask, dtype=bool)
    h, w = bits.shape
    if h % patch or w % patch:
        raise ValueError(f"mask dims {h}x{w} not divisible by patch {patch}")
    blocks = bits.reshape(h // patch, patch, w // patch, patch).mean(axis=(1, 3))
    return blocks > 0.5

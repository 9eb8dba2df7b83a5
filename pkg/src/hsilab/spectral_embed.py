"""Channel-adaptive patch embedding.

Every 10 nm interval of the supported spectrum owns one trainable weight
slice per bank; embedding weights for a cube are assembled on the fly by
looking up each band's wavelength, so one model handles any band count.
Two banks run in parallel: one over three key bands near the RGB
primaries, one over the full cube, and their patch-convolution outputs
are summed into the token grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .cube import RGB_TARGETS_NM, HyperCube
from .numerics import Tensor

BASE_NM = 370.0
BIN_NM = 10.0
N_ENTRIES = 134  # covers [370, 1710)

# typical band count used to set the initialization scale
_TYPICAL_BANDS = 31


def wavelength_index(lambda_nm: float) -> int:
    """Dictionary slot for a wavelength: floor((lambda - 370) / 10)."""
    if not BASE_NM <= lambda_nm < BASE_NM + BIN_NM * N_ENTRIES:
        raise ValueError(f"wavelength {lambda_nm} nm outside dictionary range")
    return int((lambda_nm - BASE_NM) // BIN_NM)


@dataclass
class WavelengthDictionary:
    """Two banks of per-bin conv weight slices, each (n_entries, j, p, p)."""

    patch: int
    token_dim: int
    key_bank: Tensor
    cube_bank: Tensor

    @classmethod
    def create(cls, patch: int, token_dim: int, rng: np.random.Generator, dtype=np.float32):
        scale = 1.0 / math.sqrt(_TYPICAL_BANDS * patch * patch)
        shape = (N_ENTRIES, token_dim, patch, patch)
        key = rng.uniform(-scale, scale, size=shape).astype(dtype)
        cube = rng.uniform(-scale, scale, size=shape).astype(dtype)
        return cls(
            patch=patch,
            token_dim=token_dim,
            key_bank=Tensor(key, requires_grad=True),
            cube_bank=Tensor(cube, requires_grad=True),
        )

    def named_params(self) -> dict[str, Tensor]:
        return {"embed.key": self.key_bank, "embed.cube": self.cube_bank}


@dataclass
class BranchInputs:
    """The two embedding branches: key bands and the full cube."""

    x_key: np.ndarray
    key_wavelengths: np.ndarray
    x_cube: np.ndarray
    cube_wavelengths: np.ndarray


@dataclass
class TokenGrid:
    """Patchified embedding output, (rows, cols, dim)."""

    rows: int
    cols: int
    dim: int
    data: Tensor

    def __post_init__(self):
        if self.data.shape != (self.rows, self.cols, self.dim):
            raise ValueError(f"token grid shape {self.data.shape} != declared dims")


def key_band_positions(wavelengths: np.ndarray) -> tuple[int, int, int]:
    """Positions of the bands nearest the RGB primary targets.

    Ties between equidistant bands resolve to the lower wavelength, so the
    choice depends only on the wavelength values, not on band order.
    """
    lam = np.asarray(wavelengths, dtype=np.float64)
    picks = []
    for target in RGB_TARGETS_NM:
        dist = np.abs(lam - target)
        best = np.flatnonzero(dist == dist.min())
        picks.append(int(best[np.argmin(lam[best])]))
    return tuple(picks)


def split_branches(cube: HyperCube) -> BranchInputs:
    if cube.bands < 3:
        raise ValueError(f"branch split needs >= 3 bands, got {cube.bands}")
    return split_branch_arrays(cube.data, cube.wavelengths)


def split_branch_arrays(data: np.ndarray, wavelengths: np.ndarray) -> BranchInputs:
    picks = key_band_positions(wavelengths)
    lam = np.asarray(wavelengths, dtype=np.float64)
    return BranchInputs(
        x_key=data[:, :, list(picks)],
        key_wavelengths=lam[list(picks)],
        x_cube=data,
        cube_wavelengths=lam,
    )


def assemble_weights(bank: Tensor, wavelengths) -> Tensor:
    """Conv weights (j, c, p, p) gathered from the bank by wavelength bin.

    Slots sharing a bin reference the same entry, so its gradient is the
    sum over those slots.
    """
    idx = [wavelength_index(float(w)) for w in np.asarray(wavelengths).ravel()]
    gathered = nm.take(bank, np.asarray(idx))  # (c, j, p, p)
    return nm.transpose(gathered, (1, 0, 2, 3))


def embed(cube: HyperCube, dictionary: WavelengthDictionary) -> TokenGrid:
    """Tokenize a cube: summed patch convolutions of the two branches."""
    return embed_arrays(cube.data, cube.wavelengths, dictionary)


def embed_arrays(data: np.ndarray, wavelengths, dictionary: WavelengthDictionary) -> TokenGrid:
    """Tokenizer entry point on raw arrays; band order is canonicalized by
    wavelength, so permuting bands together with their wavelengths leaves
    the output bit-identical."""
    data = np.asarray(data)
    lam = np.asarray(wavelengths, dtype=np.float64)
    if data.ndim != 3 or data.shape[2] != lam.size:
        raise ValueError("data must be h x w x c with one wavelength per band")
    if lam.size < 3:
        raise ValueError(f"embedding needs >= 3 bands, got {lam.size}")
    p = dictionary.patch
    h, w, _ = data.shape
    if h % p or w % p:
        raise ValueError(f"spatial dims {h}x{w} not divisible by patch {p}")

    order = np.argsort(lam, kind="stable")
    data = data[:, :, order]
    lam = lam[order]

    branches = split_branch_arrays(data, lam)
    dtype = dictionary.key_bank.data.dtype

    def branch_tokens(x, lams, bank):
        w_dyn = assemble_weights(bank, lams)
        x_t = Tensor(np.ascontiguousarray(np.transpose(x, (2, 0, 1))[None]).astype(dtype))
        return nm.conv2d(x_t, w_dyn, stride=p)  # (1, j, h/p, w/p)

    out = nm.add(
        branch_tokens(branches.x_key, branches.key_wavelengths, dictionary.key_bank),
        branch_tokens(branches.x_cube, branches.cube_wavelengths, dictionary.cube_bank),
    )
    j = dictionary.token_dim
    grid = nm.transpose(nm.reshape(out, (j, h // p, w // p)), (1, 2, 0))
    return TokenGrid(rows=h // p, cols=w // p, dim=j, data=grid)

"""Hyperspectral cube data model, binary IO, synthetic scenes, projections.

Cube files (".hvc", little-endian): magic "HVC1", u32 height, u32 width,
u32 bands, bands x f32 wavelengths (nm), then band-sequential planes of
h*w f32 row-major. Label files (".hvl"): magic "HVL1", u32 h, u32 w,
u32 n_classes, then h*w u16 labels.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .masks import FormatError, InstanceMask, MaskSet

CUBE_MAGIC = b"HVC1"
LABEL_MAGIC = b"HVL1"

WAVELENGTH_MIN_NM = 370.0
WAVELENGTH_MAX_NM = 1710.0

# false-color projection targets, red/green/blue order
RGB_TARGETS_NM = (650.0, 550.0, 450.0)


@dataclass
class HyperCube:
    """An h x w x c reflectance volume with per-band center wavelengths.

    Wavelengths are kept at f32 precision so in-memory values round-trip
    losslessly through the file format.
    """

    wavelengths: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        self.wavelengths = np.asarray(self.wavelengths, dtype=np.float32)
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.wavelengths.ndim != 1:
            raise ValueError("wavelengths must be a 1-d array")
        if self.data.ndim != 3:
            raise ValueError("cube data must be h x w x c")
        if self.data.shape[2] != self.wavelengths.size:
            raise ValueError(
                f"band count mismatch: {self.data.shape[2]} planes, "
                f"{self.wavelengths.size} wavelengths"
            )
        w = self.wavelengths
        if w.size and not np.all(np.diff(w) > 0):
            raise ValueError("wavelengths must be strictly increasing")
        if w.size and (w[0] < WAVELENGTH_MIN_NM or w[-1] >= WAVELENGTH_MAX_NM):
            raise ValueError(
                f"wavelengths outside [{WAVELENGTH_MIN_NM}, {WAVELENGTH_MAX_NM}) nm"
            )
        if not np.isfinite(self.data).all():
            raise ValueError("cube data contains non-finite values")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]


@dataclass
class RgbImage:
    """A 3-channel view of a cube plus the band indices it projects."""

    data: np.ndarray
    source_bands: tuple[int, int, int]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError("rgb data must be h x w x 3")
        if not np.isfinite(self.data).all():
            raise ValueError("rgb data contains non-finite values")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class LabelMap:
    """Per-pixel class indices in [0, n_classes)."""

    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 2:
            raise ValueError("labels must be h x w")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("labels outside [0, n_classes)")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass(frozen=True)
class SynthSpec:
    """Parameters for one synthetic scene."""

    height: int = 64
    width: int = 64
    bands: int = 25
    wavelength_range: tuple[float, float] = (600.0, 975.0)
    n_materials: int = 5
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.n_materials < 2:
            raise ValueError("need at least 2 materials")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        lo, hi = self.wavelength_range
        if not (WAVELENGTH_MIN_NM <= lo < hi < WAVELENGTH_MAX_NM):
            raise ValueError("wavelength_range outside supported span")


# ---------------------------------------------------------------------------
# binary IO


def write_cube(cube: HyperCube, path: str | Path) -> None:
    if not np.isfinite(cube.data).all():
        raise ValueError("refusing to write non-finite cube data")
    h, w, c = cube.data.shape
    out = bytearray()
    out += CUBE_MAGIC
    out += struct.pack("<III", h, w, c)
    out += cube.wavelengths.astype("<f4").tobytes()
    planes = np.ascontiguousarray(np.transpose(cube.data, (2, 0, 1)), dtype="<f4")
    out += planes.tobytes()
    Path(path).write_bytes(bytes(out))


def read_cube(path: str | Path) -> HyperCube:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    if raw[:4] != CUBE_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    h, w, c = struct.unpack_from("<III", raw, 4)
    need = 16 + 4 * c + 4 * h * w * c
    if len(raw) != need:
        raise FormatError(f"{path}: payload is {len(raw)} bytes, expected {need}")
    wavelengths = np.frombuffer(raw, dtype="<f4", count=c, offset=16)
    if not np.all(np.isfinite(wavelengths)):
        raise FormatError(f"{path}: non-finite wavelengths")
    if not np.all(np.diff(wavelengths) > 0):
        raise FormatError(f"{path}: wavelengths not strictly ascending")
    planes = np.frombuffer(raw, dtype="<f4", count=h * w * c, offset=16 + 4 * c)
    data = np.transpose(planes.reshape(c, h, w), (1, 2, 0)).copy()
    if not np.isfinite(data).all():
        raise FormatError(f"{path}: non-finite sample values")
    try:
        return HyperCube(wavelengths=wavelengths.copy(), data=data)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def write_labels(labels: LabelMap, path: str | Path) -> None:
    h, w = labels.labels.shape
    if labels.labels.size and labels.labels.max() >= 65536:
        raise ValueError("labels exceed u16 range")
    out = bytearray()
    out += LABEL_MAGIC
    out += struct.pack("<III", h, w, labels.n_classes)
    out += labels.labels.astype("<u2").tobytes()
    Path(path).write_bytes(bytes(out))


def read_labels(path: str | Path) -> LabelMap:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    if raw[:4] != LABEL_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    h, w, k = struct.unpack_from("<III", raw, 4)
    need = 16 + 2 * h * w
    if len(raw) != need:
        raise FormatError(f"{path}: payload is {len(raw)} bytes, expected {need}")
    labels = np.frombuffer(raw, dtype="<u2", count=h * w, offset=16).reshape(h, w)
    try:
        return LabelMap(labels=labels.astype(np.int64), n_classes=k)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# synthetic scenes


def material_palette(n_materials: int, lo: float, hi: float) -> np.ndarray:
    """Spectral signatures for a material set: each is a 2-Gaussian mixture.

    The palette depends only on (n_materials, wavelength range), never on
    the scene seed, so scenes generated from different seeds share material
    semantics. Material 0 is the background. Rows hold
    (a1, mu1, sigma1, a2, mu2, sigma2).
    """
    ss = np.random.SeedSequence([n_materials, int(lo * 1000), int(hi * 1000)])
    rng = np.random.default_rng(ss)
    span = hi - lo
    params = np.zeros((n_materials, 6))
    for m in range(n_materials):
        # broad hump sets the material's overall brightness; a narrow bump
        # gives it a band-local fingerprint
        a1 = 0.20 + 0.50 * m / (n_materials - 1) + rng.uniform(-0.03, 0.03)
        mu1 = lo + span * rng.uniform(0.25, 0.75)
        s1 = span * rng.uniform(0.45, 0.70)
        a2 = rng.uniform(0.15, 0.30)
        mu2 = lo + span * ((m + rng.uniform(0.2, 0.8)) / n_materials)
        s2 = span * rng.uniform(0.04, 0.09)
        params[m] = (a1, mu1, s1, a2, mu2, s2)
    return params


def material_signatures(params: np.ndarray, wavelengths: np.ndarray) -> np.ndarray:
    """Sample each palette row at the given wavelengths -> (K, c)."""
    lam = np.asarray(wavelengths, dtype=np.float64)[None, :]
    a1, mu1, s1, a2, mu2, s2 = (params[:, i : i + 1] for i in range(6))
    sig = a1 * np.exp(-0.5 * ((lam - mu1) / s1) ** 2)
    sig += a2 * np.exp(-0.5 * ((lam - mu2) / s2) ** 2)
    return np.clip(sig, 0.0, 1.0)


def _region_bits(rng, h, w):
    half_h = int(rng.integers(max(2, h // 10), max(3, h // 4)))
    half_w = int(rng.integers(max(2, w // 10), max(3, w // 4)))
    cy = int(rng.integers(half_h, h - half_h))
    cx = int(rng.integers(half_w, w - half_w))
    kind = int(rng.integers(2))
    if kind == 0:
        bits = np.zeros((h, w), dtype=bool)
        bits[cy - half_h : cy + half_h + 1, cx - half_w : cx + half_w + 1] = True
    else:
        yy, xx = np.mgrid[0:h, 0:w]
        bits = ((yy - cy) / half_h) ** 2 + ((xx - cx) / half_w) ** 2 <= 1.0
    return bits


def synth_scene(spec: SynthSpec) -> tuple[HyperCube, LabelMap, MaskSet]:
    """Generate one scene: rectangle/ellipse regions over a background.

    Each non-background material is placed twice (when space permits);
    placement is rejection-sampled without overlap with a bounded retry
    budget, so generation always terminates. Deterministic per spec.
    """
    rng = np.random.default_rng(spec.seed)
    h, w, k = spec.height, spec.width, spec.n_materials
    lo, hi = spec.wavelength_range
    wavelengths = np.linspace(lo, hi, spec.bands, dtype=np.float64)
    sig = material_signatures(material_palette(k, lo, hi), wavelengths)

    labels = np.zeros((h, w), dtype=np.int64)
    placed: list[InstanceMask] = []
    order = [m for _ in range(2) for m in range(1, k)]
    for material in order:
        for _ in range(40):
            bits = _region_bits(rng, h, w)
            if not (bits & (labels > 0)).any():
                labels[bits] = material
                placed.append(
                    InstanceMask(bits=bits, score=1.0, source="synth", id=len(placed))
                )
                break
        # else: drop this region; never loop forever

    data = sig[labels].astype(np.float64)
    if spec.noise_sigma > 0:
        data = data + rng.normal(0.0, spec.noise_sigma, size=data.shape)
    data = np.clip(data, 0.0, 1.0).astype(np.float32)
    cube = HyperCube(wavelengths=wavelengths, data=data)
    return cube, LabelMap(labels=labels, n_classes=k), MaskSet(placed)


# ---------------------------------------------------------------------------
# projections


def nearest_band(wavelengths: np.ndarray, target_nm: float) -> int:
    """Index of the band nearest the target; ties go to the lower wavelength."""
    dist = np.abs(np.asarray(wavelengths, dtype=np.float64) - target_nm)
    return int(np.argmin(dist))


def rgb_projection(cube: HyperCube) -> RgbImage:
    """False-color image from the bands nearest 650/550/450 nm."""
    if cube.bands < 3:
        raise ValueError(f"rgb projection needs >= 3 bands, got {cube.bands}")
    picks = tuple(nearest_band(cube.wavelengths, t) for t in RGB_TARGETS_NM)
    return RgbImage(data=cube.data[:, :, picks], source_bands=picks)


def sequence_partition(cube: HyperCube) -> list[RgbImage]:
    """Split the cube into floor(c/3) false-color frames with stride c//3.

    Frame t uses bands (t, t + n, t + 2n); leftover bands are dropped.
    """
    if cube.bands < 3:
        raise ValueError(f"sequence partition needs >= 3 bands, got {cube.bands}")
    n = cube.bands // 3
    frames = []
    for t in range(n):
        picks = (t, t + n, t + 2 * n)
        frames.append(RgbImage(data=cube.data[:, :, picks], source_bands=picks))
    return frames


def center_crop_to_patch(cube: HyperCube, patch: int) -> HyperCube:
    """Crop spatial dims to the largest multiples of `patch`, keeping the
    window centered and biased to the top/left on odd remainders."""
    h, w = cube.height, cube.width
    if h < patch or w < patch:
        raise ValueError(f"cube {h}x{w} smaller than patch {patch}")
    nh = (h // patch) * patch
    nw = (w // patch) * patch
    top = (h - nh) // 2
    left = (w - nw) // 2
    if nh == h and nw == w:
        return cube
    return HyperCube(
        wavelengths=cube.wavelengths.copy(),
        data=cube.data[top : top + nh, left : left + nw, :].copy(),
    )

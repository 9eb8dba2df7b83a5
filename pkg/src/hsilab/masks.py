"""Binary instance masks: IoU, run-length file format, interior points.

Masks are stored as dense boolean arrays in memory and as sorted,
non-overlapping (start, length) runs over the row-major flattened grid
on disk (".hvm" files).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MASK_MAGIC = b"HVM1"

# wire codes for mask provenance
SOURCE_TAGS = ("rgb", "seq", "material", "file", "synth")
_TAG_TO_CODE = {t: i for i, t in enumerate(SOURCE_TAGS)}


class FormatError(ValueError):
    """A binary artifact failed parsing or validation."""


@dataclass
class InstanceMask:
    """One binary mask over an image, with a confidence score and provenance."""

    bits: np.ndarray
    score: float
    source: str
    id: int

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 2:
            raise ValueError("mask bits must be a 2-d array")
        if not self.bits.any():
            raise ValueError("mask must contain at least one true pixel")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"mask score {self.score} outside [0, 1]")
        if self.source not in SOURCE_TAGS:
            raise ValueError(f"unknown mask source {self.source!r}")

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def area(self) -> int:
        return int(self.bits.sum())


@dataclass
class MaskSet:
    """Masks over one image: uniform dims, unique ids."""

    masks: list[InstanceMask] = field(default_factory=list)

    def __post_init__(self):
        if self.masks:
            h, w = self.masks[0].bits.shape
            for m in self.masks:
                if m.bits.shape != (h, w):
                    raise ValueError("masks in a set must share dimensions")
            ids = [m.id for m in self.masks]
            if len(set(ids)) != len(ids):
                raise ValueError("mask ids must be unique within a set")

    def __len__(self) -> int:
        return len(self.masks)

    def __iter__(self):
        return iter(self.masks)


def iou(a: InstanceMask, b: InstanceMask) -> float:
    """Intersection over union of two masks with identical dims."""
    if a.bits.shape != b.bits.shape:
        raise ValueError("iou requires masks of identical dimensions")
    inter = np.logical_and(a.bits, b.bits).sum()
    union = np.logical_or(a.bits, b.bits).sum()
    return float(inter) / float(union)


def mask_to_runs(bits: np.ndarray) -> np.ndarray:
    """Encode a boolean grid as (start, length) runs over the flattened array."""
    flat = np.asarray(bits, dtype=bool).ravel()
    padded = np.concatenate(([False], flat, [False]))
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    starts = edges[0::2]
    lengths = edges[1::2] - starts
    return np.stack([starts, lengths], axis=1).astype(np.uint32)


def runs_to_mask(runs: np.ndarray, height: int, width: int) -> np.ndarray:
    flat = np.zeros(height * width, dtype=bool)
    for start, length in np.asarray(runs, dtype=np.int64):
        if start < 0 or start + length > flat.size:
            raise FormatError("mask run exceeds image bounds")
        flat[start : start + length] = True
    return flat.reshape(height, width)


def write_masks(masks: MaskSet | list[InstanceMask], path: str | Path) -> None:
    """Serialize masks to a little-endian .hvm file."""
    if isinstance(masks, MaskSet):
        masks = masks.masks
    if masks:
        h, w = masks[0].bits.shape
    else:
        raise ValueError("refusing to write an empty mask file")
    out = bytearray()
    out += MASK_MAGIC
    out += struct.pack("<III", h, w, len(masks))
    for m in masks:
        if m.bits.shape != (h, w):
            raise ValueError("masks in a file must share dimensions")
        runs = mask_to_runs(m.bits)
        out += struct.pack("<fBI", np.float32(m.score), _TAG_TO_CODE[m.source], runs.shape[0])
        out += runs.astype("<u4").tobytes()
    Path(path).write_bytes(bytes(out))


def read_masks(path: str | Path) -> MaskSet:
    """Parse a .hvm file; mask ids are assigned by file order."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated mask header")
    if raw[:4] != MASK_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    h, w, n = struct.unpack_from("<III", raw, 4)
    off = 16
    masks = []
    for i in range(n):
        if off + 9 > len(raw):
            raise FormatError(f"{path}: truncated mask record {i}")
        score, tag, n_runs = struct.unpack_from("<fBI", raw, off)
        off += 9
        end = off + 8 * n_runs
        if end > len(raw):
            raise FormatError(f"{path}: truncated run data in mask {i}")
        runs = np.frombuffer(raw, dtype="<u4", count=2 * n_runs, offset=off).reshape(n_runs, 2)
        off += 8 * n_runs
        if n_runs > 1:
            starts = runs[:, 0].astype(np.int64)
            ends = starts + runs[:, 1]
            if np.any(starts[1:] < ends[:-1]):
                raise FormatError(f"{path}: unsorted or overlapping runs in mask {i}")
        if tag >= len(SOURCE_TAGS):
            raise FormatError(f"{path}: unknown source tag {tag} in mask {i}")
        if not np.isfinite(score) or not 0.0 <= score <= 1.0:
            raise FormatError(f"{path}: invalid score in mask {i}")
        bits = runs_to_mask(runs, h, w)
        masks.append(InstanceMask(bits=bits, score=float(score), source=SOURCE_TAGS[tag], id=i))
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return MaskSet(masks)


def chebyshev_distance(bits: np.ndarray) -> np.ndarray:
    """Chessboard distance from each true pixel to the nearest false pixel.

    The region outside the image counts as false, so a mask covering the
    whole grid still has a well-defined deepest interior point. False
    pixels get distance 0. Computed by repeated 8-neighbour erosion: a
    pixel at distance d survives exactly d - 1 erosions.
    """
    bits = np.asarray(bits, dtype=bool)
    h, w = bits.shape
    dist = np.zeros((h, w), dtype=np.int64)
    cur = bits
    while cur.any():
        dist += cur
        p = np.zeros((h + 2, w + 2), dtype=bool)
        p[1:-1, 1:-1] = cur
        cur = (
            p[:-2, :-2] & p[:-2, 1:-1] & p[:-2, 2:]
            & p[1:-1, :-2] & p[1:-1, 1:-1] & p[1:-1, 2:]
            & p[2:, :-2] & p[2:, 1:-1] & p[2:, 2:]
        )
    return dist


def interior_point(bits: np.ndarray) -> tuple[int, int]:
    """Deepest interior pixel of a mask: argmax of the chessboard distance
    transform, ties broken row-major."""
    dist = chebyshev_distance(bits)
    idx = int(np.argmax(dist))
    h, w = dist.shape
    return idx // w, idx % w

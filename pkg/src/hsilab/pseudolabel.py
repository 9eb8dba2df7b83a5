"""Multi-source pseudo-mask generation and fusion.

Three complementary mask sources feed one pool: a color segmenter on the
false-color projection, the same segmenter threaded across the spectral
frame sequence with seed-point identity propagation, and a spectral
clustering segmenter over full per-pixel spectra. Greedy IoU-based NMS
fuses the pool; the union of retained masks is the supervision target and
the retained parts drive prompt-wise decoding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cube import HyperCube, RgbImage, rgb_projection, sequence_partition
from .masks import InstanceMask, MaskSet, interior_point, iou

# fusion tie-break order after score and area
_SOURCE_PRIORITY = {"rgb": 0, "seq": 1, "material": 2, "file": 3, "synth": 4}


class EmptyMaskPool(ValueError):
    """No candidate masks were produced for an image."""


@dataclass(frozen=True)
class FusionConfig:
    tau: float = 0.7
    r_max: int = 16
    min_area: int = 16

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must be in (0, 1)")
        if self.r_max < 1:
            raise ValueError("r_max must be >= 1")


@dataclass
class SequenceMemory:
    """Seed points carried between frames so a region keeps its id."""

    frame_index: int = 0
    seeds: list[tuple[tuple[int, int], int]] = field(default_factory=list)
    next_id: int = 0


@dataclass
class PseudoTarget:
    """Fused supervision for one image: the retained parts and their union."""

    union: np.ndarray
    parts: list[InstanceMask]
    tau: float
    provenance: list[tuple[str, int]]

    def __post_init__(self):
        if not self.parts:
            raise ValueError("a pseudo target needs at least one part")
        rebuilt = np.zeros_like(self.union)
        for m in self.parts:
            rebuilt |= m.bits
        if not np.array_equal(rebuilt, self.union):
            raise ValueError("union must be the pixel-wise OR of the parts")


# ---------------------------------------------------------------------------
# connected components


def label_components(keys: np.ndarray) -> tuple[np.ndarray, int]:
    """4-connected components of equal-valued cells.

    Components are numbered 0..n-1 in order of their first row-major pixel.
    Implemented as iterative min-label propagation, which is deterministic
    and vectorized.
    """
    keys = np.asarray(keys)
    h, w = keys.shape
    labels = np.arange(h * w, dtype=np.int64).reshape(h, w)
    same_v = keys[1:, :] == keys[:-1, :]
    same_h = keys[:, 1:] == keys[:, :-1]
    while True:
        prev = labels.copy()
        labels[1:, :] = np.minimum(labels[1:, :], np.where(same_v, labels[:-1, :], labels[1:, :]))
        labels[:-1, :] = np.minimum(labels[:-1, :], np.where(same_v, labels[1:, :], labels[:-1, :]))
        labels[:, 1:] = np.minimum(labels[:, 1:], np.where(same_h, labels[:, :-1], labels[:, 1:]))
        labels[:, :-1] = np.minimum(labels[:, :-1], np.where(same_h, labels[:, 1:], labels[:, :-1]))
        if np.array_equal(labels, prev):
            break
    # renumber by first appearance in scan order
    flat = labels.ravel()
    roots, first = np.unique(flat, return_index=True)
    order = np.argsort(first)
    remap = np.empty(roots.size, dtype=np.int64)
    remap[order] = np.arange(roots.size)
    compact = remap[np.searchsorted(roots, flat)]
    return compact.reshape(h, w), roots.size


# ---------------------------------------------------------------------------
# mask sources


def oracle_segment_image(
    rgb: RgbImage,
    memory: SequenceMemory | None = None,
    min_area: int = 16,
    levels: int = 8,
    source: str = "rgb",
) -> tuple[MaskSet, SequenceMemory]:
    """Deterministic color segmenter: quantize each channel into `levels`
    bins and take 4-connected components of the joint quantized color.

    Components smaller than min_area are dropped. A component containing a
    remembered seed point inherits that seed's id; fresh components get the
    next free id. Returns the masks and the updated memory."""
    q = np.clip((rgb.data * levels).astype(np.int64), 0, levels - 1)
    keys = (q[:, :, 0] * levels + q[:, :, 1]) * levels + q[:, :, 2]
    labels, n = label_components(keys)
    areas = np.bincount(labels.ravel(), minlength=n)

    if memory is None:
        memory = SequenceMemory()
    next_id = memory.next_id
    masks: list[InstanceMask] = []
    for comp in range(n):
        if areas[comp] < min_area:
            continue
        bits = labels == comp
        mask_id = None
        for (r, c), seed_id in memory.seeds:
            if bits[r, c]:
                mask_id = seed_id
                break
        if mask_id is None:
            mask_id = next_id
            next_id += 1
        masks.append(InstanceMask(bits=bits, score=0.5, source=source, id=mask_id))
    new_memory = SequenceMemory(
        frame_index=memory.frame_index + 1,
        seeds=[(interior_point(m.bits), m.id) for m in masks],
        next_id=next_id,
    )
    return MaskSet(masks), new_memory


def source_rgb(cube: HyperCube, segmenter=oracle_segment_image, min_area: int = 16) -> MaskSet:
    """Masks from the false-color projection, no memory."""
    rgb = rgb_projection(cube)
    masks, _ = segmenter(rgb, None, min_area=min_area, source="rgb")
    return masks


def source_sequence(
    cube: HyperCube,
    segmenter=oracle_segment_image,
    fusion: FusionConfig = FusionConfig(),
) -> MaskSet:
    """Masks pooled over the spectral frame sequence, memory threaded
    between frames, then consolidated by intra-branch NMS."""
    memory: SequenceMemory | None = None
    pool: list[InstanceMask] = []
    for frame in sequence_partition(cube):
        masks, memory = segmenter(frame, memory, min_area=fusion.min_area, source="seq")
        pool.extend(masks.masks)
    if not pool:
        return MaskSet([])
    kept = _greedy_nms(pool, fusion.tau)
    out = [
        InstanceMask(bits=m.bits, score=m.score, source="seq", id=i)
        for i, m in enumerate(kept)
    ]
    return MaskSet(out)


def kmeans_spectra(cube: HyperCube, k: int, seed: int = 0, iters: int = 25) -> np.ndarray:
    """Cluster per-pixel spectra with fixed-seed farthest-point seeding.

    Returns an (h, w) cluster index map. Deterministic for a given seed."""
    h, w, c = cube.data.shape
    x = cube.data.reshape(-1, c).astype(np.float64)
    n = x.shape[0]
    k = min(k, n)
    rng = np.random.default_rng(seed)
    centers = np.empty((k, c))
    centers[0] = x[int(rng.integers(n))]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        centers[i] = x[int(np.argmax(d2))]
        d2 = np.minimum(d2, ((x - centers[i]) ** 2).sum(axis=1))
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        dist = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(dist, axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for i in range(k):
            sel = assign == i
            if sel.any():
                centers[i] = x[sel].mean(axis=0)
    return assign.reshape(h, w)


def source_material(
    cube: HyperCube,
    k: int = 6,
    seed: int = 0,
    min_area: int = 16,
    material_map: np.ndarray | None = None,
) -> MaskSet:
    """Masks from spectral material clustering: connected components of the
    cluster map, small components dropped. A precomputed material map can
    be supplied in place of the built-in clustering."""
    if material_map is None:
        material_map = kmeans_spectra(cube, k=k, seed=seed)
    labels, n = label_components(material_map)
    areas = np.bincount(labels.ravel(), minlength=n)
    masks = []
    for comp in range(n):
        if areas[comp] < min_area:
            continue
        masks.append(
            InstanceMask(bits=labels == comp, score=0.5, source="material", id=len(masks))
        )
    return MaskSet(masks)


# ---------------------------------------------------------------------------
# fusion


def _sort_pool(pool: list[InstanceMask]) -> list[InstanceMask]:
    return sorted(
        pool,
        key=lambda m: (-m.score, -m.area, _SOURCE_PRIORITY[m.source], m.id),
    )


def _greedy_nms(pool: list[InstanceMask], tau: float) -> list[InstanceMask]:
    kept: list[InstanceMask] = []
    for cand in _sort_pool(pool):
        if all(iou(cand, k) <= tau for k in kept):
            kept.append(cand)
    return kept


def nms_fuse(pool, config: FusionConfig = FusionConfig()) -> PseudoTarget:
    """Fuse candidate masks: greedy NMS in (score desc, area desc, source
    priority, id asc) order, truncated to r_max; the target union is the
    pixel-wise OR of the retained parts.

    `pool` is a flat sequence of masks or a sequence of MaskSets, assumed
    already in source-priority order; pool ids are reassigned sequentially
    so the tie-break chain is total."""
    flat: list[InstanceMask] = []
    for item in pool:
        if isinstance(item, MaskSet):
            flat.extend(item.masks)
        elif isinstance(item, InstanceMask):
            flat.append(item)
        else:
            raise TypeError(f"unexpected pool item {type(item)!r}")
    if not flat:
        raise EmptyMaskPool("no candidate masks for this image")
    shape = flat[0].bits.shape
    if any(m.bits.shape != shape for m in flat):
        raise ValueError("pool masks must share dimensions")

    provenance_in = [(m.source, m.id) for m in flat]
    renumbered = [
        InstanceMask(bits=m.bits, score=m.score, source=m.source, id=i)
        for i, m in enumerate(flat)
    ]
    kept = _greedy_nms(renumbered, config.tau)[: config.r_max]
    union = np.zeros(shape, dtype=bool)
    for m in kept:
        union |= m.bits
    return PseudoTarget(
        union=union,
        parts=kept,
        tau=config.tau,
        provenance=[provenance_in[m.id] for m in kept],
    )


def generate_target(
    cube: HyperCube,
    config: FusionConfig = FusionConfig(),
    sources: tuple[str, ...] = ("rgb", "seq", "material"),
    kmeans_k: int = 6,
    kmeans_seed: int = 0,
    file_masks: MaskSet | None = None,
) -> PseudoTarget:
    """Run the selected sources on one cube and fuse them."""
    pool: list[MaskSet] = []
    if "rgb" in sources:
        pool.append(source_rgb(cube, min_area=config.min_area))
    if "seq" in sources:
        pool.append(source_sequence(cube, fusion=config))
    if "material" in sources:
        pool.append(source_material(cube, k=kmeans_k, seed=kmeans_seed, min_area=config.min_area))
    if file_masks is not None:
        pool.append(file_masks)
    return nms_fuse(pool, config)


def decompose(target: PseudoTarget) -> list[tuple[InstanceMask, tuple[int, int]]]:
    """Split a target into its parts, each paired with its deepest interior
    point (the prompt seed)."""
    return [(m, interior_point(m.bits)) for m in target.parts]

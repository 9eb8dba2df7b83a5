"""Pre-training, head-only adaptation, evaluation, and checkpointing.

Checkpoint files (".hvck", little-endian): magic "HVK1", u32 version,
u32 n_entries; per entry u16 name length, UTF-8 name, u8 partition tag
(0 backbone, 1 head), u8 ndim, ndim x u32 dims, f32 data; trailing u32
CRC32 of all preceding bytes. Config files are plain text, one
`key = value` per line with `#` comments; unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nm
from . import objectives as obj
from .backbone import Encoder, EncoderParams, FeatureMap, FileTeacher, Neck, ToyTeacher
from .cube import HyperCube, LabelMap, center_crop_to_patch, read_cube, read_labels, rgb_projection
from .decoder import MaskDecoderNet, Prompt, PromptEncoder, downsample_target
from .masks import FormatError, InstanceMask, MaskSet, read_masks
from .numerics import AdamW, Tensor
from .pseudolabel import EmptyMaskPool, FusionConfig, PseudoTarget, decompose, generate_target, nms_fuse
from .spectral_embed import N_ENTRIES, WavelengthDictionary, embed

log = logging.getLogger("hsilab")

CHECKPOINT_MAGIC = b"HVK1"
CHECKPOINT_VERSION = 1
CONFIG_ENTRY = "meta.config"

# (encoder depth, token dim) per named scale
SCALES = {"small": (4, 64), "base": (8, 128), "large": (12, 192)}


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 300
    batch_size: int = 1
    seed: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    scale: str = "small"
    patch: int = 8
    neck_dim: int = 64
    teacher_dim: int = 32
    heads: int = 4
    mlp_ratio: int = 4
    max_grid: int = 16
    tau: float = 0.7
    r_max: int = 16
    min_area: int = 16
    kmeans_k: int = 6
    kmeans_seed: int = 0
    sources: str = "rgb,seq,material"
    w_focal: float = 20.0
    w_dice: float = 1.0
    w_mse: float = 1.0
    lambda_dis: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    temperature: float = 1.0
    use_pseudo_masks: bool = True
    use_distillation: bool = True
    adapt_steps: int = 200
    adapt_lr: float = 0.01
    classes: int = 5

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.scale not in SCALES:
            raise ValueError(f"unknown scale {self.scale!r}; choose from {sorted(SCALES)}")

    def fusion(self) -> FusionConfig:
        return FusionConfig(tau=self.tau, r_max=self.r_max, min_area=self.min_area)

    def loss_weights(self) -> obj.LossWeights:
        return obj.LossWeights(
            w_focal=self.w_focal, w_dice=self.w_dice, w_mse=self.w_mse,
            lambda_dis=self.lambda_dis, focal_alpha=self.focal_alpha,
            focal_gamma=self.focal_gamma, temperature=self.temperature,
        )

    def source_list(self) -> tuple[str, ...]:
        return tuple(s for s in self.sources.split(",") if s)


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for f in sorted(dataclasses.fields(TrainConfig), key=lambda f: f.name):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse `key = value` lines over a base config; unknown keys are errors."""
    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values = dataclasses.asdict(base if base is not None else TrainConfig())
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected `key = value`, got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in fields:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        kind = fields[key]
        if kind in ("bool", bool):
            if val.lower() not in ("true", "false", "1", "0"):
                raise ValueError(f"config line {lineno}: bad bool {val!r}")
            values[key] = val.lower() in ("true", "1")
        elif kind in ("int", int):
            values[key] = int(val)
        elif kind in ("float", float):
            values[key] = float(val)
        else:
            values[key] = val
    return TrainConfig(**values)


def read_config(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), base=base)


# ---------------------------------------------------------------------------
# model


class Model:
    """The full trainable stack; parameter creation order is fixed so a
    seed determines every byte of the initial state."""

    def __init__(self, cfg: TrainConfig, dtype=np.float32):
        self.cfg = cfg
        depth, token_dim = SCALES[cfg.scale]
        self.token_dim = token_dim
        rng = np.random.default_rng(cfg.seed)
        self.dictionary = WavelengthDictionary.create(cfg.patch, token_dim, rng, dtype=dtype)
        self.encoder = Encoder(
            EncoderParams(depth=depth, token_dim=token_dim, heads=cfg.heads,
                          mlp_ratio=cfg.mlp_ratio, max_grid=cfg.max_grid),
            rng, dtype=dtype,
        )
        self.neck = Neck(token_dim, cfg.neck_dim, rng, dtype=dtype)
        self.decoder = MaskDecoderNet(cfg.neck_dim, rng, dtype=dtype)
        self.prompts = PromptEncoder(cfg.neck_dim, rng, dtype=dtype)
        self.distill_w = Tensor(
            rng.normal(0.0, 0.02, size=(token_dim, cfg.teacher_dim)).astype(dtype),
            requires_grad=True,
        )
        self.distill_b = Tensor(np.zeros(cfg.teacher_dim, dtype=dtype), requires_grad=True)
        self.probe_w: Tensor | None = None
        self.probe_b: Tensor | None = None

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.dictionary.named_params())
        out.update(self.encoder.named_params())
        out.update(self.neck.named_params())
        out.update(self.decoder.named_params())
        out.update(self.prompts.named_params())
        out["distill.proj.w"] = self.distill_w
        out["distill.proj.b"] = self.distill_b
        if self.probe_w is not None:
            out["probe.w"] = self.probe_w
            out["probe.b"] = self.probe_b
        return out

    @staticmethod
    def partition(name: str) -> str:
        return "backbone" if name.startswith(("embed.", "encoder.")) else "head"

    def init_probe(self, classes: int, rng: np.random.Generator):
        dtype = self.neck.proj_w.data.dtype
        self.probe_w = Tensor(
            rng.normal(0.0, 0.02, size=(self.cfg.neck_dim, classes)).astype(dtype),
            requires_grad=True,
        )
        self.probe_b = Tensor(np.zeros(classes, dtype=dtype), requires_grad=True)

    def set_trainable(self, trainable: bool):
        for p in self.named_params().values():
            p.requires_grad = trainable

    def features(self, cube: HyperCube):
        tokens = embed(cube, self.dictionary)
        backbone = self.encoder.forward(tokens)
        neck = self.neck.forward(backbone)
        return tokens, backbone, neck


# ---------------------------------------------------------------------------
# checkpoint IO


@dataclass
class Checkpoint:
    version: int
    entries: dict[str, tuple[np.ndarray, str]]
    config_text: str


_TAG_CODE = {"backbone": 0, "head": 1}
_CODE_TAG = {v: k for k, v in _TAG_CODE.items()}


def _config_to_array(text: str) -> np.ndarray:
    # codepoints as f32 round-trip exactly and fit the entry format
    return np.array([ord(ch) for ch in text], dtype="<f4")


def _config_from_array(arr: np.ndarray) -> str:
    return "".join(chr(int(v)) for v in arr)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    body = bytearray()
    body += CHECKPOINT_MAGIC
    items = list(ckpt.entries.items())
    items.append((CONFIG_ENTRY, (_config_to_array(ckpt.config_text), "head")))
    body += struct.pack("<II", ckpt.version, len(items))
    for name, (arr, tag) in items:
        encoded = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        body += struct.pack("<H", len(encoded))
        body += encoded
        body += struct.pack("<BB", _TAG_CODE[tag], arr.ndim)
        body += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += arr.tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(body))


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated checkpoint")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise FormatError(f"{path}: CRC mismatch, file corrupted")
    version, n_entries = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 12
    entries: dict[str, tuple[np.ndarray, str]] = {}
    config_text = ""
    for _ in range(n_entries):
        (name_len,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off : off + name_len].decode("utf-8")
        off += name_len
        tag_code, ndim = struct.unpack_from("<BB", body, off)
        off += 2
        dims = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        count = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=off).reshape(dims).copy()
        off += 4 * count
        if tag_code not in _CODE_TAG:
            raise FormatError(f"{path}: unknown partition tag {tag_code}")
        if name == CONFIG_ENTRY:
            config_text = _config_from_array(arr)
            continue
        if name in entries:
            raise FormatError(f"{path}: duplicate entry {name!r}")
        entries[name] = (arr, _CODE_TAG[tag_code])
    if off != len(body):
        raise FormatError(f"{path}: {len(body) - off} unparsed bytes")
    return Checkpoint(version=version, entries=entries, config_text=config_text)


def model_to_checkpoint(model: Model) -> Checkpoint:
    entries: dict[str, tuple[np.ndarray, str]] = {}
    for bank_name, bank in (("key", model.dictionary.key_bank), ("cube", model.dictionary.cube_bank)):
        for i in range(N_ENTRIES):
            entries[f"embed.{bank_name}.{i}"] = (bank.data[i].copy(), "backbone")
    for name, p in model.named_params().items():
        if name.startswith("embed."):
            continue
        entries[name] = (p.data.copy(), Model.partition(name))
    return Checkpoint(version=CHECKPOINT_VERSION, entries=entries,
                      config_text=format_config(model.cfg))


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    cfg = parse_config(ckpt.config_text)
    model = Model(cfg)
    for bank_name, bank in (("key", model.dictionary.key_bank), ("cube", model.dictionary.cube_bank)):
        for i in range(N_ENTRIES):
            name = f"embed.{bank_name}.{i}"
            if name not in ckpt.entries:
                raise FormatError(f"checkpoint missing entry {name!r}")
            arr, _ = ckpt.entries[name]
            if arr.shape != bank.data[i].shape:
                raise FormatError(f"checkpoint entry {name!r} has shape {arr.shape}")
            bank.data[i] = arr
    if "probe.w" in ckpt.entries:
        k = ckpt.entries["probe.w"][0].shape[1]
        model.init_probe(k, np.random.default_rng(0))
    for name, p in model.named_params().items():
        if name.startswith("embed."):
            continue
        if name not in ckpt.entries:
            raise FormatError(f"checkpoint missing entry {name!r}")
        arr, _ = ckpt.entries[name]
        if arr.shape != p.data.shape:
            raise FormatError(
                f"checkpoint entry {name!r} shape {arr.shape} != model shape {p.data.shape}"
            )
        p.data = arr.copy()
    return model


def backbone_digest(ckpt: Checkpoint) -> str:
    """SHA-256 over all backbone-tagged tensors in name order."""
    h = hashlib.sha256()
    for name in sorted(ckpt.entries):
        arr, tag = ckpt.entries[name]
        if tag == "backbone":
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# data loading


def load_cube_dir(path: str | Path) -> list[tuple[str, HyperCube]]:
    files = sorted(Path(path).glob("*.hvc"))
    if not files:
        raise FileNotFoundError(f"no .hvc files in {path}")
    return [(f.stem, read_cube(f)) for f in files]


def load_labeled_dir(path: str | Path) -> list[tuple[str, HyperCube, LabelMap]]:
    out = []
    for f in sorted(Path(path).glob("*.hvc")):
        label_path = f.with_suffix(".hvl")
        if not label_path.exists():
            raise FileNotFoundError(f"missing label file {label_path}")
        out.append((f.stem, read_cube(f), read_labels(label_path)))
    if not out:
        raise FileNotFoundError(f"no labeled cubes in {path}")
    return out


def crop_pair(cube: HyperCube, labels: LabelMap, patch: int) -> tuple[HyperCube, LabelMap]:
    """Center-crop a cube and its label map with identical offsets."""
    h, w = cube.height, cube.width
    nh, nw = (h // patch) * patch, (w // patch) * patch
    top, left = (h - nh) // 2, (w - nw) // 2
    cropped = center_crop_to_patch(cube, patch)
    lab = LabelMap(labels=labels.labels[top : top + nh, left : left + nw].copy(),
                   n_classes=labels.n_classes)
    return cropped, lab


def majority_downsample(labels: np.ndarray, patch: int, n_classes: int) -> np.ndarray:
    """Token-resolution labels by block majority vote; ties pick the
    smallest class index."""
    h, w = labels.shape
    if h % patch or w % patch:
        raise ValueError(f"label dims {h}x{w} not divisible by patch {patch}")
    blocks = labels.reshape(h // patch, patch, w // patch, patch)
    counts = np.zeros((n_classes, h // patch, w // patch), dtype=np.int64)
    for k in range(n_classes):
        counts[k] = (blocks == k).sum(axis=(1, 3))
    return counts.argmax(axis=0)


# ---------------------------------------------------------------------------
# pre-training


def _decays(name: str) -> bool:
    # weight decay on matrices and dictionary banks, not on biases, norm
    # scales, or positional embeddings
    return not (name.endswith((".b", ".g")) or name == "encoder.pos")


def _target_from_files(name: str, cube: HyperCube, mask_dir: Path,
                       fusion: FusionConfig) -> PseudoTarget:
    path = mask_dir / f"{name}.hvm"
    if not path.exists():
        raise FileNotFoundError(f"missing mask file {path}")
    loaded = read_masks(path)
    retagged = [
        InstanceMask(bits=m.bits, score=m.score, source="file", id=m.id)
        for m in loaded
        if m.bits.shape == (cube.height, cube.width)
    ]
    if len(retagged) != len(loaded):
        raise FormatError(f"{path}: mask dims do not match cube {name}")
    return nms_fuse([MaskSet(retagged)], fusion)


def build_targets(items, cfg: TrainConfig, mask_dir: str | Path | None):
    """Pseudo targets per cube; cubes whose pool is empty are skipped."""
    fusion = cfg.fusion()
    out = []
    for name, cube in items:
        try:
            if mask_dir is not None:
                target = _target_from_files(name, cube, Path(mask_dir), fusion)
            else:
                target = generate_target(
                    cube, config=fusion, sources=cfg.source_list(),
                    kmeans_k=cfg.kmeans_k, kmeans_seed=cfg.kmeans_seed,
                )
        except EmptyMaskPool:
            log.info("skipping %s: no candidate masks", name)
            continue
        out.append((name, cube, target))
    return out


def make_teacher(cfg: TrainConfig, teacher_dir: str | Path | None = None):
    if teacher_dir is None:
        return ToyTeacher(dim=cfg.teacher_dim, patch=cfg.patch)
    return FileTeacher(teacher_dir, patch=cfg.patch)


def pretrain(
    cube_dir: str | Path,
    mask_dir: str | Path | None,
    teacher,
    cfg: TrainConfig,
    log_path: str | Path | None = None,
) -> Checkpoint:
    """Joint mask-supervision + distillation pre-training over a cube
    directory. Deterministic for a fixed config; the loss log (step, seg,
    distill, total per line) is identical across re-runs."""
    use_dis = cfg.use_distillation and cfg.lambda_dis > 0
    if not cfg.use_pseudo_masks and not use_dis:
        raise ValueError("nothing to optimize: enable pseudo masks and/or distillation")

    items = [(name, center_crop_to_patch(c, cfg.patch)) for name, c in load_cube_dir(cube_dir)]
    weights = cfg.loss_weights()

    if cfg.use_pseudo_masks:
        with_targets = build_targets(items, cfg, mask_dir)
        if not with_targets:
            raise ValueError("no cube produced a non-empty pseudo target")
        samples = []
        for name, cube, target in with_targets:
            parts = decompose(target)
            grids = [downsample_target(m.bits, cfg.patch) for m, _ in parts]
            prompts = [Prompt(r, c) for _, (r, c) in parts]
            samples.append((name, cube, prompts, grids))
    else:
        samples = [(name, cube, [], []) for name, cube in items]

    if teacher is None:
        teacher = make_teacher(cfg)
    teacher_feats: list[Tensor | None] = []
    for name, cube, _, _ in samples:
        if use_dis:
            feat = teacher.features(rgb_projection(cube), key=name)
            teacher_feats.append(Tensor(feat.data.data))
        else:
            teacher_feats.append(None)

    model = Model(cfg)
    params = model.named_params()
    optim = AdamW(params.values(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                  weight_decay=cfg.weight_decay,
                  decay=[_decays(n) for n in params])
    rng = np.random.default_rng(cfg.seed + 1)

    lines = []
    for step in range(1, cfg.steps + 1):
        batch_seg = None
        batch_dis = None
        for _ in range(cfg.batch_size):
            idx = int(rng.integers(len(samples)))
            name, cube, prompts, grids = samples[idx]
            tokens, backbone, neckf = model.features(cube)
            if cfg.use_pseudo_masks and prompts:
                preds = [
                    model.decoder.forward(neckf, model.prompts.encode(p, cube.height, cube.width))
                    for p in prompts
                ]
                l_seg = obj.seg_loss(preds, grids, weights)
            else:
                l_seg = Tensor(np.asarray(0.0, dtype=np.float32))
            if use_dis:
                batch = obj.DistillBatch(f_s=backbone.data, f_t=teacher_feats[idx],
                                         proj_w=model.distill_w, proj_b=model.distill_b)
                l_dis = obj.distill_loss(batch, temperature=cfg.temperature)
            else:
                l_dis = Tensor(np.asarray(0.0, dtype=np.float32))
            batch_seg = l_seg if batch_seg is None else batch_seg + l_seg
            batch_dis = l_dis if batch_dis is None else batch_dis + l_dis
        inv = 1.0 / cfg.batch_size
        l_seg_mean = batch_seg * inv
        l_dis_mean = batch_dis * inv
        l_total = obj.total_loss(l_seg_mean, l_dis_mean, weights)
        if not np.isfinite(l_total.data).all():
            raise DivergenceError(f"non-finite loss at step {step}")
        optim.zero_grad()
        nm.backward(l_total, leaves=optim.params)
        optim.step()
        lines.append(
            f"{step}\t{float(l_seg_mean.data):.9e}\t{float(l_dis_mean.data):.9e}"
            f"\t{float(l_total.data):.9e}"
        )
        if step == 1 or step % 50 == 0:
            log.info("step %d: total %.4f", step, float(l_total.data))

    if log_path is not None:
        Path(log_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return model_to_checkpoint(model)


# ---------------------------------------------------------------------------
# adaptation and evaluation


def adapt_head(
    ckpt: Checkpoint,
    data_dir: str | Path,
    steps: int | None = None,
    lr: float | None = None,
    classes: int | None = None,
    seed: int | None = None,
) -> Checkpoint:
    """Train a linear class probe over frozen features; every tensor of the
    loaded backbone is bit-identical in the returned checkpoint."""
    model = model_from_checkpoint(ckpt)
    cfg = model.cfg
    steps = steps if steps is not None else cfg.adapt_steps
    lr = lr if lr is not None else cfg.adapt_lr
    seed = seed if seed is not None else cfg.seed
    before = backbone_digest(ckpt)

    pairs = [crop_pair(c, l, cfg.patch) for _, c, l in load_labeled_dir(data_dir)]
    k = classes if classes is not None else max(l.n_classes for _, l in pairs)
    for _, lab in pairs:
        if lab.labels.size and lab.labels.max() >= k:
            raise ValueError(f"labels use classes beyond head size {k}")

    model.set_trainable(False)
    feats = []
    token_labels = []
    for cube, lab in pairs:
        _, _, neckf = model.features(cube)
        feats.append(neckf.data.data.reshape(-1, cfg.neck_dim).copy())
        token_labels.append(majority_downsample(lab.labels, cfg.patch, k).reshape(-1))

    rng = np.random.default_rng(seed)
    model.init_probe(k, rng)
    probe = [model.probe_w, model.probe_b]
    optim = AdamW(probe, lr=lr, beta1=cfg.beta1, beta2=cfg.beta2, weight_decay=0.0)
    n_params = sum(p.data.size for p in probe)
    log.info("adapting %d head parameters over %d images", n_params, len(pairs))

    for step in range(1, steps + 1):
        idx = int(rng.integers(len(pairs)))
        x = Tensor(feats[idx])
        y = token_labels[idx]
        logits = nm.linear(x, model.probe_w, model.probe_b)
        logp = nm.log(nm.clamp_min(nm.softmax(logits, axis=-1), 1e-30))
        onehot = np.zeros((y.size, k), dtype=np.float32)
        onehot[np.arange(y.size), y] = 1.0
        loss = -(nm.mul(logp, Tensor(onehot)).sum() * (1.0 / y.size))
        if not np.isfinite(loss.data).all():
            raise DivergenceError(f"non-finite adaptation loss at step {step}")
        optim.zero_grad()
        nm.backward(loss, leaves=probe)
        optim.step()

    out = model_to_checkpoint(model)
    after = backbone_digest(out)
    if before != after:
        raise RuntimeError("backbone tensors changed during adaptation")
    return out


@dataclass
class MetricsReport:
    confusion: np.ndarray
    acc_micro: float
    acc_macro: float
    f1_macro: float
    jaccard_macro: float

    def summary(self) -> str:
        return (
            f"acc_micro={self.acc_micro:.4f} acc_macro={self.acc_macro:.4f} "
            f"f1_macro={self.f1_macro:.4f} jaccard_macro={self.jaccard_macro:.4f}"
        )


def metrics_from_confusion(confusion: np.ndarray) -> MetricsReport:
    """Micro accuracy plus macro recall/F1/IoU over classes present in the
    ground truth (row sum > 0); zero-denominator class terms count as 0."""
    c = np.asarray(confusion, dtype=np.float64)
    total = c.sum()
    if total <= 0:
        raise ValueError("empty confusion matrix")
    diag = np.diag(c)
    rows = c.sum(axis=1)
    cols = c.sum(axis=0)
    present = rows > 0
    if not present.any():
        raise ValueError("no classes present in ground truth")

    def safe(num, den):
        den_safe = np.where(den > 0, den, 1.0)
        return np.where(den > 0, num / den_safe, 0.0)

    recall = safe(diag, rows)
    precision = safe(diag, cols)
    f1 = safe(2 * precision * recall, precision + recall)
    jac = safe(diag, rows + cols - diag)
    return MetricsReport(
        confusion=np.asarray(confusion).copy(),
        acc_micro=float(diag.sum() / total),
        acc_macro=float(recall[present].mean()),
        f1_macro=float(f1[present].mean()),
        jaccard_macro=float(jac[present].mean()),
    )


def evaluate_seg(ckpt: Checkpoint, data_dir: str | Path) -> MetricsReport:
    """Token-resolution segmentation metrics of the checkpoint's probe."""
    model = model_from_checkpoint(ckpt)
    if model.probe_w is None:
        raise ValueError("checkpoint has no class probe; run adaptation first")
    cfg = model.cfg
    k = model.probe_w.data.shape[1]
    model.set_trainable(False)
    pairs = [crop_pair(c, l, cfg.patch) for _, c, l in load_labeled_dir(data_dir)]
    for _, lab in pairs:
        if lab.labels.size and lab.labels.max() >= k:
            raise ValueError(f"labels use classes beyond head size {k}")
    confusion = np.zeros((k, k), dtype=np.int64)
    for cube, lab in pairs:
        _, _, neckf = model.features(cube)
        feats = neckf.data.data.reshape(-1, cfg.neck_dim)
        logits = feats @ model.probe_w.data + model.probe_b.data
        pred = logits.argmax(axis=1)
        gt = majority_downsample(lab.labels, cfg.patch, k).reshape(-1)
        np.add.at(confusion, (gt, pred), 1)
    return metrics_from_confusion(confusion)

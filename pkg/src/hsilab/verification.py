"""Finite-difference verification suites for every differentiable op and
the full model composite, all in f64.

Primitive ops are swept over every coordinate; structured groups (embed,
encoder, decoder, composite) probe the highest-magnitude coordinates per
parameter, since coordinates whose true gradient sits at the f64
difference-quotient noise floor cannot be compared meaningfully.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from . import objectives as obj
from .backbone import Encoder, EncoderParams, FeatureMap, Neck, ToyTeacher
from .cube import HyperCube, rgb_projection
from .decoder import MaskDecoderNet, Prompt, PromptEncoder, downsample_target
from .numerics import Tensor, grad_check
from .spectral_embed import WavelengthDictionary, embed

F64 = np.float64


def _t(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True, dtype=F64)


def _weighted(out: Tensor, salt: int = 0) -> Tensor:
    """Scalarize with frozen random weights so every output coordinate
    carries O(1) influence; weights depend only on (salt, shape)."""
    rng = np.random.default_rng([salt, *out.shape])
    r = Tensor(rng.normal(0.0, 1.0, size=out.shape).astype(F64))
    return nm.mul(out, r).sum()


def check_elementwise(rng) -> float:
    a = _t(rng, 3, 4)
    b = _t(rng, 3, 4)
    s = _t(rng, 4)

    def loss():
        x = nm.add(nm.mul(a, b), s)  # broadcast add
        y = a - b * 0.5 + a / (nm.clamp_min(b, 0.3) + 2.0)
        return _weighted(x, salt=1) + _weighted(y, salt=2)

    return grad_check(loss, {"a": a, "b": b, "s": s}).max_rel_err


def check_matmul(rng) -> float:
    a = _t(rng, 3, 4)
    b = _t(rng, 4, 5)
    c3 = _t(rng, 2, 3, 4)
    d3 = _t(rng, 2, 4, 3)

    def loss():
        return _weighted(nm.matmul(a, b), salt=1) + _weighted(nm.matmul(c3, d3), salt=2)

    return grad_check(loss, {"a": a, "b": b, "c3": c3, "d3": d3}).max_rel_err


def check_conv2d(rng) -> float:
    worst = 0.0
    for (n, c, h, w, j, p, s) in [(1, 2, 4, 4, 3, 2, 2), (2, 1, 5, 5, 2, 3, 1), (1, 3, 6, 6, 2, 2, 2)]:
        x = _t(rng, n, c, h, w)
        kern = _t(rng, j, c, p, p)

        def loss():
            return _weighted(nm.conv2d(x, kern, stride=s), salt=3)

        worst = max(worst, grad_check(loss, {"x": x, "k": kern}).max_rel_err)
    return worst


def check_shape_ops(rng) -> float:
    x = _t(rng, 2, 3, 4)

    def loss():
        y = nm.transpose(nm.reshape(x, (6, 4)), (1, 0))
        z = nm.reshape(nm.transpose(x, (2, 0, 1)), (4, 6))
        return _weighted(y, salt=1) + _weighted(z, salt=2)

    return grad_check(loss, {"x": x}).max_rel_err


def check_softmax(rng) -> float:
    x = _t(rng, 3, 5)
    y = _t(rng, 2, 3, 4)

    def loss():
        return (
            _weighted(nm.softmax(x, axis=-1), salt=1)
            + _weighted(nm.softmax(x, axis=0), salt=2)
            + _weighted(nm.softmax(y, axis=1), salt=3)
        )

    return grad_check(loss, {"x": x, "y": y}).max_rel_err


def check_activations(rng) -> float:
    x = _t(rng, 4, 4)

    def loss():
        pos = nm.clamp_min(x, 0.5)
        return (
            _weighted(nm.sigmoid(x), salt=1)
            + _weighted(nm.gelu(x), salt=2)
            + _weighted(nm.log(pos), salt=3)
            + _weighted(nm.power(pos, 1.7), salt=4)
        )

    return grad_check(loss, {"x": x}).max_rel_err


def check_reductions(rng) -> float:
    x = _t(rng, 3, 4, 2)

    def loss():
        return (
            x.sum() * 0.1
            + x.mean()
            + _weighted(x.sum(axis=1), salt=1)
            + _weighted(x.mean(axis=(0, 2)), salt=2)
            + _weighted(x.sum(axis=2, keepdims=True), salt=3)
        )

    return grad_check(loss, {"x": x}).max_rel_err


def check_layernorm(rng) -> float:
    x = _t(rng, 5, 6)
    g = _t(rng, 6)
    b = _t(rng, 6)

    def loss():
        return _weighted(nm.layernorm(x, g, b), salt=1)

    return grad_check(loss, {"x": x, "g": g, "b": b}).max_rel_err


def check_take(rng) -> float:
    bank = _t(rng, 6, 3)
    idx = np.array([0, 2, 2, 5, 0])

    def loss():
        return _weighted(nm.take(bank, idx), salt=1)

    return grad_check(loss, {"bank": bank}).max_rel_err


def check_losses(rng) -> float:
    logits = _t(rng, 3, 3)
    target = (np.arange(9).reshape(3, 3) % 2).astype(bool)
    f_s = _t(rng, 2, 2, 4)
    f_t = Tensor(rng.normal(size=(2, 2, 3)), dtype=F64)
    pw = _t(rng, 4, 3, scale=0.5)
    pb = _t(rng, 3, scale=0.1)

    def loss():
        probs = nm.sigmoid(logits)
        l1 = obj.focal_loss(logits, target)
        l2 = obj.dice_loss(probs, target)
        l3 = obj.mse_loss(probs, target)
        batch = obj.DistillBatch(f_s=f_s, f_t=f_t, proj_w=pw, proj_b=pb)
        l4 = obj.distill_loss(batch)
        return obj.total_loss(l1 + l2 + l3, l4)

    return grad_check(loss, {"logits": logits, "f_s": f_s, "pw": pw, "pb": pb}).max_rel_err


def _verification_cube(rng, h=8, w=8, c=3):
    data = rng.uniform(0.0, 1.0, size=(h, w, c)).astype(np.float32)
    wl = np.linspace(460.0, 700.0, c)
    return HyperCube(wavelengths=wl, data=data)


def _rescale(params: dict[str, Tensor], rng, scale=0.3):
    # verification models use a healthy weight scale so no probed gradient
    # is attenuated into the finite-difference noise floor
    for t in params.values():
        t.data = rng.normal(0.0, scale, size=t.data.shape)


def check_embed(rng, max_coords=8) -> float:
    cube = _verification_cube(rng)
    d = WavelengthDictionary.create(4, 6, rng, dtype=F64)
    params = d.named_params()
    _rescale(params, rng)

    def loss():
        return _weighted(embed(cube, d).data, salt=1)

    return grad_check(loss, params, max_coords=max_coords).max_rel_err


def check_encoder(rng, max_coords=6) -> float:
    cube = _verification_cube(rng)
    d = WavelengthDictionary.create(4, 8, rng, dtype=F64)
    enc = Encoder(EncoderParams(depth=1, token_dim=8, heads=2, mlp_ratio=2, max_grid=4), rng, dtype=F64)
    params = {**d.named_params(), **enc.named_params()}
    _rescale(params, rng)

    def loss():
        return _weighted(enc.forward(embed(cube, d)).data, salt=1)

    return grad_check(loss, params, max_coords=max_coords).max_rel_err


def check_decoder(rng, max_coords=6) -> float:
    feat_data = _t(rng, 2, 2, 8, scale=0.5)
    dec = MaskDecoderNet(8, rng, dtype=F64)
    pe = PromptEncoder(8, rng, dtype=F64)
    params = {**dec.named_params(), **pe.named_params(), "feat": feat_data}
    _rescale(params, rng)

    def loss():
        feat = FeatureMap(rows=2, cols=2, dim=8, data=feat_data, stage="neck")
        pred = dec.forward(feat, pe.encode(Prompt(3, 5), 8, 8))
        return _weighted(pred.logits, salt=1)

    return grad_check(loss, params, max_coords=max_coords).max_rel_err


def check_composite(rng, max_coords=8, h=16, w=16, c=6) -> float:
    """embed -> encode -> neck -> decode -> combined loss, end to end."""
    cube = _verification_cube(rng, h=h, w=w, c=c)
    p, j, d_f, d_t = 4, 8, 8, 4
    d = WavelengthDictionary.create(p, j, rng, dtype=F64)
    enc = Encoder(EncoderParams(depth=1, token_dim=j, heads=2, mlp_ratio=2, max_grid=4), rng, dtype=F64)
    neck = Neck(j, d_f, rng, dtype=F64)
    dec = MaskDecoderNet(d_f, rng, dtype=F64)
    pe = PromptEncoder(d_f, rng, dtype=F64)
    proj_w = _t(rng, j, d_t)
    proj_b = _t(rng, d_t)
    params = {
        **d.named_params(), **enc.named_params(), **neck.named_params(),
        **dec.named_params(), **pe.named_params(),
        "distill.proj.w": proj_w, "distill.proj.b": proj_b,
    }
    _rescale(params, rng)

    teacher = ToyTeacher(dim=d_t, patch=p, seed=5)
    f_t = Tensor(teacher.features(rgb_projection(cube)).data.data.astype(F64))
    bits = np.zeros((h, w), dtype=bool)
    bits[2 : h - 2, 2 : w - 2] = True
    grid = downsample_target(bits, p)
    prompt = Prompt(h // 2, w // 2)

    def loss():
        tokens = embed(cube, d)
        backbone = enc.forward(tokens)
        neckf = neck.forward(backbone)
        pred = dec.forward(neckf, pe.encode(prompt, h, w))
        l_seg = obj.seg_loss([pred], [grid])
        batch = obj.DistillBatch(f_s=backbone.data, f_t=f_t, proj_w=proj_w, proj_b=proj_b)
        return obj.total_loss(l_seg, obj.distill_loss(batch))

    return grad_check(loss, params, max_coords=max_coords).max_rel_err


GROUPS = {
    "elementwise": check_elementwise,
    "matmul": check_matmul,
    "conv2d": check_conv2d,
    "shape_ops": check_shape_ops,
    "softmax": check_softmax,
    "activations": check_activations,
    "reductions": check_reductions,
    "layernorm": check_layernorm,
    "take": check_take,
    "losses": check_losses,
    "embed": check_embed,
    "encoder": check_encoder,
    "decoder": check_decoder,
    "composite": check_composite,
}


def run_all(seed: int = 0) -> dict[str, float]:
    """Every op group's max relative error; all must be < 1e-4."""
    results = {}
    for name, fn in GROUPS.items():
        results[name] = fn(np.random.default_rng(seed))
    return results

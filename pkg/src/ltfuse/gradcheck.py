"""Central finite-difference checks for every differentiable op.

Each suite builds a small random float64 problem from a seed and returns
pairs of (analytic, numerical) gradients, one per input group. The reported
error of a pair is ``|a - n| / (|a| + |n|)`` in the 2-norm (0 when both
vanish); a suite reports the maximum over its pairs.
"""
from __future__ import annotations

import numpy as np

from . import nn
from .fusion import (FusionConfig, backward, blend_logits, blend_logits_backward, forward, fuse_map,
                     fuse_map_backward, init_params, latent_fuse, latent_fuse_backward, project_mask,
                     project_mask_backward)
from .protoloss import center_loss, head_loss, tail_dist_loss, tail_std_loss

STEP = 1e-5
TOLERANCE = 1e-5


def numerical_grad(f, x, step=STEP):
    """Central differences of scalar ``f()`` with respect to array ``x``,
    perturbed in place."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        fp = f()
        x[i] = orig - step
        fm = f()
        x[i] = orig
        g[i] = (fp - fm) / (2 * step)
    return g


def rel_error(a, n):
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    denom = np.linalg.norm(a) + np.linalg.norm(n)
    return 0.0 if denom == 0 else float(np.linalg.norm(a - n) / denom)


def _rng(seed, tag):
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag]))


# ---------------------------------------------------------------------------
# fusion-net suites


def suite_project_mask(seed):
    rng = _rng(seed, 1)
    c, h, w = rng.integers(1, 5), rng.integers(1, 5), rng.integers(1, 5)
    mask = rng.random((2, 1, h, w))
    a, b = rng.standard_normal(c), rng.standard_normal(c)
    r = rng.standard_normal((2, c, h, w))
    f = lambda: float(np.sum(r * project_mask(mask, a, b)))
    da, db = project_mask_backward(r, mask)
    return [(da, numerical_grad(f, a)), (db, numerical_grad(f, b))]


def suite_fuse_map(seed):
    rng = _rng(seed, 2)
    shape = (2, int(rng.integers(1, 5)), 3, 3)
    f_conv, f_res = rng.standard_normal(shape), rng.standard_normal(shape)
    r = rng.standard_normal(shape)
    f = lambda: float(np.sum(r * fuse_map(f_conv, f_res)))
    dc, dr = fuse_map_backward(r, f_conv, f_res)
    return [(dc, numerical_grad(f, f_conv)), (dr, numerical_grad(f, f_res))]


def _latent_params(rng, d_cnn, d_sam, d_tok, k):
    return {
        "tok_cnn.w": rng.standard_normal((d_tok, d_cnn)) * 0.5, "tok_cnn.b": rng.standard_normal(d_tok) * 0.1,
        "tok_sam.w": rng.standard_normal((d_tok, d_sam)) * 0.5, "tok_sam.b": rng.standard_normal(d_tok) * 0.1,
        "attn.q": rng.standard_normal((d_tok, d_tok)) * 0.5, "attn.k": rng.standard_normal((d_tok, d_tok)) * 0.5,
        "attn.v": rng.standard_normal((d_tok, d_tok)) * 0.5,
        "fc_sam.w": rng.standard_normal((k, 2 * d_tok)) * 0.5, "fc_sam.b": rng.standard_normal(k) * 0.1,
    }


def suite_latent_fuse(seed):
    rng = _rng(seed, 3)
    d_cnn, d_sam, d_tok, k, b = 4, 3, int(rng.integers(2, 9)), int(rng.integers(2, 6)), 3
    p = _latent_params(rng, d_cnn, d_sam, d_tok, k)
    v_cnn, v_sam = rng.standard_normal((b, d_cnn)), rng.standard_normal((b, d_sam))
    r_z, r_e = rng.standard_normal((b, k)), rng.standard_normal((b, 2 * d_tok))

    def f():
        emb, z, _ = latent_fuse(v_cnn, v_sam, p)
        return float(np.sum(r_z * z) + np.sum(r_e * emb))

    _, _, cache = latent_fuse(v_cnn, v_sam, p)
    g, dv_cnn, dv_sam = latent_fuse_backward(r_e, r_z, cache, p)
    pairs = [(g[name], numerical_grad(f, p[name])) for name in sorted(p)]
    pairs += [(dv_cnn, numerical_grad(f, v_cnn)), (dv_sam, numerical_grad(f, v_sam))]
    return pairs


def suite_blend_logits(seed):
    rng = _rng(seed, 4)
    k = int(rng.integers(2, 6))
    alpha = float(rng.random())
    z_sam, z_cnn, r = rng.standard_normal(k), rng.standard_normal(k), rng.standard_normal(k)
    f = lambda: float(np.sum(r * blend_logits(z_sam, z_cnn, alpha)))
    ds, dc = blend_logits_backward(r, alpha)
    return [(ds, numerical_grad(f, z_sam)), (dc, numerical_grad(f, z_cnn))]


def suite_network(seed):
    """Cross-entropy plus a prototype term through the whole network,
    every parameter group, both fusion paths on, dropout off."""
    rng = _rng(seed, 5)
    k = int(rng.integers(2, 6))
    cfg = FusionConfig(num_classes=k, image_shape=(8, 8, 1), stage_channels=(2, 3, 4), map_fusion_stage=1,
                       latent_fusion=True, alpha=0.3, d_sam=3, d_tok=4, dropout_rate=0.0)
    params = init_params(cfg, seed)
    b = 3
    # Redraw inputs until no ReLU pre-activation sits within reach of the
    # finite-difference step; a kink inside the stencil is not a gradient bug.
    while True:
        images = rng.standard_normal((b, 8, 8, 1))
        masks = rng.random((b, 1, 4, 4))
        v_sam = rng.standard_normal((b, 3))
        tr = forward(params, cfg, images, masks, v_sam)
        if min(np.abs(st["pre"]).min() for st in tr.cache["stages"]) > 1e-3:
            break
    y = rng.integers(0, k, size=b)
    proto = rng.standard_normal((k, 2 * cfg.d_tok))
    coef = 0.1

    def f():
        tr = forward(params, cfg, images, masks, v_sam)
        loss, _ = nn.cross_entropy(tr.z, y)
        return loss + coef * center_loss(tr.embedding, y, proto)

    tr = forward(params, cfg, images, masks, v_sam)
    _, dz = nn.cross_entropy(tr.z, y)
    _, demb = center_loss(tr.embedding, y, proto, grad=True)
    g = backward(params, cfg, tr, dz, coef * demb)
    return [(g[name], numerical_grad(f, params[name])) for name in sorted(params)]


# ---------------------------------------------------------------------------
# proto-loss suites


def _loss_problem(seed, tag):
    rng = _rng(seed, tag)
    k, d, b = 4, int(rng.integers(2, 6)), 6
    Z = rng.standard_normal((b, d))
    y = rng.integers(0, k, size=b)
    P = rng.standard_normal((k, d))
    S = rng.random((k, d))
    w = np.array([0.0, 0.3, 0.7, 0.95])
    return rng, Z, y, P, S, w


def suite_center(seed):
    _, Z, y, P, _, _ = _loss_problem(seed, 6)
    _, g = center_loss(Z, y, P, grad=True)
    return [(g, numerical_grad(lambda: center_loss(Z, y, P), Z))]


def suite_head(seed):
    _, Z, y, P, _, w = _loss_problem(seed, 7)
    _, g = head_loss(Z, y, P, w, 0.5, grad=True)
    return [(g, numerical_grad(lambda: head_loss(Z, y, P, w, 0.5), Z))]


def suite_tail_std(seed):
    rng, Z, y, P, S, w = _loss_problem(seed, 8)
    signs = np.where(rng.random((len(P), 1)) < 0.5, -1.0, 1.0)
    _, g = tail_std_loss(Z, y, P, S, w, 0.5, signs=signs, grad=True)
    return [(g, numerical_grad(lambda: tail_std_loss(Z, y, P, S, w, 0.5, signs=signs), Z))]


def suite_tail_dist(seed):
    _, Z, y, P, _, w = _loss_problem(seed, 9)
    _, g = tail_dist_loss(Z, y, P, w, 0.5, grad=True)
    return [(g, numerical_grad(lambda: tail_dist_loss(Z, y, P, w, 0.5), Z))]


SUITES = {
    "fusion-net": {
        "project_mask": suite_project_mask,
        "fuse_map": suite_fuse_map,
        "latent_fuse": suite_latent_fuse,
        "blend_logits": suite_blend_logits,
    },
    "proto-loss": {
        "center": suite_center,
        "head": suite_head,
        "tail_std": suite_tail_std,
        "tail_dist": suite_tail_dist,
    },
    "network": {
        "network": suite_network,
    },
}

DEFAULT_SELECTION = ("fusion-net", "proto-loss")


def gradcheck(selector=None, seed=0, n_seeds=1, suites=None):
    """Run the selected suites and return ``{op: max relative error}``.

    ``selector`` is a module name from :data:`SUITES`, a list of them, or
    None for the op-level suites. Extra ``suites`` (``{op: fn(seed)}``) run
    too, which is how a deliberately broken gradient can be injected.
    """
    if selector is None:
        selector = DEFAULT_SELECTION
    elif isinstance(selector, str):
        selector = (selector,)
    chosen = {}
    for name in selector:
        if name not in SUITES:
            raise KeyError(f"unknown gradcheck selector {name!r}; choose from {sorted(SUITES)}")
        chosen.update(SUITES[name])
    chosen.update(suites or {})
    report = {}
    for op, fn in chosen.items():
        worst = 0.0
        for s in range(seed, seed + n_seeds):
            for analytic, numeric in fn(s):
                worst = max(worst, rel_error(analytic, numeric))
        report[op] = worst
    return report


def passed(report, tolerance=TOLERANCE):
    return all(err < tolerance for err in report.values())

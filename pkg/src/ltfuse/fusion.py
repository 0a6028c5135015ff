"""Trainable classifier: a small CNN backbone with two ways of injecting
frozen foundation features.

* map fusion: a single-channel spatial mask is lifted to the stage width by a
  1x1 convolution and gates a backbone activation, ``F * (1 + conv(mask))``;
* latent fusion: the pooled backbone vector and the pooled foundation vector
  become two tokens of a single-head self-attention block whose output feeds a
  second classifier head; the two heads' logits are blended by ``alpha``.

Parameters live in a flat ``dict[str, ndarray]``. Every op has a matching
``*_backward`` so gradients can be checked against finite differences.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import nn
from .errors import ConfigError, FormatError, InvalidShapeError, MissingFeatureError
from .features import pool_latent, spatial_mask


@dataclass(frozen=True)
class FusionConfig:
    num_classes: int = 10
    image_shape: tuple = (16, 16, 1)
    stage_channels: tuple = (8, 16, 32)
    map_fusion_stage: int | None = None
    latent_fusion: bool = False
    alpha: float = 0.5
    d_sam: int = 16
    d_tok: int = 16
    dropout_rate: float = 0.5
    embedding_dim: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(self.image_shape))
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]", "alpha")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)", "dropout_rate")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1", "num_classes")
        if not self.stage_channels:
            raise ConfigError("need at least one backbone stage", "stage_channels")
        h, w = self.image_shape[:2]
        n_pool = len(self.stage_channels) - 1
        if h % 2**n_pool or w % 2**n_pool:
            raise ConfigError(f"image size must be divisible by {2**n_pool}", "image_shape")
        if self.map_fusion_stage is not None and not 0 <= self.map_fusion_stage < len(self.stage_channels):
            raise ConfigError("map_fusion_stage out of range", "map_fusion_stage")
        if self.embedding_dim is not None and self.embedding_dim != self.d_cnn + self.d_sam:
            raise ConfigError("embedding_dim must equal d_cnn + d_sam", "embedding_dim")

    @property
    def d_cnn(self):
        return self.stage_channels[-1]

    @property
    def backbone_stages(self):
        """(channels, height, width) of each stage's output before pooling."""
        h, w = self.image_shape[:2]
        out = []
        for i, c in enumerate(self.stage_channels):
            out.append((c, h >> i, w >> i))
        return out

    @property
    def mask_hw(self):
        if self.map_fusion_stage is None:
            return None
        _, h, w = self.backbone_stages[self.map_fusion_stage]
        return h, w

    @property
    def uses_features(self):
        return self.map_fusion_stage is not None or self.latent_fusion

    @property
    def feature_dim(self):
        """Length of the vector the prototype losses act on."""
        return 2 * self.d_tok if self.latent_fusion else self.d_cnn

    def to_dict(self):
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", "fusion")
        return cls(**d)


def param_shapes(config):
    shapes = {}
    cin = config.image_shape[2]
    for i, c in enumerate(config.stage_channels):
        shapes[f"conv{i}.w"] = (c, cin, 3, 3)
        shapes[f"conv{i}.b"] = (c,)
        cin = c
    k, dc, ds, dt = config.num_classes, config.d_cnn, config.d_sam, config.d_tok
    shapes["fc_cnn.w"] = (k, dc)
    shapes["fc_cnn.b"] = (k,)
    if config.map_fusion_stage is not None:
        ci = config.stage_channels[config.map_fusion_stage]
        shapes["mask.a"] = (ci,)
        shapes["mask.b"] = (ci,)
    if config.latent_fusion:
        shapes.update({
            "tok_cnn.w": (dt, dc), "tok_cnn.b": (dt,),
            "tok_sam.w": (dt, ds), "tok_sam.b": (dt,),
            "attn.q": (dt, dt), "attn.k": (dt, dt), "attn.v": (dt, dt),
            "fc_sam.w": (k, 2 * dt), "fc_sam.b": (k,),
        })
    return shapes


def _fan_in(name, shapes):
    if name.startswith("mask."):
        return 1
    if name.endswith(".b"):
        name = name[:-2] + ".w"
    shape = shapes[name]
    return int(np.prod(shape[1:]))


def init_params(config, seed=0):
    """Fan-in uniform initialisation. Each tensor draws from its own stream
    keyed by name, so switching a fusion path on or off leaves the other
    tensors' initial values unchanged."""
    shapes = param_shapes(config)
    params = {}
    for name, shape in shapes.items():
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), *name.encode()]))
        if name.startswith("conv") and name.endswith(".w"):
            gain = np.sqrt(2.0)
        elif name.endswith(".b") and not name.startswith("mask."):
            gain = np.sqrt(1.0 / 3.0)
        else:
            gain = 1.0
        params[name] = nn.fan_in_uniform(rng, shape, _fan_in(name, shapes), gain)
    return params


# ---------------------------------------------------------------------------
# Fusion ops


def project_mask(mask, a, b):
    """1x1 convolution of a one-channel map: ``out[c] = a[c] * mask + b[c]``.

    ``mask`` is (1, H, W) or (N, 1, H, W).
    """
    mask = np.asarray(mask, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if mask.ndim not in (3, 4) or mask.shape[-3] != 1:
        raise InvalidShapeError(f"mask must have a single channel, got shape {mask.shape}")
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidShapeError("1x1 conv weight and bias must be matching vectors")
    return a[:, None, None] * mask + b[:, None, None]


def project_mask_backward(dout, mask):
    """Gradients (da, db) for :func:`project_mask`."""
    axes = tuple(i for i in range(dout.ndim) if i != dout.ndim - 3)
    return (dout * mask).sum(axis=axes), dout.sum(axis=axes)


def fuse_map(f_conv, f_res):
    """Gate a backbone activation: ``f_conv * f_res + f_res``."""
    if np.shape(f_conv) != np.shape(f_res):
        raise InvalidShapeError(f"shape mismatch {np.shape(f_conv)} vs {np.shape(f_res)}")
    return f_conv * f_res + f_res


def fuse_map_backward(dout, f_conv, f_res):
    return dout * f_res, dout * (f_conv + 1.0)


def latent_fuse(v_cnn, v_sam, params, drop=None):
    """Two-token self-attention over projected backbone/foundation vectors.

    Returns ``(embedding, z_sam, cache)``; the embedding is the two attended
    tokens concatenated (backbone token first). ``drop`` is an optional
    dropout multiplier applied to the embedding before the classifier.
    """
    v_cnn = np.atleast_2d(np.asarray(v_cnn, dtype=np.float64))
    v_sam = np.atleast_2d(np.asarray(v_sam, dtype=np.float64))
    wc, ws = params["tok_cnn.w"], params["tok_sam.w"]
    if v_cnn.shape[1] != wc.shape[1] or v_sam.shape[1] != ws.shape[1] or len(v_cnn) != len(v_sam):
        raise InvalidShapeError(
            f"latent dims {v_cnn.shape}/{v_sam.shape} do not match projections {wc.shape}/{ws.shape}")
    d = wc.shape[0]
    t_c = v_cnn @ wc.T + params["tok_cnn.b"]
    t_s = v_sam @ ws.T + params["tok_sam.b"]
    x = np.stack([t_c, t_s], axis=1)
    q = x @ params["attn.q"].T
    k = x @ params["attn.k"].T
    v = x @ params["attn.v"].T
    att = nn.softmax(q @ k.transpose(0, 2, 1) / np.sqrt(d))
    o = att @ v
    emb = o.reshape(len(o), 2 * d)
    emb_d = emb if drop is None else emb * drop
    z_sam = emb_d @ params["fc_sam.w"].T + params["fc_sam.b"]
    cache = dict(v_cnn=v_cnn, v_sam=v_sam, x=x, q=q, k=k, v=v, att=att, emb=emb, emb_d=emb_d, drop=drop)
    return emb, z_sam, cache


def latent_fuse_backward(d_emb, dz_sam, cache, params):
    """Gradients of the attention block. ``d_emb`` is the gradient reaching
    the embedding directly (e.g. from prototype losses), ``dz_sam`` the one
    reaching the head logits. Returns ``(grads, dv_cnn, dv_sam)``."""
    g = {}
    emb_d, x, q, k, v, att = (cache[n] for n in ("emb_d", "x", "q", "k", "v", "att"))
    b, _, d = x.shape
    if dz_sam is None:
        dz_sam = np.zeros((b, params["fc_sam.b"].shape[0]))
    g["fc_sam.w"] = dz_sam.T @ emb_d
    g["fc_sam.b"] = dz_sam.sum(axis=0)
    demb = dz_sam @ params["fc_sam.w"]
    if cache["drop"] is not None:
        demb = demb * cache["drop"]
    if d_emb is not None:
        demb = demb + d_emb
    do = demb.reshape(b, 2, d)
    datt = do @ v.transpose(0, 2, 1)
    dv = att.transpose(0, 2, 1) @ do
    ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) / np.sqrt(d)
    dq = ds @ k
    dk = ds.transpose(0, 2, 1) @ q
    g["attn.q"] = np.einsum("bti,btj->ij", dq, x)
    g["attn.k"] = np.einsum("bti,btj->ij", dk, x)
    g["attn.v"] = np.einsum("bti,btj->ij", dv, x)
    dx = dq @ params["attn.q"] + dk @ params["attn.k"] + dv @ params["attn.v"]
    dt_c, dt_s = dx[:, 0], dx[:, 1]
    g["tok_cnn.w"] = dt_c.T @ cache["v_cnn"]
    g["tok_cnn.b"] = dt_c.sum(axis=0)
    g["tok_sam.w"] = dt_s.T @ cache["v_sam"]
    g["tok_sam.b"] = dt_s.sum(axis=0)
    return g, dt_c @ params["tok_cnn.w"], dt_s @ params["tok_sam.w"]


def blend_logits(z_sam, z_cnn, alpha):
    """``(1 - alpha) * z_sam + alpha * z_cnn``; the endpoints return one input exactly."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError("alpha must lie in [0, 1]", "alpha")
    z_sam = np.asarray(z_sam, dtype=np.float64)
    z_cnn = np.asarray(z_cnn, dtype=np.float64)
    if z_sam.shape != z_cnn.shape:
        raise InvalidShapeError(f"logit shapes differ: {z_sam.shape} vs {z_cnn.shape}")
    if alpha == 1.0:
        return z_cnn.copy()
    if alpha == 0.0:
        return z_sam.copy()
    return (1.0 - alpha) * z_sam + alpha * z_cnn


def blend_logits_backward(dz, alpha):
    return (1.0 - alpha) * dz, alpha * dz


# ---------------------------------------------------------------------------
# Whole network


def prepare_features(fmaps, config):
    """Turn raw (N, C, H0, W0) feature maps into the network's side inputs:
    ``(masks, v_sam)``, either of which is None when its path is off."""
    masks = v_sam = None
    if config.map_fusion_stage is not None:
        h, w = config.mask_hw
        masks = np.stack([spatial_mask(f, h, w) for f in fmaps])
    if config.latent_fusion:
        v_sam = np.stack([pool_latent(f) for f in fmaps])
        if v_sam.shape[1] != config.d_sam:
            raise InvalidShapeError(f"feature channels {v_sam.shape[1]} != d_sam {config.d_sam}")
    return masks, v_sam


@dataclass
class ForwardTrace:
    z: np.ndarray
    z_cnn: np.ndarray
    v_cnn: np.ndarray
    embedding: np.ndarray
    z_sam: np.ndarray | None = None
    v_sam: np.ndarray | None = None
    v_concat: np.ndarray | None = None
    f_res: np.ndarray | None = None
    f_conv: np.ndarray | None = None
    f_fused: np.ndarray | None = None
    cache: dict = field(default_factory=dict, repr=False)


def forward(params, config, images, masks=None, v_sam=None, mode="eval", rng=None):
    """Run the network on a batch of (N, H, W, channels) images.

    In train mode dropout is applied to each head's input using two
    independent generators derived from ``rng``; eval mode is deterministic.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"unknown mode {mode!r}", "mode")
    if config.map_fusion_stage is not None and masks is None:
        raise MissingFeatureError("map fusion enabled but no feature mask given")
    if config.latent_fusion and v_sam is None:
        raise MissingFeatureError("latent fusion enabled but no foundation latent given")
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    x = x.transpose(0, 3, 1, 2)
    n = len(x)
    train = mode == "train" and config.dropout_rate > 0
    if train:
        if rng is None:
            raise ConfigError("train mode needs an rng for dropout", "rng")
        rng_cnn, rng_sam = (np.random.default_rng(s) for s in rng.integers(0, 2**63, size=2))

    cache = {"stages": []}
    trace = {}
    last = len(config.stage_channels) - 1
    for i in range(last + 1):
        pre, conv_cache = nn.conv2d_forward(x, params[f"conv{i}.w"], params[f"conv{i}.b"])
        act = nn.relu_forward(pre)
        st = {"conv": conv_cache, "act": act, "pre": pre}
        out = act
        if i == config.map_fusion_stage:
            m = np.asarray(masks, dtype=np.float64)
            if m.ndim == 3:
                m = m[None]
            if m.shape != (n, 1) + act.shape[2:]:
                raise InvalidShapeError(f"mask shape {m.shape} does not match stage {i} {act.shape}")
            f_conv = project_mask(m, params["mask.a"], params["mask.b"])
            out = fuse_map(f_conv, act)
            st.update(mask=m, f_conv=f_conv)
            trace.update(f_res=act, f_conv=f_conv, f_fused=out)
        if i < last:
            out = nn.avgpool2_forward(out)
        cache["stages"].append(st)
        x = out

    v_cnn = x.mean(axis=(2, 3))
    cache["final_hw"] = x.shape[2:]
    drop_c = nn.dropout_mask(rng_cnn, v_cnn.shape, config.dropout_rate) if train else None
    h_cnn = v_cnn if drop_c is None else v_cnn * drop_c
    z_cnn = h_cnn @ params["fc_cnn.w"].T + params["fc_cnn.b"]
    cache.update(v_cnn=v_cnn, h_cnn=h_cnn, drop_c=drop_c)

    z, embedding, z_sam, v_sam_arr, v_concat = z_cnn, v_cnn, None, None, None
    if config.latent_fusion:
        v_sam_arr = np.atleast_2d(np.asarray(v_sam, dtype=np.float64))
        drop_s = nn.dropout_mask(rng_sam, (n, 2 * config.d_tok), config.dropout_rate) if train else None
        embedding, z_sam, lat_cache = latent_fuse(v_cnn, v_sam_arr, params, drop_s)
        z = blend_logits(z_sam, z_cnn, config.alpha)
        v_concat = np.concatenate([v_cnn, v_sam_arr], axis=1)
        cache["latent"] = lat_cache
    return ForwardTrace(z=z, z_cnn=z_cnn, v_cnn=v_cnn, embedding=embedding, z_sam=z_sam,
                        v_sam=v_sam_arr, v_concat=v_concat, cache=cache, **trace)


def backward(params, config, trace, dz, d_embedding=None):
    """Parameter gradients given dL/dz and, optionally, dL/d(embedding)."""
    cache = trace.cache
    g = {}
    if config.latent_fusion:
        dz_sam, dz_cnn = blend_logits_backward(dz, config.alpha)
        lat_g, dv_cnn, _ = latent_fuse_backward(d_embedding, dz_sam, cache["latent"], params)
        g.update(lat_g)
    else:
        dz_cnn = dz
        dv_cnn = np.zeros_like(cache["v_cnn"]) if d_embedding is None else d_embedding.copy()
    g["fc_cnn.w"] = dz_cnn.T @ cache["h_cnn"]
    g["fc_cnn.b"] = dz_cnn.sum(axis=0)
    dh = dz_cnn @ params["fc_cnn.w"]
    if cache["drop_c"] is not None:
        dh = dh * cache["drop_c"]
    dv_cnn = dv_cnn + dh

    h, w = cache["final_hw"]
    dx = np.broadcast_to(dv_cnn[:, :, None, None] / (h * w), dv_cnn.shape + (h, w)).copy()
    last = len(config.stage_channels) - 1
    for i in range(last, -1, -1):
        st = cache["stages"][i]
        if i < last:
            dx = nn.avgpool2_backward(dx)
        if i == config.map_fusion_stage:
            df_conv, dx = fuse_map_backward(dx, st["f_conv"], st["act"])
            g["mask.a"], g["mask.b"] = project_mask_backward(df_conv, st["mask"])
        dpre = nn.relu_backward(dx, st["act"])
        dx, g[f"conv{i}.w"], g[f"conv{i}.b"] = nn.conv2d_backward(dpre, params[f"conv{i}.w"], st["conv"])
    return g


def predict(params, config, images, masks=None, v_sam=None, batch_size=256):
    out = []
    for s in range(0, len(images), batch_size):
        sl = slice(s, s + batch_size)
        tr = forward(params, config, images[sl],
                     None if masks is None else masks[sl],
                     None if v_sam is None else v_sam[sl], mode="eval")
        out.append(tr.z)
    return np.concatenate(out) if out else np.zeros((0, config.num_classes))


# ---------------------------------------------------------------------------
# Checkpoints: params.bin (named little-endian float32 arrays) + index.json


def params_checksum(params):
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype="<f4").tobytes())
    return h.hexdigest()


def save_checkpoint(directory, params, config, extra=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index, parts, off = {}, [], 0
    for name in sorted(params):
        buf = np.ascontiguousarray(params[name], dtype="<f4").tobytes()
        index[name] = {"shape": list(params[name].shape), "offset": off}
        parts.append(buf)
        off += len(buf)
    blob = b"".join(parts)
    (directory / "params.bin").write_bytes(blob)
    doc = {
        "format": "ltfuse-checkpoint/1",
        "fusion": config.to_dict(),
        "tensors": index,
        "checksum": hashlib.sha256(blob).hexdigest(),
        "extra": extra or {},
    }
    (directory / "index.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    return directory


def load_checkpoint(directory):
    """Returns ``(params, config, extra)``; params are float64 copies."""
    directory = Path(directory)
    ipath, bpath = directory / "index.json", directory / "params.bin"
    if not ipath.exists() or not bpath.exists():
        raise MissingFeatureError(f"checkpoint not found at {directory}")
    try:
        doc = json.loads(ipath.read_text())
    except ValueError as exc:
        raise FormatError(f"malformed checkpoint index: {exc}") from exc
    blob = bpath.read_bytes()
    if hashlib.sha256(blob).hexdigest() != doc.get("checksum"):
        raise FormatError("checkpoint checksum mismatch")
    config = FusionConfig.from_dict(doc["fusion"])
    params = {}
    for name, ent in doc["tensors"].items():
        count = int(np.prod(ent["shape"])) if ent["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=ent["offset"])
        params[name] = arr.reshape(ent["shape"]).astype(np.float64)
    expected = param_shapes(config)
    if {k: tuple(v.shape) for k, v in params.items()} != expected:
        raise FormatError("checkpoint tensors do not match its fusion config")
    return params, config, doc.get("extra", {})

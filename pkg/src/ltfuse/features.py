"""Frozen foundation-model features: storage, synthetic provider, and the
post-processing into a single-channel spatial mask and a pooled latent vector.

A feature map is a plain ``(C, H, W)`` array throughout.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import (ConfigError, ConflictError, FormatError, InsufficientSamplesError,
                     InvalidShapeError, MissingFeatureError)

MAGIC = b"LTFF"
VERSION = 1
_HEADER = struct.Struct("<4sII")
_RECORD = struct.Struct("<IHHH")


def _as_map(fmap):
    fmap = np.asarray(fmap)
    if fmap.ndim != 3 or min(fmap.shape) < 1:
        raise InvalidShapeError(f"feature map must be C x H x W with positive sizes, got {fmap.shape}")
    return fmap


# ---------------------------------------------------------------------------
# Post-processing


def pca_reduce(fmap):
    """Project every spatial position onto the first principal direction.

    Positions are the samples and channels the variables; the map is centred
    over positions before projecting. The direction is signed so its largest
    absolute loading is positive. Returns ``(scores, degenerate)`` where
    ``scores`` is ``(1, H, W)``; a map with no variance yields zeros and
    ``degenerate=True``.
    """
    fmap = _as_map(fmap).astype(np.float64)
    c, h, w = fmap.shape
    if h * w < 2:
        raise InsufficientSamplesError("PCA over positions needs H*W >= 2")
    x = fmap.reshape(c, h * w).T
    x = x - x.mean(axis=0)
    scale = max(1.0, float(np.abs(fmap).max()))
    if float(np.sum(x * x)) <= (1e-12 * scale) ** 2 * x.size:
        return np.zeros((1, h, w)), True
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    direction = vt[0]
    if direction[np.argmax(np.abs(direction))] < 0:
        direction = -direction
    return (x @ direction).reshape(1, h, w), False


def resize_bilinear(img, out_h, out_w):
    """Bilinear resize of a 2-D array, half-pixel centres, edge clamped."""
    if out_h < 1 or out_w < 1:
        raise InvalidShapeError(f"target size must be >= 1, got {out_h}x{out_w}")
    img = np.asarray(img, dtype=np.float64)
    in_h, in_w = img.shape

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(in_h, out_h)
    x0, x1, fx = axis(in_w, out_w)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy[:, None]) + bot * fy[:, None]


def normalize_resize(fmap, out_h, out_w):
    """Min-max normalise a ``(1, H, W)`` map to [0, 1], then resize bilinearly.

    A constant map normalises to zeros.
    """
    fmap = _as_map(fmap)
    if fmap.shape[0] != 1:
        raise InvalidShapeError("normalize_resize expects a single-channel map")
    if out_h < 1 or out_w < 1:
        raise InvalidShapeError(f"target size must be >= 1, got {out_h}x{out_w}")
    m = fmap[0].astype(np.float64)
    lo, hi = m.min(), m.max()
    m = (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)
    out = resize_bilinear(m, out_h, out_w)
    return np.clip(out, 0.0, 1.0)[None]


def pool_latent(fmap):
    """Spatial average pooling: one value per channel."""
    return _as_map(fmap).astype(np.float64).mean(axis=(1, 2))


def spatial_mask(fmap, out_h, out_w):
    scores, _ = pca_reduce(fmap)
    return normalize_resize(scores, out_h, out_w)


# ---------------------------------------------------------------------------
# LTFF store


class FeatureStore:
    """Mapping of sample id -> float32 feature map, serialisable as LTFF v1.

    Reads are safe from several threads once populated; writes are not.
    """

    def __init__(self):
        self._maps = {}

    def __len__(self):
        return len(self._maps)

    def __contains__(self, sample_id):
        return int(sample_id) in self._maps

    def ids(self):
        return sorted(self._maps)

    def put(self, sample_id, fmap):
        sample_id = int(sample_id)
        if sample_id in self._maps:
            raise ConflictError(f"feature id {sample_id} already stored")
        if not 0 <= sample_id < 2**32:
            raise ConfigError("sample id must fit in u32", "id")
        fmap = _as_map(fmap)
        if max(fmap.shape) >= 2**16:
            raise InvalidShapeError("feature dims must fit in u16")
        if not np.all(np.isfinite(fmap)):
            raise ConfigError("feature map has non-finite entries", "data")
        arr = np.ascontiguousarray(fmap, dtype=np.float32)
        arr.setflags(write=False)
        self._maps[sample_id] = arr

    def get(self, sample_id):
        try:
            return self._maps[int(sample_id)]
        except KeyError:
            raise MissingFeatureError(f"no features for sample id {int(sample_id)}") from None

    def missing(self, ids):
        return [int(i) for i in ids if int(i) not in self._maps]

    def stack(self, ids):
        missing = self.missing(ids)
        if missing:
            raise MissingFeatureError(f"no features for sample ids {missing[:20]}")
        return np.stack([self._maps[int(i)] for i in ids])

    def to_bytes(self):
        """Serialise to LTFF bytes; returns ``(blob, offsets)``."""
        parts = [_HEADER.pack(MAGIC, VERSION, len(self._maps))]
        offsets = {}
        pos = _HEADER.size
        for sid in self.ids():
            arr = self._maps[sid]
            rec = _RECORD.pack(sid, *arr.shape) + arr.astype("<f4").tobytes()
            offsets[sid] = pos
            parts.append(rec)
            pos += len(rec)
        return b"".join(parts), offsets

    @property
    def checksum(self):
        return hashlib.sha256(self.to_bytes()[0]).hexdigest()

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        blob, offsets = self.to_bytes()
        path.write_bytes(blob)
        manifest = {
            "format": "LTFF",
            "version": VERSION,
            "checksum": hashlib.sha256(blob).hexdigest(),
            "records": {str(sid): {"offset": off, "shape": list(self._maps[sid].shape)}
                        for sid, off in offsets.items()},
        }
        manifest_path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True))
        return path

    @classmethod
    def from_bytes(cls, blob, manifest=None):
        if len(blob) < _HEADER.size:
            raise FormatError("truncated LTFF header")
        magic, version, count = _HEADER.unpack_from(blob, 0)
        if magic != MAGIC:
            raise FormatError("bad magic")
        if version != VERSION:
            raise FormatError(f"unsupported LTFF version {version}")
        store = cls()
        if manifest is None:
            entries, pos = [], _HEADER.size
            for _ in range(count):
                entries.append(pos)
                if pos + _RECORD.size > len(blob):
                    raise FormatError("truncated LTFF record")
                _, c, h, w = _RECORD.unpack_from(blob, pos)
                pos += _RECORD.size + 4 * c * h * w
            if pos != len(blob):
                raise FormatError("trailing bytes after last LTFF record")
        else:
            if manifest.get("checksum") and manifest["checksum"] != hashlib.sha256(blob).hexdigest():
                raise FormatError("LTFF checksum mismatch")
            records = manifest.get("records", {})
            if len(records) != count:
                raise FormatError(f"manifest lists {len(records)} records, file header says {count}")
            entries = sorted(int(r["offset"]) for r in records.values())
            _check_offsets(blob, entries)
        for off in entries:
            sid, c, h, w = _RECORD.unpack_from(blob, off)
            start = off + _RECORD.size
            end = start + 4 * c * h * w
            if end > len(blob):
                raise FormatError(f"record at offset {off} runs past end of file")
            data = np.frombuffer(blob, dtype="<f4", count=c * h * w, offset=start).reshape(c, h, w)
            store.put(sid, data)
        if manifest is not None:
            declared = {int(k) for k in manifest["records"]}
            if declared != set(store._maps):
                raise FormatError("manifest ids do not match record ids")
        return store

    @classmethod
    def open(cls, path):
        path = Path(path)
        if not path.exists():
            raise MissingFeatureError(f"feature file {path} not found")
        blob = path.read_bytes()
        mpath = manifest_path(path)
        manifest = None
        if mpath.exists():
            try:
                manifest = json.loads(mpath.read_text())
            except ValueError as exc:
                raise FormatError(f"malformed manifest {mpath}: {exc}") from exc
        return cls.from_bytes(blob, manifest)


def manifest_path(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def _check_offsets(blob, offsets):
    prev_end = _HEADER.size
    for off in offsets:
        if off < prev_end:
            raise FormatError(f"overlapping record offsets at {off}")
        if off + _RECORD.size > len(blob):
            raise FormatError(f"record offset {off} past end of file")
        _, c, h, w = _RECORD.unpack_from(blob, off)
        prev_end = off + _RECORD.size + 4 * c * h * w


def store_roundtrip(store, sample_id, fmap):
    store.put(sample_id, fmap)
    return FeatureStore.from_bytes(store.to_bytes()[0]).get(sample_id)


# ---------------------------------------------------------------------------
# Synthetic provider


def class_signatures(num_classes, d_sam, seed):
    """Deterministic per-class channel signatures, shape (K, d_sam)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5A4D]))
    return rng.standard_normal((num_classes, d_sam))


def synth_feature_map(label, position, sample_id, signatures, signal_strength, seed,
                      grid=(8, 8), image_hw=(16, 16), latent_noise=1.0, spatial_noise=0.5):
    """One synthetic feature map.

    The structured part is the class signature times a Gaussian blob located
    at the object's position, scaled by ``signal_strength``. Noise has a
    per-sample channel offset (survives pooling) and iid spatial noise.
    """
    h0, w0 = grid
    d_sam = signatures.shape[1]
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(sample_id), 0xFEA7]))
    cy = ((image_hw[0] - 1) / 2 + position[0]) * h0 / image_hw[0]
    cx = ((image_hw[1] - 1) / 2 + position[1]) * w0 / image_hw[1]
    yy, xx = np.meshgrid(np.arange(h0) + 0.5, np.arange(w0) + 0.5, indexing="ij")
    blob = np.exp(-((yy - cy - 0.5) ** 2 + (xx - cx - 0.5) ** 2) / (2 * (0.2 * min(h0, w0)) ** 2))
    blob = blob / blob.mean()
    fmap = signal_strength * signatures[label][:, None, None] * blob[None]
    fmap = fmap + latent_noise * rng.standard_normal((d_sam, 1, 1))
    fmap = fmap + spatial_noise * rng.standard_normal((d_sam, h0, w0))
    return fmap.astype(np.float32)


def synth_provider(dataset, d_sam=16, signal_strength=0.5, seed=0, grid=(8, 8),
                   latent_noise=1.0, spatial_noise=0.5, store=None):
    """Fill a FeatureStore with one synthetic feature map per dataset sample.

    With ``signal_strength=0`` the features carry no class information.
    Passing an existing ``store`` extends it, so several splits can share one.
    """
    if signal_strength < 0:
        raise ConfigError("signal_strength must be >= 0", "signal_strength")
    store = FeatureStore() if store is None else store
    signatures = class_signatures(dataset.num_classes, d_sam, seed)
    positions = dataset.positions if dataset.positions is not None else np.zeros((len(dataset), 2))
    image_hw = dataset.image_shape[:2]
    for sid, y, pos in zip(dataset.ids, dataset.labels, positions):
        store.put(sid, synth_feature_map(y, pos, sid, signatures, signal_strength, seed,
                                         grid, image_hw, latent_noise, spatial_noise))
    return store

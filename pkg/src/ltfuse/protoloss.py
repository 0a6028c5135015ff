"""Per-class memory banks and the prototype loss family.

Distances are squared Euclidean. Prototypes and standard deviations come from
detached snapshots stored in FIFO banks, so they are constants with respect to
the current batch and every gradient here is with respect to ``Z`` only.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, InvalidShapeError
from .features import FeatureStore

COMPONENTS = ("head", "tail_std", "tail_dist")


class ClassMemoryBank:
    """FIFO buffer holding at most ``capacity`` vectors for one class."""

    def __init__(self, capacity, dim, class_id=0):
        if capacity < 1:
            raise ConfigError("bank capacity must be >= 1", "M")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.class_id = int(class_id)
        self.entries = deque(maxlen=self.capacity)

    def __len__(self):
        return len(self.entries)

    def push(self, vector):
        v = np.array(vector, dtype=np.float64).reshape(-1)
        if v.shape[0] != self.dim:
            raise InvalidShapeError(f"bank {self.class_id} holds dim {self.dim}, got {v.shape[0]}")
        v.setflags(write=False)
        self.entries.append(v)
        return self

    def stats(self, min_bank=1):
        """``(prototype, sigma, valid)``: per-dimension mean and population std."""
        if not self.entries:
            return np.zeros(self.dim), np.zeros(self.dim), False
        e = np.stack(self.entries)
        sigma = e.std(axis=0) if len(e) >= 2 else np.zeros(self.dim)
        return e.mean(axis=0), sigma, len(e) >= min_bank


def bank_push(bank, vector):
    return bank.push(vector)


def bank_stats(bank, min_bank=1):
    return bank.stats(min_bank)


class MemoryBanks:
    """One :class:`ClassMemoryBank` per class."""

    def __init__(self, num_classes, capacity, dim):
        self.banks = [ClassMemoryBank(capacity, dim, k) for k in range(num_classes)]

    def __getitem__(self, k):
        return self.banks[k]

    def __len__(self):
        return len(self.banks)

    @property
    def dim(self):
        return self.banks[0].dim

    def push_batch(self, Z, labels):
        for z, y in zip(np.asarray(Z), labels):
            self.banks[int(y)].push(z)

    def stats(self, min_bank=1):
        """Stacked ``(prototypes, sigmas, valid)`` over classes."""
        out = [b.stats(min_bank) for b in self.banks]
        return (np.stack([o[0] for o in out]), np.stack([o[1] for o in out]),
                np.array([o[2] for o in out]))

    def save(self, path):
        path = Path(path)
        store = FeatureStore()
        for b in self.banks:
            if len(b):
                store.put(b.class_id, np.stack(b.entries)[None])
        store.save(path.with_suffix(".ltff"))
        meta = {"format": "ltfuse-banks/1", "capacity": self.banks[0].capacity, "dim": self.dim,
                "sizes": [len(b) for b in self.banks]}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True))
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        store = FeatureStore.open(path.with_suffix(".ltff"))
        banks = cls(len(meta["sizes"]), meta["capacity"], meta["dim"])
        for k, size in enumerate(meta["sizes"]):
            if size:
                entries = store.get(k)[0]
                if entries.shape != (size, meta["dim"]):
                    raise FormatError(f"bank {k} has shape {entries.shape}, expected {(size, meta['dim'])}")
                for e in entries:
                    banks[k].push(e)
        return banks


@dataclass(frozen=True)
class LossConfig:
    tau_head: float = 0.5
    tau_tail_std: float = 0.5
    tau_tail_dist: float = 0.5
    beta: float = 1e-4
    M: int = 64
    d_eps: float = 1e-12
    min_bank: int = 1
    components: tuple = COMPONENTS
    per_dim_sign: bool = False

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        for name in ("tau_head", "tau_tail_std", "tau_tail_dist"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError("threshold must lie in [0, 1]", name)
        if self.beta < 0:
            raise ConfigError("beta must be >= 0", "beta")
        if self.d_eps <= 0:
            raise ConfigError("d_eps must be > 0", "d_eps")
        if self.M < 1:
            raise ConfigError("bank capacity must be >= 1", "M")
        if self.min_bank < 1:
            raise ConfigError("min_bank must be >= 1", "min_bank")
        bad = set(self.components) - set(COMPONENTS)
        if bad:
            raise ConfigError(f"unknown loss components {sorted(bad)}", "components")

    def to_dict(self):
        return {f.name: (list(getattr(self, f.name)) if f.name == "components" else getattr(self, f.name))
                for f in fields(self)}

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", "loss")
        return cls(**d)


# ---------------------------------------------------------------------------
# Losses. Each returns the scalar, or ``(scalar, dL/dZ)`` with ``grad=True``.


def _prep(Z, labels, prototypes, valid):
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    prototypes = np.atleast_2d(np.asarray(prototypes, dtype=np.float64))
    if len(labels) != len(Z) or Z.shape[1] != prototypes.shape[1]:
        raise InvalidShapeError(f"Z {Z.shape}, labels {labels.shape}, prototypes {prototypes.shape}")
    ok = np.ones(len(Z), bool) if valid is None else np.asarray(valid, bool)[labels]
    return Z, labels, prototypes, ok


def _finish(total, dZ, grad):
    return (float(total), dZ) if grad else float(total)


def sq_dist(Z, C):
    diff = Z - C
    return np.einsum("ij,ij->i", diff, diff), diff


def center_loss(Z, labels, prototypes, valid=None, grad=False):
    """Mean squared distance to the class prototype; invalid classes add 0."""
    Z, labels, P, ok = _prep(Z, labels, prototypes, valid)
    d, diff = sq_dist(Z, P[labels])
    b = len(Z)
    return _finish((d * ok).sum() / b, 2.0 * diff * ok[:, None] / b, grad)


def head_loss(Z, labels, prototypes, weights, tau_head, valid=None, grad=False):
    """``mean((1 - w_y) * d(z, c_y) * [w_y < tau_head])``."""
    Z, labels, P, ok = _prep(Z, labels, prototypes, valid)
    w = np.asarray(weights, dtype=np.float64)[labels]
    coef = (1.0 - w) * ((w < tau_head) & ok)
    d, diff = sq_dist(Z, P[labels])
    b = len(Z)
    return _finish((coef * d).sum() / b, 2.0 * coef[:, None] * diff / b, grad)


def draw_signs(rng, num_classes, dim, per_dim=False):
    """Random +-1 perturbation signs: one per class, or per class and dimension."""
    shape = (num_classes, dim) if per_dim else (num_classes, 1)
    return np.where(rng.random(shape) < 0.5, -1.0, 1.0)


def tail_std_loss(Z, labels, prototypes, sigmas, weights, tau_tail_std, rng=None, signs=None,
                  valid=None, per_dim=False, grad=False):
    """``mean(w_y * d(z, c_y + s * sigma_y) * [w_y > tau_tail_std])`` with a
    random sign ``s`` per class. Pass ``signs`` (shape (K, 1) or (K, d)) to fix it."""
    Z, labels, P, ok = _prep(Z, labels, prototypes, valid)
    sigmas = np.atleast_2d(np.asarray(sigmas, dtype=np.float64))
    if signs is None:
        if rng is None:
            raise ConfigError("tail_std_loss needs rng or explicit signs", "rng")
        signs = draw_signs(rng, len(P), P.shape[1], per_dim)
    perturbed = P + np.asarray(signs, dtype=np.float64) * sigmas
    w = np.asarray(weights, dtype=np.float64)[labels]
    coef = w * ((w > tau_tail_std) & ok)
    d, diff = sq_dist(Z, perturbed[labels])
    b = len(Z)
    return _finish((coef * d).sum() / b, 2.0 * coef[:, None] * diff / b, grad)


def tail_dist_loss(Z, labels, prototypes, weights, tau_tail_dist, d_eps=1e-12, valid=None, grad=False):
    """``-mean(w_y * log(max(d(z, c_y), d_eps)) * [w_y > tau_tail_dist])``."""
    Z, labels, P, ok = _prep(Z, labels, prototypes, valid)
    w = np.asarray(weights, dtype=np.float64)[labels]
    coef = w * ((w > tau_tail_dist) & ok)
    d, diff = sq_dist(Z, P[labels])
    dc = np.maximum(d, d_eps)
    b = len(Z)
    val = -(coef * np.log(dc)).sum() / b
    # The floor is flat, so the gradient vanishes where it is active.
    g = np.where(d > d_eps, -2.0 * coef / np.where(d > d_eps, d, 1.0), 0.0)
    return _finish(val, g[:, None] * diff / b, grad)


@dataclass
class LossBreakdown:
    center: float
    head: float
    tail_std: float
    tail_dist: float
    proto_total: float
    baseline: float
    total: float
    masks: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)
    grad: np.ndarray | None = field(default=None, repr=False)

    def as_dict(self):
        return {k: getattr(self, k) for k in
                ("center", "head", "tail_std", "tail_dist", "proto_total", "baseline", "total")}


def proto_loss(Z, labels, banks, weights, config, rng=None, baseline=0.0, signs=None, update=True):
    """Evaluate the full prototype loss against the current bank state.

    ``grad`` on the result holds d(proto_total)/dZ (not scaled by beta).
    With ``update=True`` the banks receive detached copies of ``Z`` after
    the loss has been evaluated.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    weights = np.asarray(weights, dtype=np.float64)
    P, S, valid = banks.stats(config.min_bank)
    w = weights[labels]
    ok = valid[labels]
    on = set(config.components)
    zero = np.zeros_like(Z)

    center = center_loss(Z, labels, P, valid)
    head, g_head = head_loss(Z, labels, P, weights, config.tau_head, valid, grad=True) \
        if "head" in on else (0.0, zero)
    if "tail_std" in on:
        if signs is None:
            if rng is None:
                raise ConfigError("proto_loss needs an rng for the tail-std perturbation", "rng")
            signs = draw_signs(rng, len(P), P.shape[1], config.per_dim_sign)
        tstd, g_tstd = tail_std_loss(Z, labels, P, S, weights, config.tau_tail_std, signs=signs,
                                     valid=valid, grad=True)
    else:
        tstd, g_tstd = 0.0, zero
    tdist, g_tdist = tail_dist_loss(Z, labels, P, weights, config.tau_tail_dist, config.d_eps, valid,
                                    grad=True) if "tail_dist" in on else (0.0, zero)

    proto_total = head + tstd + tdist
    total = baseline + config.beta * proto_total if config.beta else baseline
    masks = {
        "head": ok & (w < config.tau_head) & ("head" in on),
        "tail_std": ok & (w > config.tau_tail_std) & ("tail_std" in on),
        "tail_dist": ok & (w > config.tau_tail_dist) & ("tail_dist" in on),
    }
    skipped = sorted({int(y) for y in labels[~ok]})
    if update:
        banks.push_batch(Z, labels)
    return LossBreakdown(center=center, head=head, tail_std=tstd, tail_dist=tdist, proto_total=proto_total,
                         baseline=float(baseline), total=float(total), masks=masks, skipped=skipped,
                         grad=g_head + g_tstd + g_tdist)

"""Training loop, baselines, grouped metrics and the ablation runner."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import nn
from .data import GROUPS, ImbalanceProfile, compute_weights
from .errors import ConfigError, DivergedError, MissingFeatureError
from .features import pool_latent
from .fusion import (FusionConfig, backward, forward, init_params, load_checkpoint, params_checksum,
                     predict, prepare_features, save_checkpoint)
from .protoloss import COMPONENTS, LossConfig, MemoryBanks, proto_loss

log = logging.getLogger(__name__)

BASELINES = ("ce", "logit_adjust")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    schedule: str = "constant"
    baseline: str = "ce"
    logit_adjust_tau: float = 1.0
    map_fusion: bool = False
    map_fusion_stage: int | None = None
    latent_fusion: bool = False
    alpha: float = 0.5
    stage_channels: tuple = (8, 16, 32)
    d_tok: int = 16
    dropout_rate: float = 0.5
    use_proto: bool = False
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossConfig.from_dict(self.loss))
        if not self.lr > 0:
            raise ConfigError("lr must be > 0", "train.lr")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)", "train.momentum")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", "train.batch_size")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0", "train.epochs")
        if self.baseline not in BASELINES:
            raise ConfigError(f"baseline must be one of {BASELINES}", "train.baseline")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError("schedule must be 'constant' or 'cosine'", "train.schedule")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]", "train.alpha")

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "loss"}
        d["stage_channels"] = list(self.stage_channels)
        d["loss"] = self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", "train")
        return cls(**d)

    def with_delta(self, delta):
        """Copy with overrides; ``loss.<field>`` keys reach the loss config."""
        top, sub = {}, {}
        for key, value in delta.items():
            if key.startswith("loss."):
                sub[key[5:]] = value
            else:
                top[key] = value
        unknown = set(top) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", "delta")
        loss = self.loss
        if sub:
            loss = LossConfig.from_dict({**loss.to_dict(), **sub})
        return replace(self, **top, loss=loss)

    @property
    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def fusion_config(self, num_classes, image_shape, d_sam=16):
        stage = None
        if self.map_fusion:
            stage = len(self.stage_channels) - 1 if self.map_fusion_stage is None else self.map_fusion_stage
        return FusionConfig(num_classes=num_classes, image_shape=tuple(image_shape),
                            stage_channels=self.stage_channels, map_fusion_stage=stage,
                            latent_fusion=self.latent_fusion, alpha=self.alpha, d_sam=d_sam,
                            d_tok=self.d_tok, dropout_rate=self.dropout_rate)


# ---------------------------------------------------------------------------
# Baseline adjustment and metrics


def adjust_logits(z, priors, tau_ls=1.0):
    """Log-prior logit adjustment: ``z_k - tau_ls * log(prior_k)``."""
    priors = np.asarray(priors, dtype=np.float64)
    if np.any(priors <= 0):
        raise ConfigError("priors must be strictly positive", "priors")
    if not np.isclose(priors.sum(), 1.0):
        raise ConfigError("priors must sum to 1", "priors")
    return np.asarray(z, dtype=np.float64) - tau_ls * np.log(priors)


@dataclass
class MetricsReport:
    overall: float
    many: float | None
    medium: float | None
    few: float | None
    per_class: list
    config_hash: str = ""
    seed: int = 0
    epoch: int = 0
    train_loss: float | None = None

    def to_json(self):
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    def row(self):
        return {"overall": self.overall, "many": self.many, "medium": self.medium, "few": self.few}


def metrics_from_predictions(pred, labels, profile, config_hash="", seed=0, epoch=0):
    """Top-1 accuracy (percent) overall, per group and per class.

    A group or class without test samples is reported as ``None``.
    """
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    k = len(profile.counts)
    correct = pred == labels
    per_class = []
    for c in range(k):
        sel = labels == c
        per_class.append(float(100.0 * correct[sel].mean()) if sel.any() else None)
    groups = {}
    for g in GROUPS:
        sel = np.isin(labels, profile.group_members(g))
        groups[g] = float(100.0 * correct[sel].mean()) if sel.any() else None
    overall = float(100.0 * correct.mean()) if len(labels) else 0.0
    return MetricsReport(overall=overall, per_class=per_class, config_hash=config_hash, seed=seed,
                         epoch=epoch, **groups)


@dataclass
class Checkpoint:
    params: dict
    fusion: FusionConfig
    train: TrainConfig
    epoch: int = 0

    @property
    def checksum(self):
        return params_checksum(self.params)

    def save(self, directory):
        return save_checkpoint(directory, self.params, self.fusion,
                               extra={"train": self.train.to_dict(), "epoch": self.epoch})

    @classmethod
    def load(cls, directory):
        params, fusion, extra = load_checkpoint(directory)
        return cls(params=params, fusion=fusion, train=TrainConfig.from_dict(extra["train"]),
                   epoch=extra.get("epoch", 0))


def _side_inputs(dataset, store, fusion):
    if not fusion.uses_features:
        return None, None
    if store is None:
        raise MissingFeatureError("fusion enabled but no feature store given")
    return prepare_features(store.stack(dataset.ids), fusion)


def evaluate(checkpoint, dataset, profile, store=None, _side=None):
    """Metrics of a checkpoint on ``dataset``; groups come from ``profile``."""
    if dataset.num_classes > checkpoint.fusion.num_classes:
        raise ConfigError("dataset has more classes than the checkpoint", "num_classes")
    masks, v_sam = _side if _side is not None else _side_inputs(dataset, store, checkpoint.fusion)
    z = predict(checkpoint.params, checkpoint.fusion, dataset.images, masks, v_sam)
    if checkpoint.train.baseline == "logit_adjust":
        z = adjust_logits(z, profile.priors, checkpoint.train.logit_adjust_tau)
    return metrics_from_predictions(z.argmax(axis=1), dataset.labels, profile,
                                    checkpoint.train.config_hash, checkpoint.train.seed, checkpoint.epoch)


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list
    banks: MemoryBanks | None = None
    losses: list = field(default_factory=list)


def _lr_at(config, step, total_steps):
    if config.schedule == "cosine" and total_steps > 0:
        return config.lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
    return config.lr


# Overflow is detected and reported as DivergedError, so numpy need not warn.
@np.errstate(over="ignore", invalid="ignore")
def train(train_set, store, config, val_set=None, profile=None, callback=None):
    """Minibatch SGD with momentum on ``baseline + beta * proto_total``.

    Returns a :class:`TrainResult` whose history holds one MetricsReport per
    epoch (on ``val_set`` when given). A non-finite loss raises
    :class:`DivergedError` carrying the last finite parameters.
    """
    k = train_set.num_classes
    if val_set is not None and profile is None:
        profile = ImbalanceProfile.from_counts(train_set.class_counts)
    d_sam = 16
    if config.map_fusion or config.latent_fusion:
        if store is None:
            raise MissingFeatureError("fusion enabled but no feature store given")
        missing = store.missing(train_set.ids)
        if missing:
            raise MissingFeatureError(f"no features for training ids {missing[:20]}")
        d_sam = store.get(train_set.ids[0]).shape[0]
    fusion = config.fusion_config(k, train_set.image_shape, d_sam)
    params = init_params(fusion, config.seed)
    velocity = {n: np.zeros_like(p) for n, p in params.items()}
    banks = weights = None
    if config.use_proto:
        weights = compute_weights(train_set.class_counts)
        banks = MemoryBanks(k, config.loss.M, fusion.feature_dim)

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    sign_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    masks, v_sam = _side_inputs(train_set, store, fusion)
    val_side = _side_inputs(val_set, store, fusion) if val_set is not None else None

    images, labels = train_set.images, train_set.labels
    n = len(labels)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    step = 0
    history, losses = [], []
    last_good = {nm: p.copy() for nm, p in params.items()}
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for s in range(0, n, config.batch_size):
            idx = perm[s:s + config.batch_size]
            tr = forward(params, fusion, images[idx], None if masks is None else masks[idx],
                         None if v_sam is None else v_sam[idx], mode="train", rng=rng)
            y = labels[idx]
            base, dz = nn.cross_entropy(tr.z, y)
            total, d_emb = base, None
            if banks is not None:
                bd = proto_loss(tr.embedding, y, banks, weights, config.loss, rng=sign_rng,
                                baseline=base, update=False)
                total = bd.total
                if config.loss.beta:
                    d_emb = config.loss.beta * bd.grad
            if not np.isfinite(total):
                raise DivergedError(f"non-finite loss at epoch {epoch}, step {step}",
                                    state=last_good, epoch=epoch, step=step)
            grads = backward(params, fusion, tr, dz, d_emb)
            lr = _lr_at(config, step, total_steps)
            for nm, p in params.items():
                g = grads[nm]
                if config.weight_decay:
                    g = g + config.weight_decay * p
                v = velocity[nm]
                v *= config.momentum
                v += g
                p -= lr * v
            if not all(np.all(np.isfinite(p)) for p in params.values()):
                raise DivergedError(f"non-finite parameters at epoch {epoch}, step {step}",
                                    state=last_good, epoch=epoch, step=step)
            last_good = {nm: p.copy() for nm, p in params.items()}
            if banks is not None:
                banks.push_batch(tr.embedding, y)
            epoch_loss += float(total) * len(idx)
            losses.append(float(total))
            step += 1
        ckpt = Checkpoint(params=params, fusion=fusion, train=config, epoch=epoch)
        if val_set is not None:
            rep = evaluate(ckpt, val_set, profile, _side=val_side)
        else:
            rep = MetricsReport(overall=float("nan"), many=None, medium=None, few=None, per_class=[],
                                config_hash=config.config_hash, seed=config.seed, epoch=epoch)
        rep.train_loss = epoch_loss / n
        history.append(rep)
        log.info("epoch %d loss %.4f val %.2f", epoch, rep.train_loss, rep.overall)
        if callback is not None:
            callback(epoch, rep)
    final = Checkpoint(params={nm: p.copy() for nm, p in params.items()}, fusion=fusion, train=config,
                       epoch=config.epochs)
    return TrainResult(checkpoint=final, history=history, banks=banks, losses=losses)


HISTORY_COLUMNS = ("epoch", "train_loss", "overall", "many", "medium", "few")


def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(round(float(v), 6)) if isinstance(v, float) else str(v)


def history_csv(history):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for rep in history:
        w.writerow([_fmt(getattr(rep, c)) for c in HISTORY_COLUMNS])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Feature-only control


def linear_probe(train_x, train_y, test_x, num_classes, steps=500, lr=0.5, weight_decay=1e-4):
    """Softmax regression on standardised features, full-batch gradient
    descent with momentum from a zero start. Returns test-set predictions."""
    train_x = np.asarray(train_x, dtype=np.float64)
    mu = train_x.mean(axis=0)
    sd = train_x.std(axis=0) + 1e-12
    xs = (train_x - mu) / sd
    xt = (np.asarray(test_x, dtype=np.float64) - mu) / sd
    w = np.zeros((num_classes, xs.shape[1]))
    b = np.zeros(num_classes)
    vw, vb = np.zeros_like(w), np.zeros_like(b)
    for _ in range(steps):
        _, dz = nn.cross_entropy(xs @ w.T + b, train_y)
        gw = dz.T @ xs + weight_decay * w
        gb = dz.sum(axis=0)
        vw = 0.9 * vw + gw
        vb = 0.9 * vb + gb
        w -= lr * vw
        b -= lr * vb
    return (xt @ w.T + b).argmax(axis=1)


def feature_only_control(train_set, test_set, store, profile=None):
    """Accuracy of a linear classifier on pooled provider features alone."""
    profile = profile or ImbalanceProfile.from_counts(train_set.class_counts)
    tr = np.stack([pool_latent(f) for f in store.stack(train_set.ids)])
    te = np.stack([pool_latent(f) for f in store.stack(test_set.ids)])
    pred = linear_probe(tr, train_set.labels, te, train_set.num_classes)
    return metrics_from_predictions(pred, test_set.labels, profile)


# ---------------------------------------------------------------------------
# Ablation


def standard_grid():
    """Rows of the fusion and loss-component ablations, in table order.

    Every row sets all fusion and loss switches, so the grid does not
    depend on what the base config enables.
    """
    def row(map_fusion, latent_fusion, components=None):
        d = {"map_fusion": map_fusion, "latent_fusion": latent_fusion, "use_proto": components is not None}
        if components is not None:
            d["loss.components"] = list(components)
        return d

    rows = [
        ("baseline", row(False, False)),
        ("+map", row(True, False)),
        ("+latent", row(False, True)),
        ("+both", row(True, True)),
    ]
    for comp, label in (("head", "L_head"), ("tail_std", "L_tail-std"), ("tail_dist", "L_tail-dist")):
        rows.append((f"+both+{label}", row(True, True, [comp])))
    rows.append(("+both+L_proto", row(True, True, COMPONENTS)))
    return rows


@dataclass
class AblationRow:
    name: str
    config: TrainConfig | None
    report: MetricsReport | None
    error: str | None = None


def ablate(train_set, eval_set, store, base_config, grid=None, workers=None):
    """Train and evaluate one model per grid row; rows keep declaration order.

    A failing row records its error and the grid continues. ``workers``
    defaults to the ``LTFUSE_THREADS`` environment variable (or 1).
    """
    grid = standard_grid() if grid is None else list(grid)
    profile = ImbalanceProfile.from_counts(train_set.class_counts)
    if workers is None:
        workers = int(os.environ.get("LTFUSE_THREADS", "1") or 1)

    def run(item):
        name, delta = item
        try:
            cfg = base_config.with_delta(delta)
            res = train(train_set, store, cfg, profile=profile)
            return AblationRow(name, cfg, evaluate(res.checkpoint, eval_set, profile, store))
        except Exception as exc:  # noqa: BLE001 - recorded per row
            log.warning("ablation row %s failed: %s", name, exc)
            return AblationRow(name, None, None, f"{type(exc).__name__}: {exc}")

    if workers <= 1:
        return [run(item) for item in grid]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, grid))


ABLATION_COLUMNS = ("method", "many", "medium", "few", "all", "config_hash", "error")


def ablation_csv(rows, baseline_label=None):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for r in rows:
        name = r.name
        if baseline_label and name == "baseline":
            name = baseline_label
        if r.report is None:
            w.writerow([name, "", "", "", "", "", r.error or ""])
        else:
            rep = r.report
            w.writerow([name, _fmt(rep.many), _fmt(rep.medium), _fmt(rep.few), _fmt(rep.overall),
                        rep.config_hash, ""])
    return buf.getvalue()

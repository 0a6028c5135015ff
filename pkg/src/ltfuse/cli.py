"""``ltfuse`` command line.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 diverged run.
Default paths are relative to ``--out``: the dataset lives in
``<out>/dataset`` and features in ``<out>/features.ltff``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import load_config
from .data import ImbalanceProfile, SPLITS, load_dataset, save_dataset, synth_corpus
from .errors import ConfigError, DataError, DivergedError, FormatError, InvalidShapeError, MissingFeatureError
from .features import FeatureStore, synth_provider
from .gradcheck import DEFAULT_SELECTION, TOLERANCE, gradcheck, passed
from .train import Checkpoint, ablate, ablation_csv, evaluate, history_csv, standard_grid, train

log = logging.getLogger("ltfuse")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


def _out(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data_dir(args):
    return Path(args.data) if args.data else Path(args.out) / "dataset"


def _features_path(args):
    return Path(args.features) if args.features else Path(args.out) / "features.ltff"


def _load_splits(directory):
    return {s: load_dataset(directory, s) for s in SPLITS}


def _write(path, text):
    path.write_text(text)
    log.info("wrote %s", path)


def cmd_synth(args):
    cfg = load_config(args.config).with_seed(args.seed)
    d = cfg.dataset
    splits = synth_corpus(num_classes=d["num_classes"], n_max=d["n_max"], imbalance_ratio=d["imbalance_ratio"],
                          profile=d["profile"], seed=d["seed"], image_shape=tuple(d["image_shape"]),
                          noise=d["noise"], jitter=d["jitter"], n_val=d["n_val"], n_test=d["n_test"])
    target = _out(args) / "dataset"
    for ds in splits.values():
        save_dataset(ds, target)
    counts = splits["train"].class_counts
    width = 50 / counts.max()
    for k, n in enumerate(counts):
        print(f"class {k:3d} {n:6d} {'#' * max(1, int(round(n * width)))}")
    return EXIT_OK


def cmd_extract(args):
    cfg = load_config(args.config).with_seed(args.seed)
    splits = _load_splits(_data_dir(args))
    out_path = Path(args.features) if args.features else _out(args) / "features.ltff"
    if args.provider == "synthetic":
        p = cfg.provider
        store = None
        for ds in splits.values():
            store = synth_provider(ds, d_sam=p["d_sam"], signal_strength=p["signal_strength"], seed=p["seed"],
                                   grid=tuple(p["grid"]), latent_noise=p["latent_noise"],
                                   spatial_noise=p["spatial_noise"], store=store)
    else:
        if not args.source:
            raise ConfigError("--source is required with --provider file", "source")
        source = FeatureStore.open(args.source)
        wanted = [int(i) for ds in splits.values() for i in ds.ids]
        missing = source.missing(wanted)
        if missing:
            raise MissingFeatureError(f"feature file lacks {len(missing)} sample ids: {missing[:50]}")
        store = FeatureStore()
        for i in wanted:
            store.put(i, source.get(i))
    store.save(out_path)
    print(f"{len(store)} feature records -> {out_path}")
    return EXIT_OK


def _store_if_needed(args, tcfg):
    if tcfg.map_fusion or tcfg.latent_fusion:
        return FeatureStore.open(_features_path(args))
    path = _features_path(args)
    return FeatureStore.open(path) if path.exists() else None


def cmd_train(args):
    cfg = load_config(args.config).with_seed(args.seed)
    splits = _load_splits(_data_dir(args))
    tcfg = cfg.train
    store = _store_if_needed(args, tcfg)
    out = _out(args) / "train"
    out.mkdir(exist_ok=True)
    profile = ImbalanceProfile.from_counts(splits["train"].class_counts)
    try:
        res = train(splits["train"], store, tcfg, val_set=splits["val"], profile=profile)
    except DivergedError as exc:
        _write(out / "diverged.json", json.dumps({"error": str(exc), "epoch": exc.epoch, "step": exc.step},
                                                 sort_keys=True))
        raise
    res.checkpoint.save(out / "checkpoint")
    if res.banks is not None:
        res.banks.save(out / "banks")
    _write(out / "history.csv", history_csv(res.history))
    report = evaluate(res.checkpoint, splits["test"], profile, store)
    if res.history:
        report.train_loss = res.history[-1].train_loss
    _write(out / "metrics.json", report.to_json())
    print(f"test overall {report.overall:.2f}  many {report.many}  medium {report.medium}  few {report.few}")
    return EXIT_OK


def cmd_eval(args):
    ckpt_dir = Path(args.checkpoint) if args.checkpoint else Path(args.out) / "train" / "checkpoint"
    ckpt = Checkpoint.load(ckpt_dir)
    splits = _load_splits(_data_dir(args))
    store = None
    if ckpt.fusion.uses_features:
        store = FeatureStore.open(_features_path(args))
    profile = ImbalanceProfile.from_counts(splits["train"].class_counts)
    report = evaluate(ckpt, splits[args.split], profile, store)
    _write(_out(args) / f"metrics_{args.split}.json", report.to_json())
    print(report.to_json())
    return EXIT_OK


def cmd_ablate(args):
    cfg = load_config(args.config).with_seed(args.seed)
    splits = _load_splits(_data_dir(args))
    store = FeatureStore.open(_features_path(args))
    grid = cfg.ablation if cfg.ablation is not None else standard_grid()
    rows = ablate(splits["train"], splits["test"], store, cfg.train, grid)
    label = "CE" if cfg.train.baseline == "ce" else "logit_adjust"
    out = _out(args)
    table = ablation_csv(rows, baseline_label=label)
    _write(out / "ablation.csv", table)
    doc = [{"name": r.name, "error": r.error,
            "metrics": None if r.report is None else json.loads(r.report.to_json())} for r in rows]
    _write(out / "ablation.json", json.dumps(doc, indent=1, sort_keys=True))
    print(table, end="")
    return EXIT_OK


def cmd_gradcheck(args):
    cfg = load_config(args.config)
    selector = tuple(args.selector) if args.selector else tuple(cfg.gradcheck.get("selector", DEFAULT_SELECTION))
    n_seeds = args.n_seeds or cfg.gradcheck.get("n_seeds", 20)
    seed = 0 if args.seed is None else args.seed
    report = gradcheck(selector, seed=seed, n_seeds=n_seeds)
    ok = passed(report)
    for op, err in report.items():
        print(f"{'PASS' if err < TOLERANCE else 'FAIL'} {op:14s} max rel err {err:.3e}")
    if args.out:
        _write(_out(args) / "gradcheck.json",
               json.dumps({"report": report, "tolerance": TOLERANCE, "passed": ok}, indent=1, sort_keys=True))
    return EXIT_OK if ok else 1


def cmd_plot(args):
    from .plotting import plot_history

    src = Path(args.metrics)
    if not src.exists():
        raise MissingFeatureError(f"metrics file {src} not found")
    out = Path(args.out)
    if out.suffix != ".svg":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "history.svg"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    plot_history(src.read_text(), out)
    print(out)
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON")
    common.add_argument("--out", default="runs", help="output directory")
    common.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    common.add_argument("--verbose", "-v", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="dataset directory (default <out>/dataset)")
    data.add_argument("--features", help="LTFF feature file (default <out>/features.ltff)")

    p = argparse.ArgumentParser(prog="ltfuse", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic long-tailed dataset").set_defaults(
        func=cmd_synth)
    s = sub.add_parser("extract", parents=[common, data], help="write foundation features for a dataset")
    s.add_argument("--provider", choices=["synthetic", "file"], default="synthetic")
    s.add_argument("--source", help="LTFF file to read with --provider file")
    s.set_defaults(func=cmd_extract)
    sub.add_parser("train", parents=[common, data], help="train one model").set_defaults(func=cmd_train)
    s = sub.add_parser("eval", parents=[common, data], help="evaluate a checkpoint")
    s.add_argument("--checkpoint", help="checkpoint directory (default <out>/train/checkpoint)")
    s.add_argument("--split", choices=SPLITS, default="test")
    s.set_defaults(func=cmd_eval)
    sub.add_parser("ablate", parents=[common, data], help="run the ablation grid").set_defaults(func=cmd_ablate)
    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    s.add_argument("--selector", nargs="+", choices=["fusion-net", "proto-loss", "network"])
    s.add_argument("--n-seeds", type=int, default=None)
    s.set_defaults(func=cmd_gradcheck, out=None)
    s = sub.add_parser("plot", parents=[common], help="SVG of a history CSV")
    s.add_argument("metrics", help="history CSV written by train")
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InvalidShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergedError as exc:
        print(f"run diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())

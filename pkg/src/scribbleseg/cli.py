"""Command-line entry points.

Commands: synth, train, predict, eval, ablate, active, serve. Every command
resolves its configuration as defaults < config file (--config, flat JSON)
< explicit flags, writes a run manifest (resolved config, seed, input hashes)
atomically before producing any artifact, and exits 0 on success, 1 on usage
errors, 2 on data errors, 3 on numerical failures.
"""

import argparse
import hashlib
import json
import os
import sys
import tempfile
import time

import numpy as np

from .data import (DataError, NormalizationConfig, load_image, load_labelmap,
                   normalize, save_raster)
from .inference import mc_ensemble, predict_full
from .instances import aggregate_metrics, compute_metrics, extract_instances
from .losses import MixtureConfig
from .model import ModelConfig, NumericalError, load_checkpoint, save_checkpoint
from .simdata import (ScribbleBudget, SynthConfig, generate, load_dataset,
                      save_dataset, scribbles_for_instances, select_instances,
                      simulate_scribbles)
from .trainer import TrainConfig, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_USAGE)


# ---------------------------------------------------------------------------
# run manifests
# ---------------------------------------------------------------------------

def _sha256_file(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _hash_inputs(paths):
    entries = []
    for path in paths:
        if os.path.isdir(path):
            for root, _, files in os.walk(path):
                for name in sorted(files):
                    full = os.path.join(root, name)
                    entries.append((os.path.relpath(full, path), _sha256_file(full)))
        elif os.path.exists(path):
            entries.append((os.path.basename(path), _sha256_file(path)))
    combined = hashlib.sha256()
    for rel, digest in sorted(entries):
        combined.update(f"{rel}:{digest}\n".encode())
    return combined.hexdigest()


def write_run_manifest(out_dir, command, config, seed, inputs, outputs):
    """Atomic manifest written before any artifact; sufficient to reproduce the run."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": list(inputs),
        "inputs_sha256": _hash_inputs(inputs),
        "outputs": list(outputs),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
        "argv": sys.argv[1:],
    }
    path = os.path.join(out_dir, "run_manifest.json")
    fd, tmp = tempfile.mkstemp(dir=out_dir, suffix=".tmp")
    with os.fdopen(fd, "w", encoding="ascii") as fh:
        json.dump(manifest, fh, indent=1)
    os.replace(tmp, path)
    return path


def _resolve(args, config_keys):
    """defaults < config file < explicit flags, over the given keys."""
    resolved = {}
    file_values = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="ascii") as fh:
            file_values = json.load(fh)
    for key, default in config_keys.items():
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
        elif key in file_values:
            resolved[key] = file_values[key]
        else:
            resolved[key] = default
    return resolved


# ---------------------------------------------------------------------------
# shared option tables
# ---------------------------------------------------------------------------

_TRAIN_KEYS = {
    "depth": 2,
    "features": 16,
    "mixture_components": 4,
    "components_per_class": [2, 2],
    "dropout": 0.2,
    "sigma": 0.25,
    "lam": 0.5,
    "batch_size": 16,
    "epochs": 50,
    "learning_rate": 4e-4,
    "patience": 20,
    "imputation_p": 0.2,
    "window_radius": 5,
    "patches_per_image": 16,
    "patch_size": 128,
    "val_fraction": 0.1,
    "scribble_bias": 0.9,
    "low_percentile": 1.0,
    "high_percentile": 99.0,
}


def _add_train_flags(parser):
    parser.add_argument("--config", help="flat JSON config file; flags override it")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--depth", type=int)
    parser.add_argument("--features", type=int)
    parser.add_argument("--mixture-components", dest="mixture_components", type=int)
    parser.add_argument("--dropout", type=float)
    parser.add_argument("--sigma", type=float)
    parser.add_argument("--lam", type=float)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--learning-rate", dest="learning_rate", type=float)
    parser.add_argument("--patience", type=int)
    parser.add_argument("--imputation-p", dest="imputation_p", type=float)
    parser.add_argument("--window-radius", dest="window_radius", type=int)
    parser.add_argument("--patches-per-image", dest="patches_per_image", type=int)
    parser.add_argument("--patch-size", dest="patch_size", type=int)
    parser.add_argument("--val-fraction", dest="val_fraction", type=float)
    parser.add_argument("--scribble-bias", dest="scribble_bias", type=float)


def _train_config(resolved, in_channels, seed, lam=None):
    model = ModelConfig(
        in_channels=in_channels,
        depth=int(resolved["depth"]),
        base_features=int(resolved["features"]),
        mixture_components=int(resolved["mixture_components"]),
        components_per_class=tuple(resolved["components_per_class"]),
        dropout_rate=float(resolved["dropout"]),
    )
    mixture = MixtureConfig(
        components=int(resolved["mixture_components"]),
        components_per_class=tuple(resolved["components_per_class"]),
        sigma=resolved["sigma"],
        lam=float(resolved["lam"] if lam is None else lam),
    )
    return TrainConfig(
        model=model, mixture=mixture,
        batch_size=int(resolved["batch_size"]),
        epochs=int(resolved["epochs"]),
        learning_rate=float(resolved["learning_rate"]),
        patience=int(resolved["patience"]),
        seed=seed,
        imputation_p=float(resolved["imputation_p"]),
        window_radius=int(resolved["window_radius"]),
        patches_per_image=int(resolved["patches_per_image"]),
        patch_size=int(resolved["patch_size"]),
        val_fraction=float(resolved["val_fraction"]),
        scribble_bias=float(resolved["scribble_bias"]),
    )


def _norm_config(resolved):
    return NormalizationConfig(float(resolved["low_percentile"]), float(resolved["high_percentile"]))


def _training_pairs(items, norm):
    pairs = []
    for item in items:
        if item.scribbles.is_empty():
            continue
        pairs.append((normalize(item.image, norm), item.scribbles))
    if not pairs:
        raise DataError("dataset has no scribbled images to train on")
    return pairs


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    keys = {
        "images": 8, "size": 256, "channels": 2, "cells_min": 40, "cells_max": 60,
        "radius_min": 4.0, "radius_max": 8.0, "fg_mean": 0.75, "bg_mean": 0.25,
        "fg_pop_delta": 0.08, "bg_pop_delta": 0.08, "jitter": 0.03,
        "noise_sigma": 0.05, "budget": 0.1,
    }
    resolved = _resolve(args, keys)
    seed = args.seed if args.seed is not None else 0
    config = SynthConfig(
        height=int(resolved["size"]), width=int(resolved["size"]),
        channels=int(resolved["channels"]), num_images=int(resolved["images"]),
        cells_min=int(resolved["cells_min"]), cells_max=int(resolved["cells_max"]),
        radius_min=float(resolved["radius_min"]), radius_max=float(resolved["radius_max"]),
        fg_mean=resolved["fg_mean"], bg_mean=resolved["bg_mean"],
        fg_pop_delta=float(resolved["fg_pop_delta"]), bg_pop_delta=float(resolved["bg_pop_delta"]),
        jitter=float(resolved["jitter"]), noise_sigma=float(resolved["noise_sigma"]),
        seed=seed,
    )
    write_run_manifest(args.out, "synth", {**resolved, "seed": seed}, seed, [], [args.out])
    pairs = generate(config)
    budget = ScribbleBudget(float(resolved["budget"]))
    scribbles = [simulate_scribbles(labels, budget, seed=seed + i)
                 for i, (_, labels) in enumerate(pairs)]
    save_dataset(args.out, pairs, scribbles, config=config)
    print(f"wrote {len(pairs)} images to {args.out}")
    return EXIT_OK


def cmd_train(args):
    resolved = _resolve(args, _TRAIN_KEYS)
    seed = args.seed if args.seed is not None else 0
    items = load_dataset(args.data)
    norm = _norm_config(resolved)
    pairs = _training_pairs(items, norm)
    config = _train_config(resolved, pairs[0][0].channels, seed)
    write_run_manifest(args.out, "train", {**resolved, "seed": seed}, seed,
                       [args.data], [args.out])
    model, history = train(pairs, config, out_dir=args.out)
    save_checkpoint(model, os.path.join(args.out, "best.ckpt"),
                    epoch=history.best_epoch, seed=seed)
    if history.diverged:
        print("training diverged; best checkpoint kept", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"best epoch {history.best_epoch}, val joint loss {history.best_val_loss():.6f}")
    return EXIT_OK


def _predict_image(model, image, norm, tile, margin, passes, seed, threshold, min_size):
    normalized = normalize(image, norm)
    rho, prob = predict_full(model, normalized, tile=tile, margin=margin)
    mean_prob, entropy = mc_ensemble(model, normalized, passes=passes, seed=seed,
                                     tile=tile, margin=margin)
    labels = extract_instances(prob, threshold=threshold, min_size=min_size)
    return prob, mean_prob, entropy, labels


def _save_gray_png(array, path, scale):
    from PIL import Image

    arr = np.clip(np.asarray(array, dtype=np.float64) / scale, 0.0, 1.0)
    Image.fromarray((arr * 255).astype(np.uint8)).save(path)


def cmd_predict(args):
    keys = {"tile": 256, "margin": 32, "passes": 8, "threshold": 0.5, "min_size": 10,
            "low_percentile": 1.0, "high_percentile": 99.0}
    resolved = _resolve(args, keys)
    seed = args.seed if args.seed is not None else 0
    model = load_checkpoint(args.model)
    image = load_image(args.image)
    write_run_manifest(args.out, "predict", {**resolved, "seed": seed}, seed,
                       [args.model, args.image], [args.out])
    prob, mean_prob, entropy, labels = _predict_image(
        model, image, _norm_config(resolved), int(resolved["tile"]), int(resolved["margin"]),
        int(resolved["passes"]), seed, float(resolved["threshold"]), int(resolved["min_size"]))
    save_raster(prob.astype(np.float32), os.path.join(args.out, "prob.raster"))
    save_raster(mean_prob.astype(np.float32), os.path.join(args.out, "prob_mc.raster"))
    save_raster(entropy.astype(np.float32), os.path.join(args.out, "entropy.raster"))
    save_raster(labels.labels, os.path.join(args.out, "instances.raster"))
    _save_gray_png(prob, os.path.join(args.out, "prob.png"), 1.0)
    _save_gray_png(entropy, os.path.join(args.out, "entropy.png"), float(np.log(2.0)))
    print(f"{labels.num_instances} instances -> {args.out}")
    return EXIT_OK


def _eval_pairs(pred_paths, gt_paths):
    if len(pred_paths) != len(gt_paths):
        raise DataError(f"{len(pred_paths)} predictions vs {len(gt_paths)} ground truths")
    reports = []
    for pred_path, gt_path in zip(pred_paths, gt_paths):
        pred = load_labelmap(pred_path)
        gt = load_labelmap(gt_path)
        reports.append(compute_metrics(pred, gt))
    return reports


def cmd_eval(args):
    pred_paths = args.pred.split(",")
    gt_paths = args.gt.split(",")
    out_dir = os.path.dirname(os.path.abspath(args.out))
    write_run_manifest(out_dir, "eval", {}, 0, pred_paths + gt_paths, [args.out])
    reports = _eval_pairs(pred_paths, gt_paths)
    aggregate = aggregate_metrics(reports)
    payload = {
        "per_image": [r.as_dict() for r in reports],
        "aggregate": aggregate.as_dict(),
    }
    with open(args.out, "w", encoding="ascii") as fh:
        json.dump(payload, fh, indent=1)
    print(json.dumps(aggregate.as_dict(), indent=1))
    return EXIT_OK


def _evaluate_model(model, eval_items, norm, tile, margin, threshold, min_size):
    reports = []
    for item in eval_items:
        normalized = normalize(item.image, norm)
        _, prob = predict_full(model, normalized, tile=tile, margin=margin)
        pred = extract_instances(prob, threshold=threshold, min_size=min_size)
        reports.append(compute_metrics(pred, item.labels))
    return aggregate_metrics(reports)


def cmd_ablate(args):
    resolved = _resolve(args, _TRAIN_KEYS)
    seed = args.seed if args.seed is not None else 0
    items = load_dataset(args.data)
    eval_items = load_dataset(args.eval_data)
    norm = _norm_config(resolved)
    pairs = _training_pairs(items, norm)
    write_run_manifest(args.out, "ablate", {**resolved, "seed": seed}, seed,
                       [args.data, args.eval_data], [args.out])
    variants = [("reconstruction_only", 1.0), ("scribble_only", 0.0), ("joint", None)]
    rows = {}
    for name, lam in variants:
        config = _train_config(resolved, pairs[0][0].channels, seed, lam=lam)
        model, _ = train(pairs, config)
        report = _evaluate_model(model, eval_items, norm, 256, 32, 0.5, 10)
        rows[name] = {"lambda": config.mixture.lam, **report.as_dict()}
        print(f"{name:22s} " + "  ".join(f"{k}={v:.4f}" for k, v in report.as_dict().items()))
    with open(os.path.join(args.out, "ablation.json"), "w", encoding="ascii") as fh:
        json.dump(rows, fh, indent=1)
    return EXIT_OK


def cmd_active(args):
    resolved = _resolve(args, _TRAIN_KEYS)
    seed = args.seed if args.seed is not None else 0
    b1, b2 = float(args.budget1), float(args.budget2)
    items = load_dataset(args.data)
    eval_items = load_dataset(args.eval_data)
    norm = _norm_config(resolved)
    write_run_manifest(args.out, "active", {**resolved, "seed": seed, "budget1": b1, "budget2": b2},
                       seed, [args.data, args.eval_data], [args.out])
    channels = items[0].image.channels

    def run_round(scribble_sets, warm=None, tag=""):
        pairs = [(normalize(item.image, norm), s)
                 for item, s in zip(items, scribble_sets) if not s.is_empty()]
        config = _train_config(resolved, channels, seed)
        model, _ = train(pairs, config, initial_model=warm)
        report = _evaluate_model(model, eval_items, norm, 256, 32, 0.5, 10)
        print(f"{tag:10s} " + "  ".join(f"{k}={v:.4f}" for k, v in report.as_dict().items()))
        return model, report

    # round 1: random selection at budget b1
    round1_ids = [select_instances(item.labels, ScribbleBudget(b1), seed=seed + i)
                  for i, item in enumerate(items)]
    round1 = [scribbles_for_instances(item.labels, ids) for item, ids in zip(items, round1_ids)]
    model1, report1 = run_round(round1, tag="iter1")

    # round 2: add budget b2, entropy-ranked on the round-1 model, warm-started
    merged = []
    for i, item in enumerate(items):
        normalized = normalize(item.image, norm)
        _, entropy = mc_ensemble(model1, normalized, passes=8, seed=seed + i)
        extra = select_instances(item.labels, ScribbleBudget(b2, policy="entropy"),
                                 entropy_map=entropy, exclude_ids=round1_ids[i])
        merged.append(scribbles_for_instances(item.labels, sorted(round1_ids[i] + list(extra))))
    _, report2 = run_round(merged, warm=model1, tag="iter2")

    # one-shot baseline at the combined budget
    oneshot = [simulate_scribbles(item.labels, ScribbleBudget(b1 + b2), seed=seed + i)
               for i, item in enumerate(items)]
    _, report3 = run_round(oneshot, tag="one_shot")

    rows = {
        "iter1": {"budget": b1, **report1.as_dict()},
        "iter2": {"budget": b1 + b2, "guided": True, **report2.as_dict()},
        "one_shot": {"budget": b1 + b2, "guided": False, **report3.as_dict()},
    }
    with open(os.path.join(args.out, "active.json"), "w", encoding="ascii") as fh:
        json.dump(rows, fh, indent=1)
    return EXIT_OK


def cmd_serve(args):
    import uvicorn

    from .service import create_app

    app = create_app(args.root)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="scribbleseg",
                     description="Weakly-supervised cell segmentation from scribbles")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=None)
    for flag, typ in [("--images", int), ("--size", int), ("--channels", int),
                      ("--cells-min", int), ("--cells-max", int),
                      ("--radius-min", float), ("--radius-max", float),
                      ("--fg-mean", float), ("--bg-mean", float),
                      ("--fg-pop-delta", float), ("--bg-pop-delta", float),
                      ("--jitter", float), ("--noise-sigma", float), ("--budget", float)]:
        p.add_argument(flag, dest=flag[2:].replace("-", "_"), type=typ)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a scribbled dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="probability, entropy, and instance maps")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, default=None)
    for flag, typ in [("--tile", int), ("--margin", int), ("--passes", int),
                      ("--threshold", float), ("--min-size", int)]:
        p.add_argument(flag, dest=flag[2:].replace("-", "_"), type=typ)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="instance metrics for predicted vs ground-truth labels")
    p.add_argument("--pred", required=True, help="comma-separated label rasters")
    p.add_argument("--gt", required=True, help="comma-separated label rasters")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="reconstruction-only / scribble-only / joint comparison")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", dest="eval_data", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("active", help="two-round uncertainty-guided annotation vs one-shot")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", dest="eval_data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--budget1", required=True, type=float)
    p.add_argument("--budget2", required=True, type=float)
    _add_train_flags(p)
    p.set_defaults(func=cmd_active)

    p = sub.add_parser("serve", help="run the annotation HTTP service")
    p.add_argument("--root", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    try:
        return args.func(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

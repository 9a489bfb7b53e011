"""Command-line entry point: ``emae <subcommand> [flags]``.

Exit codes: 0 success, 1 failed check, 2 usage or configuration error,
3 numeric abort, 4 I/O or file-format error.
"""
from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import data, evaluation, gradcheck, masking, train
from .errors import FormatError, IncompatibleCheckpoint, InvalidConfiguration, InvalidPair, NumericAbort, ShapeError

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4


def _bool(text):
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


# flag dest -> TrainConfig key, for flags that override config-file values
_TRAIN_FLAGS = {
    "dataset": "dataset",
    "mode": "loss_mode",
    "strategy": "mask_strategy",
    "k": "k_parts",
    "times": "strategy_times",
    "ratio": "strategy_ratio",
    "epochs": "epochs",
    "warmup_epochs": "warmup_epochs",
    "batch_size": "batch_size",
    "lr": "base_lr",
    "weight_decay": "weight_decay",
    "seed": "seed",
    "normalize_target": "normalize_target",
    "deterministic": "deterministic",
    "max_steps": "max_steps",
    "checkpoint_interval": "checkpoint_interval",
    "grad_clip": "grad_clip",
    "whole_weight": "whole_weight",
    "consistency_weight": "consistency_weight",
}


def _train_config(args, keys=_TRAIN_FLAGS):
    overrides = {}
    for dest, key in keys.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[key] = value
    if args.config:
        return train.TrainConfig.from_file(args.config, **overrides)
    return train.TrainConfig.from_mapping(overrides)


def _add_config(p):
    p.add_argument("--config", help="key = value config file; explicit flags override its keys")


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_data(args):
    spec = data.SynthSpec(
        n_images=args.n_images, image_size=args.image_size, channels=args.channels,
        n_classes=args.classes, seed=args.seed, kind=args.kind,
    )
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    h = data.generate(spec, out)
    print(f"wrote {out}: {h.count} images {h.height}x{h.width}x{h.channels}, "
          f"{h.n_classes} classes, {h.file_size} bytes")
    return EXIT_OK


def cmd_pretrain(args):
    cfg = _train_config(args)
    run_dir = train.run_dir_for(cfg, args.out_root)
    if run_dir.exists() and not args.overwrite and any(run_dir.iterdir()):
        raise InvalidConfiguration(f"run directory {run_dir} already exists; pass --overwrite to replace it")

    def log(rec):
        if not args.quiet and (rec.step == 1 or rec.step % args.log_every == 0):
            print(f"step {rec.step:6d} epoch {rec.epoch:3d} lr {rec.lr:.3e} "
                  f"whole {rec.l_whole:.4f} consistency {rec.l_consistency:.4f} total {rec.l_total:.4f}")

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = train.train(cfg, run_dir=run_dir, log=log)
    print(f"run directory: {run_dir}")
    print(f"checkpoint: {res.checkpoint_path}")
    return EXIT_OK


def cmd_probe(args):
    cfg = _train_config(args, {}) if args.config else None
    res = evaluation.linear_probe(
        args.checkpoint, data.load(args.train), data.load(args.test),
        epochs=args.epochs, lr=args.lr, seed=args.seed, cfg=cfg,
    )
    print(json.dumps({"accuracy": res.accuracy, "train_accuracy": res.train_accuracy,
                      "final_loss": res.losses[-1] if res.losses else None}, sort_keys=True))
    return EXIT_OK


def cmd_eval_consistency(args):
    cfg = _train_config(args, {}) if args.config else None
    rep = evaluation.measure_consistency(
        args.checkpoint, data.load(args.dataset), k_parts=args.k, n_images=args.n_images,
        seed=args.seed, n_draws=args.draws, cfg=cfg,
    )
    print(rep.to_json())
    return EXIT_OK


def cmd_reconstruct(args):
    cfg = _train_config(args, {}) if args.config else None
    ds = data.load(args.dataset)
    if not 0 <= args.index < len(ds):
        raise InvalidConfiguration(f"--index {args.index} out of range for {len(ds)} images")
    normalize = args.normalize_target
    if normalize is None:
        normalize = cfg.normalize_target if cfg else True
    out = evaluation.reconstruct(
        args.checkpoint, ds.pixels[args.index], k_parts=args.k, seed=args.seed,
        out_dir=args.out_dir, normalize_target=normalize, cfg=cfg,
    )
    for p in out["paths"]:
        print(p)
    return EXIT_OK


def cmd_mask_demo(args):
    n, k = args.n_patches, args.k
    kind = masking.parse_strategy(args.strategy, k, args.times, args.ratio)
    if isinstance(kind, masking.Parallel):
        part = masking.generate_partition(n, k, args.seed)
        print(f"parallel strategy, N={n}, K={k}, seed={args.seed}")
        print("part owning each patch:")
        print(masking.render_grid(part))
        ratio = masking.mask_ratio_exact(k)
        print(f"mask ratio per part: {ratio} = {float(ratio):.4f}")
        print(f"visible per part: {part.part_size}, masked per part: {n - part.part_size}")
        ii, jj = masking.pair_indices(k)
        for i, j in zip(ii, jj):
            ov = masking.overlap(part, int(i), int(j))
            print(f"overlap({i},{j}) = {ov.count}")
        if k > 2:
            print(f"overlap ratio: {masking.overlap_ratio(k)}")
        else:
            print("overlap ratio: 0 (K=2 parts share no masked position)")
        draws = [v for v, _ in masking.generate_ablation_masks(kind, n, args.seed)]
    else:
        draws = [v for v, _ in masking.generate_ablation_masks(kind, n, args.seed)]
        print(f"{masking.strategy_name(kind)} strategy, N={n}, {len(draws)} draw(s), seed={args.seed}")
        for d, vis in enumerate(draws):
            print(f"draw {d}: {len(vis)} visible, mask ratio {1 - len(vis) / n:.4f}")
    cov, counts = masking.coverage_stats(draws, n)
    side = int(round(n ** 0.5))
    width = side if side * side == n else n
    print("visits per patch this iteration:")
    for r in range(0, n, width):
        print(" ".join(str(c) for c in counts[r:r + width]))
    print(f"coverage this iteration: {cov:.4f}")
    if args.trials > 0:
        covs = [
            masking.coverage_stats([v for v, _ in masking.generate_ablation_masks(kind, n, args.seed, t)], n)[0]
            for t in range(args.trials)
        ]
        print(f"mean coverage over {args.trials} seeds: {np.mean(covs):.4f}")
    return EXIT_OK


def cmd_grad_check(args):
    if args.tol <= 0:
        raise InvalidConfiguration(f"--tol must be > 0, got {args.tol}")
    if args.scope == "op":
        results = gradcheck.run_op_suite(tol=args.tol, draws=args.draws, seed=args.seed)
    elif args.scope == "loss":
        results = gradcheck.run_loss_suite(tol=args.tol, draws=args.draws, seed=args.seed)
    else:
        results = gradcheck.run_model_suite(tol=args.tol, draws=args.draws, seed=args.seed)
    print(gradcheck.format_report(results))
    failed = [r.name for r in results if not r.passed]
    worst = max(r.max_rel_error for r in results)
    print(f"{len(results) - len(failed)}/{len(results)} passed, worst relative error {worst:.3e} (tol {args.tol:g})")
    return EXIT_FAIL if failed else EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def build_parser():
    parser = argparse.ArgumentParser(prog="emae", description="Parallel-mask masked autoencoder toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-data", help="write a synthetic labelled dataset (EMAEDS1)")
    p.add_argument("--out", required=True, help="output file")
    p.add_argument("--n-images", type=int, default=512)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kind", choices=data.KINDS, default="shapes")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pretrain a model; writes a run directory named by config hash")
    _add_config(p)
    p.add_argument("--dataset", help="EMAEDS1 file (overrides config key 'dataset')")
    p.add_argument("--mode", choices=["full", "pixel-only", "consistency-only"])
    p.add_argument("--strategy", choices=["parallel", "pure-random", "complementary", "single-random", "baseline"])
    p.add_argument("--k", type=int, help="number of parts K")
    p.add_argument("--times", type=int, help="draws for pure-random")
    p.add_argument("--ratio", type=float, help="mask ratio for ablation strategies")
    p.add_argument("--epochs", type=int)
    p.add_argument("--warmup-epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="base learning rate")
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--normalize-target", type=_bool, metavar="true|false")
    p.add_argument("--deterministic", type=_bool, metavar="true|false")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--checkpoint-interval", type=int, help="steps between checkpoints (0: final only)")
    p.add_argument("--grad-clip", type=float)
    p.add_argument("--whole-weight", type=float)
    p.add_argument("--consistency-weight", type=float)
    p.add_argument("--out-root", default="runs", help="parent directory for run directories")
    p.add_argument("--overwrite", action="store_true", help="reuse an existing run directory")
    p.add_argument("--log-every", type=int, default=10)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="linear probe on frozen mean-pooled encoder features")
    _add_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train", required=True, help="labelled training set")
    p.add_argument("--test", required=True, help="labelled test set")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("eval-consistency", help="cross-part prediction consistency as JSON")
    _add_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--n-images", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--draws", type=int, default=2, help="independent partitions for the across-seed number")
    p.set_defaults(func=cmd_eval_consistency)

    p = sub.add_parser("reconstruct", help="write per-part reconstructions of one image as P6 files")
    _add_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--normalize-target", type=_bool, metavar="true|false",
                   help="model was trained on per-patch normalised targets (default: from config, else true)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("mask-demo", help="show a partition, its ratios, overlaps and coverage")
    p.add_argument("--n-patches", type=int, default=196)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--strategy", default="parallel",
                   choices=["parallel", "pure-random", "complementary", "single-random", "baseline"])
    p.add_argument("--times", type=int, default=4)
    p.add_argument("--ratio", type=float)
    p.add_argument("--trials", type=int, default=1000, help="seeds for the Monte-Carlo coverage mean (0: skip)")
    p.set_defaults(func=cmd_mask_demo)

    p = sub.add_parser("grad-check", help="finite-difference gradient checks")
    p.add_argument("--scope", choices=["op", "model", "loss"], default="op")
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--draws", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "command", None) == "grad-check" and args.tol is None:
        args.tol = 1e-5 if args.scope == "op" else 1e-3
    try:
        return args.func(args)
    except (InvalidConfiguration, InvalidPair, ShapeError, IncompatibleCheckpoint) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

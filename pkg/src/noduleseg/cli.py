"""Command-line pipeline driver.

Subcommands compose the two-stage pipeline through documented file contracts
only (no hidden state):

    synth-data        write a synthetic dataset (images/, gt_masks/,
                      annotations.csv, split.csv)
    gen-prompts       annotations -> three box prompts per image (prompts.csv)
    gen-pseudolabels  prompts + segmenter backend -> per-image bundle PNGs
    train             bundles -> f1.ckpt/f2.ckpt + loss.csv
    eval              checkpoints + gt -> eval.csv + summary.txt
    sweep-lambda      train+eval across the lambda grid -> sweep.csv + plot
    ablate            single-model baselines vs cross-teaching -> ablate.csv

Every run directory gets a manifest.json recording the resolved arguments,
seed, and package version -- enough to re-run the command identically.
Exit codes: 0 ok, 2 validation/config error, 3 missing artifact, 4 numerical
failure.
"""

import argparse
import csv
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__, dataio, geometry, metrics, pseudolabel, segmenter, synth, trainer
from .errors import (ConfigError, MissingArtifactError, NoduleSegError,
                     NumericalError, ParseError, ValidationError)

LAMBDA_GRID = (0.1, 0.3, 0.5, 1.0)
SWEEP_HEADER = ["lambda_mode", "lambda", "dsc_mean", "dsc_std", "hd95_mean", "hd95_std"]


def _utcnow():
    return datetime.now(timezone.utc).isoformat()


def prepare_out_dir(path, force):
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not force:
        raise ValidationError(
            f"output directory {path} is not empty; pass --force to overwrite"
        )
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(out_dir, command, args, outputs, started):
    manifest = {
        "command": command,
        "args": {k: (str(v) if isinstance(v, Path) else v)
                 for k, v in args.items() if k != "func"},
        "seed": args.get("seed"),
        "version": __version__,
        "started": started,
        "finished": _utcnow(),
        "outputs": [str(p) for p in outputs],
    }
    with open(Path(out_dir) / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_synth_data(ns):
    started = _utcnow()
    out = prepare_out_dir(ns.out, ns.force)
    cfg = synth.SynthConfig(count=ns.count, image_size=ns.size, r_min=ns.r_min,
                            r_max=ns.r_max, perturb_amp=ns.perturb_amp,
                            speckle=ns.speckle, contrast=ns.contrast, seed=ns.seed)
    ids = synth.generate_dataset(cfg, out)
    write_manifest(out, "synth-data", vars(ns),
                   [out / "annotations.csv", out / "split.csv"], started)
    print(f"wrote {len(ids)} scenes to {out}")
    return 0


def cmd_gen_prompts(ns):
    started = _utcnow()
    index = dataio.load_dataset(ns.data)
    out = prepare_out_dir(ns.out or Path(ns.data) / "prompts", ns.force)
    prompts = {}
    flagged = 0
    for e in index.entries:
        if not e.annotation.crossing:
            flagged += 1
        prompts[e.image_id] = geometry.generate_prompts(
            e.annotation, samples_per_arc=ns.samples_per_arc)
    csv_path = out / "prompts.csv"
    geometry.write_prompts(csv_path, prompts)
    write_manifest(out, "gen-prompts", vars(ns), [csv_path], started)
    if flagged:
        print(f"note: {flagged} annotations had non-crossing diameters "
              f"(centroid fallback used)", file=sys.stderr)
    print(f"wrote prompts for {len(prompts)} images to {csv_path}")
    return 0


def cmd_gen_pseudolabels(ns):
    started = _utcnow()
    index = dataio.load_dataset(ns.data)
    prompts_path = ns.prompts or Path(ns.data) / "prompts" / "prompts.csv"
    prompts = geometry.read_prompts(prompts_path)
    out = prepare_out_dir(ns.out or Path(ns.data) / "bundles", ns.force)

    gt_lookup = None
    if ns.segmenter in ("oracle", "noisy-oracle"):
        gt_lookup = segmenter.gt_lookup_from_dataset(index)
    seg = segmenter.make_segmenter(ns.segmenter, gt_lookup=gt_lookup,
                                   seed=ns.segmenter_seed, radius=ns.noise_radius,
                                   pred_dir=ns.preds)
    bundles = []
    for e in index.entries:
        if e.image_id not in prompts:
            raise MissingArtifactError(
                f"no prompts for image {e.image_id!r} in {prompts_path} "
                f"(re-run gen-prompts)"
            )
        image = dataio.load_image(e.image_path, e.image_id)
        bundle = pseudolabel.build_bundle(image, prompts[e.image_id], seg)
        pseudolabel.save_bundle(bundle, out)
        bundles.append(bundle)
    manifest_csv = out / "bundles_manifest.csv"
    pseudolabel.write_manifest(manifest_csv, bundles)
    write_manifest(out, "gen-pseudolabels", vars(ns), [manifest_csv], started)
    print(f"wrote {len(bundles)} pseudo-label bundles to {out}")
    return 0


def _config_from_args(ns):
    overrides = {
        "seed": ns.seed,
        "lambda_value": ns.lambda_value,
        "lambda_mode": ns.lambda_mode,
        "max_iters": ns.iters,
        "image_size": ns.image_size,
        "batch_size": ns.batch_size,
        "depth": ns.depth,
        "base_channels": ns.base_channels,
        "eval_interval": ns.eval_interval,
        "val_fraction": ns.val_fraction,
    }
    return trainer.load_config(ns.config, overrides)


def _load_train_data(ns, cfg):
    bundles = ns.bundles or Path(ns.data) / "bundles"
    return trainer.load_training_arrays(ns.data, bundles, cfg.image_size, "train")


def cmd_train(ns):
    started = _utcnow()
    cfg = _config_from_args(ns)
    out = prepare_out_dir(ns.out, ns.force or ns.resume)
    data = _load_train_data(ns, cfg)
    outcome = trainer.train(data, cfg, out, resume=ns.resume)
    write_manifest(out, "train", vars(ns),
                   [outcome.loss_csv, *outcome.checkpoints.values()], started)
    best = "n/a" if outcome.best_val_dsc is None else f"{outcome.best_val_dsc:.2f}"
    print(f"trained {outcome.steps} steps; best val DSC {best}; artifacts in {out}")
    return 0


def cmd_eval(ns):
    started = _utcnow()
    out = prepare_out_dir(ns.out, ns.force)
    image_size = ns.image_size
    if image_size is None:
        cfg_path = Path(ns.ckpt) / "config.txt"
        if not cfg_path.is_file():
            raise ConfigError(
                f"--image-size not given and {cfg_path} not found"
            )
        image_size = trainer.load_config(cfg_path).image_size
    index = dataio.load_dataset(ns.data)
    split = dataio.load_split(ns.data)
    entries = [e for e in index.entries if split.get(e.image_id) == ns.split]
    if not entries:
        raise ValidationError(f"no images with split={ns.split!r} in {ns.data}")
    results, summary = metrics.evaluate(ns.ckpt, entries, mode=ns.mode,
                                        image_size=image_size, out_dir=out)
    write_manifest(out, "eval", vars(ns),
                   [out / "eval.csv", out / "summary.txt"], started)
    print(f"{ns.mode} on {summary.n} {ns.split} images: "
          f"DSC {summary.dsc_mean:.2f}+-{summary.dsc_std:.2f}, "
          f"HD95 {summary.hd95_mean:.2f}+-{summary.hd95_std:.2f}")
    if summary.skipped_missing_gt:
        print(f"warning: skipped {summary.skipped_missing_gt} images without gt",
              file=sys.stderr)
    return 0


def _train_eval_once(data_root, bundles_dir, cfg, run_dir, test_entries, mode="ensemble"):
    data = trainer.load_training_arrays(data_root, bundles_dir, cfg.image_size, "train")
    trainer.train(data, cfg, run_dir)
    _, summary = metrics.evaluate(run_dir, test_entries, mode=mode,
                                  image_size=cfg.image_size, out_dir=run_dir)
    return summary


def _test_entries(data_root):
    index = dataio.load_dataset(data_root)
    split = dataio.load_split(data_root)
    entries = [e for e in index.entries if split.get(e.image_id) == "test"]
    if not entries:
        raise ValidationError(f"no test-split images in {data_root}")
    return entries


def _sweep_plot(rows, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = [r["label"] for r in rows]
    xs = range(len(rows))
    fig, ax1 = plt.subplots(figsize=(6.4, 4.0))
    ax1.errorbar(xs, [r["dsc_mean"] for r in rows],
                 yerr=[r["dsc_std"] for r in rows],
                 marker="o", capsize=3, color="tab:blue", label="DSC")
    ax1.set_xticks(list(xs), labels)
    ax1.set_xlabel("lambda")
    ax1.set_ylabel("DSC (%)", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(xs, [r["hd95_mean"] for r in rows],
             marker="s", color="tab:red", label="HD95")
    ax2.set_ylabel("HD95 (px)", color="tab:red")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": "noduleseg"})
    plt.close(fig)


def cmd_sweep_lambda(ns):
    started = _utcnow()
    args_snapshot = dict(vars(ns))
    out = prepare_out_dir(ns.out, ns.force)
    bundles_dir = ns.bundles or Path(ns.data) / "bundles"
    test_entries = _test_entries(ns.data)

    grid = [("constant", lam) for lam in LAMBDA_GRID] + [("gaussian_warmup", 0.1)]
    rows = []
    for mode, lam in grid:
        ns.lambda_value, ns.lambda_mode = lam, mode
        cfg = _config_from_args(ns)
        tag = "warmup" if mode == "gaussian_warmup" else f"{lam:g}"
        run_dir = out / f"run_{tag}"
        summary = _train_eval_once(ns.data, bundles_dir, cfg, run_dir, test_entries)
        rows.append({"lambda_mode": mode, "lambda": lam, "label": tag,
                     "dsc_mean": summary.dsc_mean, "dsc_std": summary.dsc_std,
                     "hd95_mean": summary.hd95_mean, "hd95_std": summary.hd95_std})
        print(f"lambda={tag}: DSC {summary.dsc_mean:.2f}+-{summary.dsc_std:.2f}")

    csv_path = out / "sweep.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow([r["lambda_mode"], repr(r["lambda"]),
                        repr(r["dsc_mean"]), repr(r["dsc_std"]),
                        repr(r["hd95_mean"]), repr(r["hd95_std"])])
    plot_path = out / "sweep.png"
    _sweep_plot(rows, plot_path)
    write_manifest(out, "sweep-lambda", args_snapshot, [csv_path, plot_path], started)
    print(f"sweep finished: {csv_path}")
    return 0


def cmd_ablate(ns):
    started = _utcnow()
    out = prepare_out_dir(ns.out, ns.force)
    bundles_dir = ns.bundles or Path(ns.data) / "bundles"
    test_entries = _test_entries(ns.data)
    cfg = _config_from_args(ns)
    data = trainer.load_training_arrays(ns.data, bundles_dir, cfg.image_size, "train")

    rows = []
    for variant, target in (("f_single_yint", "y_int"), ("f_single_yuni", "y_uni")):
        run_dir = out / variant
        trainer.train_single_baseline(data, cfg, run_dir, target=target)
        _, summary = metrics.evaluate(run_dir, test_entries, mode="ensemble",
                                      image_size=cfg.image_size, out_dir=run_dir)
        rows.append((variant, summary))
        print(f"{variant}: DSC {summary.dsc_mean:.2f}+-{summary.dsc_std:.2f}")
    run_dir = out / "cross_teaching"
    trainer.train(data, cfg, run_dir)
    _, summary = metrics.evaluate(run_dir, test_entries, mode="ensemble",
                                  image_size=cfg.image_size, out_dir=run_dir)
    rows.append(("cross_teaching", summary))
    print(f"cross_teaching: DSC {summary.dsc_mean:.2f}+-{summary.dsc_std:.2f}")

    csv_path = out / "ablate.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "dsc_mean", "dsc_std", "hd95_mean", "hd95_std"])
        for variant, s in rows:
            w.writerow([variant, repr(s.dsc_mean), repr(s.dsc_std),
                        repr(s.hd95_mean), repr(s.hd95_std)])
    write_manifest(out, "ablate", vars(ns), [csv_path], started)
    print(f"ablation finished: {csv_path}")
    return 0


def _add_train_flags(p):
    p.add_argument("--config", default=None, help="flat key=value config file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--bundles", default=None,
                   help="pseudo-label bundle directory (default: <data>/bundles)")
    p.add_argument("--out", required=True, help="output run directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lambda", dest="lambda_value", type=float, default=None,
                   help="cross-teaching weight (default 0.1)")
    p.add_argument("--lambda-mode", choices=trainer.LAMBDA_MODES, default=None)
    p.add_argument("--iters", type=int, default=None, help="training iterations")
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--depth", type=int, default=None, help="down/upsampling stages")
    p.add_argument("--base-channels", type=int, default=None)
    p.add_argument("--eval-interval", type=int, default=None)
    p.add_argument("--val-fraction", type=float, default=None)
    p.add_argument("--force", action="store_true",
                   help="allow writing into a non-empty output directory")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="noduleseg",
        description="Weakly-supervised nodule segmentation pipeline",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic phantom dataset")
    p.add_argument("--count", type=int, required=True, help="number of scenes")
    p.add_argument("--size", type=int, default=128, help="image side length")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="dataset output directory")
    p.add_argument("--r-min", type=float, default=10.0)
    p.add_argument("--r-max", type=float, default=24.0)
    p.add_argument("--perturb-amp", type=float, default=0.15)
    p.add_argument("--speckle", type=float, default=0.18)
    p.add_argument("--contrast", type=float, default=0.5)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("gen-prompts", help="derive the three box prompts per image")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", default=None,
                   help="output directory (default: <data>/prompts)")
    p.add_argument("--samples-per-arc", type=int, default=256)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_prompts)

    p = sub.add_parser("gen-pseudolabels",
                       help="run the promptable segmenter and select pseudo-labels")
    p.add_argument("--data", required=True)
    p.add_argument("--prompts", default=None,
                   help="prompts.csv path (default: <data>/prompts/prompts.csv)")
    p.add_argument("--out", default=None,
                   help="bundle output directory (default: <data>/bundles)")
    p.add_argument("--segmenter", choices=("oracle", "noisy-oracle", "recorded"),
                   default="noisy-oracle")
    p.add_argument("--noise-radius", type=int, default=2,
                   help="disk radius for the noisy-oracle perturbation")
    p.add_argument("--segmenter-seed", type=int, default=0)
    p.add_argument("--preds", default=None,
                   help="recorded predictions directory (<id>__b<k>.png)")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_pseudolabels)

    p = sub.add_parser("train", help="train the dual cross-teaching networks")
    _add_train_flags(p)
    p.add_argument("--resume", action="store_true",
                   help="continue from the run's *_last.ckpt files")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate checkpoints against gt masks")
    p.add_argument("--ckpt", required=True, help="directory with f1.ckpt/f2.ckpt")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("f1", "f2", "ensemble"), default="ensemble")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--image-size", type=int, default=None,
                   help="inference size (default: from <ckpt>/config.txt)")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-lambda",
                       help="train+eval across the lambda grid and plot")
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep_lambda)

    p = sub.add_parser("ablate",
                       help="single-model baselines vs full cross-teaching")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        return ns.func(ns)
    except (ValidationError, ParseError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except NoduleSegError as exc:  # base-class fallback
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

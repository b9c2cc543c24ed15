"""``scdr`` command line: gen-data, train, eval, heatmap, sweep, soundness.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(missing or malformed dataset, checkpoint or file), 3 numeric error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import config as config_io
from .capture import export_heatmap
from .data import generate, load_dataset, save_dataset
from .errors import CheckpointError, ConfigError, DataError, NumericError, ScdrError
from .experiment import (LOSS_COLUMNS, fit, loss_csv, prepare_test, prepare_train, run_soundness, run_sweep,
                         sweep_csv)
from .model import EpochLog, build_model, evaluate, predict_batch

log = logging.getLogger("scdr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CONFIG_NAME = "config.ini"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_config(args) -> config_io.RunConfig:
    cfg = config_io.load(args.config) if args.config else config_io.RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.set("train", "seed", args.seed)
    return cfg.validate()


def _config_for_checkpoint(args, ckpt_path: Path) -> config_io.RunConfig:
    if args.config:
        return config_io.load(args.config)
    beside = ckpt_path.parent / CONFIG_NAME
    if not beside.is_file():
        raise ConfigError(f"no --config given and no {CONFIG_NAME} next to {ckpt_path}")
    return config_io.load(beside)


def _load_model(cfg, path: Path):
    m = cfg["model"]
    model = build_model(cfg.embedding(), cfg.get("train", "seed"), mu=m["mu"], margin=m["margin"])
    ck = ckpt_io.read(path)
    ckpt_io.restore(model, ck, expected_hash=cfg.hash())
    return model, ck


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# commands -------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    if args.seed is not None:
        cfg.set("data", "seed", args.seed)
    spec = cfg.spec()
    spec.validate()
    out = _out_dir(args.out)
    splits = {"train": generate(spec, cfg.get("data", "train_per_class"), "train"),
              "test": generate(spec, cfg.get("data", "test_per_class"), "test")}
    path = save_dataset(out, spec, splits)
    cfg.save(out / CONFIG_NAME)
    print(f"wrote {sum(len(d) for d in splits.values())} samples to {out} ({path.name})")
    return EXIT_OK


def _read_loss_rows(path: Path, before: int) -> list[EpochLog]:
    if not path.is_file():
        return []
    with path.open(newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if int(r["epoch"]) < before]
    return [EpochLog(int(r["epoch"]), *(float(r[c]) for c in LOSS_COLUMNS[1:])) for r in rows]


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.epochs is not None:
        cfg.set("train", "epochs", args.epochs)
        cfg.validate()
    out = _out_dir(args.out)
    seed = cfg.get("train", "seed")
    pool = load_dataset(args.data, "train")
    train_ds = prepare_train(cfg, pool, seed)
    cfg.save(out / CONFIG_NAME)
    chash = cfg.hash()

    m = cfg["model"]
    model = build_model(cfg.embedding(), seed, mu=m["mu"], margin=m["margin"])
    start = 0
    if args.resume:
        ck = ckpt_io.read(args.resume)
        ckpt_io.restore(model, ck, expected_hash=chash)
        start = ck.epoch
    rows = _read_loss_rows(out / "loss.csv", start) if start else []
    if len(rows) != start:
        raise DataError(f"resuming at epoch {start} needs the earlier loss rows in {out / 'loss.csv'}")

    save_every = cfg.get("train", "save_every")

    def on_epoch_end(epoch, row):
        rows.append(row)
        (out / "loss.csv").write_text(loss_csv(rows))
        if (epoch + 1) % save_every == 0:
            ckpt_io.save(out / f"epoch_{epoch + 1:04d}.ckpt", model, chash, epoch + 1)

    fit(cfg, train_ds, seed, model=model, start_epoch=start, on_epoch_end=on_epoch_end)
    (out / "loss.csv").write_text(loss_csv(rows))
    final = ckpt_io.save(out / "final.ckpt", model, chash, cfg.get("train", "epochs"))
    if rows and not args.no_plot:
        from .plotting import plot_losses
        plot_losses(rows, out / "loss.png")

    try:
        test = prepare_test(cfg, load_dataset(args.data, "test"))
    except DataError:
        test = None
    if test is not None:
        metrics = evaluate(model, test.images, test.labels, test.glyph_masks, mode=cfg.get("eval", "mode"))
        print(f"final test accuracy ({metrics.mode}): {metrics.average:.4f}")
    print(f"checkpoint: {final}")
    return EXIT_OK


def cmd_eval(args) -> int:
    path = Path(args.checkpoint)
    cfg = _config_for_checkpoint(args, path)
    if args.mode:
        cfg.set("eval", "mode", args.mode)
        cfg.validate()
    model, ck = _load_model(cfg, path)
    test = prepare_test(cfg, load_dataset(args.data, args.split))
    metrics = evaluate(model, test.images, test.labels, test.glyph_masks, mode=cfg.get("eval", "mode"))
    report = metrics.to_dict()
    report.update({"config_hash": ck.config_hash, "epoch": ck.epoch, "split": args.split})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _dump_json(report, out)
    print(f"accuracy ({metrics.mode}): {metrics.average:.4f} -> {out}")
    return EXIT_OK


def cmd_heatmap(args) -> int:
    if args.n < 0:
        raise UsageError("--n must be non-negative")
    paths = [Path(p) for p in args.checkpoint]
    names = args.name or ([p.parent.name or p.stem for p in paths] if len(paths) > 1 else ["model"])
    if len(names) != len(paths) or len(set(names)) != len(names):
        raise UsageError("need one distinct --name per --checkpoint")
    out = _out_dir(args.out)
    test = load_dataset(args.data, args.split)
    n = min(args.n, len(test))
    entries = [{"index": i, "label": int(test.labels[i]), "models": {}} for i in range(n)]
    grids = {}
    for name, path in zip(names, paths):
        cfg = _config_for_checkpoint(args, path)
        model, _ = _load_model(cfg, path)
        sub = out / name if len(paths) > 1 else out
        sub.mkdir(parents=True, exist_ok=True)
        preds = predict_batch(model, prepare_test(cfg, test).images[:n]) if n else []
        grids[name] = [p.cam.normalized for p in preds]
        for i, p in enumerate(preds):
            heat, masked = export_heatmap(p.cam, sub / f"sample_{i:04d}.png")
            entries[i]["models"][name] = {
                "predicted": p.label,
                "heatmap": str(heat.relative_to(out)),
                "masked": str(masked.relative_to(out)),
                "mask_fraction": float(np.mean(p.cam.mask)),
            }
    _dump_json({"split": args.split, "models": names, "samples": entries}, out / "index.json")
    if n and not args.no_plot:
        from .plotting import plot_heatmap_grid
        plot_heatmap_grid(test.images[:n], grids, out / "comparison.png")
    print(f"wrote {n} heatmap sample(s) for {len(paths)} model(s) to {out}")
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    seeds = args.seeds or [cfg.get("train", "seed")]
    for k in args.k:
        if k < 1 or k > cfg.get("data", "train_per_class"):
            raise ConfigError(f"k={k} outside 1..train_per_class={cfg.get('data', 'train_per_class')}")
    out = _out_dir(args.out)
    cfg.save(out / CONFIG_NAME)

    def on_cell(k, seed, res):
        print(f"k={k} seed={seed} accuracy {res.metrics.average:.4f}", flush=True)

    rows = run_sweep(cfg, args.k, seeds, on_cell=on_cell)
    (out / "sweep.csv").write_text(sweep_csv(rows, seeds))
    if not args.no_plot:
        from .plotting import plot_sweep
        plot_sweep(rows, seeds, out / "sweep.png")
    for r in rows:
        print(f"k={r.k:>3}  mean accuracy {r.mean:.4f}")
    return EXIT_OK


def cmd_soundness(args) -> int:
    cfg = _load_config(args)
    seeds = args.seeds or [0, 1, 2]
    out = _out_dir(args.out)
    cfg.save(out / CONFIG_NAME)
    report = run_soundness(cfg, seeds)
    _dump_json(report.to_dict(), out / "soundness.json")
    if not args.no_plot:
        from .plotting import plot_soundness
        plot_soundness(report, out / "soundness.png")
    d = report.to_dict()
    print(f"two-branch {d['scdr_mean']:.4f}  whole-only {d['baseline_mean']:.4f}  gap {d['gap']:+.4f}")
    print(f"mask IoU {d['mask_iou_mean']:.4f}  centred-disk IoU {d['disk_iou_mean']:.4f}")
    return EXIT_OK


# parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="scdr", description="Two-branch limited-data recognition experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_help):
        sp.add_argument("--config", help="run configuration (INI); defaults are used if omitted")
        sp.add_argument("--seed", type=int, help="override the run seed")
        sp.add_argument("--out", required=True, help=out_help)
        sp.add_argument("--no-plot", action="store_true", help="skip matplotlib figures")

    g = sub.add_parser("gen-data", help="generate the synthetic dataset")
    common(g, "dataset directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train on a generated dataset")
    common(t, "run directory (checkpoints, loss.csv, config.ini)")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--epochs", type=int, help="override [train] epochs")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--config", help="defaults to config.ini next to the checkpoint")
    e.add_argument("--split", default="test")
    e.add_argument("--mode", choices=("fused", "whole", "local"))
    e.add_argument("--out", required=True, help="metrics JSON path")
    e.set_defaults(func=cmd_eval)

    h = sub.add_parser("heatmap", help="export activation heatmaps for the first n samples")
    h.add_argument("--checkpoint", required=True, action="append", help="repeat to compare models")
    h.add_argument("--name", action="append", help="subdirectory name per checkpoint")
    h.add_argument("--data", required=True)
    h.add_argument("--config", help="defaults to config.ini next to each checkpoint")
    h.add_argument("--split", default="test")
    h.add_argument("--n", type=int, default=8)
    h.add_argument("--out", required=True)
    h.add_argument("--no-plot", action="store_true")
    h.set_defaults(func=cmd_heatmap)

    s = sub.add_parser("sweep", help="accuracy against k over several seeds")
    common(s, "output directory for sweep.csv")
    s.add_argument("--k", type=_int_list, default=[2, 5, 20, 40], help="comma-separated k values")
    s.add_argument("--seeds", type=_int_list, help="comma-separated run seeds")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("soundness", help="two-branch model against the whole-branch baseline")
    common(c, "output directory")
    c.add_argument("--seeds", type=_int_list, help="comma-separated run seeds (default 0,1,2)")
    c.set_defaults(func=cmd_soundness)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"scdr: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"scdr: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, OSError) as exc:
        print(f"scdr: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"scdr: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ScdrError as exc:
        print(f"scdr: error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``medusa gen-data | pretrain | train | eval | visualize``."""
import argparse
import csv
import logging
import os
import sys

import numpy as np

from . import netpbm
from .checkpoint import CheckpointError, IncompatibleCheckpointError, load_checkpoint, load_into, save_checkpoint
from .config import KEYS, RunConfig
from .data import DatasetError, generate_dataset, load_dataset
from .metrics import evaluate
from .model import build_variant
from .tensor import ConfigError, MedusaError, ShapeError, Tensor, no_grad
from .training import alternating_train, pretrain_global

log = logging.getLogger("medusa")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_IO, EXIT_INCOMPATIBLE = 0, 1, 2, 3, 4

METRICS_HEADER = ["epoch", "phase", "loss", "val_accuracy"]


# ---------------------------------------------------------------------------
# helpers


def _config(args):
    overrides = {k: getattr(args, k, None) for k in KEYS}
    return RunConfig.load(args.config, overrides)


def _manifest(cfg, args):
    path = getattr(args, "data", None) or cfg.data
    if not path:
        raise ConfigError("no dataset given (set data = ... in the config or pass --data)")
    return path


class MetricsLog:
    """Append-as-you-go CSV so an interrupted run keeps its history."""

    def __init__(self, path):
        self.path = path
        with open(path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(METRICS_HEADER)

    def append(self, row):
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(
                [row["epoch"], row["phase"], "%.6f" % row["loss"], "%.6f" % row["val_accuracy"]])


def _checkpoint_dir(out):
    path = os.path.join(out, "checkpoints")
    os.makedirs(path, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    cfg = _config(args)
    path = generate_dataset(cfg.synthetic(), args.out)
    cfg.write_resolved(args.out, "gen-data")
    print("wrote %s" % path)


def cmd_pretrain(args):
    cfg = _config(args)
    manifest = _manifest(cfg, args)
    train = load_dataset(manifest, "train", cfg.np_dtype)
    val = load_dataset(manifest, "val", cfg.np_dtype)
    if not train.has_masks:
        raise ConfigError("pretraining needs masks in %s" % manifest)
    bundle = build_variant("global", cfg.backbone(), cfg.global_config(), cfg.seed, dtype=cfg.np_dtype)
    cfg.write_resolved(args.out, "pretrain")
    ckdir = _checkpoint_dir(args.out)
    mlog = MetricsLog(os.path.join(args.out, "metrics.csv"))

    def on_epoch(epoch, module, row, opt):
        mlog.append({"epoch": epoch, "phase": row["phase"], "loss": row["loss"], "val_accuracy": row["val_pixel_accuracy"]})
        save_checkpoint(bundle, os.path.join(ckdir, "epoch_%03d.ckpt" % epoch), opt, {"epoch": epoch})

    pretrain_global(bundle.global_module, train, val, cfg.train(), on_epoch)
    final = os.path.join(args.out, "final.ckpt")
    save_checkpoint(bundle, final, meta={"epoch": cfg.pretrain_epochs})
    print("wrote %s" % final)


def cmd_train(args):
    cfg = _config(args)
    manifest = _manifest(cfg, args)
    train = load_dataset(manifest, "train", cfg.np_dtype)
    val = load_dataset(manifest, "val", cfg.np_dtype)
    bundle = build_variant(args.variant, cfg.backbone(), cfg.global_config(), cfg.seed, cfg.se_reduction, cfg.np_dtype)
    if args.init_global:
        if bundle.global_module is None:
            raise ConfigError("--init-global needs --variant medusa")
        load_into(bundle, args.init_global, prefix="global.")
        log.info("global module initialised from %s", args.init_global)
    command = "train --variant %s" % args.variant
    if args.init_global:
        command += " --init-global %s" % args.init_global
    cfg.write_resolved(args.out, command)
    ckdir = _checkpoint_dir(args.out)
    mlog = MetricsLog(os.path.join(args.out, "metrics.csv"))

    def on_epoch(epoch, b, row, opt):
        mlog.append(row)
        save_checkpoint(b, os.path.join(ckdir, "epoch_%03d.ckpt" % epoch), opt, {"epoch": epoch})

    alternating_train(bundle, train, val, cfg.train(), on_epoch)
    final = os.path.join(args.out, "final.ckpt")
    save_checkpoint(bundle, final, meta={"epoch": cfg.epochs})
    print("wrote %s" % final)


def _load_for_data(checkpoint, manifest, split):
    bundle, _ = load_checkpoint(checkpoint)
    if bundle.backbone is None:
        raise IncompatibleCheckpointError("checkpoint %s holds a %r bundle without a classifier" % (checkpoint, bundle.kind))
    ds = load_dataset(manifest, split, bundle.dtype)
    expected = tuple(bundle.backbone_config.input_shape)
    if ds.images.shape[1:] != expected:
        raise IncompatibleCheckpointError("data samples are %s but the checkpoint expects %s" % (ds.images.shape[1:], expected))
    return bundle, ds


def cmd_eval(args):
    bundle, ds = _load_for_data(args.checkpoint, args.data, args.split)
    if args.seg_ablation and not ds.has_masks:
        raise ConfigError("--seg-ablation %s needs masks in the manifest" % args.seg_ablation)
    report = evaluate(bundle, ds, not args.disable_attention, args.seg_ablation)
    text = report.to_text()
    sys.stdout.write(text)
    out = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out, exist_ok=True)
    stem = "report_%s" % args.split
    if args.disable_attention:
        stem += "_noattn"
    if args.seg_ablation:
        stem += "_" + args.seg_ablation
    for suffix, body in ((".txt", text), (".csv", report.summary_csv()), ("_predictions.csv", report.predictions_csv())):
        with open(os.path.join(out, stem + suffix), "w", newline="") as fh:
            fh.write(body)


def colormap(att):
    """Linear blue (0) to red (1); returns ... x 3 floats in [0, 1]."""
    att = np.clip(att, 0.0, 1.0)
    return np.stack([att, np.zeros_like(att), 1.0 - att], axis=-1)


def overlay(gray, att, alpha=0.5):
    """Blend a grayscale image with the colour-mapped attention map."""
    g = np.clip(np.asarray(gray, dtype=np.float64), 0.0, 1.0)
    return (1.0 - alpha) * g[..., None] + alpha * colormap(np.asarray(att, dtype=np.float64))


def minmax(m):
    lo, hi = float(m.min()), float(m.max())
    if hi - lo <= 0:
        return np.zeros_like(m, dtype=np.float64)
    return (m - lo) / (hi - lo)


def tile(maps, pad=1):
    """Arrange C x h x w maps (each min-max normalised) on a near-square grid."""
    c, h, w = maps.shape
    cols = int(np.ceil(np.sqrt(c)))
    rows = int(np.ceil(c / cols))
    grid = np.zeros((rows * (h + pad) - pad, cols * (w + pad) - pad))
    for k in range(c):
        r, q = divmod(k, cols)
        grid[r * (h + pad):r * (h + pad) + h, q * (w + pad):q * (w + pad) + w] = minmax(maps[k].astype(np.float64))
    return grid


def cmd_visualize(args):
    bundle, ds = _load_for_data(args.checkpoint, args.data, args.split)
    if bundle.kind != "medusa":
        raise IncompatibleCheckpointError("visualize needs a medusa checkpoint, got %r" % bundle.kind)
    n_stages = bundle.backbone_config.stage_count
    if args.stage is not None and not 1 <= args.stage <= n_stages:
        raise ConfigError("--stage must lie in 1..%d" % n_stages)
    if args.limit:
        ds = ds.subset(np.arange(min(args.limit, len(ds))))
    os.makedirs(args.out, exist_ok=True)
    written = 0
    with no_grad():
        for images, _, _, idx in ds.batches(32):
            _, rec = bundle.forward(Tensor._wrap(images.astype(bundle.dtype)), True)
            sigma = rec.sigma_a_g.data[:, 0]
            for k, i in enumerate(idx):
                stem = os.path.join(args.out, "%s_%05d" % (args.split, i))
                netpbm.write(stem + "_attention.ppm", netpbm.quantize(overlay(images[k, 0], sigma[k])))
                written += 1
                if args.stage is not None:
                    j = args.stage - 1
                    netpbm.write(stem + "_stage%d_abar.pgm" % args.stage, netpbm.quantize(tile(rec.a_bar[j].data[k])))
                    netpbm.write(stem + "_stage%d_fbar.pgm" % args.stage, netpbm.quantize(tile(rec.f_bar[j].data[k])))
    print("wrote %d overlays to %s" % (written, args.out))


# ---------------------------------------------------------------------------
# parser


def _add_config_flags(p):
    p.add_argument("--config", help="key = value config file")
    g = p.add_argument_group("config overrides (any config key)")
    for k, spec in KEYS.items():
        if k == "data":
            continue
        g.add_argument("--" + k, "--" + k.replace("_", "-"), dest=k, metavar="V", help=spec.help)


def build_parser():
    parser = argparse.ArgumentParser(prog="medusa", description="Multi-scale encoder-decoder self-attention classifier.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic dataset")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="segmentation-pretrain the global module")
    _add_config_flags(p)
    p.add_argument("--data", help="manifest.csv (overrides the data key)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train a classifier variant")
    _add_config_flags(p)
    p.add_argument("--variant", choices=("plain", "se", "medusa"), required=True)
    p.add_argument("--data", help="manifest.csv (overrides the data key)")
    p.add_argument("--init-global", metavar="P", help="pretrain checkpoint for the global module")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--disable-attention", action="store_true")
    p.add_argument("--seg-ablation", choices=("type1", "type2"))
    p.add_argument("--out", help="report directory (default: next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("visualize", help="write attention overlays and stage grids")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--stage", type=int)
    p.add_argument("--limit", type=int, default=0, help="only the first N samples (0 = all)")
    p.set_defaults(func=cmd_visualize)
    return parser


def _exit_code(exc):
    if isinstance(exc, (IncompatibleCheckpointError, ShapeError)):
        return EXIT_INCOMPATIBLE
    if isinstance(exc, (CheckpointError, DatasetError, netpbm.NetpbmError, OSError)):
        return EXIT_IO
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    return EXIT_ERROR


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (MedusaError, OSError) as exc:
        print("medusa %s: error: %s" % (args.command, exc), file=sys.stderr)
        return _exit_code(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

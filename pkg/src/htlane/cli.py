"""Command-line entry point: ``htlane {gen,train,eval,predict,hough}``.

Logs (including the resolved configuration) go to stderr. Stdout carries
exactly one summary line in CSV form. Exit codes: 0 ok, 2 usage or
contract error, 3 malformed input file.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import losses, model, pgm, synth, trainer
from .errors import ConfigError, DataError, FormatError
from .hough import build_vote_table, ht_forward, preset
from .metrics import predicted_mask

log = logging.getLogger("htlane")

EXIT_OK, EXIT_USAGE, EXIT_FORMAT = 0, 2, 3

# overlay colors for lanes 1..K
PALETTE = np.array([[255, 64, 64], [64, 255, 64], [64, 128, 255], [255, 220, 0]], np.uint8)


class UsageError(Exception):
    pass


def _csv_line(values):
    buf = io.StringIO()
    csv.writer(buf, lineterminator="").writerow(values)
    return buf.getvalue()


def _summary(values):
    print(_csv_line(values), flush=True)


def _resolve(args):
    overrides = dict(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        overrides["mode"] = args.mode
    cfg = config_mod.load(args.cfg, overrides)
    for line in cfg.lines():
        log.info("config %s", line)
    return cfg


def _key_value(text):
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return key.strip(), value.strip()


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen(args):
    if args.n <= 0:
        raise UsageError("empty dataset: --n must be >= 1")
    cfg = _resolve(args)
    ds = synth.generate_dataset(args.n, cfg.train.seed, cfg.scene)
    synth.save_dataset(ds, args.out)
    log.info("wrote %d samples to %s", len(ds), args.out)
    _summary(["gen", len(ds), ds.k, args.out])


def _apply_split(ds, frac, seed):
    lab, _ = synth.split_dataset(len(ds), frac, seed)
    lab = set(lab)
    for i, s in enumerate(ds.samples):
        s.labeled = i in lab
    return len(lab)


def cmd_train(args):
    cfg = _resolve(args).train
    if not 0 < args.labeled_frac <= 1:
        raise UsageError(f"--labeled-frac must lie in (0, 1], got {args.labeled_frac}")
    ds = synth.load_dataset(args.data)
    if len(ds) == 0:
        raise UsageError("empty dataset")
    n_lab = _apply_split(ds, args.labeled_frac, cfg.seed)
    if cfg.mode != "supervised" and n_lab == len(ds):
        raise UsageError(f"{cfg.mode} mode requires unlabeled data")
    log.info("split: %d labeled, %d unlabeled", n_lab, len(ds) - n_lab)
    result = trainer.train(ds, cfg)
    out = Path(args.out)
    trainer.save_checkpoint(out, result.checkpoint)
    csv_path = out.with_suffix(".csv")
    trainer.write_metrics_csv(csv_path, result.history)
    log.info("checkpoint %s, metrics %s", out, csv_path)
    last = [r for r in result.history if r["split"] == "labeled"][-1]
    _summary([_fmt(last[k]) for k in trainer.CSV_HEADER])


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _load_ckpt(path):
    ckpt = trainer.load_checkpoint(path)
    cfg = ckpt.config or trainer.TrainConfig()
    for k, v in cfg.flat().items():
        log.info("config %s=%s", k, v)
    return ckpt, cfg


def cmd_eval(args):
    ckpt, cfg = _load_ckpt(args.ckpt)
    ds = synth.load_dataset(args.data)
    metrics, mean_losses = trainer.evaluate(ckpt, ds, cfg)
    row = trainer.eval_row(ckpt.epoch, metrics, mean_losses)
    csv_path = Path(args.csv) if args.csv else Path(args.ckpt).with_suffix(".eval.csv")
    trainer.write_metrics_csv(csv_path, [row])
    log.info("lane_f1 %.4f pixel_f1 %.4f exist_acc %.4f -> %s",
             metrics.lane_f1, metrics.pixel_f1, metrics.exist_acc, csv_path)
    _summary([_fmt(row[k]) for k in trainer.CSV_HEADER])


def _image_tensor(path):
    img = pgm.read_pgm(path)
    if img.shape != model.IMAGE_SHAPE[1:]:
        raise FormatError(f"{path}: expected {model.IMAGE_SHAPE[2]}x{model.IMAGE_SHAPE[1]}, "
                          f"got {img.shape[1]}x{img.shape[0]}")
    return img, (img.astype(np.float32) / np.float32(255))[None]


def overlay(gray_u8, mask):
    """Paint lane pixels of ``mask`` over the grayscale image."""
    rgb = np.repeat(gray_u8[..., None], 3, axis=2)
    for c in range(1, len(PALETTE) + 1):
        rgb[mask == c] = PALETTE[c - 1]
    return rgb


def cmd_predict(args):
    ckpt, cfg = _load_ckpt(args.ckpt)
    table = trainer.make_table(cfg)
    gray, image = _image_tensor(args.image)
    out, _ = model.forward(ckpt.params, image, table)
    mask = predicted_mask(out.seg_probs, out.exist_p)
    prefix = args.out_prefix
    Path(prefix).parent.mkdir(parents=True, exist_ok=True)
    pgm.write_pgm(f"{prefix}_mask.pgm", mask)
    pgm.write_ppm(f"{prefix}_overlay.ppm", overlay(gray, mask))
    maps = ht_forward(table, losses.pool_to_hough(out.seg_probs))
    for c in range(maps.shape[0]):
        pgm.write_pgm(f"{prefix}_hough{c + 1}.pgm", pgm.normalize_u8(maps[c]))
    lanes = [c + 1 for c in range(model.K) if np.any(mask == c + 1)]
    log.info("exist_p %s, lanes drawn %s", np.round(out.exist_p, 3).tolist(), lanes)
    _summary(["predict", len(lanes)] + [repr(float(p)) for p in out.exist_p])


def resample_to(img, h, w):
    """Block-average when the size divides evenly, else nearest sampling."""
    H, W = img.shape
    x = img.astype(np.float64)
    if H % h == 0 and W % w == 0:
        return x.reshape(h, H // h, w, W // w).mean(axis=(1, 3))
    rows = ((np.arange(h) + 0.5) * H / h).astype(int)
    cols = ((np.arange(w) + 0.5) * W / w).astype(int)
    return x[np.ix_(rows, cols)]


def cmd_hough(args):
    hc = preset(args.preset)
    img = pgm.read_pgm(args.image).astype(np.float64) / 255
    acc = ht_forward(build_vote_table(hc), resample_to(img, hc.H, hc.W))
    peak = float(acc.max())
    scaled = pgm.to_u8(acc / peak) if peak > 0 else np.zeros(acc.shape, np.uint8)
    out = args.out or str(Path(args.image).with_suffix("")) + f"_hough_{args.preset}.pgm"
    pgm.write_pgm(out, scaled)
    log.info("accumulator %dx%d, peak %.4f -> %s", hc.n_theta, hc.n_rho, peak, out)
    _summary(["hough", args.preset, repr(peak), out])


# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="htlane", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--cfg", help="key=value config file")
        sp.add_argument("--set", action="append", type=_key_value, metavar="KEY=VALUE",
                        help="config override (repeatable; wins over --cfg)")

    sp = sub.add_parser("gen", help="write a synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    common(sp)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="train and write a checkpoint plus metrics CSV")
    sp.add_argument("--data", required=True)
    sp.add_argument("--mode", choices=trainer.MODES)
    sp.add_argument("--labeled-frac", type=float, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="score a checkpoint on a dataset")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--csv", help="output CSV (default: next to the checkpoint)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("predict", help="mask, overlay and Hough maps for one image")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--out-prefix", required=True)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("hough", help="Hough accumulator of an image as PGM")
    sp.add_argument("--image", required=True)
    sp.add_argument("--preset", choices=("desk", "paper"), default="desk")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_hough)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        args.func(args)
    except FormatError as e:
        log.error("%s", e)
        return EXIT_FORMAT
    except (UsageError, ConfigError, DataError, FileNotFoundError) as e:
        log.error("%s", e)
        return EXIT_USAGE
    except OSError as e:
        log.error("%s: %s", getattr(e, "filename", None) or "I/O error", e.strerror or e)
        return EXIT_USAGE
    except trainer.TrainingError as e:
        log.error("%s", e)
        return 1
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

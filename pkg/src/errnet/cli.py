"""``errnet`` command line.

Every command writes the resolved configuration to ``<out>/config.yaml`` before
doing any work, holds ``<out>/.lock`` while running, and leaves ``<out>/FAILED``
(with the error message) if it does not finish.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import traceback
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import imaging
from .backbone import BackboneInitError, get_backbone
from .config import ConfigError, build, dump_config, load_config
from .imaging import DimensionError, ImageFormatError, ManifestEntry
from .losses import NumericError
from .training import CheckpointError

log = logging.getLogger("errnet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(RuntimeError):
    pass


class LockError(RuntimeError):
    pass


@contextmanager
def run_directory(out: Path, cfg: dict, command: str):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"{out} is in use by another run (remove {lock} if stale)")
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    failed = out / "FAILED"
    if failed.exists():
        failed.unlink()
    try:
        dump_config({**cfg, "command": {"name": command}}, out / "config.yaml")
        yield out
    except BaseException as exc:
        failed.write_text(f"{type(exc).__name__}: {exc}\n{traceback.format_exc()}")
        raise
    finally:
        lock.unlink(missing_ok=True)


def _backbone(cfg):
    return get_backbone(cfg["backbone"]["weights"])


def _images_in(path: Path) -> list[Path]:
    exts = {".png", ".jpg", ".jpeg"}
    return sorted(p for p in path.iterdir() if p.suffix.lower() in exts)


# ---------------------------------------------------------------------------
# commands

def cmd_synthesize(args, cfg, out: Path):
    params = build(cfg)["synthesis"]
    rng = np.random.default_rng(args.seed)
    if args.procedural:
        src = params.crop_size + 32
        pool_t = [imaging.procedural_scene(src, seed=args.seed * 7 + 2 * i) for i in range(args.procedural)]
        pool_r = [imaging.procedural_scene(src, seed=args.seed * 7 + 2 * i + 1) for i in range(args.procedural)]
        count = args.count or args.procedural
    else:
        if not (args.transmission_dir and args.reflection_dir):
            raise ConfigError("give --procedural N or both --transmission-dir and --reflection-dir")
        pool_t = [imaging.load_image(p) for p in _images_in(Path(args.transmission_dir))]
        pool_r = [imaging.load_image(p) for p in _images_in(Path(args.reflection_dir))]
        if not pool_t or not pool_r:
            raise DataError("source directories contain no images")
        count = args.count or len(pool_t)
    entries = []
    for i in range(count):
        t = pool_t[i % len(pool_t)]
        r = pool_r[int(rng.integers(len(pool_r)))]
        sample = imaging.synthesize_pair(t, r, params, seed=args.seed * 100003 + i)
        aligned = rng.random() >= args.misaligned_fraction
        target = sample.transmission if aligned else imaging.random_misalign(
            sample.transmission, args.max_shift, seed=args.seed * 31 + i)
        name = f"{i:05d}.png"
        imaging.save_image(out / "input" / name, sample.input)
        imaging.save_image(out / "target" / name, target)
        imaging.save_image(out / "reflection" / name, sample.reflection)
        entries.append(ManifestEntry(out / "input" / name, out / "target" / name, aligned))
    imaging.write_manifest(out / "manifest.txt", entries)
    print(f"wrote {count} pairs to {out / 'manifest.txt'}")


def _load_data(manifest):
    try:
        samples = imaging.load_samples(manifest)
    except (FileNotFoundError, OSError, ImageFormatError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    if not samples:
        raise DataError(f"{manifest} lists no samples")
    return samples


def cmd_train(args, cfg, out: Path):
    from .training import Trainer

    typed = build(cfg)
    samples = _load_data(args.manifest)
    tr = Trainer(typed["train"], typed["generator"], _backbone(cfg), typed["loss"], typed["discriminator"], out)
    tr.fit(samples)
    tr.save(out / "final.pt")
    tr.write_history(out / "losses.csv")
    print(f"trained {tr.step} steps; checkpoint {out / 'final.pt'}")


def cmd_finetune(args, cfg, out: Path):
    from .training import Trainer, load_checkpoint

    typed = build(cfg)
    samples = _load_data(args.manifest)
    ckpt = load_checkpoint(args.checkpoint)
    tr = Trainer.from_checkpoint(ckpt, _backbone(cfg), weights=typed["loss"], run_dir=out)
    if args.epochs > 0:
        tr.config = replace(tr.config, epochs=max(tr.config.epochs, tr.epoch + args.epochs), unaligned_loss="inv")
        tr.fit(samples, epochs=args.epochs, force_unaligned=True)
    tr.save(out / "final.pt")
    tr.write_history(out / "losses.csv")
    print(f"finetuned to step {tr.step}; checkpoint {out / 'final.pt'}")


def cmd_infer(args, cfg, out: Path):
    from .training import load_generator, predictor

    model = load_generator(args.checkpoint, backbone=_backbone(cfg))
    predict = predictor(model)
    written = []
    for i, path in enumerate(args.inputs):
        img = imaging.load_image(path)
        imaging.check_image(img, imaging.MIN_NETWORK_SIZE)
        dest = out / f"{i:04d}_{Path(path).stem}.png"
        imaging.save_image(dest, predict(img))
        written.append(dest.name)
    (out / "outputs.txt").write_text("\n".join(written) + "\n")
    print(f"wrote {len(written)} images to {out}")


def cmd_evaluate(args, cfg, out: Path):
    from .metrics import evaluate_dataset, format_table

    ckpt = None if args.checkpoint == "identity" else args.checkpoint
    backbone = _backbone(cfg) if ckpt else None
    model_rep, input_rep = evaluate_dataset(ckpt, args.manifest, args.dataset, backbone=backbone)
    model_rep.to_csv(out / "metrics.csv")
    input_rep.to_csv(out / "input_metrics.csv")
    table = format_table([input_rep, model_rep])
    (out / "table.txt").write_text(table + "\n")
    if model_rep.skipped:
        (out / "skipped.txt").write_text("\n".join(model_rep.skipped) + "\n")
    print(table)


def cmd_ablate(args, cfg, out: Path):
    from .metrics import format_table
    from .training import ablation_table, run_ablation

    typed = build(cfg)
    train_set = _load_data(args.manifest)
    eval_set = _load_data(args.eval_manifest)
    results = run_ablation(args.arms, typed["train"], train_set, eval_set, _backbone(cfg),
                           typed["generator"], typed["loss"], dataset=args.dataset, run_dir=out)
    with open(out / "ablation.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["arm", "psnr", "ssim", "ncc", "lmse", "error"])
        for r in results:
            agg = r.report.aggregate if r.report else None
            wr.writerow([r.arm, *(f"{agg[m]:.6f}" if agg else "" for m in ("psnr", "ssim", "ncc", "lmse")),
                         r.error or ""])
    table = ablation_table(results)
    (out / "table.txt").write_text(table + "\n")
    print(table)
    if all(r.error for r in results):
        raise DataError("every ablation arm failed")


def cmd_sensitivity(args, cfg, out: Path):
    from .experiments import sensitivity_corpus, sensitivity_sweep

    if args.corpus:
        images = [imaging.load_image(p) for p in _images_in(Path(args.corpus))]
        if images:
            s = min(min(i.shape[:2]) for i in images)
            images = [i[:s, :s] for i in images]
    else:
        images = sensitivity_corpus(args.procedural, args.size, args.seed)
    if len(images) < 10:
        raise ConfigError(f"sensitivity study needs at least 10 images, got {len(images)}")
    backbone = _backbone(cfg)
    tables = sensitivity_sweep(backbone, images, args.shifts)
    layers = next(iter(tables.values())).layers
    with open(out / "sensitivity.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["shift", "pixel", *layers])
        for shift, t in tables.items():
            wr.writerow([shift, f"{np.nanmean(t.pixel_ratios):.6f}", *(f"{t.mean[l]:.6f}" for l in layers)])
    with open(out / "sensitivity_pairs.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["shift", "pair", "pixel", *layers])
        for shift, t in tables.items():
            for i in range(t.ratios.shape[0]):
                wr.writerow([shift, i, f"{t.pixel_ratios[i]:.6f}", *(f"{v:.6f}" for v in t.ratios[i])])
    head = ["shift", "pixel", *layers]
    lines = ["  ".join(f"{h:>8}" for h in head)]
    for shift, t in tables.items():
        lines.append("  ".join([f"{shift:>8}", f"{np.nanmean(t.pixel_ratios):8.4f}",
                                *(f"{t.mean[l]:8.4f}" for l in layers)]))
    note = "" if backbone.pretrained else "\n(untrained surrogate backbone: ratios carry no ImageNet semantics)"
    table = "\n".join(lines) + note
    (out / "table.txt").write_text(table + "\n")
    print(table)


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="errnet", description=__doc__.split("\n\n")[0])
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config value (repeatable); wins over the file")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synthesize", help="composite synthetic reflection pairs and write a manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--transmission-dir")
    s.add_argument("--reflection-dir")
    s.add_argument("--procedural", type=int, default=0, metavar="N", help="use N procedural source scenes")
    s.add_argument("--count", type=int, default=0)
    s.add_argument("--misaligned-fraction", type=float, default=0.0)
    s.add_argument("--max-shift", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("train", help="train a generator from a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("finetune-unaligned", help="continue a checkpoint with the alignment-invariant loss")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--epochs", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("infer", help="remove reflections from images")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("inputs", nargs="+")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("evaluate", help="PSNR/SSIM/NCC/LMSE of a checkpoint (or 'identity') on a manifest")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--dataset", default="")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", help="train and compare architecture arms")
    s.add_argument("--manifest", required=True)
    s.add_argument("--eval-manifest", required=True)
    s.add_argument("--arms", nargs="+", default=["BaseNet", "BaseNet+CWC", "BaseNet+MSC", "ERRNet"])
    s.add_argument("--dataset", default="synthetic")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("sensitivity-study", help="feature-layer sensitivity to translation")
    s.add_argument("--corpus", help="directory of images (>= 10)")
    s.add_argument("--procedural", type=int, default=50)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--shifts", type=int, nargs="+", default=[0, 5, 10, 20])
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sensitivity)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    try:
        with run_directory(out, cfg, args.command):
            args.func(args, cfg, out)
    except (ConfigError, BackboneInitError, LockError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, DimensionError, ImageFormatError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: synth, train, eval, detect, enhance, gradcheck."""
from __future__ import annotations

import argparse
import sys
import textwrap
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write, load_checkpoint
from .config import Config, defaults_table, parse_config
from .datasynth import CLASS_NAMES, load_dataset, synth_dataset
from .errors import CheckpointError, DataError, DegenerateBatchError, DPNetError, NumericError, ShapeError
from .evaluation import build_report, evaluate
from .imageio import quantize, read_ppm, write_ppm
from .metrics import REPORT_COLUMNS
from .model import DPNet

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("synth", "train", "eval", "detect", "enhance", "gradcheck")
DETECT_LINE = "class_id score x_min y_min x_max y_max"
BOX_COLORS = np.array([[255, 64, 64], [64, 255, 64], [255, 255, 64], [255, 64, 255], [64, 255, 255]], dtype=np.uint8)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def config_help() -> str:
    rows = defaults_table()
    width = max(len(k) for k, _, _ in rows)
    lines = ["configuration keys (default, meaning):"]
    for key, default, doc in rows:
        lines.append(f"  {key.ljust(width)}  {default!s:<18} {doc}")
    return "\n".join(lines)


def report_help() -> str:
    return textwrap.dedent(
        f"""\
        eval report: tab-separated with header '{chr(9).join(REPORT_COLUMNS)}'.
          kind=image   name=<split/id>  metric in psnr_degraded, psnr_enhanced, ssim_enhanced, uicm, uism, uiconm, uiqm
          kind=class   name=<class>     metric=ap
          kind=summary name=all         metric in map, l_det, psnr_degraded, psnr_enhanced, ssim_enhanced,
                                        psnr_gain_fraction, l_enh, uiqm_enhanced
        detect output: one line per box, '{DETECT_LINE}'."""
    )


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    p = _Parser(
        prog="dpnet",
        description="Joint underwater detection and enhancement with a shared module trained bilevel.",
        epilog=config_help() + "\n\n" + report_help(),
        formatter_class=fmt,
    )
    p.add_argument("--config", type=Path, help="key = value file overlaid on the defaults")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one key after the config file (repeatable)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate the synthetic dataset tree")
    s.add_argument("--root", type=Path, help="output directory (default: data.root)")
    s.add_argument("--overwrite", action="store_true", help="replace an existing non-empty directory")

    s = sub.add_parser("train", help="bilevel training with per-epoch checkpoints and a TSV log")
    s.add_argument("--data", type=Path, help="dataset root (default: data.root)")
    s.add_argument("--out", type=Path, required=True, help="run directory for checkpoint.dpnt and log.tsv")
    s.add_argument("--resume", action="store_true", help="continue from the run directory's checkpoint")

    s = sub.add_parser("eval", help="metrics report over the test split", epilog=report_help(), formatter_class=fmt)
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--data", type=Path, help="dataset root (default: data.root)")
    s.add_argument("--out", type=Path, help="report path (default: stdout)")
    s.add_argument("--no-uiqm", action="store_true", help="skip the per-image UIQM terms")

    s = sub.add_parser("detect", help="boxes for one PPM image", epilog=report_help(), formatter_class=fmt)
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--image", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True, help=f"text file of '{DETECT_LINE}' lines")
    s.add_argument("--annotated", type=Path, help="also write the image with box outlines (PPM)")

    s = sub.add_parser("enhance", help="enhanced PPM for one PPM image")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--image", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("gradcheck", help="finite-difference check of every op and the joint loss")
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--per-tensor", type=int, default=24, help="sampled elements per joint-loss tensor (0 = all)")
    s.add_argument("--seed", type=int, default=0)
    return p


# ----------------------------------------------------------------- helpers
def _dtype(cfg: Config):
    return np.float32 if cfg.trainer.dtype == "float32" else np.float64


def load_model(cfg: Config, path: Path, tasks: str = "both", echo=print) -> DPNet:
    """Build the configured architecture and fill it from ``path``; entries the tasks do not need are skipped."""
    from .trainer import restore

    ckpt = load_checkpoint(path)
    model = DPNet.build(cfg.model, cfg.trainer.seed, _dtype(cfg), tasks)
    skipped = restore(model.params, ckpt)
    params = [n for n in skipped if not n.startswith(("adam.", "state.", "bn."))]
    if params:
        prefixes = sorted({n.split(".", 1)[0] for n in params})
        echo(f"skipped {len(params)} checkpoint entries not needed for this command ({', '.join(prefixes)})")
    return model


def _read_image(path: Path) -> np.ndarray:
    img = read_ppm(path)
    if img.shape[1] % 8 or img.shape[2] % 8:
        raise DataError(f"{path}: extent {img.shape[1]}×{img.shape[2]} must be divisible by 8")
    return img


def draw_boxes(img: np.ndarray, detections) -> np.ndarray:
    pixels = quantize(img).copy()
    h, w, _ = pixels.shape
    for d in detections:
        x0, y0, x1, y1 = (int(round(v)) for v in d.box)
        x0, x1 = np.clip([x0, x1 - 1], 0, w - 1)
        y0, y1 = np.clip([y0, y1 - 1], 0, h - 1)
        color = BOX_COLORS[d.class_id % len(BOX_COLORS)]
        pixels[y0, x0 : x1 + 1] = pixels[y1, x0 : x1 + 1] = color
        pixels[y0 : y1 + 1, x0] = pixels[y0 : y1 + 1, x1] = color
    return pixels


def format_detections(detections) -> str:
    return "".join(
        f"{d.class_id} {d.score:.6f} {d.box[0]:.2f} {d.box[1]:.2f} {d.box[2]:.2f} {d.box[3]:.2f}\n" for d in detections
    )


# ---------------------------------------------------------------- commands
def cmd_synth(cfg: Config, args) -> int:
    root = args.root or Path(cfg.data.root)
    counts = synth_dataset(cfg.data, root, overwrite=args.overwrite, num_classes=cfg.model.num_classes)
    print(f"wrote {sum(counts.values())} samples to {root} ({', '.join(f'{k} {v}' for k, v in counts.items())})")
    return EXIT_OK


def cmd_train(cfg: Config, args) -> int:
    from .trainer import train

    ds = load_dataset(args.data or cfg.data.root, cfg.model.num_classes)
    args.out.mkdir(parents=True, exist_ok=True)
    res = train(cfg, ds, args.out, resume=args.resume, echo=print)
    last = res.log[-1]
    print(f"trained {res.state.epoch} epochs; test mAP {last['test_map']:.4f}, "
          f"PSNR {last['test_psnr_enhanced']:.2f} dB; checkpoint {res.checkpoint}")
    return EXIT_OK


def cmd_eval(cfg: Config, args) -> int:
    model = load_model(cfg, args.checkpoint)
    ds = load_dataset(args.data or cfg.data.root, cfg.model.num_classes)
    if not ds.test:
        raise DataError(f"dataset {ds.root} has no test split")
    res = evaluate(model, ds.test, cfg, keep_outputs=not args.no_uiqm)
    text = build_report(res, ds.test, with_uiqm=not args.no_uiqm).to_tsv()
    if args.out:
        atomic_write(args.out, text.encode())
        print(f"mAP {res.map:.4f}  PSNR {np.mean(res.psnr_out):.2f} dB  report {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_detect(cfg: Config, args) -> int:
    model = load_model(cfg, args.checkpoint, tasks="det")
    img = _read_image(args.image)
    dets = model.infer(img[None], mode="detect").detections[0]
    atomic_write(args.out, format_detections(dets).encode())
    if args.annotated:
        write_ppm(args.annotated, draw_boxes(img, dets))
    names = [CLASS_NAMES[d.class_id] if d.class_id < len(CLASS_NAMES) else str(d.class_id) for d in dets]
    shown = ", ".join(names[:5]) + (", ..." if len(names) > 5 else "")
    print(f"{len(dets)} detections written to {args.out}" + (f" ({shown})" if names else ""))
    return EXIT_OK


def cmd_enhance(cfg: Config, args) -> int:
    model = load_model(cfg, args.checkpoint, tasks="enh")
    img = _read_image(args.image)
    out = model.infer(img[None], mode="enhance").enhanced[0]
    write_ppm(args.out, out)
    print(f"enhanced image written to {args.out}")
    return EXIT_OK


def cmd_gradcheck(cfg: Config, args) -> int:
    from .oracles import OP_CASES, check_joint_loss, check_op

    print(f"{'case':<26} {'max_rel_err':>12} {'checked':>8} {'kinks':>6}  result")
    ok = True

    def row(name, rep):
        nonlocal ok
        passed = rep.passed(args.tol)
        ok &= passed
        print(f"{name:<26} {rep.max_rel_err:>12.3e} {rep.checked:>8d} {rep.skipped_kinks:>6d}  {'pass' if passed else 'FAIL'}",
              flush=True)

    for name in OP_CASES:
        row(name, check_op(name, args.seed))
    joint = check_joint_loss(cfg, per_tensor=args.per_tensor or None, seed=args.seed)
    row("joint_loss", joint.report)
    print(f"{'all pass' if ok else 'FAILURES'} at tol {args.tol:g}")
    return EXIT_OK if ok else EXIT_NUMERIC


HANDLERS = {
    "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
    "detect": cmd_detect, "enhance": cmd_enhance, "gradcheck": cmd_gradcheck,
}


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (DataError, CheckpointError, ShapeError, DegenerateBatchError)):
        return EXIT_DATA
    return EXIT_USAGE


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = parse_config(args.config, args.overrides)
        return HANDLERS[args.command](cfg, args)
    except (DPNetError, OSError) as exc:
        code = EXIT_DATA if isinstance(exc, OSError) else exit_code(exc)
        print(f"dpnet {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())

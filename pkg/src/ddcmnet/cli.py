"""``ddcm`` command line: generate, train, predict, eval, analyze, config.

Failures print one line ``error: <category>: <detail>`` to stderr and exit
with 2 (config), 3 (io), 4 (numeric) or 5 (input: shape/value problems).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import analysis, data, plotting, tensorio
from .config import ConfigError, default_config, parse_config, preset_names, render_config
from .metrics import ConfusionMatrix, UndefinedClassWarning, accumulate, normalize, scores
from .network import CheckpointError, StructuralBackboneError

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_INPUT = 2, 3, 4, 5

# Fixed class palette for colour-mapped predictions (index = class id).
PALETTE = np.array([
    (255, 255, 255),  # surface
    (0, 0, 255),      # building
    (0, 255, 255),    # low vegetation
    (0, 255, 0),      # tree
    (255, 255, 0),    # car
    (255, 0, 0),      # clutter
    (0, 0, 0),        # unknown
], dtype=np.uint8)

log = logging.getLogger("ddcmnet")


class CliError(Exception):
    def __init__(self, category: str, detail: str, code: int):
        super().__init__(detail)
        self.category, self.code = category, code


def _seed_override() -> Optional[int]:
    raw = os.environ.get("DDCM_SEED")
    if raw is None or raw == "":
        return None
    try:
        seed = int(raw)
    except ValueError:
        raise CliError("config", f"DDCM_SEED must be an integer, got {raw!r}", EXIT_CONFIG) from None
    if seed < 0:
        raise CliError("config", "DDCM_SEED must be >= 0", EXIT_CONFIG)
    return seed


def _path(args, p) -> Optional[Path]:
    if p is None:
        return None
    p = Path(p)
    return p if args.root is None or p.is_absolute() else Path(args.root) / p


def load_config(args):
    preset = getattr(args, "preset", None) or "isprs"
    cfg_path = _path(args, getattr(args, "config", None))
    if cfg_path is not None:
        try:
            text = cfg_path.read_text(encoding="utf-8")
        except OSError as exc:
            raise CliError("io", f"cannot read config {cfg_path}: {exc}", EXIT_IO) from None
        config = parse_config(text, preset)
    else:
        config = default_config(preset)
    seed = _seed_override()
    if seed is not None:
        config = config.replace(train__seed=seed)
    return config


# -- subcommands ------------------------------------------------------------------

def cmd_generate(args) -> int:
    seed = args.seed if args.seed is not None else (_seed_override() or 0)
    spec = data.SceneSpec(size=args.size, classes=args.classes, noise=args.noise, seed=seed)
    out = _path(args, args.out)
    counts = data.generate(out, spec, args.tiles, workers=args.workers)
    freqs = counts.sum(axis=0) / counts.sum()
    print(f"wrote {args.tiles} tiles of {args.size}x{args.size} to {out}")
    print("class frequencies: " + ", ".join(f"{c}={f:.4f}" for c, f in enumerate(freqs)))
    return 0


def cmd_train(args) -> int:
    from .train import train

    config = load_config(args)
    if args.epochs is not None:
        config = config.replace(train__epochs=args.epochs)
    if config.network.backbone.structural:
        raise CliError("config", f"backbone {config['network.backbone']} is counting-only; "
                       "set network.backbone = toy to train", EXIT_CONFIG)
    out = _path(args, args.out)
    result = train(config, _path(args, args.data), out, workers=args.workers,
                   resume=_path(args, args.resume))
    if result.rows:
        plotting.loss_curve(result.rows, out / "train_loss.png")
        last = result.rows[-1]
        print(f"epoch {last['epoch']}: loss {last['loss']:.5f} val mIoU {last['val_mIoU']:.4f} "
              f"val mF1 {last['val_mF1']:.4f}")
    print(f"checkpoint {result.checkpoint}")
    return 0


def _colorize(classes: np.ndarray) -> np.ndarray:
    if classes.max(initial=0) >= len(PALETTE):
        raise CliError("input", f"palette covers {len(PALETTE)} classes", EXIT_INPUT)
    return np.ascontiguousarray(PALETTE[classes].transpose(2, 0, 1))


def cmd_predict(args) -> int:
    from .inference import plan_windows, predict_downscaled, predict_stitched
    from .network import load_checkpoint

    net, config, _, _ = load_checkpoint(_path(args, args.checkpoint))
    infer = config.infer
    tta = infer.tta if args.tta is None else args.tta
    window = args.window or infer.window
    stride = net.spec.backbone.stride
    if window % stride:
        raise CliError("config", f"window {window} must be a multiple of the network stride {stride}",
                       EXIT_CONFIG)
    out = _path(args, args.out)
    out.mkdir(parents=True, exist_ok=True)
    for image_path in [_path(args, p) for p in args.image]:
        image = (data.read_ppm(image_path) / np.float32(255.0)).astype(np.float32)
        if infer.downscale > 1:
            classes, probs = predict_downscaled(net, image, infer.downscale, tta, infer.tta_space)
        else:
            _, h, w = image.shape
            plan = plan_windows(h, w, window, infer.stride)
            log.info("%s: %d window(s)", image_path.name, len(plan.windows))
            classes, probs = predict_stitched(net, image, plan, tta, infer.tta_space)
        stem = image_path.stem
        data.write_pgm(out / f"{stem}.pgm", classes.astype(np.uint8))
        data.write_ppm(out / f"{stem}_color.ppm", _colorize(classes))
        if args.probs:
            tensorio.save(out / f"{stem}_probs.ddcm", {"probs": probs[None]})
        print(f"{image_path} -> {out / (stem + '.pgm')}")
    return 0


def cmd_eval(args) -> int:
    import warnings

    config = load_config(args) if (args.preset or args.config) else None
    classes = args.classes or (config.network.num_classes if config else 6)
    exclude = tuple(args.exclude) if args.exclude is not None else (config.exclude if config else (5,))
    pred_dir, label_dir = _path(args, args.pred), _path(args, args.labels)
    preds = sorted(pred_dir.glob("*.pgm"))
    if not preds:
        raise CliError("io", f"no .pgm predictions in {pred_dir}", EXIT_IO)
    cm = ConfusionMatrix(classes)
    for p in preds:
        label = data.read_pgm(label_dir / p.name)
        pred = data.read_pgm(p)
        accumulate(cm, pred, label, args.ignore_id)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", UndefinedClassWarning)
        s = scores(cm, exclude)
    names = list(data.CLASS_NAMES[:classes]) + [f"class{i}" for i in range(len(data.CLASS_NAMES), classes)]
    out = _path(args, args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"{len(preds)} map(s), {cm.total} pixels scored, {cm.ignored} ignored",
             f"{'class':<16}{'precision':>10}{'recall':>10}{'F1':>10}{'IoU':>10}{'support':>10}"]
    for c in range(classes):
        tag = " (excluded)" if c in exclude else ""
        lines.append(f"{names[c]:<16}{s.precision[c]:>10.4f}{s.recall[c]:>10.4f}{s.f1[c]:>10.4f}"
                     f"{s.iou[c]:>10.4f}{s.support[c]:>10d}{tag}")
    lines += [f"OA {s.oa:.4f}", f"mF1 {s.mean_f1:.4f}", f"mIoU {s.mean_iou:.4f}",
              f"means over classes {list(s.counted)}"]
    lines += [f"warning: {w.message}" for w in caught]
    report = "\n".join(lines) + "\n"
    (out / "report.txt").write_text(report)
    with open(out / "scores.csv", "w") as fh:
        fh.write("class,name,precision,recall,f1,iou,support,excluded\n")
        for c in range(classes):
            fh.write(f"{c},{names[c]},{s.precision[c]!r},{s.recall[c]!r},{s.f1[c]!r},{s.iou[c]!r},"
                     f"{s.support[c]},{str(c in exclude).lower()}\n")
    norm, _ = normalize(cm)
    plotting.confusion_figure(norm, names, out / "confusion.png")
    sys.stdout.write(report)
    return 0


def cmd_analyze(args) -> int:
    config = load_config(args)
    try:
        shape = analysis.parse_shape(args.input)
    except ValueError as exc:
        raise CliError("input", str(exc), EXIT_INPUT) from None
    conventions = analysis.CONVENTIONS if args.convention == "both" else (args.convention,)
    report = analysis.count_flops(config.network, shape)
    rf = analysis.rf_report(config.network)
    text = analysis.render_cost(report, conventions) + "\nreceptive fields\n" + analysis.render_rf(rf)
    sys.stdout.write(text)
    if args.report:
        path = _path(args, args.report)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        path.with_suffix(".csv").write_text(analysis.cost_csv(report))
        path.with_suffix(".rf.csv").write_text(analysis.rf_csv(rf))
        plotting.flops_figure(report, path.with_suffix(".png"), conventions[0])
    return 0


def cmd_config(args) -> int:
    sys.stdout.write(render_config(load_config(args), annotate=args.dump_defaults))
    return 0


# -- argument parsing ------------------------------------------------------------------

def _add_config_args(p):
    p.add_argument("--preset", help=f"base preset, optionally with +overlays ({', '.join(preset_names())}; "
                                    "overlays s2, s3, dynamic, no-ll-encoder, no-dilation)")
    p.add_argument("--config", help="config file applied on top of the preset")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddcm", description="Dense dilated convolution merging networks")
    parser.add_argument("--root", help="resolve relative paths against this directory")
    parser.add_argument("--workers", type=int, default=1, help="cap on internal parallelism")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--tiles", type=int, default=20)
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--noise", type=float, default=data.SceneSpec.noise)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a network on a generated dataset")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict class maps for PPM images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, help="override infer.window")
    p.add_argument("--probs", action="store_true", help="also write per-class probabilities")
    p.add_argument("--tta", dest="tta", action="store_true", default=None)
    p.add_argument("--no-tta", dest="tta", action="store_false")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predicted PGM maps against labels")
    _add_config_args(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int)
    p.add_argument("--exclude", type=int, nargs="*")
    p.add_argument("--ignore-id", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="parameter/FLOP/receptive-field report")
    _add_config_args(p)
    p.add_argument("--input", default="3x256x256", help="CxHxW or NxCxHxW")
    p.add_argument("--convention", choices=("mac1", "mac2", "both"), default="both")
    p.add_argument("--report", help="write text here plus .csv, .rf.csv and .png siblings")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("config", help="print a resolved config")
    _add_config_args(p)
    p.add_argument("--dump-defaults", action="store_true", help="annotate keys with sources and notes")
    p.set_defaults(func=cmd_config)
    return parser


def run_command(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .train import NumericError

    try:
        if args.workers < 1:
            raise CliError("config", "--workers must be >= 1", EXIT_CONFIG)
        from ._direct import set_threads
        set_threads(args.workers)
        return args.func(args)
    except CliError as exc:
        category, detail, code = exc.category, str(exc), exc.code
    except ConfigError as exc:
        category, detail, code = "config", str(exc), EXIT_CONFIG
    except NumericError as exc:
        category, detail, code = "numeric", str(exc), EXIT_NUMERIC
    except StructuralBackboneError as exc:
        category, detail, code = "config", str(exc), EXIT_CONFIG
    except (data.DataError, CheckpointError, tensorio.TensorFileError, OSError) as exc:
        category, detail, code = "io", str(exc), EXIT_IO
    except (ValueError, FloatingPointError) as exc:
        category, detail, code = "input", str(exc), EXIT_INPUT
    print(f"error: {category}: {' '.join(detail.split())}", file=sys.stderr)
    return code


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()

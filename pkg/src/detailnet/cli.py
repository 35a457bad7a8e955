"""``detailnet`` command line.

Exit status: 0 on success, 1 when inputs, flags or files fail validation,
2 when a run fails for another reason (I/O error, divergence).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__, runtime
from .apps import BokehParams, backproject, colorize_depth, export_ply, render_bokeh
from .checkpoint import load_checkpoint
from .config import RunConfig, parse_config, parse_config_text
from .data import (
    CameraIntrinsics,
    depth_to_mm,
    generate_synthetic,
    load_dataset,
    read_meta,
    read_netpbm,
    save_dataset,
    write_pgm16,
    write_ppm,
)
from .errors import FormatError, ShapeError
from .network import DepthNet, build_network
from .trainer import Trainer, TrainingDiverged

log = logging.getLogger("detailnet")

VERBS = ("train", "eval", "predict", "pointcloud", "bokeh", "synth", "gradcheck")


class CliError(Exception):
    """Bad command line; reported with usage and exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value run configuration file")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--deterministic", action="store_true",
                        help="single BLAS thread; repeated runs give bitwise-identical files")
    common.add_argument("--preset", choices=("toy", "full"), help="network size")

    parser = _Parser(prog="detailnet", description="Monocular depth estimation toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="verb", metavar="{" + ",".join(VERBS) + "}", parser_class=_Parser)

    p = sub.add_parser("train", parents=[common], help="train and write a checkpoint plus a loss CSV")
    p.add_argument("--data", help="dataset directory (default: config data_dir, else synthetic scenes)")
    p.add_argument("--checkpoint", help="output checkpoint path")
    p.add_argument("--loss-csv", help="loss history CSV (default: <checkpoint>.loss.csv)")
    p.add_argument("--steps", type=int, help="number of optimisation steps")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--nyu", action="store_true", help="apply the resize and centre-crop preprocessing")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a dataset")
    p.add_argument("--data", help="dataset directory (default: config eval_dir)")
    p.add_argument("--checkpoint", help="trained checkpoint")
    p.add_argument("--out", help="write key=value metrics here instead of stdout")
    p.add_argument("--csv", help="append one metrics row to this CSV")
    p.add_argument("--nyu", action="store_true", help="apply the resize and centre-crop preprocessing")

    p = sub.add_parser("predict", parents=[common], help="predict a 16-bit millimetre depth PGM")
    p.add_argument("--input", required=True, help="RGB PPM")
    p.add_argument("--checkpoint", help="trained checkpoint")
    p.add_argument("--out", required=True, help="output depth PGM")
    p.add_argument("--resize", action="store_true", help="upsample the prediction to the input size")
    p.add_argument("--colormap", help="also write a colour-mapped PPM")

    p = sub.add_parser("pointcloud", parents=[common], help="export a coloured ASCII PLY")
    _depth_source(p)
    p.add_argument("--out", required=True, help="output PLY")

    p = sub.add_parser("bokeh", parents=[common], help="render synthetic depth of field")
    _depth_source(p)
    p.add_argument("--focus", type=float, required=True, help="in-focus depth in metres")
    p.add_argument("--aperture", type=float, default=8.0, help="blur strength (default 8)")
    p.add_argument("--max-radius", type=float, default=8.0, help="largest blur radius in pixels")
    p.add_argument("--out", required=True, help="output PPM")

    p = sub.add_parser("synth", parents=[common], help="write a synthetic RGB-D dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, help="number of scenes (default: config synth_count)")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every op and block")
    p.add_argument("--instances", type=int, default=5, help="random instances per check")
    p.add_argument("--skip-network", action="store_true", help="omit the whole-network row")
    return parser


def _depth_source(p):
    p.add_argument("--input", required=True, help="RGB PPM")
    p.add_argument("--depth", help="depth PGM; predicted from --checkpoint when omitted")
    p.add_argument("--checkpoint", help="trained checkpoint used when --depth is omitted")
    p.add_argument("--meta", help="intrinsics file (default: camera keys in the config)")


# ---------------------------------------------------------------------------
# helpers


def _run_config(args) -> RunConfig:
    run = parse_config(args.config) if args.config else parse_config_text("")
    if args.preset:
        run.with_preset(args.preset)
    if args.seed is not None:
        run.train.seed = args.seed
        run.synth.seed = args.seed
    if args.deterministic:
        run.train.deterministic = True
    return run


def _load_net(run: RunConfig, checkpoint: Optional[str]) -> DepthNet:
    path = checkpoint or run.paths.get("checkpoint")
    if not path:
        raise CliError("a --checkpoint is required")
    net = build_network(run.network, run.train.seed, run.train.freeze_first_two_stages)
    load_checkpoint(path).apply_to(net.params)
    return net


def read_rgb(path) -> np.ndarray:
    raw = read_netpbm(path)
    if raw.ndim != 3:
        raise FormatError(f"{path}: expected a colour PPM (P6)")
    scale = 255.0 if raw.dtype == np.uint8 else 65535.0
    return raw.astype(np.float32) / scale


def _predict_depth(net: DepthNet, rgb: np.ndarray, resize: bool) -> np.ndarray:
    image = np.ascontiguousarray(rgb.transpose(2, 0, 1))
    return net.predict(image, resize_to_input=resize)[0].astype(np.float64)


def _depth_for(args, run: RunConfig, rgb: np.ndarray):
    """Depth at input resolution with its valid mask, read or predicted."""
    if args.depth:
        raw = read_netpbm(args.depth)
        if raw.ndim != 2:
            raise FormatError(f"{args.depth}: expected a greyscale PGM (P5)")
        if raw.shape != rgb.shape[:2]:
            raise ShapeError(f"depth {raw.shape} and image {rgb.shape[:2]} dimensions disagree")
        unit = read_meta(args.meta)["depth_unit"] if args.meta else 0.001
        return raw.astype(np.float64) * unit, raw > 0
    depth = _predict_depth(_load_net(run, args.checkpoint), rgb, resize=True)
    return depth, np.ones(depth.shape, dtype=bool)


def _intrinsics(args, run: RunConfig) -> CameraIntrinsics:
    if args.meta:
        m = read_meta(args.meta)
        return CameraIntrinsics(m["fx"], m["fy"], m["cx"], m["cy"])
    if run.camera is None:
        raise CliError("camera intrinsics needed: pass --meta or set fx, fy, cx, cy in the config")
    return run.camera


def _dataset(args, run: RunConfig, key: str):
    directory = args.data or run.paths.get(key)
    nyu = args.nyu or bool(run.paths.get("nyu_preprocess", False))
    if directory:
        return load_dataset(directory, nyu)
    if key == "eval_dir":
        raise CliError("a --data directory is required")
    log.info("no dataset given; generating %d synthetic scenes", run.synth_count)
    return generate_synthetic(run.synth, run.synth_count)


# ---------------------------------------------------------------------------
# verbs


def cmd_train(args, run: RunConfig) -> int:
    if args.steps is not None:
        if args.steps < 0:
            raise CliError("--steps must be non-negative")
        run.train.steps = args.steps
    ckpt = args.checkpoint or run.paths.get("checkpoint") or "detailnet.ckpt"
    loss_csv = args.loss_csv or f"{ckpt}.loss.csv"
    data = _dataset(args, run, "data_dir")
    net = build_network(run.network, run.train.seed, run.train.freeze_first_two_stages)

    def report(trainer, loss):
        if trainer.step_count % 50 == 0:
            log.info("step %d loss %.5f", trainer.step_count, loss)

    trainer = Trainer(net, data, run.train, run.augment, [report], ckpt, dump_path=f"{ckpt}.diverged")
    if args.resume:
        trainer.restore(args.resume)
    total = run.train.total_steps(len(data))
    trainer.run(total - trainer.step_count)
    trainer.save(ckpt)
    with open(loss_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr_dfe", "lr_dmg"])
        for i, loss in enumerate(trainer.history):
            lr = trainer.learning_rates(i)
            w.writerow([i + 1, repr(loss), repr(lr["dfe"]), repr(lr["dmg"])])
    print(f"wrote {ckpt} ({trainer.step_count} steps) and {loss_csv}")
    return 0


def cmd_eval(args, run: RunConfig) -> int:
    from .metrics import MetricsReport, evaluate_dataset

    net = _load_net(run, args.checkpoint)
    report = evaluate_dataset(_dataset(args, run, "eval_dir"), net)
    if args.out:
        Path(args.out).write_text(report.to_text())
    else:
        sys.stdout.write(report.to_text())
    if args.csv:
        new = not os.path.exists(args.csv) or os.path.getsize(args.csv) == 0
        with open(args.csv, "a") as fh:
            if new:
                fh.write(MetricsReport.csv_header() + "\n")
            fh.write(report.to_csv_row() + "\n")
    return 0


def cmd_predict(args, run: RunConfig) -> int:
    net = _load_net(run, args.checkpoint)
    depth = _predict_depth(net, read_rgb(args.input), args.resize)
    write_pgm16(args.out, depth_to_mm(depth))
    if args.colormap:
        write_ppm(args.colormap, colorize_depth(depth))
    h, w = depth.shape
    print(f"wrote {args.out} ({w}x{h}, millimetres)")
    return 0


def cmd_pointcloud(args, run: RunConfig) -> int:
    rgb = read_rgb(args.input)
    intrinsics = _intrinsics(args, run)
    depth, mask = _depth_for(args, run, rgb)
    cloud = backproject(depth, rgb, mask, intrinsics)
    export_ply(cloud, args.out)
    print(f"wrote {args.out} ({len(cloud)} points)")
    return 0


def cmd_bokeh(args, run: RunConfig) -> int:
    rgb = read_rgb(args.input)
    depth, mask = _depth_for(args, run, rgb)
    if not mask.all():
        # holes in a sensor depth map take the far limit so they blur like background
        depth = np.where(mask, depth, depth[mask].max() if mask.any() else args.focus)
    out = render_bokeh(rgb.astype(np.float64), depth, BokehParams(args.focus, args.aperture, args.max_radius))
    write_ppm(args.out, out)
    print(f"wrote {args.out}")
    return 0


def cmd_synth(args, run: RunConfig) -> int:
    count = run.synth_count if args.count is None else args.count
    if count < 1:
        raise CliError("--count must be positive")
    save_dataset(generate_synthetic(run.synth, count), args.out)
    print(f"wrote {count} scenes to {args.out}")
    return 0


def cmd_gradcheck(args, run: RunConfig) -> int:
    from .gradcheck import format_table, run_suite

    if args.instances < 1:
        raise CliError("--instances must be positive")
    rows = run_suite(args.instances, run.train.seed, not args.skip_network, run.network.preset)
    print(format_table(rows))
    failed = [r.name for r in rows if not r.passed]
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "pointcloud": cmd_pointcloud,
    "bokeh": cmd_bokeh,
    "synth": cmd_synth,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Optional[List[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        args = parser.parse_args(argv)
        if args.verb is None:
            raise CliError("detailnet: a command is required")
        run = _run_config(args)
        runtime.configure(run.train.deterministic)
        return COMMANDS[args.verb](args, run)
    except CliError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        where = f"; state dumped to {exc.dump_path}" if exc.dump_path else ""
        print(f"error: training diverged: {exc}{where}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as exc:  # validation errors subclass ValueError
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, RuntimeError, MemoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``scbct <subcommand> [--flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import runtime
from .dataio import PHANTOMS, load_volume, make_phantom, save_volume
from .geometry import ScannerGeometry, sample_view_angles
from .metrics import SSIM_MODE, psnr, ssim
from .projector import load_projections, save_projections, simulate_projections

log = logging.getLogger("scbct")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--help", action="help", help="show this message and exit")
    p.add_argument("--seed", type=int, help="seed for every random draw (default 0, or the config's seed)")
    p.add_argument("--threads", type=int, default=0, help="cap on worker threads (0 = library default)")
    p.add_argument("--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scbct", add_help=False, allow_abbrev=False,
                     description="Sparse-view cone-beam CT toolkit.")
    parser.add_argument("--help", action="help", help="show this message and exit")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, add_help=False, allow_abbrev=False)
        _common(p)
        return p

    p = add("phantom", "write a synthetic volume")
    p.add_argument("--kind", choices=PHANTOMS, required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--extent-mm", type=float, default=409.6)
    p.add_argument("--out", required=True)

    p = add("drr", "simulate projections of a volume")
    p.add_argument("--volume", required=True)
    p.add_argument("--geom", help="geometry key=value file (default: built-in geometry)")
    p.add_argument("--det-pixels", type=int, help="override detector pixel count (square)")
    p.add_argument("--views", type=int, required=True)
    p.add_argument("--equiangular", action="store_true")
    p.add_argument("--step-mm", type=float)
    p.add_argument("--out", required=True)

    p = add("train", "fit the intensity field")
    p.add_argument("--config", help="training config key=value file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument("--model", choices=("trans", "trans2"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--points", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--volume", action="append", default=[], help="ground-truth volume (repeat)")
    p.add_argument("--projections", action="append", default=[], help="projection dir (repeat, paired)")
    p.add_argument("--geom", help="geometry file (default: <first projection dir>/geom.cfg)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="loss log CSV (default: <out>.loss.csv)")
    p.add_argument("--checkpoint-dir")

    p = add("reconstruct", "evaluate a checkpoint on a voxel grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--projections", required=True)
    p.add_argument("--geom")
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--chunk", type=int, default=65536)
    p.add_argument("--out", required=True)
    p.add_argument("--slices", metavar="PREFIX", help="also write axial/coronal/sagittal PNGs")

    p = add("baseline", "classical reconstruction")
    p.add_argument("--method", choices=("fdk", "sart"), required=True)
    p.add_argument("--projections", required=True)
    p.add_argument("--geom")
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--iterations", type=int, default=50)
    p.add_argument("--relaxation", type=float, default=0.5)
    p.add_argument("--hann", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--slices", metavar="PREFIX")

    p = add("eval", "PSNR and SSIM against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--data-range", type=float, default=1.0)
    p.add_argument("--csv", help="append a result row to this CSV")

    p = add("ablate", "one-axis ablation sweep")
    p.add_argument("--axis", choices=("n_points", "k", "features"), required=True)
    p.add_argument("--values", help="comma-separated values (features use ';' inside a value, '|' between)")
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", required=True)
    return parser


def _first_unknown_flag(parser: argparse.ArgumentParser, argv) -> str | None:
    """Flag tokens the chosen subcommand does not define, checked before argparse
    so that the offending token is reported even when required flags are missing."""
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    known = {s for a in parser._actions for s in a.option_strings}
    active = known
    for tok in argv:
        if tok in sub.choices and active is known:
            active = {s for a in sub.choices[tok]._actions for s in a.option_strings}
            continue
        if tok.startswith("-") and not _is_number(tok):
            if tok.split("=", 1)[0] not in active:
                return tok
    return None


def _is_number(tok: str) -> bool:
    try:
        float(tok)
        return True
    except ValueError:
        return False


# -- helpers -----------------------------------------------------------------

def _geom_for(projection_dir, geom_path) -> ScannerGeometry:
    path = Path(geom_path) if geom_path else Path(projection_dir) / "geom.cfg"
    if not path.exists():
        raise FileNotFoundError(f"geometry file {path} not found (pass --geom)")
    return ScannerGeometry.load(path)


def _train_config(args):
    from .trainer import TrainConfig

    flat = {}
    if args.config:
        from .geometry import read_keyvalue
        flat.update(read_keyvalue(args.config))
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        flat[k.strip()] = v.strip()
    if args.seed is not None:
        flat["seed"] = str(args.seed)
    try:
        return TrainConfig.from_flat(flat)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _out(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def write_slices(volume, prefix) -> list[Path]:
    from PIL import Image

    data = np.clip(np.asarray(volume.data, dtype=np.float64), 0.0, 1.0)
    nx, ny, nz = data.shape
    views = {
        "axial": data[:, :, nz // 2].T,
        "coronal": data[:, ny // 2, :].T[::-1],
        "sagittal": data[nx // 2, :, :].T[::-1],
    }
    paths = []
    for name, img in views.items():
        path = Path(f"{prefix}_{name}.png")
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.round(img * 255).astype(np.uint8), mode="L").save(path)
        paths.append(path)
    return paths


# -- subcommands -------------------------------------------------------------

def cmd_phantom(args):
    vol = make_phantom(args.kind, args.size, seed=args.seed or 0, extent_mm=args.extent_mm)
    print(save_volume(vol, _out(args.out)))


def cmd_drr(args):
    vol = load_volume(args.volume)
    geom = ScannerGeometry.load(args.geom) if args.geom else ScannerGeometry()
    if args.det_pixels:
        geom = geom.with_detector_pixels(args.det_pixels)
    if not np.allclose(vol.extent_mm, geom.volume_extent_mm, rtol=1e-6):
        raise ValueError(f"volume extent {tuple(vol.extent_mm)} mm does not match geometry "
                         f"{geom.volume_extent_mm} mm")
    angles = sample_view_angles(args.views, args.seed or 0, equiangular=args.equiangular)
    proj = simulate_projections(vol, geom, angles, args.step_mm)
    print(save_projections(proj, args.out, geom))


def cmd_train(args):
    from dataclasses import replace

    from .trainer import make_phantom_scans, scan_from_files, train

    cfg = _train_config(args)
    overrides = {"model": args.model, "epochs": args.epochs, "max_steps": args.max_steps,
                 "n_points": args.points, "batch_size": args.batch_size}
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    if len(args.volume) != len(args.projections):
        raise UsageError("--volume and --projections must be given the same number of times")
    if args.projections:
        geom = _geom_for(args.projections[0], args.geom)
        cfg = replace(cfg, image_size=geom.detector_pixels[0], views=len(
            load_projections(args.projections[0], geom)))
        scans = [scan_from_files(v, p, geom) for v, p in zip(args.volume, args.projections)]
    else:
        geom = ScannerGeometry.load(args.geom) if args.geom else ScannerGeometry().with_detector_pixels(cfg.image_size)
        cfg = replace(cfg, image_size=geom.detector_pixels[0])
        scans = make_phantom_scans(cfg, geom, "train")
    _out(args.out)
    log_path = _out(args.log) if args.log else f"{args.out}.loss.csv"
    ckpt = train(cfg, scans, geom, log_path=log_path, checkpoint_dir=args.checkpoint_dir,
                 progress_every=50 if args.verbose else 0)
    ckpt.save(_out(args.out))
    last = ckpt.losses[-1][1] if ckpt.losses else float("nan")
    print(f"steps={ckpt.step} final_loss={last:.6g} checkpoint={args.out} log={log_path}")


def cmd_reconstruct(args):
    from .trainer import ModelCheckpoint, reconstruct

    ckpt = ModelCheckpoint.load(args.checkpoint)
    geom = _geom_for(args.projections, args.geom)
    proj = load_projections(args.projections, geom)
    vol = reconstruct(ckpt, proj, geom, (args.size,) * 3, chunk=args.chunk)
    print(save_volume(vol, _out(args.out)))
    if args.slices:
        for path in write_slices(vol, args.slices):
            print(path)


def cmd_baseline(args):
    from .baselines import fdk_reconstruct, sart_reconstruct

    geom = _geom_for(args.projections, args.geom)
    proj = load_projections(args.projections, geom)
    shape = (args.size,) * 3
    if args.method == "fdk":
        vol = fdk_reconstruct(proj, geom, shape, hann=args.hann)
    else:
        vol = sart_reconstruct(proj, geom, shape, iterations=args.iterations, relaxation=args.relaxation)
    print(save_volume(vol, _out(args.out)))
    if args.slices:
        for path in write_slices(vol, args.slices):
            print(path)


def cmd_eval(args):
    pred, gt = load_volume(args.pred), load_volume(args.gt)
    p = psnr(pred.data, gt.data, args.data_range)
    s = ssim(pred.data, gt.data, args.data_range)
    print(f"psnr_db={p:.6f} ssim={s:.6f}")
    if args.csv:
        path = Path(args.csv)
        new = not path.exists() or path.stat().st_size == 0
        with open(path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(["pred", "gt", "psnr_db", "ssim", "ssim_mode", "data_range"])
            w.writerow([args.pred, args.gt, f"{p:.6f}", f"{s:.6f}", SSIM_MODE, args.data_range])


def cmd_ablate(args):
    from .trainer import ABLATION_GRIDS, run_ablation

    cfg = _train_config(args)
    if args.values:
        sep = "|" if args.axis == "features" else ","
        values = [v.strip() for v in args.values.split(sep) if v.strip()]
    else:
        values = list(ABLATION_GRIDS[args.axis])
    try:
        from .trainer import ablation_config
        for v in values:
            ablation_config(cfg, args.axis, v)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rows = run_ablation(args.axis, values, cfg, out_csv=_out(args.out))
    for value, p, s in rows:
        print(f"{args.axis}={value} psnr_db={p:.6f} ssim={s:.6f}")


COMMANDS = {
    "phantom": cmd_phantom,
    "drr": cmd_drr,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "baseline": cmd_baseline,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        bad = _first_unknown_flag(parser, argv)
        if bad is not None:
            raise UsageError(f"unrecognized argument {bad!r}")
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"scbct: usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    runtime.configure(args.threads)
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"scbct {args.command}: usage error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"scbct {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

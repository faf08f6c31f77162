"""Command-line entry point: ``qmt <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

from .core import (ContainerError, EchoSeries, KSpaceSet, NumericError, ParamMaps,
                   ShapeMismatchError, read_container, write_container)
from .encoding import undersample
from .lowrank import IstaSchedule, recon_glr, recon_llr, with_lambda, zero_filled
from .metrics import ReportConfig, make_report
from .network import NetParams
from .phantom import KNEE_TE_MS, PhantomSpec, make_phantom, synthesize_echoes
from .sampling import MaskSet, make_mask_library, make_maskset
from .sigmodel import fit_pixelwise
from . import pipeline
from .training import infer, train

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_DATA = 0, 2, 3, 4, 5

EPILOG = """exit codes:
  0  success
  2  usage error (unknown flag, bad value)
  3  I/O error (missing or unreadable file, malformed container)
  4  numeric failure (divergence, non-finite values)
  5  invalid data (shape mismatch, inconsistent inputs)

environment:
  QMT_THREADS  cap on the number of compute threads
"""

logger = logging.getLogger("mantis")


def _echo_config(out: Path, command: str, args: argparse.Namespace, **resolved) -> None:
    """Write the resolved parameters beside an output file or inside an output directory."""
    cfg = {"command": command}
    cfg.update({k: v for k, v in vars(args).items() if k not in ("func", "command")})
    cfg.update(resolved)
    target = out / "config.json" if out.is_dir() else out.with_name(out.name + ".config.json")
    target.write_text(json.dumps(cfg, indent=2, sort_keys=True, default=str) + "\n")


def _load(path, expected):
    obj = read_container(path)
    if not isinstance(obj, expected):
        names = expected.__name__ if isinstance(expected, type) else "/".join(t.__name__ for t in expected)
        raise ContainerError(f"{path}: expected {names}, found {type(obj).__name__}")
    return obj


def cmd_phantom(args):
    spec = PhantomSpec(args.ny, args.nx, args.n_objects, seed=args.seed)
    write_container(args.out, make_phantom(spec), seed=args.seed)
    _echo_config(args.out, "phantom", args)


def cmd_mask(args):
    if args.n_sets == 1:
        obj = make_maskset(args.ny, args.t, args.r, args.center, args.seed, args.alpha)
    else:
        obj = make_mask_library(args.n_sets, args.ny, args.t, args.r, args.center,
                                args.seed, args.alpha)
    write_container(args.out, obj, seed=args.seed)
    _echo_config(args.out, "mask", args)


def cmd_simulate(args):
    maps = _load(args.maps, ParamMaps)
    te = args.te or list(KNEE_TE_MS)
    full = synthesize_echoes(maps, te, args.noise, seed=args.seed)
    if args.full_out:
        write_container(args.full_out, full, seed=args.seed)
    if args.mask:
        mask = _load(args.mask, (MaskSet, list))
        mask = mask[0] if isinstance(mask, list) else mask
        k, _ = undersample(full, mask)
        write_container(args.out, k, seed=args.seed)
    else:
        write_container(args.out, full, seed=args.seed)
    _echo_config(args.out, "simulate", args, te_ms=te)


def cmd_recon(args):
    k = _load(args.kspace, KSpaceSet)
    sched = IstaSchedule()
    if args.method == "zf":
        rec = zero_filled(k)
    else:
        sched = with_lambda(sched, args.lam, args.iters, args.method)
        rec = recon_glr(k, sched) if args.method == "glr" else recon_llr(k, sched)
    write_container(args.out, rec)
    _echo_config(args.out, "recon", args, schedule=asdict(sched))


def cmd_fit(args):
    series = _load(args.echoes, EchoSeries)
    labels = _load(args.labels_from, ParamMaps).roi_labels if args.labels_from else None
    maps = fit_pixelwise(series, args.threshold, max_iter=args.max_iter, roi_labels=labels)
    write_container(args.out, maps)
    _echo_config(args.out, "fit", args)


def cmd_train(args):
    base = pipeline.PROFILES[args.profile]
    profile = replace(base, **{k: v for k, v in (
        ("lr", args.lr), ("epochs", args.epochs), ("batch", args.batch), ("seed", args.seed),
        ("n_train", args.n_train), ("n_val", args.n_val), ("base_filters", args.base_filters),
        ("lam_data", args.lambda_data), ("lam_cnn", args.lambda_cnn)) if v is not None})
    data = pipeline.datasets(replace(profile, n_test=0))
    if args.mask_lib:
        library = _load(args.mask_lib, (list, MaskSet))
        library = library if isinstance(library, list) else [library]
    else:
        library = pipeline.masks(profile, args.r, profile.library_size, "train")
    val_masks = pipeline.masks(profile, args.r, len(data["val"]), "val")
    res = train(pipeline.train_config(profile), data["train"], library,
                pipeline.netspec(profile), val_phantoms=data["val"], val_masks=val_masks)
    res.params.extra.update({"r": args.r, "best_epoch": res.best_epoch})
    write_container(args.out, res.params, seed=profile.seed)
    hist = Path(args.history) if args.history else args.out.with_name(args.out.name + ".history.csv")
    hist.write_text(res.history_csv())
    _echo_config(args.out, "train", args, profile=asdict(profile), history_csv=str(hist))


def cmd_infer(args):
    params = _load(args.net, NetParams)
    src = read_container(args.input)
    if isinstance(src, KSpaceSet):
        src = zero_filled(src)
    if not isinstance(src, EchoSeries):
        raise ContainerError(f"{args.input}: expected echoes or kspace")
    labels = _load(args.labels_from, ParamMaps).roi_labels if args.labels_from else None
    write_container(args.out, infer(params, params.spec, src, roi_labels=labels))
    _echo_config(args.out, "infer", args)


def cmd_eval(args):
    ref = _load(args.ref, ParamMaps)
    outputs = {}
    for item in args.maps:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).stem, item
        outputs[(name, args.r)] = [_load(path, ParamMaps)]
    args.out_dir.mkdir(parents=True, exist_ok=True)
    report = make_report([ref], outputs, ReportConfig(), out_dir=args.out_dir)
    write_container(args.out_dir / "report.qmt", report)
    _echo_config(args.out_dir, "eval", args)


def cmd_repro(args):
    profile = replace(pipeline.PROFILES[args.profile], seed=args.seed)
    res = pipeline.repro(profile, args.out_dir)
    write_container(args.out_dir / "report.qmt", res.report)
    _echo_config(args.out_dir, "repro", args, profile=asdict(profile))
    logger.info("repro finished in %.1f s", res.seconds)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qmt", description="Undersampled T2 mapping toolkit.",
                                epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, epilog=EPILOG,
                            formatter_class=argparse.RawDescriptionHelpFormatter)
        sp.set_defaults(func=func)
        return sp

    sp = add("phantom", cmd_phantom, "generate a seeded phantom (maps container)")
    sp.add_argument("--ny", type=int, default=64)
    sp.add_argument("--nx", type=int, default=64)
    sp.add_argument("--n-objects", type=int, default=8)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", type=Path, required=True)

    sp = add("mask", cmd_mask, "generate ky-line mask-sets")
    sp.add_argument("--ny", type=int, default=64)
    sp.add_argument("--echoes", dest="t", type=int, default=len(KNEE_TE_MS))
    sp.add_argument("--r", type=float, default=5.0)
    sp.add_argument("--center-frac", dest="center", type=float, default=0.05)
    sp.add_argument("--alpha", type=float, default=2.0)
    sp.add_argument("--sets", dest="n_sets", type=int, default=1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", type=Path, required=True)

    sp = add("simulate", cmd_simulate, "synthesize echoes from maps, optionally undersample")
    sp.add_argument("--maps", type=Path, required=True)
    sp.add_argument("--mask", type=Path)
    sp.add_argument("--te", type=float, nargs="+")
    sp.add_argument("--noise", type=float, default=0.025)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--full-out", type=Path)
    sp.add_argument("--out", type=Path, required=True)

    sp = add("recon", cmd_recon, "reconstruct echoes from undersampled k-space")
    sp.add_argument("--kspace", type=Path, required=True)
    sp.add_argument("--method", choices=("zf", "glr", "llr"), default="zf")
    sp.add_argument("--lambda", dest="lam", type=float,
                    help="relative weight (fraction of the largest singular value)")
    sp.add_argument("--iters", type=int)
    sp.add_argument("--out", type=Path, required=True)

    sp = add("fit", cmd_fit, "pixelwise I0/T2 fit of an echo series")
    sp.add_argument("--echoes", type=Path, required=True)
    sp.add_argument("--threshold", type=float, default=0.02)
    sp.add_argument("--max-iter", type=int, default=50)
    sp.add_argument("--labels-from", type=Path, help="maps container supplying ROI labels")
    sp.add_argument("--out", type=Path, required=True)

    sp = add("train", cmd_train, "train a mapping network on seeded phantoms")
    sp.add_argument("--profile", choices=sorted(pipeline.PROFILES), default="desk")
    sp.add_argument("--r", type=float, default=5.0)
    sp.add_argument("--lambda-data", type=float)
    sp.add_argument("--lambda-cnn", type=float)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--n-train", type=int)
    sp.add_argument("--n-val", type=int)
    sp.add_argument("--base-filters", type=int)
    sp.add_argument("--mask-lib", type=Path)
    sp.add_argument("--history", type=Path, help="loss history CSV (default: OUT.history.csv)")
    sp.add_argument("--out", type=Path, required=True)

    sp = add("infer", cmd_infer, "map zero-filled echoes (or k-space) to I0/T2 with a network")
    sp.add_argument("--net", type=Path, required=True)
    sp.add_argument("--input", type=Path, required=True)
    sp.add_argument("--labels-from", type=Path)
    sp.add_argument("--out", type=Path, required=True)

    sp = add("eval", cmd_eval, "compare map containers against a reference")
    sp.add_argument("--ref", type=Path, required=True)
    sp.add_argument("--maps", nargs="+", required=True, help="NAME=PATH or PATH")
    sp.add_argument("--r", type=float, default=0.0)
    sp.add_argument("--out-dir", type=Path, required=True)

    sp = add("repro", cmd_repro, "full phantom-scale method comparison")
    sp.add_argument("--profile", choices=sorted(pipeline.PROFILES), default="desk")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out-dir", type=Path, required=True)
    return p


def _set_threads() -> None:
    n = os.environ.get("QMT_THREADS")
    if n:
        import torch
        torch.set_num_threads(max(1, int(n)))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _set_threads()
        args.func(args)
    except (ShapeMismatchError, ValueError) as exc:
        print(f"qmt: invalid data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ContainerError, OSError) as exc:
        print(f"qmt: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, FloatingPointError) as exc:
        print(f"qmt: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``msls <subcommand> ...``.

Exit codes: 0 success, 2 bad input, 3 solver failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .core import (DeblurConfig, KernelError, SyntheticBlurSpec, gaussian_kernel,
                   random_motion_kernel, synth_blur, to_luminance)
from .io import ImageFormatError, load_image, load_kernel, save_image, save_kernel
from .kernelest import KernelSolveError
from .metrics import EvalRecord, EvalReport, error_ratio, kernel_similarity, psnr
from .nonblind import AdmmError, tv_deblur
from .nonuniform import (NonUniformSolveError, PoseBasis, PoseGridConfig,
                         nu_blind_deblur, render_kernel_grid)
from .pipeline import PipelineError, blind_deblur
from .pyramid import (ScheduleError, build_schedule, delta_distance,
                      downsample_kernel, lowpass_downsample)

log = logging.getLogger("msls")

EXIT_OK, EXIT_INPUT, EXIT_SOLVER = 0, 2, 3
INPUT_ERRORS = (ImageFormatError, KernelError, ScheduleError, FileNotFoundError,
                IsADirectoryError, ValueError)
SOLVER_ERRORS = (PipelineError, AdmmError, KernelSolveError, NonUniformSolveError)


class InputError(Exception):
    pass


def n_workers(n_items):
    env = os.environ.get("MSLS_THREADS")
    cap = os.cpu_count() or 1
    if env:
        try:
            cap = max(1, int(env))
        except ValueError:
            raise InputError(f"MSLS_THREADS must be an integer, got {env!r}")
    return max(1, min(cap, n_items))


def ordered_map(fn, items):
    """Map in parallel (threads, capped by ``MSLS_THREADS``), keeping order."""
    items = list(items)
    workers = n_workers(len(items))
    if workers == 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


# --------------------------------------------------------------------------
# shared option handling


def _config(args, kernel_size=None):
    cfg = DeblurConfig.from_json(args.config) if args.config else DeblurConfig()
    ks = kernel_size if kernel_size is not None else getattr(args, "kernel_size", None)
    if ks is not None:
        cfg = cfg.replace(kernel_size=ks)
    cfg.validate()
    return cfg


def _out_dir(args):
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _load(path, channels):
    return load_image(path, "rgb" if channels == "rgb" else "luma")


def _write_trace(path, result):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["phase", "level", "iteration", "objective", "kernel_entropy"])
        for row in result.trace_rows():
            w.writerow([row["phase"], row["level"], row["iteration"],
                        repr(float(row["objective"])), repr(row["kernel_entropy"])])


def _dump_debug(out, stem, result, b, cfg):
    from .patchmatch import reconstruct_sharp

    dbg = out / f"{stem}.debug"
    dbg.mkdir(exist_ok=True)
    for i, t in enumerate(result.trace):
        save_kernel(dbg / f"kernel_{i:03d}_{t.phase}_L{t.level}_it{t.iteration}.txt",
                    t.kernel)
    luma = to_luminance(result.image)
    prior = lowpass_downsample(luma, cfg.beta)
    _, mf = reconstruct_sharp(to_luminance(b), prior, cfg, return_matches=True)
    np.save(dbg / "match_offsets.npy", mf.offsets(luma.shape))


# --------------------------------------------------------------------------
# subcommands


def cmd_deblur(args):
    cfg = _config(args)
    b = _load(args.image, args.channels)
    out = _out_dir(args)
    stem = Path(args.image).stem
    res = blind_deblur(b, cfg)
    save_image(out / f"{stem}.deblurred.png", res.image)
    save_kernel(out / f"{stem}.kernel.txt", res.kernel)
    save_kernel(out / f"{stem}.kernel.png", res.kernel)
    if args.trace:
        _write_trace(out / f"{stem}.trace.csv", res)
    if args.debug:
        _dump_debug(out, stem, res, b, cfg)
    log.info("deblurred %s in %.1fs", args.image, sum(res.timings.values()))
    return EXIT_OK


def _pose_config(args):
    homs = None
    if args.homographies:
        with open(args.homographies, encoding="utf-8") as fh:
            homs = json.load(fh)
    return PoseGridConfig(rotation_extent=args.rotation_extent,
                          rotation_steps=args.rotation_steps, homographies=homs,
                          border=args.border)


def cmd_deblur_nu(args):
    cfg = _config(args)
    pcfg = _pose_config(args)
    b = _load(args.image, args.channels)
    out = _out_dir(args)
    stem = Path(args.image).stem
    res = nu_blind_deblur(b, cfg, pcfg)
    basis = PoseBasis.from_config(b.shape[:2], cfg.kernel_size, pcfg)
    save_image(out / f"{stem}.deblurred.png", res.image)
    save_kernel(out / f"{stem}.kernel.txt", res.kernel)
    res.pose_weights.to_json(out / f"{stem}.weights.json", basis)
    save_image(out / f"{stem}.kernel_grid.png",
               render_kernel_grid(res.pose_weights, basis, (args.grid, args.grid)))
    if args.trace:
        _write_trace(out / f"{stem}.trace.csv", res)
    return EXIT_OK


def cmd_nonblind(args):
    cfg = _config(args, kernel_size=None)
    b = _load(args.image, args.channels)
    k = load_kernel(args.kernel)
    if k.shape[0] % 2 == 0 or k.shape[0] != k.shape[1]:
        raise InputError("kernel must be square with odd size")
    k = k / k.sum() if k.sum() > 0 else k
    out = _out_dir(args)
    x = tv_deblur(b, k, args.mu if args.mu is not None else cfg.mu, cfg.admm_rho,
                  cfg.admm_iterations, cfg.admm_tol)
    save_image(out / f"{Path(args.image).stem}.nonblind.png", x)
    return EXIT_OK


def _list_images(paths):
    files = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            files += sorted(q for q in p.iterdir()
                            if q.suffix.lower() in (".png", ".pgm", ".ppm"))
        elif p.exists():
            files.append(p)
        else:
            raise FileNotFoundError(str(p))
    if not files:
        raise InputError("no input images")
    return files


def _kernel_library(args, rng_seed):
    if args.kernels:
        return [(Path(p).stem, load_kernel(p)) for p in args.kernels]
    sizes = [int(s) for s in args.kernel_sizes.split(",")]
    ss = np.random.SeedSequence(rng_seed)
    return [(f"k{s}", random_motion_kernel(s, np.random.default_rng(child)))
            for s, child in zip(sizes, ss.spawn(len(sizes)))]


def cmd_synth(args):
    images = _list_images(args.sharp)
    out = _out_dir(args)
    kernels = _kernel_library(args, args.seed)
    jobs = []
    seeds = np.random.SeedSequence(args.seed + 1).spawn(len(images) * len(kernels))
    for i, img_path in enumerate(images):
        for j, (kname, k) in enumerate(kernels):
            seed = int(seeds[i * len(kernels) + j].generate_state(1)[0])
            jobs.append((img_path, kname, k, seed))

    def run(job):
        img_path, kname, k, seed = job
        x = _load(img_path, args.channels)
        name = f"{img_path.stem}_{kname}"
        b = synth_blur(x, SyntheticBlurSpec(k / k.sum(), args.noise, seed))
        save_image(out / f"{name}.sharp.png", x)
        save_image(out / f"{name}.blur.png", b)
        save_kernel(out / f"{name}.kernel.txt", k / k.sum())
        return name

    names = ordered_map(run, jobs)
    print(json.dumps({"written": names}))
    return EXIT_OK


def _pairs(directory):
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(str(d))
    names = sorted(p.name[:-len(".sharp.png")] for p in d.glob("*.sharp.png"))
    pairs = [n for n in names if (d / f"{n}.blur.png").exists()
             and (d / f"{n}.kernel.txt").exists()]
    if not pairs:
        raise InputError(f"no <name>.sharp.png/.blur.png/.kernel.txt triples in {d}")
    return pairs


def cmd_eval(args):
    d = Path(args.data_dir)
    est_dir = Path(args.estimated) if args.estimated else None
    names = _pairs(d)
    cfg0 = DeblurConfig.from_json(args.config) if args.config else DeblurConfig()

    def run(name):
        x = _load(d / f"{name}.sharp.png", args.channels)
        b = _load(d / f"{name}.blur.png", args.channels)
        k = load_kernel(d / f"{name}.kernel.txt")
        t0 = time.perf_counter()
        est_path = est_dir / f"{name}.kernel.txt" if est_dir else None
        if est_path is not None and est_path.exists():
            k_hat = load_kernel(est_path)
        else:
            k_hat = blind_deblur(b, cfg0.replace(kernel_size=k.shape[0])).kernel
        runtime = time.perf_counter() - t0
        x_k = tv_deblur(b, k, cfg0.mu, cfg0.admm_rho, cfg0.admm_iterations, cfg0.admm_tol)
        x_khat = tv_deblur(b, k_hat, cfg0.mu, cfg0.admm_rho, cfg0.admm_iterations,
                           cfg0.admm_tol)
        r, flagged = error_ratio(x, x_khat, x_k, return_flag=True)
        return EvalRecord(name, r, kernel_similarity(k_hat, k), psnr(x_khat, x),
                          runtime, flagged)

    report = EvalReport()
    for rec in ordered_map(run, names):
        report.add(rec)
    out = _out_dir(args)
    report.write_csv(out / "report.csv")
    agg = report.aggregate()
    with open(out / "aggregate.json", "w", encoding="utf-8") as fh:
        json.dump(agg, fh, indent=2)
    print(json.dumps(agg))
    return EXIT_OK


def _parse_gaussian(spec):
    try:
        size, sigma = spec.split(":")
        return gaussian_kernel(int(size), float(sigma))
    except ValueError as exc:
        raise InputError(f"--gaussian expects SIZE:SIGMA, got {spec!r}") from exc


def default_alphas(support, beta=math.log2(3)):
    """Geometric sweep ``beta^i`` up to the support size (inclusive)."""
    n = int(math.ceil(math.log(support) / math.log(beta)))
    a = [beta ** i for i in range(n)] + [float(support)]
    return sorted(set(a))


def cmd_claim1(args):
    if args.kernel:
        k = load_kernel(args.kernel)
    elif args.gaussian:
        k = _parse_gaussian(args.gaussian)
    else:
        k = random_motion_kernel(args.kernel_size or 15, np.random.default_rng(args.seed))
    k = k / k.sum()
    support = k.shape[0]
    alphas = ([float(a) for a in args.alphas.split(",")] if args.alphas
              else default_alphas(support))
    x = _load(args.image, "luma") if args.image else None
    bimg = None
    if x is not None:
        from .core import convolve2d
        bimg = convolve2d(x, k, "replicate")
    out = _out_dir(args)
    rows = []
    for a in alphas:
        if a < 1:
            raise InputError("alpha must be >= 1")
        dd = delta_distance(downsample_kernel(k, a))
        err = ""
        if bimg is not None:
            lb = lowpass_downsample(bimg, a)
            lx = lowpass_downsample(x, a)
            rng = float(x.max() - x.min()) or 1.0
            err = repr(float(np.abs(lb - lx).mean() / rng))
        rows.append((repr(a), repr(dd), err))
    path = out / "claim1.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "delta_distance", "commutation_error"])
        w.writerows(rows)
    print(str(path))
    return EXIT_OK


def cmd_schedule(args):
    if args.image:
        shape = load_image(args.image, "luma").shape
    elif args.shape:
        shape = tuple(args.shape)
    else:
        raise InputError("give an image or --shape H W")
    cfg = _config(args)
    sched = build_schedule(shape, cfg.kernel_size, cfg.beta, cfg.min_level_size)
    text = json.dumps(sched.to_dict(), indent=2)
    if args.out_dir:
        (_out_dir(args) / "schedule.json").write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(prog="msls", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, kernel=True, out=True):
        if kernel:
            sp.add_argument("--kernel-size", type=int, default=None,
                            help="odd blur kernel support h (default from config)")
        sp.add_argument("--config", help="JSON file mirroring DeblurConfig")
        sp.add_argument("--seed", type=int, default=0)
        if out:
            sp.add_argument("--out-dir", default=".")
        sp.add_argument("--channels", choices=("luma", "rgb"), default="luma")

    sp = sub.add_parser("deblur", help="blind deblurring, uniform blur")
    sp.add_argument("image")
    common(sp)
    sp.add_argument("--trace", action="store_true", help="write a trace CSV")
    sp.add_argument("--debug", action="store_true",
                    help="dump per-iteration kernels and the match field")
    sp.set_defaults(func=cmd_deblur)

    sp = sub.add_parser("deblur-nu", help="blind deblurring, non-uniform blur")
    sp.add_argument("image")
    common(sp)
    sp.add_argument("--trace", action="store_true")
    sp.add_argument("--rotation-extent", type=float, default=2.0,
                    help="in-plane rotation half range, degrees")
    sp.add_argument("--rotation-steps", type=int, default=5)
    sp.add_argument("--homographies", help="JSON list of 3x3 base warps")
    sp.add_argument("--border", choices=("replicate", "wrap"), default="replicate")
    sp.add_argument("--grid", type=int, default=4, help="kernel grid tiles per side")
    sp.set_defaults(func=cmd_deblur_nu)

    sp = sub.add_parser("nonblind", help="TV deconvolution with a given kernel")
    sp.add_argument("image")
    sp.add_argument("--kernel", required=True, help="kernel .txt or .pgm")
    sp.add_argument("--mu", type=float, default=None)
    common(sp, kernel=False)
    sp.set_defaults(func=cmd_nonblind)

    sp = sub.add_parser("synth", help="blur sharp images with a kernel library")
    sp.add_argument("sharp", nargs="+", help="sharp images or directories")
    sp.add_argument("--kernels", nargs="*", help="kernel files (default: random walks)")
    sp.add_argument("--kernel-sizes", default="15,19,23,27")
    sp.add_argument("--noise", type=float, default=0.01)
    common(sp, kernel=False)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("eval", help="error ratios over a synthetic directory")
    sp.add_argument("data_dir")
    sp.add_argument("--estimated", help="directory of <name>.kernel.txt estimates "
                    "(missing ones are estimated)")
    common(sp, kernel=False)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("claim1", help="kernel and image behavior under down-sampling")
    sp.add_argument("--kernel", help="kernel file")
    sp.add_argument("--gaussian", help="SIZE:SIGMA Gaussian kernel")
    sp.add_argument("--image", help="image for the commutation error")
    sp.add_argument("--alphas", help="comma-separated factors")
    common(sp)
    sp.set_defaults(func=cmd_claim1)

    sp = sub.add_parser("schedule", help="print the pyramid plan as JSON")
    sp.add_argument("image", nargs="?")
    sp.add_argument("--shape", type=int, nargs=2, metavar=("H", "W"))
    common(sp, out=False)
    sp.add_argument("--out-dir", default=None)
    sp.set_defaults(func=cmd_schedule)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except SOLVER_ERRORS as exc:
        print(f"msls: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (InputError,) + INPUT_ERRORS as exc:
        print(f"msls: bad input: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

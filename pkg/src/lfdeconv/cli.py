"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 input validation failure,
3 runtime failure (worker fault, memory budget), 4 output write failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import io as lfio
from .bench import BenchProblem, format_table, hardware_threads, run_bench
from .errors import LfDeconvError, OutputError, ValidationError
from .metric import MetricConfig, dct_entropy
from .optics import OpticsParams, cutoff_region
from .phantom import PhantomSpec, SyntheticPsfSpec, gen_psf, simulate
from .pipeline import WORKERS_ENV, plan_workers, resolve_workers, run_parallel

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_RUNTIME, EXIT_OUTPUT = range(5)
DEFAULT_SEED = 0
STDOUT_SCHEMA_VERSION = 1

log = logging.getLogger("lfdeconv")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


_SIZE_RE = re.compile(r"^\s*(\d+)\s*([kmgt]?)(i?b)?\s*$", re.IGNORECASE)


def parse_bytes(text: str) -> int:
    """``"512"``, ``"64MiB"``, ``"2G"`` -> bytes (binary multiples)."""
    m = _SIZE_RE.match(text)
    if not m:
        raise argparse.ArgumentTypeError(f"invalid byte size {text!r}")
    power = " kmgt".index(m.group(2).lower() or " ")
    return int(m.group(1)) * 1024**power


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError(f"worker counts must be positive, got {text!r}")
    return values


def _add_optics(p, required=False):
    g = p.add_argument_group("optics")
    g.add_argument("--wavelength-um", type=float, required=required, help="emission wavelength (um)")
    g.add_argument("--na", type=float, required=required, help="numerical aperture")
    g.add_argument("--mla-pitch-um", type=float, required=required, help="microlens pitch (um)")
    g.add_argument("--magnification", type=float, required=required, help="objective magnification")
    g.add_argument("--nnum", type=int, required=required, help="virtual pixels per microlens (odd)")


def _add_psf_spec(p):
    g = p.add_argument_group("synthetic PSF")
    g.add_argument("--nnum", type=int, default=3)
    g.add_argument("--kernel", type=int, default=21, help="kernel height and width (odd)")
    g.add_argument("--sigma0", type=float, default=1.0)
    g.add_argument("--sigma-slope", type=float, default=0.5)
    g.add_argument("--shear", type=float, default=3.0)


def _psf_spec(args, nz) -> SyntheticPsfSpec:
    return SyntheticPsfSpec(nz=nz, nnum=args.nnum, kh=args.kernel, kw=args.kernel,
                            sigma0=args.sigma0, sigma_slope=args.sigma_slope, shear=args.shear)


def _command(sub, name, **kwargs):
    p = sub.add_parser(name, **kwargs)
    p.set_defaults(usage=p.format_usage)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lfdeconv", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"lfdeconv {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = _command(sub, "deconvolve", help="deconvolve a light-field image with automatic stopping")
    p.add_argument("--config", type=Path, help="key = value run configuration")
    p.add_argument("--input", help="rectified light-field TIFF")
    p.add_argument("--psf", help="PSF TIFF stack")
    p.add_argument("--psf-desc", help="PSF layout descriptor JSON")
    _add_optics(p)
    p.add_argument("--workers", type=int, help=f"worker count (overrides {WORKERS_ENV})")
    p.add_argument("--max-iters", type=int)
    p.add_argument("--min-iters", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--fixed-iters", type=int, help="run exactly this many iterations")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--region-shape", choices=["triangle", "rectangle"])
    p.add_argument("--memory-budget", type=parse_bytes, help="per-worker limit, e.g. 2GiB")
    p.add_argument("--pixel-format", choices=["f32", "u16"], default="f32", help="volume output format")
    p.add_argument("--out", help="output prefix (default: lfdeconv)")
    p.set_defaults(func=cmd_deconvolve)

    p = _command(sub, "metric", help="DCT entropy of an image or max-projected stack")
    p.add_argument("--input", required=True)
    _add_optics(p, required=True)
    p.add_argument("--no-project", action="store_true", help="evaluate page 0 instead of the z-max projection")
    p.add_argument("--region-shape", choices=["triangle", "rectangle"], default="triangle")
    p.set_defaults(func=cmd_metric)

    p = _command(sub, "simulate", help="bead phantom, synthetic PSF and light-field measurement")
    p.add_argument("--nz", type=int, default=7)
    p.add_argument("--height", type=int, default=63)
    p.add_argument("--width", type=int, default=63)
    p.add_argument("--beads", type=int, default=10)
    p.add_argument("--bead-radius", type=int, default=1)
    p.add_argument("--photon-scale", type=float, default=200.0)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--no-noise", action="store_true")
    p.add_argument("--psf", help="use this PSF TIFF instead of generating one")
    p.add_argument("--psf-desc")
    p.add_argument("--pixel-format", choices=["f32", "f64"], default="f32")
    _add_psf_spec(p)
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_simulate)

    p = _command(sub, "psfgen", help="write a synthetic shift-variant PSF and descriptor")
    p.add_argument("--nz", type=int, default=7)
    _add_psf_spec(p)
    p.add_argument("--pixel-format", choices=["f32", "f64"], default="f32")
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_psfgen)

    p = _command(sub, "bench", help="fixed-iteration scaling benchmark")
    p.add_argument("--nz", type=int, default=16)
    p.add_argument("--height", type=int, default=240)
    p.add_argument("--width", type=int, default=240)
    p.add_argument("--nnum", type=int, default=3)
    p.add_argument("--kernel", type=int, default=21)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--beads", type=int, default=40)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--workers-list", type=_int_list, default=[1, 2, 4])
    p.add_argument("--json", action="store_true", help="print the report as JSON")
    p.set_defaults(func=cmd_bench)

    p = _command(sub, "info", help="versions, formats and host parallelism")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_info)
    return parser


def _write_outputs(writers) -> list[Path]:
    """Run ``(path, write_fn)`` pairs; on any failure delete what was written."""
    done = []
    try:
        for path, write in writers:
            write()
            done.append(Path(path))
    except BaseException:
        lfio.remove_quietly(done)
        raise
    return done


_DECONV_FLAGS = {
    "input": "input", "psf": "psf", "psf_desc": "psf_desc",
    "wavelength_um": "wavelength_um", "na": "na", "mla_pitch_um": "mla_pitch_um",
    "magnification": "magnification", "nnum": "nnum", "workers": "workers",
    "max_iters": "max_iters", "min_iters": "min_iters", "patience": "patience",
    "fixed_iters": "fixed_iters", "epsilon": "epsilon", "region_shape": "region_shape",
    "memory_budget": "memory_budget", "out": "out",
}


def _deconv_config(args) -> lfio.RunConfig:
    flags = {key: getattr(args, attr) for attr, key in _DECONV_FLAGS.items()}
    values = {}
    source = "command line"
    if args.config is not None:
        source = str(args.config)
        try:
            text = args.config.read_bytes().decode("utf-8")
        except FileNotFoundError:
            raise ValidationError(f"{args.config}: config file does not exist") from None
        except (OSError, UnicodeDecodeError) as exc:
            raise ValidationError(f"{args.config}: cannot read config: {exc}") from None
        values = lfio.parse_config_text(text, source)
    values.update({k: v for k, v in flags.items() if v is not None})
    missing = [k for k in lfio.REQUIRED_KEYS if k not in values]
    if missing:
        names = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise UsageError(f"missing required settings: {names} (pass flags or --config)")
    return lfio.build_config(values, source)


def cmd_deconvolve(args) -> int:
    cfg = _deconv_config(args)
    stack = lfio.read_tiff_stack(cfg.input_path)
    if len(stack) != 1:
        raise ValidationError(f"{cfg.input_path}: expected a single-page light-field image, found {len(stack)} pages")
    y = stack[0]
    psf = lfio.load_psf(cfg.psf_path, cfg.psf_desc_path)
    workers = resolve_workers(cfg.workers)
    plan = plan_workers(psf.nz, workers, y.shape[0], y.shape[1], psf)

    def sink(entry):
        log.info("iteration %d: dct_entropy=%.6g (%.1f ms)", entry.iteration, entry.entropy, entry.wall_ms)

    result = run_parallel(y, psf, cfg.optics, cfg.policy, plan, metric=cfg.metric,
                          epsilon=cfg.epsilon, memory_budget=cfg.memory_budget, sink=sink)
    prefix = cfg.out_prefix
    vol_path = Path(f"{prefix}_volume.tif")
    csv_path = Path(f"{prefix}_series.csv")
    summary_path = Path(f"{prefix}_summary.json")
    echo = {
        "optics": cfg.optics, "policy": cfg.policy, "metric": cfg.metric, "workers": workers,
        "epsilon": cfg.epsilon, "input": cfg.input_path, "psf": cfg.psf_path,
        "psf_desc": cfg.psf_desc_path, "worker_layers": plan.sizes,
    }
    _write_outputs([
        (vol_path, lambda: lfio.write_tiff_stack(result.volume, vol_path, args.pixel_format)),
        (csv_path, lambda: lfio.write_series(result.series, csv_path, summary_path, echo)),
        (summary_path, lambda: None),
    ])
    print(f"best_iter={result.best_iter} stop_iter={result.stop_iter}")
    return EXIT_OK


def cmd_metric(args) -> int:
    optics = OpticsParams(args.wavelength_um, args.na, args.mla_pitch_um, args.magnification, args.nnum)
    image = lfio.read_image(args.input, project=not args.no_project)
    if min(image.shape) < 2:
        raise ValidationError(f"{args.input}: image must be at least 2x2, got {image.shape}")
    region = cutoff_region(optics, *image.shape)
    value = dct_entropy(image, region, MetricConfig(args.region_shape))
    print(json.dumps({
        "format_version": STDOUT_SCHEMA_VERSION,
        "dct_entropy": value,
        "x_s": region.x_s,
        "y_s": region.y_s,
        "g_s": region.g_s,
        "cutoff_position_p": list(region.cutoff_position_p),
        "height": region.height,
        "width": region.width,
        "region_shape": args.region_shape,
        "projected": not args.no_project,
    }))
    return EXIT_OK


def cmd_simulate(args) -> int:
    spec = PhantomSpec(nz=args.nz, height=args.height, width=args.width, bead_count=args.beads,
                       bead_radius_px=args.bead_radius, seed=args.seed, photon_scale=args.photon_scale)
    if args.psf:
        if not args.psf_desc:
            raise UsageError("--psf requires --psf-desc")
        psf = lfio.load_psf(args.psf, args.psf_desc)
    else:
        psf = gen_psf(_psf_spec(args, args.nz))
    fmt = args.pixel_format
    # simulate from the PSF exactly as stored, so the files are self-consistent
    psf = type(psf)(psf.kernels.astype(lfio.PIXEL_FORMATS[fmt]).astype(np.float64))
    volume, image = simulate(spec, psf, noise=not args.no_noise)
    out = args.out
    paths = {k: Path(f"{out}_{k}") for k in ("phantom.tif", "psf.tif", "psf.json", "lightfield.tif")}
    _write_outputs([
        (paths["phantom.tif"], lambda: lfio.write_tiff_stack(volume, paths["phantom.tif"], fmt)),
        (paths["psf.tif"], lambda: lfio.write_psf(psf, paths["psf.tif"], paths["psf.json"], fmt)),
        (paths["psf.json"], lambda: None),
        (paths["lightfield.tif"], lambda: lfio.write_tiff_stack(image, paths["lightfield.tif"], fmt)),
    ])
    for p in paths.values():
        print(p)
    return EXIT_OK


def cmd_psfgen(args) -> int:
    psf = gen_psf(_psf_spec(args, args.nz))
    tif, desc = Path(f"{args.out}_psf.tif"), Path(f"{args.out}_psf.json")
    _write_outputs([
        (tif, lambda: lfio.write_psf(psf, tif, desc, args.pixel_format)),
        (desc, lambda: None),
    ])
    print(tif)
    print(desc)
    return EXIT_OK


def cmd_bench(args) -> int:
    problem = BenchProblem(nz=args.nz, height=args.height, width=args.width, nnum=args.nnum,
                           kernel=args.kernel, iters=args.iters, seed=args.seed, bead_count=args.beads)
    report = run_bench(problem, args.workers_list)
    print(json.dumps(report) if args.json else format_table(report))
    return EXIT_OK


def cmd_info(args) -> int:
    import os

    import scipy
    import tifffile

    info = {
        "format_version": STDOUT_SCHEMA_VERSION,
        "lfdeconv": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "tifffile": tifffile.__version__,
        "hardware_threads": hardware_threads(),
        "workers_env": os.environ.get(WORKERS_ENV),
        "file_format_version": lfio.FORMAT_VERSION,
        "psf_page_order": lfio.PAGE_ORDER,
        "pixel_formats": sorted(lfio.PIXEL_FORMATS),
    }
    if args.json:
        print(json.dumps(info))
    else:
        for k, v in info.items():
            print(f"{k}: {v}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        sys.stderr.write(args.usage())
        print(f"lfdeconv {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OutputError as exc:
        print(f"lfdeconv: output error: {exc}", file=sys.stderr)
        return EXIT_OUTPUT
    except (ValidationError, FileNotFoundError) as exc:
        print(f"lfdeconv: invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except LfDeconvError as exc:
        print(f"lfdeconv: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except MemoryError as exc:
        print(f"lfdeconv: runtime failure: out of memory ({exc})", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

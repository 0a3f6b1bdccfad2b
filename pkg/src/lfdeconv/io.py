"""File formats: TIFF stacks, PSF banks with layout descriptors, metric series, run configs.

PSF TIFFs hold one kernel per page, page index ``(z * nnum + a) * nnum + b``.
The companion descriptor is JSON::

    {"format_version": 1, "nz": 7, "nnum": 3, "kh": 21, "kw": 21,
     "page_order": "(z*nnum+a)*nnum+b", "pixel_format": "f32"}

Run configs are ``key = value`` lines; ``#`` starts a comment.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, is_dataclass
from pathlib import Path

import numpy as np
import tifffile

from .deconv import MetricEntry, MetricSeries, StopPolicy
from .errors import ConfigError, FormatError, OutputError, ValidationError
from .lfmodel import PsfStack
from .metric import MetricConfig
from .optics import OpticsParams

FORMAT_VERSION = 1
PAGE_ORDER = "(z*nnum+a)*nnum+b"
PIXEL_FORMATS = {"u8": np.uint8, "u16": np.uint16, "f32": np.float32, "f64": np.float64}
SERIES_HEADER = ["iteration", "dct_entropy", "wall_ms"]


class UnsupportedPixelFormatError(FormatError):
    pass


class RgbInputError(FormatError):
    pass


class CorruptFileError(FormatError):
    pass


def _format_of(dtype) -> str | None:
    for name, t in PIXEL_FORMATS.items():
        if np.dtype(dtype) == np.dtype(t):
            return name
    return None


def read_tiff_stack(path) -> np.ndarray:
    """Read a grayscale multi-page TIFF as a float64 ``(pages, H, W)`` array.

    Integer samples are converted without rescaling.

    Raises
    ------
    FileNotFoundError
    RgbInputError, UnsupportedPixelFormatError, CorruptFileError
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path}: no such file")
    try:
        with tifffile.TiffFile(path) as tif:
            pages = list(tif.pages)
            if not pages:
                raise CorruptFileError(f"{path}: TIFF contains no pages")
            out = []
            shape = None
            for i, page in enumerate(pages):
                if page.samplesperpixel > 1 or page.photometric == tifffile.PHOTOMETRIC.RGB:
                    raise RgbInputError(
                        f"{path}: page {i}: {page.samplesperpixel}-sample (RGB) image; "
                        "only single-channel grayscale is supported"
                    )
                if _format_of(page.dtype) is None:
                    raise UnsupportedPixelFormatError(
                        f"{path}: page {i}: pixel type {page.dtype} is not one of u8, u16, f32, f64"
                    )
                data = page.asarray()
                if data.ndim != 2:
                    raise CorruptFileError(f"{path}: page {i}: expected a 2D page, got shape {data.shape}")
                if shape is not None and data.shape != shape:
                    raise FormatError(f"{path}: page {i}: size {data.shape} differs from page 0 size {shape}")
                shape = data.shape
                out.append(data.astype(np.float64))
    except FormatError:
        raise
    except Exception as exc:
        raise CorruptFileError(f"{path}: cannot be read as TIFF: {exc}") from exc
    return np.stack(out)


def read_image(path, project: bool = True) -> np.ndarray:
    """Read a 2D image; stacks are z-max projected, or page 0 is taken if ``project`` is False."""
    stack = read_tiff_stack(path)
    return stack.max(axis=0) if project else stack[0]


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def _write_json(path: Path, payload: dict) -> None:
    try:
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OutputError(f"{path}: cannot write: {exc}") from exc


def write_tiff_stack(volume, path, pixel_format: str = "f32") -> None:
    """Write a ``(pages, H, W)`` or ``(H, W)`` array as a grayscale TIFF.

    ``f32`` is lossless for float32 data and ``f64`` for float64. ``u8``/``u16`` store
    ``round((value - offset) / scale)`` with ``offset = min`` and
    ``scale = (max - min) / dtype_max`` (1 for constant data); scale and offset
    go to a sidecar ``<path>.json``.
    """
    path = Path(path)
    if pixel_format not in PIXEL_FORMATS:
        raise ValidationError(f"pixel_format: expected one of {sorted(PIXEL_FORMATS)}, got {pixel_format!r}")
    arr = np.asarray(volume)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.size == 0:
        raise ValidationError(f"{path}: expected a non-empty 2D or 3D array, got shape {arr.shape}")
    if np.isnan(arr).any():
        raise ValidationError(f"{path}: refusing to write data containing NaN")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{path}: refusing to write data containing infinities")
    scaling = None
    if pixel_format in ("f32", "f64"):
        data = arr.astype(PIXEL_FORMATS[pixel_format])
    else:
        dtype = PIXEL_FORMATS[pixel_format]
        top = np.iinfo(dtype).max
        lo, hi = float(arr.min()), float(arr.max())
        scale = (hi - lo) / top if hi > lo else 1.0
        data = np.clip(np.rint((arr - lo) / scale), 0, top).astype(dtype)
        scaling = {"format_version": FORMAT_VERSION, "pixel_format": pixel_format,
                   "scale": scale, "offset": lo, "value": "stored * scale + offset"}
    try:
        tifffile.imwrite(path, data, photometric="minisblack")
    except OSError as exc:
        raise OutputError(f"{path}: cannot write: {exc}") from exc
    if scaling is not None:
        _write_json(sidecar_path(path), scaling)


@dataclass(frozen=True)
class PsfLayoutDescriptor:
    nz: int
    nnum: int
    kh: int
    kw: int
    pixel_format: str = "f32"
    page_order: str = PAGE_ORDER

    @property
    def page_count(self) -> int:
        return self.nz * self.nnum * self.nnum

    def page_index(self, z: int, a: int, b: int) -> int:
        return (z * self.nnum + a) * self.nnum + b

    def to_json(self) -> dict:
        return {"format_version": FORMAT_VERSION, **asdict(self)}


_DESCRIPTOR_KEYS = {"format_version", "nz", "nnum", "kh", "kw", "pixel_format", "page_order"}


def read_descriptor(path) -> PsfLayoutDescriptor:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: not a valid JSON descriptor: {exc}") from exc
    if not isinstance(raw, dict):
        raise FormatError(f"{path}: descriptor must be a JSON object")
    unknown = set(raw) - _DESCRIPTOR_KEYS
    if unknown:
        raise FormatError(f"{path}: unknown descriptor keys {sorted(unknown)}")
    for key in ("nz", "nnum", "kh", "kw"):
        value = raw.get(key)
        if isinstance(value, bool) or not isinstance(value, int) or value < 1:
            raise FormatError(f"{path}: {key}: expected a positive integer, got {value!r}")
    if raw["nnum"] % 2 == 0:
        raise FormatError(f"{path}: nnum: must be odd, got {raw['nnum']}")
    if raw["kh"] % 2 == 0 or raw["kw"] % 2 == 0:
        raise FormatError(f"{path}: kh/kw: kernel size must be odd, got {raw['kh']}x{raw['kw']}")
    if raw.get("page_order", PAGE_ORDER) != PAGE_ORDER:
        raise FormatError(f"{path}: page_order: only {PAGE_ORDER!r} is supported, got {raw['page_order']!r}")
    fmt = raw.get("pixel_format", "f32")
    if fmt not in PIXEL_FORMATS:
        raise FormatError(f"{path}: pixel_format: expected one of {sorted(PIXEL_FORMATS)}, got {fmt!r}")
    return PsfLayoutDescriptor(raw["nz"], raw["nnum"], raw["kh"], raw["kw"], fmt)


def load_psf(tiff_path, descriptor) -> PsfStack:
    """Load a PSF bank laid out per ``descriptor`` (object or descriptor path)."""
    if not isinstance(descriptor, PsfLayoutDescriptor):
        descriptor = read_descriptor(descriptor)
    pages = read_tiff_stack(tiff_path)
    d = descriptor
    if len(pages) != d.page_count:
        raise FormatError(
            f"{tiff_path}: page count mismatch: descriptor nz={d.nz}, nnum={d.nnum} "
            f"expects {d.page_count} pages, found {len(pages)}"
        )
    if pages.shape[1:] != (d.kh, d.kw):
        raise FormatError(
            f"{tiff_path}: page size {pages.shape[1]}x{pages.shape[2]} does not match "
            f"descriptor kernel size {d.kh}x{d.kw}"
        )
    for i, page in enumerate(pages):
        if np.any(page < 0):
            raise FormatError(f"{tiff_path}: page {i}: negative PSF values are not allowed")
    try:
        return PsfStack(pages.reshape(d.nz, d.nnum, d.nnum, d.kh, d.kw))
    except ValidationError as exc:
        raise FormatError(f"{tiff_path}: {exc}") from exc


def write_psf(psf: PsfStack, tiff_path, descriptor_path, pixel_format: str = "f32") -> PsfLayoutDescriptor:
    desc = PsfLayoutDescriptor(psf.nz, psf.nnum, psf.kh, psf.kw, pixel_format)
    pages = psf.kernels.reshape(desc.page_count, psf.kh, psf.kw)
    write_tiff_stack(pages, tiff_path, pixel_format)
    _write_json(Path(descriptor_path), desc.to_json())
    return desc


def _jsonable(obj):
    if is_dataclass(obj):
        return {k: _jsonable(v) for k, v in asdict(obj).items()}
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_series(series: MetricSeries, path, summary_path=None, config=None) -> None:
    """Write the per-iteration CSV and a summary JSON next to it.

    The summary defaults to ``path`` with a ``.json`` suffix and carries
    ``best_iter`` (series argmax), ``stop_iter`` and an echo of ``config``.
    """
    if not len(series):
        raise ValidationError("cannot write an empty metric series")
    path = Path(path)
    summary_path = Path(summary_path) if summary_path is not None else path.with_suffix(".json")
    try:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(SERIES_HEADER)
            for e in series:
                writer.writerow([e.iteration, f"{e.entropy:.17g}", f"{e.wall_ms:.3f}"])
    except OSError as exc:
        raise OutputError(f"{path}: cannot write: {exc}") from exc
    summary = {
        "format_version": FORMAT_VERSION,
        "best_iter": series.argmax(),
        "stop_iter": series.iterations[-1],
        "iterations": len(series),
        "config": _jsonable(config) if config is not None else None,
    }
    _write_json(summary_path, summary)


def read_series(path) -> MetricSeries:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != SERIES_HEADER:
        raise FormatError(f"{path}: expected header {','.join(SERIES_HEADER)}")
    series = MetricSeries()
    for line, row in enumerate(rows[1:], start=2):
        try:
            series.append(MetricEntry(int(row[0]), float(row[1]), float(row[2])))
        except (ValueError, IndexError) as exc:
            raise FormatError(f"{path}: line {line}: {exc}") from exc
    return series


@dataclass(frozen=True)
class RunConfig:
    optics: OpticsParams
    policy: StopPolicy
    workers: int | None
    epsilon: float | None
    metric: MetricConfig
    input_path: Path
    psf_path: Path
    psf_desc_path: Path
    out_prefix: str = "lfdeconv"
    memory_budget: int | None = None


_OPTICS_KEYS = ("wavelength_um", "na", "mla_pitch_um", "magnification", "nnum")
_PATH_KEYS = ("input", "psf", "psf_desc")
REQUIRED_KEYS = _OPTICS_KEYS + _PATH_KEYS
CONFIG_KEYS = {
    "format_version": int,
    "wavelength_um": float, "na": float, "mla_pitch_um": float, "magnification": float, "nnum": int,
    "max_iters": int, "min_iters": int, "patience": int, "fixed_iters": int,
    "workers": int, "epsilon": float, "region_shape": str, "memory_budget": int,
    "input": str, "psf": str, "psf_desc": str, "out": str,
}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines into typed values; no cross-field validation."""
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}: line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{source}: line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}: line {lineno}: duplicate key {key!r}")
        if not value:
            raise ConfigError(f"{source}: line {lineno}: {key}: empty value")
        values[key] = _convert(key, value, f"{source}: line {lineno}")
    return values


def _convert(key: str, value, where: str):
    kind = CONFIG_KEYS[key]
    if kind is str or not isinstance(value, str):
        return value
    try:
        converted = kind(value)
    except ValueError:
        raise ConfigError(f"{where}: {key}: expected {kind.__name__}, got {value!r}") from None
    if kind is float and not math.isfinite(converted):
        raise ConfigError(f"{where}: {key}: must be finite, got {value!r}")
    return converted


def build_config(values: dict, source: str = "<config>", check_paths: bool = True) -> RunConfig:
    """Validate merged key/value settings into a :class:`RunConfig`."""
    unknown = set(values) - set(CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"{source}: unknown keys {sorted(unknown)}")
    values = {k: _convert(k, v, source) for k, v in values.items() if v is not None}
    version = values.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise ConfigError(f"{source}: format_version: unsupported version {version}")
    missing = [k for k in REQUIRED_KEYS if k not in values]
    if missing:
        raise ConfigError(f"{source}: missing required keys {missing}")
    try:
        optics = OpticsParams(*(values[k] for k in _OPTICS_KEYS))
    except ValidationError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    try:
        fixed = values.get("fixed_iters")
        max_iters = values.get("max_iters", 50 if fixed is None else max(50, fixed))
        policy = StopPolicy(
            max_iters=max_iters,
            min_iters=values.get("min_iters", min(2, max_iters)),
            patience=values.get("patience", 1),
            mode="auto" if fixed is None else "fixed",
            fixed_iters=fixed,
        )
        metric = MetricConfig(values.get("region_shape", "triangle"))
    except ValidationError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    workers = values.get("workers")
    if workers is not None and workers < 1:
        raise ConfigError(f"{source}: workers: must be >= 1, got {workers}")
    epsilon = values.get("epsilon")
    if epsilon is not None and not epsilon > 0:
        raise ConfigError(f"{source}: epsilon: must be > 0, got {epsilon}")
    budget = values.get("memory_budget")
    if budget is not None and budget < 1:
        raise ConfigError(f"{source}: memory_budget: must be >= 1 byte, got {budget}")
    paths = {k: Path(values[k]) for k in _PATH_KEYS}
    if check_paths:
        for key, p in paths.items():
            if not p.is_file():
                raise ConfigError(f"{source}: {key}: file {str(p)!r} does not exist")
    return RunConfig(optics, policy, workers, epsilon, metric, paths["input"], paths["psf"],
                     paths["psf_desc"], values.get("out", "lfdeconv"), budget)


def load_config(path, overrides: dict | None = None, check_paths: bool = True) -> RunConfig:
    """Load a key-value config file; non-None ``overrides`` take precedence."""
    path = Path(path)
    try:
        text = path.read_bytes().decode("utf-8")
    except FileNotFoundError:
        raise ConfigError(f"{path}: config file does not exist") from None
    except UnicodeDecodeError as exc:
        raise ConfigError(f"{path}: not UTF-8 text ({exc.reason} at byte {exc.start})") from None
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read: {exc}") from None
    values = parse_config_text(text, str(path))
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    return build_config(values, str(path), check_paths)


def remove_quietly(paths) -> None:
    for p in paths:
        try:
            os.remove(p)
        except OSError:
            pass

"""Pipeline configuration: a line-oriented ``key = value`` format.

Keys are dotted (``scan.window_len``). A ``[section]`` header prefixes the
keys that follow it, so these are equivalent::

    scan.mode = snake

    [scan]
    mode = snake

``#`` starts a comment. Keys whose default is ``auto`` are derived from the
canvas during resolution; the resolved config lists every key explicitly
and re-parses to itself.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from .exceptions import ConfigurationError, CoverageError
from .fusion import STATISTICS
from .rope import RopeParams
from .trajectory import LINEAR, SNAKE, ScanConfig, coverage_report, plan

AUTO = "auto"
MAX_EXTENT = 32768


def _int(raw, key):
    try:
        return int(raw)
    except (TypeError, ValueError):
        raise ConfigurationError(f"expected an integer, got {raw!r}", keys=(key,)) from None


def _float(raw, key):
    try:
        value = float(raw)
    except (TypeError, ValueError):
        raise ConfigurationError(f"expected a number, got {raw!r}", keys=(key,)) from None
    if not math.isfinite(value):
        raise ConfigurationError(f"expected a finite number, got {raw!r}", keys=(key,))
    return value


def _bool(raw, key):
    text = str(raw).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"expected a boolean, got {raw!r}", keys=(key,))


def _int_tuple(n):
    def parse(raw, key):
        parts = [p for p in str(raw).replace(" ", "").split(",") if p]
        if len(parts) != n:
            raise ConfigurationError(f"expected {n} comma-separated integers, got {raw!r}", keys=(key,))
        return tuple(_int(p, key) for p in parts)
    return parse


def _str(raw, key):
    return str(raw).strip()


def _choice(*options):
    def parse(raw, key):
        value = str(raw).strip().lower()
        if value not in options:
            raise ConfigurationError(f"expected one of {options}, got {raw!r}", keys=(key,))
        return value
    return parse


def _or_auto(parser):
    def parse(raw, key):
        if str(raw).strip().lower() == AUTO:
            return AUTO
        return parser(raw, key)
    return parse


def _aspect(raw, key):
    text = str(raw).strip()
    if text.lower() == AUTO:
        return AUTO
    try:
        if ":" in text:
            w, h = text.split(":")
            ratio = Fraction(int(w), int(h))
        else:
            ratio = Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise ConfigurationError(f"aspect must look like '8:1', got {raw!r}", keys=(key,)) from None
    if ratio <= 0:
        raise ConfigurationError(f"aspect must be positive, got {raw!r}", keys=(key,))
    return f"{ratio.numerator}:{ratio.denominator}"


# key -> (parser, default)
SCHEMA = {
    "canvas.height": (_or_auto(_int), AUTO),
    "canvas.width": (_or_auto(_int), AUTO),
    "canvas.short": (_int, 512),
    "canvas.aspect": (_aspect, AUTO),
    "scan.mode": (_choice(LINEAR, SNAKE), LINEAR),
    "scan.direction": (_or_auto(_int_tuple(2)), AUTO),
    "scan.window_len": (_or_auto(_int), AUTO),
    "scan.window_height": (_or_auto(_int), AUTO),
    "scan.spatial_stride": (_or_auto(_int), AUTO),
    "scan.step_stride": (_or_auto(_int), AUTO),
    "scan.n_steps": (_or_auto(_int), AUTO),
    "scan.snake_grid": (_or_auto(_int_tuple(2)), AUTO),
    "scan.p_init": (_int_tuple(2), (0, 0)),
    "tap.block_size": (_int, 4),
    "rope.base": (_float, 10000.0),
    "rope.head_dim": (_int, 96),
    "rope.axis_split": (_int_tuple(3), (32, 32, 32)),
    "fusion.statistic": (_choice(*STATISTICS), "mean"),
    "fusion.ramp": (_or_auto(_int), AUTO),
    "enhancer.kind": (_choice("identity", "upscale"), "identity"),
    "enhancer.scale": (_float, 1.0),
    "source.kind": (_choice("procedural", "flow"), "procedural"),
    "source.pattern": (_choice("texture", "gradient"), "texture"),
    "source.channels": (_int, 3),
    "source.frames": (_int, 3),
    "source.jitter": (_float, 0.01),
    "source.outlier_prob": (_float, 0.25),
    "source.prompt": (_str, "a long scroll landscape"),
    "flow.grid": (_int_tuple(2), (4, 4)),
    "flow.hidden_dim": (_int, 32),
    "flow.iterations": (_int, 300),
    "flow.learning_rate": (_float, 3e-3),
    "flow.batch_size": (_int, 32),
    "flow.sample_steps": (_int, 16),
    "metrics.separation": (_int, 2),
    "metrics.extractor": (_choice("fallback", "external"), "fallback"),
    "metrics.features_dir": (_str, ""),
    "metrics.out_dim": (_int, 64),
    "metrics.external_scores": (_str, ""),
    "io.out_dir": (_str, "out"),
    "io.seed": (_int, 0),
    "io.tiles_dir": (_str, ""),
    "io.save_tiles": (_bool, False),
}

SECTIONS = tuple(dict.fromkeys(k.split(".")[0] for k in SCHEMA))


def read_pairs(text: str, origin: str = "<string>") -> dict:
    """Raw ``key -> value string`` pairs, before type conversion."""
    pairs = {}
    section = ""
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigurationError(f"{origin}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        full = f"{section}.{key}" if section else key
        if full in pairs:
            raise ConfigurationError(f"{origin}:{lineno}: duplicate key", keys=(full,))
        pairs[full] = value
    return pairs


@dataclass(frozen=True)
class PipelineConfig:
    """Fully resolved configuration; ``values`` maps every schema key to a typed value."""

    values: dict

    def __getitem__(self, key):
        return self.values[key]

    @property
    def extent(self) -> tuple[int, int]:
        return self.values["canvas.height"], self.values["canvas.width"]

    @property
    def scale(self) -> float:
        return self.values["enhancer.scale"]

    @property
    def base_extent(self) -> tuple[int, int]:
        s = self.scale
        return round(self.extent[0] / s), round(self.extent[1] / s)

    @property
    def scan(self) -> ScanConfig:
        v = self.values
        return ScanConfig(
            window_len=v["scan.window_len"], spatial_stride=v["scan.spatial_stride"],
            step_stride=v["scan.step_stride"], n_steps=v["scan.n_steps"], p_init=v["scan.p_init"],
            mode=v["scan.mode"], linear_direction=v["scan.direction"],
            snake_grid=v["scan.snake_grid"] if v["scan.mode"] == SNAKE else None,
            window_height=v["scan.window_height"],
        )

    @property
    def rope(self) -> RopeParams:
        v = self.values
        return RopeParams(v["rope.base"], v["rope.head_dim"], v["rope.axis_split"])

    def section(self, name: str) -> dict:
        prefix = name + "."
        return {k[len(prefix):]: val for k, val in self.values.items() if k.startswith(prefix)}


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_config(config: PipelineConfig) -> str:
    """Serialise with one ``[section]`` block per key prefix."""
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        for key, value in config.values.items():
            if key.split(".")[0] == section:
                lines.append(f"{key.split('.', 1)[1]} = {format_value(value)}")
        lines.append("")
    return "\n".join(lines)


def parse_config(path=None, overrides=None, text=None) -> PipelineConfig:
    """Read, type-check, resolve and validate a configuration.

    ``overrides`` (dotted key -> raw value) take precedence over the file.
    """
    pairs = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config {path}: {exc}") from exc
    if text is not None:
        pairs.update(read_pairs(text, str(path or "<string>")))
    pairs.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = sorted(set(pairs) - set(SCHEMA))
    if unknown:
        raise ConfigurationError("unknown configuration keys", keys=unknown)
    values = {}
    for key, (parser, default) in SCHEMA.items():
        values[key] = parser(pairs[key], key) if key in pairs else default
    return resolve(values)


def _resolve_canvas(v):
    h, w, aspect, short = v["canvas.height"], v["canvas.width"], v["canvas.aspect"], v["canvas.short"]
    keys = ("canvas.height", "canvas.width", "canvas.aspect")
    ratio = None if aspect == AUTO else Fraction(aspect.replace(":", "/"))
    if h != AUTO and w != AUTO:
        if ratio is not None and Fraction(w, h) != ratio:
            raise ConfigurationError(f"canvas {w}x{h} does not have aspect {aspect}", keys=keys)
    else:
        ratio = ratio if ratio is not None else Fraction(8, 1)
        if h == AUTO and w == AUTO:
            if ratio >= 1:
                h = short
            else:
                w = short
        if h == AUTO:
            h = w / ratio
        else:
            w = h * ratio
        if Fraction(h).denominator != 1 or Fraction(w).denominator != 1:
            raise ConfigurationError(f"aspect {aspect} does not give an integer canvas", keys=keys)
        h, w = int(h), int(w)
    if min(h, w) < 1 or max(h, w) > MAX_EXTENT:
        raise ConfigurationError(f"canvas {h}x{w} outside 1..{MAX_EXTENT}", keys=keys)
    v["canvas.height"], v["canvas.width"] = h, w
    v["canvas.short"] = min(h, w)
    r = Fraction(w, h)
    v["canvas.aspect"] = f"{r.numerator}:{r.denominator}"


def _derive_steps(extent, window, stride, key):
    span = extent - window
    if span < 0:
        raise ConfigurationError(f"window {window} exceeds canvas extent {extent}", keys=(key,))
    if span % stride:
        raise ConfigurationError(
            f"canvas extent {extent} is unreachable: ({extent} - {window}) is not a multiple of stride {stride}",
            keys=(key, "scan.step_stride"))
    return span // stride + 1


def resolve(values: dict) -> PipelineConfig:
    """Fill ``auto`` keys from the canvas and run cross-field validation."""
    v = dict(values)
    _resolve_canvas(v)
    scale = v["enhancer.scale"]
    if v["enhancer.kind"] == "identity" and scale != 1:
        raise ConfigurationError("identity enhancer requires scale 1", keys=("enhancer.kind", "enhancer.scale"))
    if scale < 1:
        raise ConfigurationError(f"enhancer scale must be >= 1, got {scale}", keys=("enhancer.scale",))
    base = []
    for key, ext in (("canvas.height", v["canvas.height"]), ("canvas.width", v["canvas.width"])):
        b = ext / scale
        if abs(b - round(b)) > 1e-9:
            raise ConfigurationError(f"canvas extent {ext} is not divisible by enhancer scale {scale}",
                                     keys=(key, "enhancer.scale"))
        base.append(int(round(b)))
    base_h, base_w = base
    short = min(base_h, base_w)

    snake = v["scan.mode"] == SNAKE
    if v["scan.direction"] == AUTO:
        v["scan.direction"] = (0, 1) if base_w >= base_h else (1, 0)
    if v["scan.window_len"] == AUTO:
        v["scan.window_len"] = short // 2 if snake else short
    if v["scan.window_height"] == AUTO:
        v["scan.window_height"] = v["scan.window_len"]
    if v["scan.spatial_stride"] == AUTO:
        v["scan.spatial_stride"] = max(1, v["scan.window_len"] // 2)
    if v["scan.step_stride"] == AUTO:
        v["scan.step_stride"] = v["scan.spatial_stride"]
    win_h, win_w = v["scan.window_height"], v["scan.window_len"]
    step = v["scan.step_stride"]
    if step <= 0 or win_h <= 0 or win_w <= 0:
        raise ConfigurationError("window sizes and strides must be positive",
                                 keys=("scan.window_len", "scan.window_height", "scan.step_stride"))
    if v["scan.spatial_stride"] > win_w:
        raise ConfigurationError(
            f"spatial stride {v['scan.spatial_stride']} exceeds window length {win_w}, leaving gaps",
            keys=("scan.spatial_stride", "scan.window_len"))
    p_h, p_w = v["scan.p_init"]
    if snake:
        if v["scan.snake_grid"] == AUTO:
            rows = _derive_steps(base_h - p_h, win_h, step, "scan.window_height")
            cols = _derive_steps(base_w - p_w, win_w, step, "scan.window_len")
            v["scan.snake_grid"] = (rows, cols)
        if v["scan.n_steps"] == AUTO:
            v["scan.n_steps"] = v["scan.snake_grid"][0] * v["scan.snake_grid"][1]
    else:
        if v["scan.snake_grid"] == AUTO:
            v["scan.snake_grid"] = (0, 0)
        if v["scan.n_steps"] == AUTO:
            dh, dw = v["scan.direction"]
            if dw:
                v["scan.n_steps"] = _derive_steps(base_w - p_w, win_w, step, "scan.window_len")
            else:
                v["scan.n_steps"] = _derive_steps(base_h - p_h, win_h, step, "scan.window_height")

    config = PipelineConfig(v)
    scan = config.scan  # ScanConfig validates stride vs length, snake grid vs N, direction

    if v["fusion.ramp"] != AUTO:
        ramp = v["fusion.ramp"]
        if ramp < 0 or ramp >= min(win_h, win_w):
            raise ConfigurationError(f"ramp width {ramp} must be in [0, window size)",
                                     keys=("fusion.ramp", "scan.window_len"))
    config.rope  # validates axis split
    _check_positive(v, ("tap.block_size", "source.channels", "source.frames", "flow.hidden_dim",
                        "flow.iterations", "flow.batch_size", "flow.sample_steps", "metrics.out_dim"))
    if v["source.channels"] not in (1, 3):
        raise ConfigurationError("source.channels must be 1 or 3", keys=("source.channels",))
    if not 0 <= v["source.outlier_prob"] <= 1 or v["source.jitter"] < 0:
        raise ConfigurationError("source jitter must be >= 0 and outlier_prob in [0, 1]",
                                 keys=("source.jitter", "source.outlier_prob"))
    if v["metrics.separation"] < 2:
        raise ConfigurationError("metrics.separation must be >= 2", keys=("metrics.separation",))
    if v["source.kind"] == "flow":
        gh, gw = v["flow.grid"]
        if gh <= 0 or gw <= 0 or win_h % gh or win_w % gw or win_h // gh != win_w // gw:
            raise ConfigurationError(
                f"window {win_h}x{win_w} must split into square cells on the {gh}x{gw} token grid",
                keys=("flow.grid", "scan.window_len", "scan.window_height"))
        if step % (win_w // gw):
            raise ConfigurationError("step stride must be a whole number of tokens",
                                     keys=("scan.step_stride", "flow.grid"))

    trajectory = plan(scan)
    reach_h, reach_w = trajectory.reach()
    if reach_h > base_h or reach_w > base_w:
        raise ConfigurationError(
            f"trajectory reaches {reach_h}x{reach_w}, beyond the {base_h}x{base_w} base canvas",
            keys=("scan.n_steps", "scan.step_stride", "canvas.width", "canvas.height"))
    report = coverage_report(trajectory, (base_h, base_w))
    if not report.complete:
        raise CoverageError(f"trajectory leaves cells uncovered: {report.summary()}", report)
    return config


def _check_positive(v, keys):
    for key in keys:
        if v[key] < 1:
            raise ConfigurationError(f"{key} must be positive", keys=(key,))

"""Command-line frontend.

Every subcommand reads an optional TOML config (``--config``), applies flag
overrides on top of it, and writes CSV or JSON to ``--out`` (stdout by
default). The effective config is echoed into each output: as a
``# config = {...}`` comment line in CSV, as the ``config`` key in JSON.

Failures exit nonzero and print one JSON object on stderr whose ``error``
field names the category (``usage``, ``invalid-parameter``, ``input``,
``fit-failure``, ``numeric``, ``io``).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import re
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np

from . import __version__
from .bounds import helstrom_bound, heterodyne_limit
from .calibration import (
    FitError,
    FringeSample,
    field_ratio_at,
    fit_fringe,
    hwp_angle_for_ratio,
    state_prep_diagnostic,
    visibility_from_extrema,
)
from .model import ReceiverConfig, exact_error_probability
from .montecarlo import DEFAULT_SEED, simulate
from .optimize import DEFAULT_SPLIT, curve, optimize_displacements, optimize_splitting

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

THREADS_ENV = "QPSK_RECEIVER_THREADS"
DEFAULT_GRID = {"start": 0.1, "stop": 20.0, "num": 100, "spacing": "log"}
SWEEP_AXES = ("visibility", "efficiency", "mean_photon_number")
SWEEP_CLIP_LOG10 = 1.0

EXIT_CODES = {
    "usage": 2,
    "invalid-parameter": 3,
    "input": 4,
    "fit-failure": 5,
    "numeric": 6,
    "io": 7,
}


class CliError(Exception):
    def __init__(self, category: str, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.category = category
        self.diagnostics = diagnostics or {}


# --- configuration ----------------------------------------------------------

_TOP_KEYS = {"mean_photon_number", "amplitude", "seed", "threads"}
_SECTION_KEYS = {
    "grid": {"start", "stop", "num", "spacing", "values"},
    "receiver": {"split", "efficiency", "dark_mean", "visibility"},
    "displacement": {"policy", "ratios"},
    "optimize": {"search", "symmetric"},
    "simulate": {"trials"},
    "sweep": {"axes"},
    "calibrate": {
        "data", "arm", "reference_phase", "normalization", "threshold", "field_ratio", "rel_phase",
    },  # fmt: skip
    "output": {"path", "format"},
}


@dataclass
class RunConfig:
    """Fully resolved settings for one command; ``to_dict`` is what gets echoed."""

    command: str
    mean_photon_numbers: list[float] | None = None
    amplitude: float | None = None
    split: tuple[float, float, float] = DEFAULT_SPLIT
    efficiency: tuple[float, float, float] = (1.0, 1.0, 1.0)
    dark_mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    visibility: tuple[float, float, float] = (1.0, 1.0, 1.0)
    beta_policy: str = "optimized"
    ratios: tuple[float, float, float] = (1.0, 1.0, 1.0)
    search: str = "branch"
    symmetric: bool = True
    trials: int | None = None
    seed: int = DEFAULT_SEED
    sweep_axes: list[dict] = field(default_factory=list)
    calibrate: dict = field(default_factory=dict)
    threads: int = 1
    out: str | None = None
    format: str = "csv"

    @property
    def signal_points(self) -> list[float]:
        """Mean photon numbers to evaluate, whichever way the signal was given."""
        if self.amplitude is not None:
            return [self.amplitude**2]
        return list(self.mean_photon_numbers or [])

    def receiver(self, mean_photon_number: float, **overrides) -> ReceiverConfig:
        params = {
            "split": self.split,
            "ratios": self.ratios,
            "efficiency": self.efficiency,
            "dark_mean": self.dark_mean,
            "visibility": self.visibility,
        }
        params.update(overrides)
        return ReceiverConfig.build(mean_photon_number, **params)

    def to_dict(self) -> dict:
        d = {"command": self.command}
        if self.amplitude is not None:
            d["amplitude"] = self.amplitude
        elif self.mean_photon_numbers is not None:
            d["mean_photon_number"] = self.mean_photon_numbers
        if self.command != "bounds":
            d["receiver"] = {
                "split": list(self.split),
                "efficiency": list(self.efficiency),
                "dark_mean": list(self.dark_mean),
                "visibility": list(self.visibility),
            }
        if self.command in ("error-curve", "simulate"):
            d["displacement"] = {"policy": self.beta_policy, "ratios": list(self.ratios)}
        if self.command == "optimize":
            d["optimize"] = {"search": self.search, "symmetric": self.symmetric}
        if self.command == "simulate":
            d["simulate"] = {"trials": self.trials}
            d["seed"] = self.seed
        if self.command == "sweep":
            d["sweep"] = {"axes": self.sweep_axes}
        if self.command == "calibrate":
            d["calibrate"] = self.calibrate
        d["threads"] = self.threads
        return d


def load_toml(path: str) -> dict:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise CliError("io", f"cannot read config {path!r}: {exc.strerror}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise CliError("input", f"config {path!r}: {exc}") from exc
    for key, value in data.items():
        if key in _SECTION_KEYS:
            if not isinstance(value, dict):
                raise CliError("invalid-parameter", f"config: [{key}] must be a table")
            unknown = set(value) - _SECTION_KEYS[key]
            if unknown:
                raise CliError(
                    "invalid-parameter", f"config: unknown key(s) in [{key}]: {sorted(unknown)}"
                )
        elif key not in _TOP_KEYS:
            raise CliError("invalid-parameter", f"config: unknown key {key!r}")
    return data


def expand_grid(spec: dict, name: str = "grid") -> list[float]:
    """Turn ``{values}`` or ``{start, stop, num, spacing}`` into a list of floats."""
    if "values" in spec:
        extra = set(spec) - {"values", "name"}
        if extra:
            raise CliError("invalid-parameter", f"{name}: 'values' excludes {sorted(extra)}")
        values = spec["values"]
        if not isinstance(values, list) or not values:
            raise CliError("invalid-parameter", f"{name}.values must be a non-empty list")
        return [_number(f"{name}.values", v) for v in values]
    try:
        start = _number(f"{name}.start", spec["start"])
        stop = _number(f"{name}.stop", spec["stop"])
        num = spec["num"]
    except KeyError as exc:
        raise CliError("invalid-parameter", f"{name}: missing {exc.args[0]!r}") from None
    if not isinstance(num, int) or isinstance(num, bool) or num < 1:
        raise CliError("invalid-parameter", f"{name}.num must be a positive integer, got {num!r}")
    spacing = spec.get("spacing", "linear")
    if spacing == "log":
        if start <= 0 or stop <= 0:
            raise CliError("invalid-parameter", f"{name}: log spacing needs start, stop > 0")
        return [float(v) for v in np.geomspace(start, stop, num)]
    if spacing == "linear":
        return [float(v) for v in np.linspace(start, stop, num)]
    raise CliError("invalid-parameter", f"{name}.spacing must be 'log' or 'linear', got {spacing!r}")


def _number(name: str, value) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise CliError("invalid-parameter", f"{name} must be a number, got {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise CliError("invalid-parameter", f"{name} must be finite, got {value!r}")
    return value


def _per_arm(name: str, value) -> tuple[float, float, float]:
    if isinstance(value, (list, tuple)):
        if len(value) != 3:
            raise CliError("invalid-parameter", f"{name} needs 1 or 3 values, got {len(value)}")
        return tuple(_number(name, v) for v in value)
    v = _number(name, value)
    return (v, v, v)


def parse_axis(text: str) -> dict:
    """``NAME=START:STOP:NUM[:log|linear]`` or ``NAME=V1,V2,...``."""
    name, sep, spec = text.partition("=")
    name = name.strip().replace("-", "_")
    if not sep or not spec:
        raise CliError("usage", f"--axis expects NAME=START:STOP:NUM or NAME=V1,V2,..., got {text!r}")
    try:
        if ":" in spec:
            parts = spec.split(":")
            if len(parts) not in (3, 4):
                raise ValueError
            grid = {"start": float(parts[0]), "stop": float(parts[1]), "num": int(parts[2])}
            if len(parts) == 4:
                grid["spacing"] = parts[3]
        else:
            grid = {"values": [float(v) for v in spec.split(",")]}
    except ValueError:
        raise CliError("usage", f"--axis: cannot parse {text!r}") from None
    return {"name": name, **grid}


def _resolve_axis(raw: dict, index: int) -> dict:
    if not isinstance(raw, dict) or "name" not in raw:
        raise CliError("invalid-parameter", f"sweep.axes[{index}] needs a 'name'")
    name = raw["name"]
    if name not in SWEEP_AXES:
        raise CliError(
            "invalid-parameter", f"sweep.axes[{index}].name must be one of {SWEEP_AXES}, got {name!r}"
        )
    spec = {k: v for k, v in raw.items() if k != "name"}
    if name == "mean_photon_number" and "values" not in spec:
        spec.setdefault("spacing", "log")
    values = expand_grid(spec, f"sweep.axes[{index}]")
    if len(values) < 2:
        raise CliError("invalid-parameter", f"sweep axis {name!r} needs at least 2 points")
    return {"name": name, "values": values}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merge the config file (if any) with flags; flags win."""
    file = load_toml(args.config) if args.config else {}
    section = lambda key: dict(file.get(key, {}))  # noqa: E731
    cfg = RunConfig(command=args.command)

    # signal: amplitude, explicit values, or a grid. Any signal flag replaces the
    # file's signal settings as a whole.
    flag_signal = [x for x in ("amplitude", "n", "n_range") if getattr(args, x, None) is not None]
    if len(flag_signal) > 1:
        raise CliError("usage", "give only one of --amplitude, --n, --n-range")
    if flag_signal:
        if args.amplitude is not None:
            cfg.amplitude = _number("amplitude", args.amplitude)
        elif args.n is not None:
            cfg.mean_photon_numbers = list(args.n)
        else:
            start, stop, num = args.n_range
            num_int = int(num)
            if num_int != num:
                raise CliError("usage", f"--n-range NUM must be an integer, got {num!r}")
            grid = {"start": start, "stop": stop, "num": num_int, "spacing": args.spacing or "log"}
            cfg.mean_photon_numbers = expand_grid(grid, "--n-range")
    else:
        given = [k for k in ("amplitude", "mean_photon_number", "grid") if k in file]
        if len(given) > 1:
            raise CliError(
                "invalid-parameter", f"config: give only one of amplitude, mean_photon_number, [grid]; got {given}"
            )
        if "amplitude" in file:
            cfg.amplitude = _number("amplitude", file["amplitude"])
        elif "mean_photon_number" in file:
            v = file["mean_photon_number"]
            values = v if isinstance(v, list) else [v]
            cfg.mean_photon_numbers = [_number("mean_photon_number", x) for x in values]
        elif "grid" in file:
            grid = section("grid")
            if "values" not in grid:
                grid.setdefault("spacing", "log")
            if args.spacing:
                grid["spacing"] = args.spacing
            cfg.mean_photon_numbers = expand_grid(grid)
    if cfg.amplitude is not None and cfg.amplitude < 0:
        raise CliError("invalid-parameter", f"amplitude must be >= 0, got {cfg.amplitude!r}")
    for n in cfg.mean_photon_numbers or []:
        if n < 0:
            raise CliError("invalid-parameter", f"mean_photon_number must be >= 0, got {n!r}")

    receiver = section("receiver")
    for key in ("split", "efficiency", "dark_mean", "visibility"):
        flag = getattr(args, key, None)
        value = flag if flag is not None else receiver.get(key)
        if value is not None:
            if isinstance(value, list) and len(value) == 1:
                value = value[0]
            setattr(cfg, key, _per_arm(f"receiver.{key}", value))

    displacement = section("displacement")
    cfg.beta_policy = getattr(args, "beta", None) or displacement.get("policy", "optimized")
    if cfg.beta_policy not in ("optimized", "fixed"):
        raise CliError(
            "invalid-parameter", f"displacement.policy must be 'optimized' or 'fixed', got {cfg.beta_policy!r}"
        )
    ratios = getattr(args, "ratios", None)
    ratios = ratios if ratios is not None else displacement.get("ratios")
    if ratios is not None:
        if isinstance(ratios, list) and len(ratios) == 1:
            ratios = ratios[0]
        cfg.ratios = _per_arm("displacement.ratios", ratios)
        if min(cfg.ratios) < 0:
            raise CliError("invalid-parameter", f"displacement.ratios must be >= 0, got {cfg.ratios}")

    opt = section("optimize")
    cfg.search = getattr(args, "search", None) or opt.get("search", "branch")
    if cfg.search not in ("branch", "global"):
        raise CliError("invalid-parameter", f"optimize.search must be 'branch' or 'global', got {cfg.search!r}")
    asym = getattr(args, "asymmetric", False)
    cfg.symmetric = False if asym else bool(opt.get("symmetric", True))

    trials = getattr(args, "trials", None)
    cfg.trials = trials if trials is not None else section("simulate").get("trials")
    seed = args.seed if args.seed is not None else file.get("seed", DEFAULT_SEED)
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
        raise CliError("invalid-parameter", f"seed must be an unsigned 64-bit integer, got {seed!r}")
    cfg.seed = seed

    if args.command == "sweep":
        axes = [parse_axis(a) for a in args.axis] if args.axis else section("sweep").get("axes", [])
        if len(axes) != 2:
            raise CliError("usage", f"sweep needs exactly 2 axes, got {len(axes)}")
        cfg.sweep_axes = [_resolve_axis(a, i) for i, a in enumerate(axes)]
        if cfg.sweep_axes[0]["name"] == cfg.sweep_axes[1]["name"]:
            raise CliError("usage", "sweep axes must differ")

    if args.command == "calibrate":
        cal = section("calibrate")
        for key in ("data", "arm", "reference_phase", "normalization", "threshold", "field_ratio", "rel_phase"):
            flag = getattr(args, key, None)
            if flag is not None:
                cal[key] = flag
        if "data" not in cal:
            raise CliError("usage", "calibrate needs a fringe data file")
        cal.setdefault("arm", 1)
        cal.setdefault("reference_phase", 0.0)
        cal.setdefault("normalization", "pass-through")
        cal.setdefault("threshold", 0.02)
        if cal["arm"] not in (1, 2, 3):
            raise CliError("invalid-parameter", f"calibrate.arm must be 1, 2 or 3, got {cal['arm']!r}")
        cfg.calibrate = cal

    threads = args.threads if args.threads is not None else file.get("threads")
    if threads is None:
        env = os.environ.get(THREADS_ENV)
        try:
            threads = int(env) if env else 1
        except ValueError:
            raise CliError("invalid-parameter", f"{THREADS_ENV} must be an integer, got {env!r}") from None
    if isinstance(threads, bool) or not isinstance(threads, int) or threads < 1:
        raise CliError("invalid-parameter", f"threads must be a positive integer, got {threads!r}")
    cfg.threads = threads

    output = section("output")
    cfg.out = args.out if args.out is not None else output.get("path")
    cfg.format = args.format or output.get("format", "csv")
    if cfg.format not in ("csv", "json"):
        raise CliError("invalid-parameter", f"output.format must be 'csv' or 'json', got {cfg.format!r}")
    return cfg


# --- output -----------------------------------------------------------------


def format_value(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def render_csv(config: dict, columns: Sequence[str], rows: Sequence[dict], extra: dict | None = None) -> str:
    buf = io.StringIO()
    buf.write(f"# config = {json.dumps(config, sort_keys=True)}\n")
    for key, value in (extra or {}).items():
        buf.write(f"# {key} = {json.dumps(value, sort_keys=True)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_value(row[c]) for c in columns])
    return buf.getvalue()


def render_json(config: dict, payload: dict) -> str:
    return json.dumps({"config": config, **payload}, indent=2, sort_keys=True) + "\n"


def read_csv_table(text: str) -> tuple[dict, list[dict]]:
    """Parse CSV produced by this tool back into (header comments, rows).

    Cells that parse as numbers come back as floats, others as strings.
    """
    header, body = {}, []
    for line in text.splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].partition("=")
            header[key.strip()] = json.loads(value)
        elif line:
            body.append(line)
    rows = []
    reader = csv.DictReader(body)
    for rec in reader:
        row = {}
        for k, v in rec.items():
            try:
                row[k] = float(v)
            except ValueError:
                row[k] = v
        rows.append(row)
    return header, rows


def emit(cfg: RunConfig, text: str) -> None:
    if cfg.out is None or cfg.out == "-":
        sys.stdout.write(text)
        return
    try:
        with open(cfg.out, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise CliError("io", f"cannot write {cfg.out!r}: {exc.strerror}") from exc


def _output(cfg: RunConfig, columns: Sequence[str], rows: list[dict], extra: dict | None = None) -> str:
    config = cfg.to_dict()
    if cfg.format == "json":
        return render_json(config, {**(extra or {}), "rows": rows})
    return render_csv(config, columns, rows, extra)


# --- commands ---------------------------------------------------------------


def _require_points(cfg: RunConfig, default_grid: bool) -> list[float]:
    if cfg.amplitude is None and cfg.mean_photon_numbers is None and default_grid:
        cfg.mean_photon_numbers = expand_grid(dict(DEFAULT_GRID))
    points = cfg.signal_points
    if not points:
        raise CliError("usage", f"{cfg.command} needs --amplitude, --n or --n-range")
    return points


def _strictly_increasing(points: list[float]) -> None:
    if any(b <= a for a, b in zip(points, points[1:])):
        raise CliError("invalid-parameter", "mean_photon_number grid must be strictly increasing")


def cmd_bounds(cfg: RunConfig) -> str:
    points = _require_points(cfg, default_grid=True)
    rows = [{"n": n, "helstrom": helstrom_bound(n), "heterodyne": heterodyne_limit(n)} for n in points]
    return _output(cfg, ["n", "helstrom", "heterodyne"], rows)


_ARM_COLUMNS = [f"{p}{i}" for p in ("ratio", "R", "beta") for i in (1, 2, 3)]


def _arm_fields(ratios, split, betas) -> dict:
    row = {}
    for i in range(3):
        row[f"ratio{i + 1}"] = float(ratios[i])
        row[f"R{i + 1}"] = float(split[i])
        row[f"beta{i + 1}"] = float(betas[i])
    return row


def cmd_error_curve(cfg: RunConfig) -> str:
    points = _require_points(cfg, default_grid=True)
    _strictly_increasing(points)
    template = cfg.receiver(1.0)
    result = curve(points, template, optimize=cfg.beta_policy == "optimized")
    rows = [
        {
            "n": p.mean_photon_number,
            "p_error": p.p_error,
            "p_het": heterodyne_limit(p.mean_photon_number),
            **_arm_fields(p.ratios, p.split, p.beta_mags),
        }
        for p in result
    ]
    return _output(cfg, ["n", "p_error", "p_het", *_ARM_COLUMNS], rows)


def _optimize_point(cfg: RunConfig, n: float) -> dict:
    if n == 0:
        raise CliError("invalid-parameter", "optimize needs mean_photon_number > 0")
    alphabet = cfg.receiver(n).alphabet
    res = optimize_splitting(
        alphabet, cfg.efficiency, cfg.dark_mean, cfg.visibility, symmetric=cfg.symmetric, search=cfg.search
    )
    return {"n": n, "p_error": res.p_error, "p_het": heterodyne_limit(n), **_arm_fields(res.ratios, res.split, res.beta_mags)}


def _pool_map(fn, items: list, threads: int) -> list:
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def cmd_optimize(cfg: RunConfig) -> str:
    points = _require_points(cfg, default_grid=True)
    rows = _pool_map(lambda n: _optimize_point(cfg, n), points, cfg.threads)
    return _output(cfg, ["n", "p_error", "p_het", *_ARM_COLUMNS], rows)


def cmd_simulate(cfg: RunConfig) -> str:
    points = _require_points(cfg, default_grid=False)
    if len(points) != 1:
        raise CliError("usage", f"simulate needs a single mean photon number, got {len(points)}")
    if cfg.trials is None:
        raise CliError("usage", "simulate needs --trials")
    if isinstance(cfg.trials, bool) or not isinstance(cfg.trials, int) or cfg.trials < 1:
        raise CliError("usage", f"trials must be an integer >= 1, got {cfg.trials!r}")
    n = points[0]
    receiver = cfg.receiver(n)
    if cfg.beta_policy == "optimized" and n > 0:
        receiver = optimize_displacements(receiver).apply(receiver)
    report = simulate(receiver, cfg.trials, cfg.seed, workers=cfg.threads)
    row = report.to_dict()
    confusion = row.pop("per_state_confusion")
    row.update(
        n=n,
        p_error_exact=exact_error_probability(receiver),
        **{f"beta{i + 1}": float(b) for i, b in enumerate(receiver.betas)},
    )
    if cfg.format == "json":
        return render_json(cfg.to_dict(), {"report": {**row, "per_state_confusion": confusion}})
    for k in range(4):
        for j in range(4):
            row[f"c{k}{j}"] = confusion[k][j]
    columns = [
        "n", "trials", "errors", "p_error_estimate", "std_error", "p_error_exact", "seed", "rng",
        "beta1", "beta2", "beta3", *[f"c{k}{j}" for k in range(4) for j in range(4)],
    ]  # fmt: skip
    return render_csv(cfg.to_dict(), columns, [row])


def sweep_cell(cfg: RunConfig, values: dict) -> dict:
    """Optimized-displacement error ratio to the heterodyne limit for one cell."""
    n = values.get("mean_photon_number", cfg.signal_points[0] if cfg.signal_points else None)
    overrides = {k: values[k] for k in ("visibility", "efficiency") if k in values}
    if not n or n <= 0:
        raise CliError("invalid-parameter", f"sweep cell needs mean_photon_number > 0, got {n!r}")
    receiver = cfg.receiver(n, **overrides)
    p = optimize_displacements(receiver).p_error
    p_het = heterodyne_limit(n)
    with np.errstate(divide="ignore"):
        log_ratio = float(np.log10(p / p_het)) if p > 0 else -math.inf
    clipped = not (math.isfinite(log_ratio) and log_ratio <= SWEEP_CLIP_LOG10)
    return {"p_error": p, "p_het": p_het, "log10_ratio": log_ratio, "clipped": clipped}


def cmd_sweep(cfg: RunConfig) -> str:
    (ax1, ax2) = cfg.sweep_axes
    if "mean_photon_number" not in (ax1["name"], ax2["name"]):
        points = cfg.signal_points
        if len(points) != 1:
            raise CliError("usage", "sweep needs a single fixed mean photon number when it is not an axis")
    cells = [{ax1["name"]: a, ax2["name"]: b} for a in ax1["values"] for b in ax2["values"]]
    results = _pool_map(lambda c: sweep_cell(cfg, c), cells, cfg.threads)
    rows = [{**c, **r} for c, r in zip(cells, results)]
    columns = [ax1["name"], ax2["name"], "p_error", "p_het", "log10_ratio", "clipped"]
    return _output(cfg, columns, rows)


# calibration input


_PI_LABEL = re.compile(r"^([+-]?\d*\.?\d*)\s*\*?\s*pi\s*(?:/\s*(\d+(?:\.\d*)?))?$")
CALIBRATION_COLUMNS = ("angle_deg", "intensity", "phase_label")


def parse_phase_label(label: str) -> float:
    """Input phase in radians from ``0``, ``pi/2``, ``3pi/2``, ``-pi/2``... or plain degrees."""
    text = label.strip().lower().replace("π", "pi")
    m = _PI_LABEL.match(text)
    if m:
        coef = m.group(1)
        k = 1.0 if coef in ("", "+") else -1.0 if coef == "-" else float(coef)
        return k * math.pi / (float(m.group(2)) if m.group(2) else 1.0)
    return math.radians(float(text))


def read_fringe_csv(path: str) -> list[FringeSample]:
    try:
        with open(path, newline="") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise CliError("io", f"cannot read {path!r}: {exc.strerror}") from exc
    numbered = [(i + 1, line) for i, line in enumerate(lines) if line.strip() and not line.lstrip().startswith("#")]
    if not numbered:
        raise CliError("input", f"{path}: no data")
    reader = csv.DictReader(line for _, line in numbered)
    header = [h.strip() for h in reader.fieldnames or []]
    reader.fieldnames = header
    header_line = numbered[0][0]
    for col in CALIBRATION_COLUMNS:
        if col not in header:
            raise CliError("input", f"{path}:{header_line}: missing column {col!r}", {"line": header_line, "column": col})
    samples = []
    for (lineno, _), rec in zip(numbered[1:], reader):
        values = {}
        for col, conv in (("angle_deg", float), ("intensity", float), ("phase_label", parse_phase_label)):
            raw = rec.get(col)
            try:
                if raw is None:
                    raise ValueError
                values[col] = conv(raw.strip())
                if col != "phase_label" and not math.isfinite(values[col]):
                    raise ValueError
            except ValueError:
                raise CliError(
                    "input", f"{path}:{lineno}: bad {col!r} value {raw!r}", {"line": lineno, "column": col}
                ) from None
        try:
            samples.append(FringeSample(values["angle_deg"], values["intensity"], values["phase_label"]))
        except ValueError as exc:
            raise CliError("input", f"{path}:{lineno}: {exc}", {"line": lineno, "column": "intensity"}) from None
    return samples


def _phase_intensities_at(samples: list[FringeSample], angle_deg: float, reference_phase: float) -> dict:
    """Per-phase sinusoid fits of the raw data, evaluated at ``angle_deg``."""
    by_phase: dict[int, list[FringeSample]] = {}
    for s in samples:
        quarter = (s.input_phase - reference_phase) / (math.pi / 2)
        k = round(quarter)
        if abs(quarter - k) < 1e-6:
            by_phase.setdefault(k % 4, []).append(s)
    out = {}
    t0 = math.radians(4 * angle_deg)
    for k, group in by_phase.items():
        theta = np.radians([s.hwp_angle for s in group])
        if len(np.unique(theta)) < 3:
            continue
        basis = np.column_stack([np.ones(len(theta)), np.cos(4 * theta), np.sin(4 * theta)])
        coef, *_ = np.linalg.lstsq(basis, [s.intensity for s in group], rcond=None)
        out[k] = max(float(coef[0] + coef[1] * math.cos(t0) + coef[2] * math.sin(t0)), 0.0)
    return out


def cmd_calibrate(cfg: RunConfig) -> str:
    cal = cfg.calibrate
    if cfg.amplitude is None and cfg.mean_photon_numbers is None:
        cfg.mean_photon_numbers = [1.0, 2.0, 3.0]
    targets = cfg.signal_points
    _strictly_increasing(targets)
    if min(targets) <= 0:
        raise CliError("invalid-parameter", "calibration targets need mean_photon_number > 0")

    samples = read_fringe_csv(cal["data"])
    ref = float(cal["reference_phase"])
    fit = fit_fringe(
        samples,
        reference_phase=ref,
        normalization=cal["normalization"],
        field_ratio=cal.get("field_ratio"),
        rel_phase=cal.get("rel_phase"),
    )
    fit_report = asdict(fit)

    # in units of the pass-through level so the threshold is dimensionless
    at_null = {k: v / fit.scale for k, v in _phase_intensities_at(samples, fit.nulling_angle, ref).items()}
    if 0 in at_null and 2 in at_null and at_null[2] > 0:
        lo, hi = sorted((at_null[0], at_null[2]))
        fit_report["visibility_extrema"] = visibility_from_extrema(lo, hi)
    state_prep = None
    if len(at_null) == 4:
        report = state_prep_diagnostic(
            {ref + k * math.pi / 2: v for k, v in at_null.items()},
            reference_phase=ref,
            threshold=float(cal["threshold"]),
        )
        state_prep = asdict(report)

    arm = int(cal["arm"]) - 1
    points = curve(targets, cfg.receiver(1.0), optimize=True)
    rows = []
    for p in points:
        s_target = math.sqrt(p.ratios[arm])
        theta = hwp_angle_for_ratio(fit, s_target)
        rows.append(
            {
                "n": p.mean_photon_number,
                "ratio": p.ratios[arm],
                "S": s_target,
                "theta_deg": theta,
                "field_ratio_check": field_ratio_at(fit, theta),
                "normalized_intensity": float(fit.normalized_intensity(theta)),
            }
        )
    extra = {"fit": fit_report, "state_prep": state_prep}
    columns = ["n", "ratio", "S", "theta_deg", "field_ratio_check", "normalized_intensity"]
    return _output(cfg, columns, rows, extra)


COMMANDS = {
    "bounds": cmd_bounds,
    "error-curve": cmd_error_curve,
    "optimize": cmd_optimize,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "calibrate": cmd_calibrate,
}


# --- argument parsing -------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML config file; flags override its values")
    common.add_argument("--out", help="output path (default: stdout)")
    common.add_argument("--format", choices=("csv", "json"))
    common.add_argument("--seed", type=int, help="Monte Carlo seed (unsigned 64-bit)")
    common.add_argument("--threads", type=int, help=f"worker threads (env {THREADS_ENV})")

    signal = _Parser(add_help=False)
    signal.add_argument("--amplitude", type=float, help="coherent amplitude |alpha|")
    signal.add_argument("--n", type=float, nargs="+", metavar="N", help="mean photon numbers")
    signal.add_argument("--n-range", type=float, nargs=3, metavar=("START", "STOP", "NUM"))
    signal.add_argument("--spacing", choices=("log", "linear"), help="spacing for --n-range")

    receiver = _Parser(add_help=False)
    for name, help_text in (
        ("split", "split ratios R_i"),
        ("efficiency", "detection efficiency eta"),
        ("dark-mean", "dark-count mean nu"),
        ("visibility", "interference visibility xi"),
    ):
        receiver.add_argument(f"--{name}", type=float, nargs="+", metavar="X", help=f"{help_text} (1 or 3 values)")

    displacement = _Parser(add_help=False)
    displacement.add_argument("--beta", choices=("optimized", "fixed"), help="displacement policy")
    displacement.add_argument(
        "--ratios", type=float, nargs="+", metavar="X", help="fixed |beta|^2/(R|alpha|^2) per arm"
    )

    parser = _Parser(prog="qpsk-receiver", description="QPSK photon-counting receiver model")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("bounds", parents=[common, signal], help="Helstrom and heterodyne limits")
    sub.add_parser(
        "error-curve", parents=[common, signal, receiver, displacement], help="error probability vs <n>"
    )
    p = sub.add_parser("optimize", parents=[common, signal, receiver], help="joint split/displacement optimum")
    p.add_argument("--search", choices=("branch", "global"))
    p.add_argument("--asymmetric", action="store_true", help="let R1 and R3 differ")
    p = sub.add_parser("simulate", parents=[common, signal, receiver, displacement], help="Monte Carlo run")
    p.add_argument("--trials", type=int)
    p = sub.add_parser("sweep", parents=[common, signal, receiver], help="log10(P_E/P_het) over two axes")
    p.add_argument(
        "--axis",
        action="append",
        metavar="NAME=SPEC",
        help="NAME=START:STOP:NUM[:log|linear] or NAME=V1,V2,...; give twice",
    )
    p = sub.add_parser("calibrate", parents=[common, signal, receiver], help="wave-plate calibration")
    p.add_argument("data", nargs="?", help="fringe CSV with columns angle_deg,intensity,phase_label")
    p.add_argument("--arm", type=int, choices=(1, 2, 3))
    p.add_argument("--reference-phase", type=float, help="input phase (rad) gamma refers to")
    p.add_argument("--normalization", choices=("pass-through", "input"))
    p.add_argument("--threshold", type=float, help="state-preparation tolerance")
    p.add_argument("--field-ratio", type=float, help="hold f fixed")
    p.add_argument("--rel-phase", type=float, help="hold gamma fixed (rad)")
    return parser


def _report_error(category: str, message: str, diagnostics: dict | None = None) -> int:
    payload: dict[str, Any] = {"error": category, "message": message}
    if diagnostics:
        payload["diagnostics"] = diagnostics
    sys.stderr.write(json.dumps(payload, default=str) + "\n")
    return EXIT_CODES[category]


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        emit(cfg, COMMANDS[cfg.command](cfg))
    except CliError as exc:
        return _report_error(exc.category, str(exc), exc.diagnostics)
    except FitError as exc:
        return _report_error("fit-failure", str(exc), exc.diagnostics)
    except ArithmeticError as exc:
        return _report_error("numeric", str(exc))
    except ValueError as exc:
        return _report_error("invalid-parameter", str(exc))
    except OSError as exc:
        return _report_error("io", str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())

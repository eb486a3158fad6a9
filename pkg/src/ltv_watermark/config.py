"""Scenario configuration files.

INI-style sections with JSON values for lists and matrices (row-major nested
arrays).  Every time-valued entry is in seconds; conversion to steps happens
here and nowhere else.

    [scenario]      dt, duration, realization
    [trajectory]    speed_mean, speed_amplitude, speed_period,
                    heading_amplitude, heading_period, speed_floor
    [control]       q_diag, r_diag                       (optional)
    [noise]         process_base, measurement_base, watermark, noise_floor
    [detector]      window, false_alarm_period, normalization
    [attack]        mode, start, alpha, omega, zeta     (optional)
    [run]           seed, runs, detect_runs, out        (optional)
    [validation]    replications, sample_sizes, wishart_window,
                    wishart_windows                      (optional)
"""

from __future__ import annotations

import configparser
import hashlib
import json
import math
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .synthesis import CarParams

ATTACK_MODES = ("none", "replay", "custom")
NORMALIZATIONS = ("analytic", "ensemble", "lti")
REPLAY_PRESET = "replay-preset"

REQUIRED = ("scenario", "trajectory", "noise", "detector")


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is 1-based when known."""

    def __init__(self, message, path=None, line=None):
        self.path, self.line = path, line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line else f"{path}: "
        super().__init__(where + message)


@dataclass(frozen=True)
class AttackSpec:
    mode: str = "none"
    start: float = 25.0
    alpha: float = -1.0
    omega: object = REPLAY_PRESET
    zeta: object = REPLAY_PRESET

    def start_step(self, dt):
        return int(round(self.start / dt))


@dataclass(frozen=True)
class ValidationSpec:
    replications: int = 30
    sample_sizes: tuple = (1_000, 10_000, 100_000)
    wishart_window: int = 20
    wishart_windows: int = 10_000


@dataclass(frozen=True)
class ScenarioConfig:
    car: CarParams = field(default_factory=CarParams)
    window: int = 20
    false_alarm_period: float = 50.0
    normalization: str = "analytic"
    attack: AttackSpec = field(default_factory=AttackSpec)
    seed: int = 0
    runs: int = 100
    detect_runs: int = 1
    out: str = "out"
    validation: ValidationSpec = field(default_factory=ValidationSpec)
    source: str | None = None

    @property
    def target_rate(self):
        return 0.0 if math.isinf(self.false_alarm_period) else 1.0 / self.false_alarm_period

    def hashed_fields(self):
        return {
            "car": _jsonable(asdict(self.car)),
            "window": self.window,
            "false_alarm_period": self.false_alarm_period,
            "normalization": self.normalization,
        }

    def synth_hash(self):
        """SHA-256 over the plant, trajectory, noise and control fields only."""
        blob = json.dumps(_jsonable(asdict(self.car)), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def config_hash(self):
        """SHA-256 over the fields that determine calibration artifacts.

        Seeds, run counts, attack settings and output paths are excluded, so a
        calibration stays valid for detection under any attack or seed.
        """
        blob = json.dumps(self.hashed_fields(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def override(self, **kw):
        """Apply CLI overrides; ``None`` values are ignored."""
        kw = {k: v for k, v in kw.items() if v is not None}
        attack_kw = {k: kw.pop(k) for k in ("mode", "start", "alpha") if k in kw}
        out = replace(self, **kw)
        if attack_kw:
            out = replace(out, attack=replace(out.attack, **attack_kw))
        _check(out)
        return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _line_of(text, section, key=None):
    """1-based line of ``[section]`` or of ``key`` within it, else None."""
    current = None
    for i, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        m = re.match(r"\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return i
            continue
        if current == section and key is not None:
            k = re.split(r"[=:]", line, maxsplit=1)[0].strip()
            if k == key:
                return i
    return None


_REQUIRED = object()


class _Reader:
    def __init__(self, parser, text, path):
        self.parser, self.text, self.path = parser, text, path
        self.used = set()

    def fail(self, msg, section, key=None):
        raise ConfigError(msg, self.path, _line_of(self.text, section, key))

    def has(self, section):
        return self.parser.has_section(section)

    def raw(self, section, key, default):
        self.used.add((section, key))
        if not self.has(section) or not self.parser.has_option(section, key):
            if default is _REQUIRED:
                where = f"[{section}]"
                if not self.has(section):
                    raise ConfigError(f"missing section {where}", self.path)
                self.fail(f"missing key '{key}' in {where}", section)
            return None
        return self.parser.get(section, key)

    def number(self, section, key, default=None, kind=float, positive=False,
               allow_inf=False):
        raw = self.raw(section, key, default)
        if raw is None:
            return default
        try:
            val = kind(json.loads(raw)) if kind is int else float(raw)
        except (ValueError, TypeError):
            self.fail(f"[{section}] {key}: expected a number, got {raw!r}", section, key)
        if kind is int and val != float(raw):
            self.fail(f"[{section}] {key}: expected an integer, got {raw!r}", section, key)
        if not allow_inf and not math.isfinite(val):
            self.fail(f"[{section}] {key}: must be finite", section, key)
        if positive and not val > 0:
            self.fail(f"[{section}] {key}: must be positive, got {raw}", section, key)
        return val

    def array(self, section, key, default):
        raw = self.raw(section, key, default)
        if raw is None:
            return default
        try:
            val = json.loads(raw)
        except json.JSONDecodeError as exc:
            self.fail(f"[{section}] {key}: invalid JSON array ({exc.msg})", section, key)
        try:
            arr = np.asarray(val, float)
        except (ValueError, TypeError):
            self.fail(f"[{section}] {key}: ragged or non-numeric array", section, key)
        if arr.ndim not in (1, 2) or not np.all(np.isfinite(arr)):
            self.fail(f"[{section}] {key}: expected a finite list or nested matrix", section, key)
        return _jsonable(arr.tolist())

    def choice(self, section, key, default, options):
        raw = self.raw(section, key, default)
        if raw is None:
            return default
        val = raw.strip()
        if val not in options:
            self.fail(f"[{section}] {key}: expected one of {', '.join(options)}, got {val!r}", section, key)
        return val

    def unknown(self):
        for section in self.parser.sections():
            for key in self.parser.options(section):
                if (section, key) not in self.used:
                    self.fail(f"unknown key '{key}' in [{section}]", section, key)


def _tuple(v):
    return tuple(v) if isinstance(v, list) else v


def parse_config(text, path=None):
    """Parse configuration text into a validated ``ScenarioConfig``."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=str(path or "<config>"))
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section [{exc.section}]", path, exc.lineno) from None
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key '{exc.option}' in [{exc.section}]", path, exc.lineno) from None
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("content before the first [section] header", path, exc.lineno) from None
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigError("malformed line", path, line) from None

    known = set(REQUIRED) | {"control", "attack", "run", "validation"}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"unknown section [{section}]", path, _line_of(text, section))
    for section in REQUIRED:
        if not parser.has_section(section):
            raise ConfigError(f"missing section [{section}]", path)

    rd = _Reader(parser, text, path)
    base = CarParams()
    R = _REQUIRED

    dt = rd.number("scenario", "dt", R, positive=True)
    duration = rd.number("scenario", "duration", R, positive=True)
    realization = rd.choice("scenario", "realization", base.realization, ("lyapunov", "physical"))

    traj = {k: rd.number("trajectory", k, R, positive=k != "speed_amplitude" and k != "heading_amplitude")
            for k in ("speed_mean", "speed_amplitude", "speed_period", "heading_amplitude", "heading_period")}
    speed_floor = rd.number("trajectory", "speed_floor", base.speed_floor, positive=True)

    q_diag = rd.array("control", "q_diag", list(base.q_diag))
    r_diag = rd.array("control", "r_diag", list(base.r_diag))

    process = rd.array("noise", "process_base", R)
    measurement = rd.array("noise", "measurement_base", R)
    watermark = rd.array("noise", "watermark", R)
    noise_floor = rd.number("noise", "noise_floor", base.noise_floor, positive=True)

    window = rd.number("detector", "window", 20, kind=int, positive=True)
    period = rd.number("detector", "false_alarm_period", 50.0, positive=True, allow_inf=True)
    normalization = rd.choice("detector", "normalization", "analytic", NORMALIZATIONS)

    mode = rd.choice("attack", "mode", "none", ATTACK_MODES)
    start = rd.number("attack", "start", 25.0)
    if start < 0:
        rd.fail("[attack] start: must be non-negative seconds", "attack", "start")
    alpha = rd.number("attack", "alpha", -1.0)
    covs = {}
    for key in ("omega", "zeta"):
        raw = rd.raw("attack", key, None)
        if raw is None or raw.strip() == REPLAY_PRESET:
            covs[key] = REPLAY_PRESET
        else:
            covs[key] = rd.array("attack", key, None)

    seed = rd.number("run", "seed", 0, kind=int)
    if seed < 0 or seed >= 2**64:
        rd.fail("[run] seed: must fit in an unsigned 64-bit integer", "run", "seed")
    runs = rd.number("run", "runs", 100, kind=int, positive=True)
    detect_runs = rd.number("run", "detect_runs", 1, kind=int, positive=True)
    out = rd.raw("run", "out", None) or "out"

    vbase = ValidationSpec()
    replications = rd.number("validation", "replications", vbase.replications, kind=int, positive=True)
    sizes = rd.array("validation", "sample_sizes", list(vbase.sample_sizes))
    wwin = rd.number("validation", "wishart_window", vbase.wishart_window, kind=int, positive=True)
    wnum = rd.number("validation", "wishart_windows", vbase.wishart_windows, kind=int, positive=True)
    rd.unknown()

    try:
        car = CarParams(
            dt=dt, duration=duration, realization=realization, speed_floor=speed_floor,
            q_diag=_tuple(q_diag), r_diag=_tuple(r_diag),
            process_base=_tuple(process), measurement_base=_tuple(measurement),
            watermark=_tuple(watermark), noise_floor=noise_floor, **traj,
        )
    except ValueError as exc:
        raise ConfigError(str(exc), path) from None
    cfg = ScenarioConfig(
        car=car, window=int(window), false_alarm_period=period, normalization=normalization,
        attack=AttackSpec(mode, start, alpha, _tuple(covs["omega"]), _tuple(covs["zeta"])),
        seed=int(seed), runs=int(runs), detect_runs=int(detect_runs), out=out.strip(),
        validation=ValidationSpec(int(replications), tuple(int(s) for s in sizes), int(wwin), int(wnum)),
        source=str(path) if path else None,
    )
    try:
        _check(cfg)
    except ConfigError as exc:
        raise ConfigError(str(exc), path) from None
    return cfg


def _check(cfg):
    if cfg.window < 2:
        raise ConfigError("[detector] window must be at least 2")
    if len(cfg.car.watermark) + 5 > cfg.window:
        raise ConfigError(f"[detector] window {cfg.window} is below q + r = {len(cfg.car.watermark) + 5}")
    if cfg.attack.mode not in ATTACK_MODES:
        raise ConfigError(f"unknown attack mode {cfg.attack.mode!r}")
    if cfg.normalization not in NORMALIZATIONS:
        raise ConfigError(f"unknown normalization {cfg.normalization!r}")
    if cfg.attack.start < 0:
        raise ConfigError("attack start must be non-negative seconds")
    if not 0 <= cfg.seed < 2**64:
        raise ConfigError("seed must fit in an unsigned 64-bit integer")
    if cfg.runs < 1:
        raise ConfigError("runs must be positive")


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path) from None
    return parse_config(text, path)


def default_config_path():
    return Path(__file__).with_name("configs") / "car.ini"

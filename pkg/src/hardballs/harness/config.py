"""Experiment configuration.

The format is INI (``configparser``), one level of sections:

    [system]      N, nu, masses (comma separated, or one value for all), r
    [initial]     mode = random | explicit; q, v for explicit states
                  (rows separated by ';', coordinates by whitespace)
    [run]         max_time, max_collisions, samples, and the tolerances
                  root, contact, overlap, double_window, tangency,
                  accumulation_window, accumulation_threshold, rank
    [experiment]  kind plus kind-specific keys (see ``EXPERIMENT_KEYS``)
    [output]      dir, formats (comma separated subset of json, jsonl, csv, bin, edges)

Every key is optional; missing keys take the defaults of the dataclasses
below.
"""
from __future__ import annotations

import configparser
import hashlib
import math
from dataclasses import asdict, dataclass, field, fields

from ..core import ParameterError, make_system
from ..flow import Tolerances

KINDS = (
    "simulate",
    "conservation-audit",
    "q-audit",
    "expansion-audit",
    "subspace",
    "sufficiency-scan",
    "richness-scan",
    "bounds-audit",
    "ansatz-probe",
    "contraction-search",
)

FORMATS = ("json", "jsonl", "csv", "bin", "edges")


class ConfigError(ValueError):
    """All problems found in a configuration text."""

    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


@dataclass(frozen=True)
class SystemBlock:
    N: int = 2
    nu: int = 2
    masses: tuple = (1.0, 1.0)
    r: float = 0.1


@dataclass(frozen=True)
class InitialBlock:
    mode: str = "random"
    q: tuple | None = None
    v: tuple | None = None


@dataclass(frozen=True)
class RunBlock:
    max_time: float | None = None
    max_collisions: int | None = 100
    samples: int = 1
    root: float = Tolerances.root
    contact: float = Tolerances.contact
    overlap: float = Tolerances.overlap
    double_window: float = Tolerances.double_window
    tangency: float = Tolerances.tangency
    accumulation_window: int = Tolerances.accumulation_window
    accumulation_threshold: float = Tolerances.accumulation_threshold
    rank: float = 1e-6

    def tolerances(self) -> Tolerances:
        return Tolerances(self.root, self.contact, self.overlap, self.double_window, self.tangency,
                          self.accumulation_window, self.accumulation_threshold)

    def tolerance_dict(self) -> dict:
        d = asdict(self.tolerances())
        d["rank"] = self.rank
        return d


# kind-specific keys: name -> (type, default)
EXPERIMENT_KEYS = {
    "energy_tol": (float, 1e-9),
    "momentum_tol": (float, 1e-12),
    "flight_tol": (float, 1e-10),
    "horizons": ("floats", (5.0, 10.0, 20.0)),
    "L": ("floats", (10.0, 100.0)),
    "C": (int, 2),
    "a": (float, 0.1),
    "horizon": (float, 5.0),
    "threshold": (float, 1e-3),
    "rungs": (int, 4),
    "segment_collisions": (int, 6),
}


@dataclass(frozen=True)
class ExperimentBlock:
    kind: str = "simulate"
    options: dict = field(default_factory=dict)

    def get(self, key):
        typ, default = EXPERIMENT_KEYS[key]
        return self.options.get(key, default)


@dataclass(frozen=True)
class OutputBlock:
    dir: str = "out"
    formats: tuple = ("json",)


@dataclass(frozen=True)
class ExperimentConfig:
    system: SystemBlock = SystemBlock()
    initial: InitialBlock = InitialBlock()
    run: RunBlock = RunBlock()
    experiment: ExperimentBlock = ExperimentBlock()
    output: OutputBlock = OutputBlock()

    def params(self):
        s = self.system
        return make_system(s.N, s.nu, s.masses, s.r)

    def to_text(self) -> str:
        """Canonical INI text with every default spelled out."""
        lines = []
        for name in ("system", "initial", "run", "experiment", "output"):
            block = getattr(self, name)
            lines.append(f"[{name}]")
            for f in fields(block):
                val = getattr(block, f.name)
                if f.name == "options":
                    for key in sorted(EXPERIMENT_KEYS):
                        lines.append(f"{key} = {_fmt(block.get(key))}")
                    continue
                if val is None:
                    continue
                lines.append(f"{f.name} = {_fmt(val)}")
            lines.append("")
        return "\n".join(lines)

    def echo(self) -> dict:
        d = asdict(self)
        d["experiment"] = {"kind": self.experiment.kind,
                           **{k: self.experiment.get(k) for k in sorted(EXPERIMENT_KEYS)}}
        return _jsonable(d)

    def content_hash(self) -> str:
        """Git blob hash (sha1) of :meth:`to_text`."""
        data = self.to_text().encode()
        return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _fmt(val) -> str:
    if isinstance(val, tuple):
        if val and isinstance(val[0], tuple):
            return "; ".join(" ".join(repr(x) for x in row) for row in val)
        return ", ".join(_fmt(x) for x in val)
    if isinstance(val, float):
        return repr(val)
    return str(val)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _locate(text: str, lineno: int, token: str | None = None) -> str:
    lines = text.splitlines()
    col = 1
    if token and 0 < lineno <= len(lines):
        col = max(lines[lineno - 1].find(token), 0) + 1
    return f"line {lineno}, column {col}"


def _key_line(text: str, section: str, key: str) -> int:
    current = None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
        elif current == section and s.split("=")[0].strip() == key:
            return n
    return 0


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate; raises :class:`ConfigError` listing every violation."""
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                   inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError([f"syntax error at {_locate(text, exc.lineno)}: key outside any section"]) from None
    except configparser.ParsingError as exc:
        raise ConfigError([f"syntax error at {_locate(text, n)}: cannot parse {line!r}"
                           for n, line in exc.errors]) from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError([f"syntax error at {_locate(text, exc.lineno or 0)}: duplicate section "
                           f"[{exc.section}]"]) from None
    except configparser.DuplicateOptionError as exc:
        raise ConfigError([f"syntax error at {_locate(text, exc.lineno or 0, exc.option)}: duplicate key "
                           f"{exc.option!r}"]) from None
    except configparser.Error as exc:
        raise ConfigError([f"syntax error: {exc}"]) from None

    errors: list[str] = []
    known = {"system", "initial", "run", "experiment", "output"}
    for sec in cp.sections():
        if sec not in known:
            errors.append(f"unknown section [{sec}] ({_locate(text, _section_line(text, sec))})")

    def sec(name):
        return cp[name] if cp.has_section(name) else {}

    def conv(section, key, typ, default):
        raw = sec(section).get(key)
        if raw is None or raw.strip() == "":
            return default
        try:
            return _convert(raw, typ)
        except ValueError:
            where = _locate(text, _key_line(text, section, key), key)
            errors.append(f"[{section}] {key}: cannot read {raw!r} as {_typename(typ)} ({where})")
            return default

    def unknown(section, allowed):
        for key in sec(section):
            if key not in allowed:
                where = _locate(text, _key_line(text, section, key), key)
                errors.append(f"[{section}] unknown key {key!r} ({where})")

    # system
    d = SystemBlock()
    N = conv("system", "N", int, d.N)
    nu = conv("system", "nu", int, d.nu)
    masses = conv("system", "masses", "floats", None)
    r = conv("system", "r", float, d.r)
    unknown("system", {"N", "nu", "masses", "r"})
    if masses is None:
        masses = (1.0,) * N if isinstance(N, int) and N > 0 else d.masses
    elif len(masses) == 1 and isinstance(N, int) and N > 1:
        masses = masses * N
    masses = tuple(float(m) for m in masses)
    if any(not m > 0 for m in masses):
        errors.append("[system] masses must be positive")
    elif isinstance(N, int) and len(masses) != N:
        errors.append(f"[system] masses: expected {N} values, got {len(masses)}")
    if not errors or all(not e.startswith("[system]") for e in errors):
        try:
            make_system(N, nu, masses, r)
        except ParameterError as exc:
            errors.append(f"[system] {exc}")
    system = SystemBlock(N, nu, masses, r)

    # initial
    mode = conv("initial", "mode", str, "random")
    q = conv("initial", "q", "matrix", None)
    v = conv("initial", "v", "matrix", None)
    unknown("initial", {"mode", "q", "v"})
    if mode not in ("random", "explicit"):
        errors.append(f"[initial] mode must be 'random' or 'explicit', got {mode!r}")
    if mode == "explicit":
        for name, arr in (("q", q), ("v", v)):
            if arr is None:
                errors.append(f"[initial] explicit mode needs {name}")
            elif len(arr) != N or any(len(row) != nu for row in arr):
                errors.append(f"[initial] {name} must have {N} rows of {nu} numbers")
    initial = InitialBlock(mode, q, v)

    # run
    rd = RunBlock()
    vals = {}
    for f in fields(RunBlock):
        typ = {"max_collisions": int, "samples": int, "accumulation_window": int}.get(f.name, float)
        vals[f.name] = conv("run", f.name, typ, getattr(rd, f.name))
    unknown("run", {f.name for f in fields(RunBlock)})
    for name in ("root", "contact", "overlap", "double_window", "tangency", "accumulation_threshold", "rank"):
        if not (isinstance(vals[name], float) and vals[name] > 0 and math.isfinite(vals[name])):
            errors.append(f"[run] tolerance {name} must be positive, got {vals[name]!r}")
    if vals["accumulation_window"] < 2:
        errors.append("[run] accumulation_window must be >= 2")
    if vals["samples"] < 0:
        errors.append("[run] samples must be >= 0")
    if vals["max_time"] is not None and vals["max_time"] < 0:
        errors.append("[run] max_time must be non-negative")
    if vals["max_collisions"] is not None and vals["max_collisions"] < 0:
        errors.append("[run] max_collisions must be non-negative")
    if "max_collisions" in sec("run") and not sec("run")["max_collisions"].strip():
        vals["max_collisions"] = None
    run = RunBlock(**vals)
    if run.max_time is None and run.max_collisions is None:
        errors.append("[run] give max_time and/or max_collisions")

    # experiment
    kind = conv("experiment", "kind", str, "simulate")
    if kind not in KINDS:
        errors.append(f"[experiment] unknown kind {kind!r}; registered kinds: {', '.join(KINDS)}")
    options = {}
    for key in sec("experiment"):
        if key == "kind":
            continue
        if key not in EXPERIMENT_KEYS:
            where = _locate(text, _key_line(text, "experiment", key), key)
            errors.append(f"[experiment] unknown key {key!r} ({where})")
            continue
        typ, default = EXPERIMENT_KEYS[key]
        options[key] = conv("experiment", key, typ, default)
    for key, val in options.items():
        vals_ = val if isinstance(val, tuple) else (val,)
        if any(not x > 0 for x in vals_):
            errors.append(f"[experiment] {key} must be positive")
    if any(L <= 1 for L in options.get("L", ())):
        errors.append("[experiment] every L must exceed 1")
    experiment = ExperimentBlock(kind, options)

    # output
    out_dir = conv("output", "dir", str, "out")
    formats = conv("output", "formats", tuple, ("json",))
    formats = tuple(str(f).strip() for f in formats)
    unknown("output", {"dir", "formats"})
    bad = [f for f in formats if f not in FORMATS]
    if bad:
        errors.append(f"[output] unknown formats {bad}; choose from {', '.join(FORMATS)}")
    output = OutputBlock(out_dir, formats)

    if errors:
        raise ConfigError(errors)
    return ExperimentConfig(system, initial, run, experiment, output)


def _section_line(text: str, section: str) -> int:
    for n, line in enumerate(text.splitlines(), 1):
        if line.strip() == f"[{section}]":
            return n
    return 0


def _typename(typ) -> str:
    return {int: "an integer", float: "a number", str: "text", tuple: "a list", "floats": "a list of numbers",
            "matrix": "rows of numbers"}.get(typ, str(typ))


def _convert(raw: str, typ):
    raw = raw.strip()
    if typ is int:
        if not raw.lstrip("+-").isdigit():
            raise ValueError(raw)
        return int(raw)
    if typ is float:
        if raw.lower() in ("none", "inf"):
            return None if raw.lower() == "none" else math.inf
        return float(raw)
    if typ is str:
        return raw
    if typ is tuple:
        return tuple(p.strip() for p in raw.split(",") if p.strip())
    if typ == "floats":
        return tuple(float(p) for p in raw.split(",") if p.strip())
    if typ == "matrix":
        rows = [r.split() for r in raw.split(";") if r.strip()]
        return tuple(tuple(float(x) for x in row) for row in rows)
    raise TypeError(typ)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())

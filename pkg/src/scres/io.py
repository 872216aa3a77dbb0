"""Trace files, sweep manifests and configuration."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ParameterDomainError, ParseError, TraceError
from .model import ComplexTrace

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised only on 3.10
    import tomli as tomllib

CSV_HEADER = ("freq_hz", "s21_re", "s21_im")
FREQ_UNITS = {"HZ": 1.0, "KHZ": 1e3, "MHZ": 1e6, "GHZ": 1e9}


def _fmt(x: float) -> str:
    # shortest repr that round-trips exactly
    return repr(float(x))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# ------------------------------------------------------------------- traces


def _finish(path, freqs, s21, lines):
    f = np.array(freqs, dtype=float)
    z = np.array(s21, dtype=complex)
    if f.size == 0:
        raise ParseError("no data rows", path)
    bad = np.flatnonzero(np.diff(f) <= 0)
    if bad.size:
        raise ParseError("frequencies must be strictly increasing", path, lines[bad[0] + 1])
    return f, z


def _number(tok, path, lineno):
    try:
        v = float(tok)
    except ValueError:
        raise ParseError(f"not a number: {tok!r}", path, lineno) from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite value: {tok!r}", path, lineno)
    return v


def read_csv_trace(path, **meta) -> ComplexTrace:
    """Read a ``freq_hz,s21_re,s21_im`` file (header required, LF or CRLF)."""
    path = Path(path)
    try:
        text = path.read_bytes().decode("utf-8-sig")
    except (OSError, UnicodeDecodeError) as exc:
        raise ParseError(str(exc), path) from None
    rows = csv.reader(text.splitlines())
    freqs, s21, lines = [], [], []
    header_seen = False
    for lineno, row in enumerate(rows, start=1):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if row[0].lstrip().startswith("#"):
            continue
        if not header_seen:
            if tuple(c.strip().lower() for c in row) != CSV_HEADER:
                raise ParseError(f"header must be {','.join(CSV_HEADER)} (got {','.join(row)!r})", path, lineno)
            header_seen = True
            continue
        if len(row) != 3:
            raise ParseError(f"expected 3 columns, got {len(row)}", path, lineno)
        fv, re_, im_ = (_number(c.strip(), path, lineno) for c in row)
        freqs.append(fv)
        s21.append(complex(re_, im_))
        lines.append(lineno)
    if not header_seen:
        raise ParseError("missing header row", path, 1)
    f, z = _finish(path, freqs, s21, lines)
    return _trace(f, z, path, meta)


def write_csv_trace(path, trace: ComplexTrace):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    parts = [",".join(CSV_HEADER)]
    for fv, zv in zip(trace.freqs, trace.s21):
        parts.append(f"{_fmt(fv)},{_fmt(zv.real)},{_fmt(zv.imag)}")
    path.write_text("\n".join(parts) + "\n", encoding="utf-8", newline="\n")


def read_touchstone(path, **meta) -> ComplexTrace:
    """Extract S21 from a two-port Touchstone (v1) file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ParseError(str(exc), path) from None
    unit, fmt = "GHZ", "MA"
    option_seen = False
    pending, pending_line = [], None
    freqs, s21, lines = [], [], []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("!", 1)[0].strip()
        if not line:
            continue
        if line.startswith("#"):
            if option_seen:
                raise ParseError("second option line", path, lineno)
            option_seen = True
            toks = line[1:].upper().split()
            i = 0
            while i < len(toks):
                t = toks[i]
                if t in FREQ_UNITS:
                    unit = t
                elif t in ("RI", "MA", "DB"):
                    fmt = t
                elif t == "S":
                    pass
                elif t == "R":
                    i += 1
                elif t in ("Y", "Z", "H", "G"):
                    raise ParseError(f"only S-parameter files are supported (got {t})", path, lineno)
                else:
                    raise ParseError(f"unknown option token {t!r}", path, lineno)
                i += 1
            continue
        if pending_line is None:
            pending_line = lineno
        pending.extend(_number(t, path, lineno) for t in line.split())
        if len(pending) < 9:
            continue
        if len(pending) > 9:
            raise ParseError(f"expected 9 values per two-port record, got {len(pending)}", path, pending_line)
        fv = pending[0] * FREQ_UNITS[unit]
        x, y = pending[3], pending[4]
        if fmt == "RI":
            zv = complex(x, y)
        else:
            mag = x if fmt == "MA" else 10.0 ** (x / 20.0)
            zv = mag * complex(math.cos(math.radians(y)), math.sin(math.radians(y)))
        freqs.append(fv)
        s21.append(zv)
        lines.append(pending_line)
        pending, pending_line = [], None
    if pending:
        raise ParseError("truncated record at end of file", path, pending_line)
    f, z = _finish(path, freqs, s21, lines)
    return _trace(f, z, path, meta)


def write_touchstone(path, trace: ComplexTrace):
    """Write RI-format two-port data with S21 = S12 and zero reflection."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out = ["! written by scres", "# HZ S RI R 50"]
    for fv, zv in zip(trace.freqs, trace.s21):
        z = f"{_fmt(zv.real)} {_fmt(zv.imag)}"
        out.append(f"{_fmt(fv)} 0.0 0.0 {z} {z} 0.0 0.0")
    path.write_text("\n".join(out) + "\n", encoding="utf-8", newline="\n")


def _trace(f, z, path, meta):
    try:
        return ComplexTrace(f, z, meta.get("temperature_K"), meta.get("power_dBm"),
                            meta.get("label", Path(path).stem), dict(meta.get("meta", {})))
    except TraceError as exc:
        raise ParseError(str(exc), path) from None


def ingest_trace(path, **meta) -> ComplexTrace:
    """Dispatch on suffix: ``.s2p``/``.ts`` is Touchstone, everything else CSV."""
    suffix = Path(path).suffix.lower()
    if suffix in (".s2p", ".ts"):
        return read_touchstone(path, **meta)
    return read_csv_trace(path, **meta)


# ----------------------------------------------------------------- manifest


@dataclass(frozen=True)
class TraceRef:
    file: str
    resonator: str
    material: str
    series: str
    temperature_K: float
    source_power_dBm: Optional[float]
    attenuation_dB: float
    sweep: str = "up"

    @property
    def power_dBm(self) -> Optional[float]:
        """On-chip drive power."""
        if self.source_power_dBm is None:
            return None
        return self.source_power_dBm - self.attenuation_dB

    def as_dict(self) -> dict:
        return {
            "file": self.file, "resonator": self.resonator, "material": self.material,
            "series": self.series, "temperature_K": self.temperature_K,
            "source_power_dBm": self.source_power_dBm, "attenuation_dB": self.attenuation_dB,
            "sweep": self.sweep,
        }


@dataclass
class SweepManifest:
    dataset: str
    traces: list
    designs: dict = field(default_factory=dict)
    chip: dict = field(default_factory=dict)
    root: Path = Path(".")

    def path_of(self, ref: TraceRef) -> Path:
        return (self.root / ref.file).resolve()

    def select(self, series=None, material=None, resonator=None):
        out = []
        for r in self.traces:
            if series is not None and r.series not in (series if isinstance(series, (list, tuple, set)) else (series,)):
                continue
            if material is not None and r.material != material:
                continue
            if resonator is not None and r.resonator != resonator:
                continue
            out.append(r)
        return out

    def load(self, ref: TraceRef) -> ComplexTrace:
        return ingest_trace(self.path_of(ref), temperature_K=ref.temperature_K, power_dBm=ref.power_dBm,
                            label=f"{ref.material}/{ref.resonator}",
                            meta={"series": ref.series, "file": ref.file, "sweep": ref.sweep})

    def as_dict(self) -> dict:
        return {"dataset": self.dataset, "traces": [t.as_dict() for t in self.traces],
                "designs": self.designs, "chip": self.chip}

    def write(self, path):
        path = Path(path)
        path.write_text(json.dumps(self.as_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_manifest(path, check_files=True) -> SweepManifest:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ParseError(str(exc), path) from None
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path, exc.lineno) from None
    if not isinstance(data, dict) or "traces" not in data:
        raise ParseError("manifest must be an object with a 'traces' list", path)
    refs = []
    for i, t in enumerate(data["traces"]):
        try:
            ref = TraceRef(
                file=str(t["file"]), resonator=str(t["resonator"]), material=str(t.get("material", "")),
                series=str(t.get("series", "base")), temperature_K=float(t["temperature_K"]),
                source_power_dBm=None if t.get("source_power_dBm") is None else float(t["source_power_dBm"]),
                attenuation_dB=float(t.get("attenuation_dB", 0.0)), sweep=str(t.get("sweep", "up")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"trace entry {i}: {exc}", path) from None
        if ref.attenuation_dB < 0:
            raise ParseError(f"trace entry {i}: attenuation must be >= 0", path)
        if ref.sweep not in ("up", "down"):
            raise ParseError(f"trace entry {i}: sweep must be 'up' or 'down'", path)
        if check_files and not (path.parent / ref.file).is_file():
            raise ParseError(f"trace entry {i}: file not found: {ref.file}", path)
        refs.append(ref)
    return SweepManifest(str(data.get("dataset", path.stem)), refs, dict(data.get("designs", {})),
                         dict(data.get("chip", {})), path.parent)


# ------------------------------------------------------------------- config


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def load_config(path) -> dict:
    """Flat ``section.key -> value`` mapping from a TOML file."""
    if path is None:
        return {}
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ParseError(str(exc), path) from None
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(str(exc), path) from None
    return _flatten(data)


def resolve(key, flag_value, config: dict, default):
    """CLI flag beats config file beats built-in default."""
    if flag_value is not None:
        return flag_value
    if key in config:
        return config[key]
    return default


def relpath(path, start) -> str:
    return Path(os.path.relpath(path, start)).as_posix()

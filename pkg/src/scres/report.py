"""Canonical JSON reports, plot-data files and rendered figures."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

SIG_DIGITS = 12

# units for every numeric key that can appear in a report ("1" = dimensionless)
UNITS = {
    "f_r": "Hz", "f_r0": "Hz", "f_r_low_power": "Hz", "df_r": "Hz", "f_sim": "Hz", "f_meas": "Hz",
    "Q_i": "1", "Q_e_mag": "1", "Q_c": "1", "Q_l": "1", "Q_i_sat": "1",
    "phi": "rad", "amp": "1", "amp_phase": "rad", "tau": "s",
    "rms_residual": "1", "residual_rms": "1", "n_points": "count", "n_used": "count", "n_excluded": "count",
    "n_powers": "count", "n_pairs": "count", "n_linear": "count",
    "alpha_k": "1", "sigma_alpha_k": "1", "T_c": "K", "sigma_T_c": "K", "T_ref": "K", "T": "K",
    "temperature_K": "K", "gap_ratio": "1",
    "n_c": "photons", "beta": "1", "F_delta0": "1",
    "a": "1", "a_sigma": "1", "power_W": "W", "power_dBm": "dBm", "source_power_dBm": "dBm",
    "attenuation_dB": "dB",
    "E_star": "J", "E_star_sigma": "J", "slope": "1/W", "slope_sigma": "1/W",
    "J_star": "A/cm^2", "J_star_sigma": "A/cm^2", "kappa": "1/m", "area_m2": "m^2", "length_m": "m",
    "L_k": "H/sq", "L_g": "H/sq", "L_k_mean": "H/sq", "L_k_std": "H/sq", "alpha_k_mean": "1", "alpha_k_std": "1",
    "t": "1", "dof": "count", "p_value": "1", "mean_difference": "1", "ci95": "1",
    "seed": "1", "jobs": "count", "sigma": "1", "sigma_log_nc_max": "1", "linear_factor": "1",
    "n": "photons", "photon_number": "photons", "delta_fr": "1", "Q_i_inv": "1",
    "J_ref_A_cm2": "A/cm^2", "df_floor_frac": "1", "n_points_trace": "count",
    "Q_i_a": "1", "Q_i_b": "1", "geometry": "m^2, m", "tls_loss_amplitude": "1", "f_r_power_dBm": "dBm",
    "f_sim_Hz": "Hz", "L_g_pH": "pH", "T_min": "K", "T_max": "K", "n_temperatures": "count",
    "P_min_dBm": "dBm", "P_max_dBm": "dBm", "P_step_dB": "dB", "base_power_dBm": "dBm",
    "nl_powers_dBm": "dBm", "nl_reference_dBm": "dBm", "span_lw": "linewidths", "detail_designs": "1",
}


def _base_key(key: str) -> str:
    # configuration keys are dotted (section.key); units follow the last part
    return key.rsplit(".", 1)[-1]


def _num(x):
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return '"NaN"'
    if math.isinf(x):
        return '"Infinity"' if x > 0 else '"-Infinity"'
    # signed zero would not survive a re-parse as integer
    return f"{x + 0.0:.{SIG_DIGITS}g}"


def _emit(obj, indent, level, out):
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(obj, dict):
        if not obj:
            out.append("{}")
            return
        out.append("{\n")
        items = sorted(obj.items(), key=lambda kv: str(kv[0]))
        for i, (k, v) in enumerate(items):
            out.append(f"{pad}{json.dumps(str(k))}: ")
            _emit(v, indent, level + 1, out)
            out.append(",\n" if i < len(items) - 1 else "\n")
        out.append(end + "}")
    elif isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            out.append("[]")
            return
        out.append("[\n")
        for i, v in enumerate(seq):
            out.append(pad)
            _emit(v, indent, level + 1, out)
            out.append(",\n" if i < len(seq) - 1 else "\n")
        out.append(end + "]")
    elif obj is None:
        out.append("null")
    elif isinstance(obj, str):
        out.append(json.dumps(obj))
    elif isinstance(obj, (bool, np.bool_, int, float, np.integer, np.floating)):
        out.append(_num(obj))
    elif isinstance(obj, complex):
        _emit([obj.real, obj.imag], indent, level, out)
    else:
        raise TypeError(f"cannot serialise {type(obj).__name__}")


def canonical_json(obj, indent: int = 1) -> str:
    """Deterministic JSON: sorted keys, floats at 12 significant digits."""
    out = []
    _emit(obj, indent, 0, out)
    return "".join(out) + "\n"


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(obj), encoding="utf-8", newline="\n")


def numeric_keys(obj, acc=None):
    """Names of every key whose value is numeric (or a list of numbers)."""
    acc = set() if acc is None else acc
    if isinstance(obj, dict):
        for k, v in obj.items():
            if isinstance(v, (int, float)) and not isinstance(v, bool):
                acc.add(k)
            elif isinstance(v, list) and v and all(isinstance(x, (int, float)) for x in v):
                acc.add(k)
            else:
                numeric_keys(v, acc)
    elif isinstance(obj, list):
        for v in obj:
            numeric_keys(v, acc)
    return acc


def units_for(obj) -> dict:
    """Units table restricted to the numeric keys present in ``obj``."""
    keys = numeric_keys(obj)
    return {k: UNITS.get(_base_key(k), "1") for k in sorted(keys)}


def missing_units(obj):
    """Numeric keys of ``obj`` that have no entry in the units table."""
    return sorted(k for k in numeric_keys(obj) if _base_key(k) not in UNITS and not _is_dynamic(_base_key(k)))


def _is_dynamic(key: str) -> bool:
    # parameter-name keys inside sigma blocks share the table entries
    return key.endswith("_sigma") and key[: -len("_sigma")] in UNITS


# -------------------------------------------------------------- plot data


def write_series(path, columns: dict, comment: str = ""):
    """Whitespace-delimited numeric text with a ``#`` header naming columns."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(columns)
    arrs = [np.asarray(columns[k], dtype=float).ravel() for k in names]
    n = arrs[0].size
    if any(a.size != n for a in arrs):
        raise ValueError("columns must have equal length")
    lines = []
    if comment:
        lines.append(f"# {comment}")
    lines.append("# " + " ".join(names))
    for row in zip(*arrs):
        lines.append(" ".join(f"{v:.{SIG_DIGITS}g}" for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def read_series(path) -> dict:
    path = Path(path)
    names = None
    rows = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            names = line[1:].split()
            continue
        if line.strip():
            rows.append([float(t) for t in line.split()])
    data = np.array(rows, dtype=float).reshape(-1, len(names))
    return {k: data[:, i] for i, k in enumerate(names)}


class Figure:
    """Collects the series of one figure panel and writes its descriptor."""

    def __init__(self, name, figure, title, xlabel, ylabel, xscale="linear", yscale="linear"):
        self.name = name
        self.desc = {"name": name, "figure": figure, "title": title, "xlabel": xlabel, "ylabel": ylabel,
                     "xscale": xscale, "yscale": yscale, "series": []}
        self._data = []

    def add(self, key, columns: dict, x, y, style="markers", label=""):
        fname = f"{self.name}__{key}.dat"
        self.desc["series"].append({"file": fname, "columns": list(columns), "x": x, "y": y,
                                    "style": style, "label": label})
        self._data.append((fname, columns))
        return self

    def write(self, plot_dir):
        plot_dir = Path(plot_dir)
        for fname, cols in self._data:
            write_series(plot_dir / fname, cols)
        write_json(plot_dir / f"{self.name}.json", self.desc)
        return plot_dir / f"{self.name}.json"


def render_descriptor(desc_path, out_dir):
    """Render one plot descriptor to PNG with matplotlib (Agg backend)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    desc_path = Path(desc_path)
    desc = json.loads(desc_path.read_text(encoding="utf-8"))
    fig, ax = plt.subplots(figsize=(6.0, 4.2), dpi=110)
    for s in desc["series"]:
        data = read_series(desc_path.parent / s["file"])
        x, y = data[s["x"]], data[s["y"]]
        kw = {"label": s.get("label") or None}
        if s["style"] == "line":
            ax.plot(x, y, "-", lw=1.2, **kw)
        elif s["style"] == "dashed":
            ax.plot(x, y, "--", lw=1.4, **kw)
        else:
            ax.plot(x, y, "o", ms=3, alpha=0.8, **kw)
    ax.set_xscale(desc.get("xscale", "linear"))
    ax.set_yscale(desc.get("yscale", "linear"))
    ax.set_xlabel(desc["xlabel"])
    ax.set_ylabel(desc["ylabel"])
    ax.set_title(desc["title"], fontsize=10)
    if any(s.get("label") for s in desc["series"]):
        ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    out = out_dir / f"{desc['name']}.png"
    fig.savefig(out, metadata={"Software": None})
    plt.close(fig)
    return out

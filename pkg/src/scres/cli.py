"""Command-line batch tool.

Every subcommand reads its inputs, writes a JSON fragment plus plot-data
files into ``--out`` and touches nothing else. Exit codes: 0 success,
1 usage/configuration, 2 parse error, 3 fit degeneracy.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .errors import FitDegeneracyError, ParameterDomainError, ScresError
from .io import (SweepManifest, TraceRef, load_config, load_manifest, resolve, sha256_file,
                 write_csv_trace)
from .mattis_bardeen import aggregate_kinetics, extract_kinetic, fit_mb_sweep, mb_sweep_curves
from .model import dbm_to_watts, photon_number, s21_notch
from .nonlinear import (attach_j_star, calibrate_kappa, fit_a_vs_power, fit_nonlinear_trace,
                        s21_nonlinear)
from .report import Figure, canonical_json, render_descriptor, units_for, write_json
from .resfit import fit_resonance
from .stats import PairedSample, paired_t_test
from .tls import fit_tls_sweep, linear_regime_mask, tls_loss

log = logging.getLogger("scres")

STAGES = ("fit", "mbfit", "tlsfit", "nlfit", "compare")
PRESETS = ("paper-chip",)

# defaults supplied by --preset paper-chip; the geometry is a placeholder
# because only the calibrated product kappa/(area*length) enters J*
PRESET_CONFIG = {
    "paper-chip": {
        "nonlinear.area_m2": 4.0e-13,
        "nonlinear.length_m": 2.0e-3,
        "nonlinear.calibrate": "Nb/LER1",
        "nonlinear.J_ref_A_cm2": 4.27e8,
    }
}


class UsageError(ScresError):
    exit_code = 1


class MissingSeries(UsageError):
    """The manifest lacks the series a stage analyses."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _diag("UsageError", message, 1)
        raise SystemExit(1)


def _diag(kind, message, code, **extra):
    rec = {"error": kind, "message": str(message), "exit_code": code}
    rec.update({k: v for k, v in extra.items() if v is not None})
    print(json.dumps(rec, sort_keys=True), file=sys.stderr)


def _pmap(fn, items, jobs):
    items = list(items)
    if jobs <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def _safe(fn):
    """Wrap ``fn`` so per-item failures become values, not exceptions."""
    def run(x):
        try:
            return fn(x)
        except ScresError as exc:
            return exc
    return run


# ----------------------------------------------------------------- context


class Context:
    def __init__(self, args):
        self.args = args
        self.config = load_config(getattr(args, "config", None))
        preset = getattr(args, "preset", None)
        if preset:
            base = dict(PRESET_CONFIG[preset])
            base.update(self.config)
            self.config = base
        self.out = Path(args.out)
        self.jobs = int(resolve("jobs", args.jobs, self.config, 1))
        if self.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        self.manifest = None
        if getattr(args, "manifest", None):
            self.manifest = load_manifest(args.manifest)
        self.used = {}

    def get(self, key, default=None, flag=None):
        v = resolve(key, flag, self.config, default)
        self.used[key] = v
        return v

    def provenance(self, refs=()):
        prov = {"tool": "scres", "version": __version__}
        if self.manifest is not None:
            prov["manifest_sha256"] = sha256_file(self.args.manifest)
            prov["dataset"] = self.manifest.dataset
            prov["inputs"] = {r.file: sha256_file(self.manifest.path_of(r)) for r in refs}
        if getattr(self.args, "preset", None):
            prov["preset"] = self.args.preset
        # --jobs only changes scheduling, so it is left out of the echo
        prov["config"] = {k: v for k, v in sorted(self.used.items()) if k != "jobs"}
        return prov

    def need_manifest(self):
        if self.manifest is None:
            raise UsageError("--manifest is required for this command")
        return self.manifest


def _write_fragment(ctx, stage, block, refs, figures, failures):
    frag = {"stage": stage, stage: block, "provenance": ctx.provenance(refs)}
    if failures:
        frag["failures"] = failures
    frag["units"] = units_for(frag)
    write_json(ctx.out / f"{stage}.json", frag)
    for fig in figures:
        fig.write(ctx.out / "plots")
    return frag


def _failure(ref, exc):
    return {"file": ref.file, "resonator": ref.resonator, "material": ref.material,
            "error": type(exc).__name__, "message": str(exc)}


def _fit_refs(ctx, refs):
    m = ctx.manifest

    def one(ref):
        return fit_resonance(m.load(ref))

    return _pmap(_safe(one), refs, ctx.jobs)


def _slug(material):
    return material.replace("/", "")


# --------------------------------------------------------------------- fit


def _kinetics_block(ctx, pairs):
    """Kinetic inductance per design from fitted f_r and simulated f_sim."""
    designs = ctx.manifest.designs
    per = []
    by_mat = {}
    for ref, res in pairs:
        d = designs.get(ref.resonator, {})
        if isinstance(res, Exception) or "f_sim_Hz" not in d or "L_g_pH" not in d:
            continue
        try:
            k = extract_kinetic(float(d["f_sim_Hz"]), res.params.f_r, float(d["L_g_pH"]) * 1e-12)
        except ScresError:
            continue
        per.append({"resonator": ref.resonator, "material": ref.material, "f_sim": k.f_sim,
                    "f_meas": k.f_meas, "L_k": k.L_k, "L_g": k.L_g, "alpha_k": k.alpha_k})
        by_mat.setdefault(ref.material, []).append(k)
    summary = {}
    for mat, ks in sorted(by_mat.items()):
        if len(ks) >= 2:
            s = aggregate_kinetics(ks)
            summary[mat] = {"L_k_mean": s.L_k_mean, "L_k_std": s.L_k_std,
                            "alpha_k_mean": s.alpha_k_mean, "alpha_k_std": s.alpha_k_std,
                            "n_points": len(ks)}
    return {"per_design": per, "summary": summary}


def cmd_fit(ctx):
    m = ctx.need_manifest()
    series = ctx.get("fit.series", "base", getattr(ctx.args, "series", None))
    refs = m.select(series=[s.strip() for s in str(series).split(",")])
    if not refs:
        raise MissingSeries(f"manifest has no traces in series {series!r}")
    results = _fit_refs(ctx, refs)
    fits, failures, figures = [], [], []
    pairs = list(zip(refs, results))
    for ref, res in pairs:
        if isinstance(res, Exception):
            failures.append(_failure(ref, res))
            continue
        d = res.as_dict()
        d.update(ref.as_dict())
        d["power_dBm"] = ref.power_dBm
        fits.append(d)
        figures.extend(_fig1c(ctx, ref, res))
    figures.extend(_fig1b(ctx))
    block = {"fits": fits, "n_points": len(fits), "kinetics": _kinetics_block(ctx, pairs)}
    _write_fragment(ctx, "fit", block, refs, figures, failures)
    return 3 if failures else 0


def _fig1c(ctx, ref, res):
    tr = ctx.manifest.load(ref)
    model = s21_notch(tr.freqs, res.params)
    name = f"fig1c_{_slug(ref.material)}_{ref.resonator}_{Path(ref.file).stem}"
    x = tr.freqs - res.params.f_r
    amp = Figure(name + "_amp", "1c", f"{ref.material} {ref.resonator} |S21|", "f - f_r (Hz)", "|S21| (dB)")
    amp.add("data", {"df_hz": x, "s21_db": 20 * np.log10(np.abs(tr.s21))}, "df_hz", "s21_db")
    amp.add("fit", {"df_hz": x, "s21_db": 20 * np.log10(np.abs(model))}, "df_hz", "s21_db", "dashed", "fit")
    ph = Figure(name + "_phase", "1c", f"{ref.material} {ref.resonator} phase", "f - f_r (Hz)", "arg S21 (rad)")
    ph.add("data", {"df_hz": x, "phase_rad": np.unwrap(np.angle(tr.s21))}, "df_hz", "phase_rad")
    ph.add("fit", {"df_hz": x, "phase_rad": np.unwrap(np.angle(model))}, "df_hz", "phase_rad", "dashed", "fit")
    return [amp, ph]


def _fig1b(ctx):
    refs = ctx.manifest.select(series="overview")
    if not refs:
        return []
    fig = Figure("fig1b_overview", "1b", "Feedline transmission", "f (GHz)", "|S21| (dB)")
    for ref in refs:
        tr = ctx.manifest.load(ref)
        fig.add(_slug(ref.material), {"f_ghz": tr.freqs * 1e-9, "s21_db": 20 * np.log10(np.abs(tr.s21))},
                "f_ghz", "s21_db", "line", ref.material)
    return [fig]


def _groups(refs):
    out = {}
    for r in refs:
        out.setdefault((r.material, r.resonator), []).append(r)
    return sorted(out.items())


# ------------------------------------------------------------------- mbfit


def cmd_mbfit(ctx):
    m = ctx.need_manifest()
    refs = m.select(series="temperature")
    if not refs:
        raise MissingSeries("manifest has no 'temperature' series")
    gap_ratio = float(ctx.get("mbfit.gap_ratio", 1.764))
    exclude = bool(ctx.get("mbfit.exclude_tls", True))
    background = bool(ctx.get("mbfit.tls_background", True))
    results = _fit_refs(ctx, refs)
    by_ref = dict(zip(refs, results))
    blocks, failures, figures = [], [], []
    f2b = Figure("fig2b_delta_fr", "2b", "Fractional frequency shift vs temperature", "T (K)", "delta f_r / f_r0")
    f2c = Figure("fig2c_qi_inv", "2c", "Internal loss vs temperature", "T (K)", "1/Q_i", yscale="log")
    degenerate = False
    for (mat, res_label), grp in _groups(refs):
        rows = []
        for r in grp:
            fr = by_ref[r]
            if isinstance(fr, Exception):
                failures.append(_failure(r, fr))
                continue
            rows.append((r.temperature_K, fr.params.f_r, fr.params.Q_i))
        rows.sort()
        key = f"{_slug(mat)}_{res_label}"
        try:
            mb = fit_mb_sweep(np.array(rows), gap_ratio=gap_ratio, exclude_tls=exclude, tls_background=background)
        except (FitDegeneracyError, ValueError) as exc:
            degenerate = True
            failures.append({"resonator": res_label, "material": mat, "error": type(exc).__name__,
                             "message": str(exc)})
            continue
        d = mb.as_dict()
        d.update({"resonator": res_label, "material": mat})
        blocks.append(d)
        pts = np.array(rows)
        T = pts[:, 0]
        dfr = (pts[:, 1] - mb.f_r0) / mb.f_r0
        f2b.add(key + "_data", {"T_K": T, "delta_fr": dfr}, "T_K", "delta_fr", "markers", f"{mat} {res_label}")
        f2c.add(key + "_data", {"T_K": T, "Q_i_inv": 1.0 / pts[:, 2]}, "T_K", "Q_i_inv", "markers",
                f"{mat} {res_label}")
        Tm = np.linspace(T.min(), min(T.max(), 0.9 * mb.T_c), 120)
        mf, mq = mb_sweep_curves(mb, Tm, 1.0 / pts[0, 2])
        f2b.add(key + "_model", {"T_K": Tm, "delta_fr": mf}, "T_K", "delta_fr", "dashed")
        f2c.add(key + "_model", {"T_K": Tm, "Q_i_inv": np.maximum(mq, 1e-12)}, "T_K", "Q_i_inv", "dashed")
    figures = [f2b, f2c] if blocks else []
    _write_fragment(ctx, "mbfit", {"sweeps": blocks}, refs, figures, failures)
    return 3 if (failures or degenerate) else 0


# ------------------------------------------------------------------ tlsfit


def cmd_tlsfit(ctx):
    m = ctx.need_manifest()
    refs = m.select(series="power")
    if not refs:
        raise MissingSeries("manifest has no 'power' series")
    factor = float(ctx.get("tlsfit.linear_factor", 5.0))
    smax = float(ctx.get("tlsfit.sigma_log_nc_max", 1.0))
    f_ref_dbm = float(ctx.get("tlsfit.f_r_power_dBm", -99.0))
    results = _fit_refs(ctx, refs)
    by_ref = dict(zip(refs, results))
    rows_out, failures = [], []
    f3b = Figure("fig3b_delta_fr", "3b", "Fractional frequency shift vs photon number", "<n>", "delta f_r / f_r",
                 xscale="log")
    f3c = Figure("fig3c_tan_delta", "3c", "Loss tangent vs photon number", "<n>", "1/Q_i", "log", "log")
    degenerate = False
    for (mat, res_label), grp in _groups(refs):
        grp = sorted(grp, key=lambda r: r.power_dBm)
        ok = [(r, by_ref[r]) for r in grp if not isinstance(by_ref[r], Exception)]
        failures.extend(_failure(r, by_ref[r]) for r in grp if isinstance(by_ref[r], Exception))
        if len(ok) < 8:
            degenerate = True
            failures.append({"resonator": res_label, "material": mat, "error": "FitDegeneracyError",
                             "message": "fewer than 8 fitted powers"})
            continue
        mask = linear_regime_mask([fr.rms_residual for _, fr in ok], factor)
        P = np.array([r.power_dBm for r, _ in ok])
        n = np.array([photon_number(fr.params, float(dbm_to_watts(r.power_dBm))) for r, fr in ok])
        qi = np.array([fr.params.Q_i for _, fr in ok])
        fr_hz = np.array([fr.params.f_r for _, fr in ok])
        T = float(np.median([r.temperature_K for r, _ in ok]))
        f_low = float(fr_hz[int(np.argmin(np.abs(P - f_ref_dbm)))])
        key = f"{_slug(mat)}_{res_label}"
        f3b.add(key, {"n": n, "delta_fr": (fr_hz - fr_hz[0]) / fr_hz[0]}, "n", "delta_fr", "markers",
                f"{mat} {res_label}")
        f3c.add(key + "_data", {"n": n, "Q_i_inv": 1.0 / qi}, "n", "Q_i_inv", "markers", f"{mat} {res_label}")
        try:
            tls = fit_tls_sweep(np.column_stack([n[mask], qi[mask]]), T=T, f_r=f_low, sigma_log_nc_max=smax)
        except (FitDegeneracyError, ParameterDomainError) as exc:
            degenerate = True
            failures.append({"resonator": res_label, "material": mat, "error": type(exc).__name__,
                             "message": str(exc)})
            continue
        d = tls.as_dict()
        d.update({"resonator": res_label, "material": mat, "n_linear": int(mask.sum()),
                  "f_r_low_power": f_low})
        rows_out.append(d)
        nm = np.geomspace(n[mask].min(), n[mask].max(), 100)
        f3c.add(key + "_model", {"n": nm, "Q_i_inv": tls_loss(nm, tls.params(), T, f_low)}, "n", "Q_i_inv",
                "dashed")
    _write_fragment(ctx, "tlsfit", {"table": rows_out}, refs, [f3b, f3c], failures)
    return 3 if degenerate else 0


# ------------------------------------------------------------------- nlfit


def _nl_geometry(ctx):
    area = ctx.get("nonlinear.area_m2")
    length = ctx.get("nonlinear.length_m")
    if area is None or length is None:
        return None
    return float(area), float(length)


def cmd_nlfit(ctx):
    m = ctx.need_manifest()
    refs = m.select(series="nonlinear")
    lows = m.select(series="nl_reference")
    if not refs or not lows:
        raise MissingSeries("manifest needs 'nonlinear' and 'nl_reference' series")
    base = m.select(series="base")
    base_fits = _fit_refs(ctx, base) if base else []
    kin = _kinetics_block(ctx, list(zip(base, base_fits)))["summary"]

    low_fits = dict(zip(lows, _fit_refs(ctx, lows)))
    ref_of = {(r.material, r.resonator): f for r, f in low_fits.items()}
    failures = [_failure(r, f) for r, f in low_fits.items() if isinstance(f, Exception)]

    def one(ref):
        rp = ref_of.get((ref.material, ref.resonator))
        if rp is None or isinstance(rp, Exception):
            raise FitDegeneracyError("no usable low-power reference", parameter="a")
        return fit_nonlinear_trace(m.load(ref), rp.params, branch=ref.sweep,
                                   power_W=float(dbm_to_watts(ref.power_dBm)))

    nl = dict(zip(refs, _pmap(_safe(one), refs, ctx.jobs)))
    rows, figures = [], []
    degenerate = False
    f4b = Figure("fig4b_a_vs_power", "4b", "Nonlinearity parameter vs drive power", "P_d (W)", "a")
    scales = {}
    for (mat, res_label), grp in _groups(refs):
        grp = sorted(grp, key=lambda r: r.power_dBm)
        fits = [nl[r] for r in grp if not isinstance(nl[r], Exception)]
        failures.extend(_failure(r, nl[r]) for r in grp if isinstance(nl[r], Exception))
        rp = ref_of.get((mat, res_label))
        key = f"{_slug(mat)}_{res_label}"
        if rp is None or isinstance(rp, Exception) or len(fits) < 4:
            degenerate = True
            continue
        try:
            sc = fit_a_vs_power(fits, rp.params)
        except (FitDegeneracyError, ParameterDomainError) as exc:
            degenerate = True
            failures.append({"resonator": res_label, "material": mat, "error": type(exc).__name__,
                             "message": str(exc)})
            continue
        scales[(mat, res_label)] = (sc, fits, rp)
        P = np.array([f.power_W for f in fits])
        f4b.add(key + "_data", {"P_W": P, "a": [f.a_param for f in fits]}, "P_W", "a", "markers",
                f"{mat} {res_label}")
        Pm = np.linspace(0.0, P.max() * 1.05, 50)
        f4b.add(key + "_line", {"P_W": Pm, "a": sc.slope * Pm}, "P_W", "a", "dashed")
        figures.append(_fig4a(ctx, mat, res_label, grp, nl, rp))

    geometry = _nl_geometry(ctx)
    kappa = ctx.get("nonlinear.kappa")
    calib = ctx.get("nonlinear.calibrate")
    j_ref = ctx.get("nonlinear.J_ref_A_cm2")
    missing_geometry = geometry is None and bool(scales)
    if not missing_geometry and kappa is None and calib is not None:
        cm, cr = str(calib).split("/LER")[0], "LER" + str(calib).split("/LER")[1]
        if (cm, cr) not in scales or cm not in kin or j_ref is None:
            raise UsageError(f"cannot calibrate the geometry constant on {calib!r} (missing fit, kinetics or J_ref)")
        k = kin[cm]
        kappa = calibrate_kappa(scales[(cm, cr)][0].E_star, float(j_ref), k["L_k_mean"], k["alpha_k_mean"], geometry)
    for (mat, res_label), (sc, fits, rp) in sorted(scales.items()):
        if geometry is not None and kappa is not None and mat in kin:
            k = kin[mat]
            attach_j_star(sc, k["L_k_mean"], k["alpha_k_mean"], geometry, float(kappa))
        d = sc.as_dict()
        d.update({"resonator": res_label, "material": mat, "traces": [f.as_dict() for f in fits]})
        rows.append(d)
    block = {"table": rows, "kappa": kappa, "geometry": list(geometry) if geometry else None}
    _write_fragment(ctx, "nlfit", block, refs + lows + base, figures + ([f4b] if scales else []), failures)
    if missing_geometry:
        _diag("ConfigError", "J* needs explicit nonlinear.area_m2 and nonlinear.length_m "
              "(config file or --preset); E* was written without J*", 1)
        return 1
    return 3 if degenerate else 0


def _fig4a(ctx, mat, res_label, grp, nl, rp):
    fig = Figure(f"fig4a_{_slug(mat)}_{res_label}", "4a", f"{mat} {res_label} nonlinear traces",
                 "f - f_r0 (Hz)", "|S21| (dB)")
    f0 = rp.params.f_r
    for r in grp:
        res = nl[r]
        if isinstance(res, Exception):
            continue
        tr = ctx.manifest.load(r)
        tag = f"{r.power_dBm:g}dBm".replace("-", "m")
        fig.add(tag + "_data", {"df_hz": tr.freqs - f0, "s21_db": 20 * np.log10(np.abs(tr.s21))},
                "df_hz", "s21_db", "line", f"{r.power_dBm:g} dBm")
        model = s21_nonlinear(tr.freqs, res.params, res.a_param, r.sweep)
        fig.add(tag + "_fit", {"df_hz": tr.freqs - f0, "s21_db": 20 * np.log10(np.abs(model))},
                "df_hz", "s21_db", "dashed")
    return fig


# ----------------------------------------------------------------- compare


def cmd_compare(ctx):
    m = ctx.need_manifest()
    mat_a = str(ctx.get("compare.material_a", "Nb"))
    mat_b = str(ctx.get("compare.material_b", "Nb/Au"))
    series = str(ctx.get("compare.series", "base"))
    refs = [r for r in m.select(series=series) if r.material in (mat_a, mat_b)]
    results = dict(zip(refs, _fit_refs(ctx, refs)))
    qa, qb = {}, {}
    failures = []
    for r, res in results.items():
        if isinstance(res, Exception):
            failures.append(_failure(r, res))
            continue
        (qa if r.material == mat_a else qb)[r.resonator] = res.params.Q_i
    labels = sorted(set(qa) & set(qb), key=_design_key)
    if len(labels) < 2:
        raise UsageError(f"need at least two designs measured in both {mat_a!r} and {mat_b!r}")
    s = PairedSample(labels, [qa[k] for k in labels], [qb[k] for k in labels])
    t = paired_t_test(s)
    block = t.as_dict()
    block.update({"material_a": mat_a, "material_b": mat_b, "n_pairs": len(labels),
                  "pairs": [{"resonator": k, "Q_i_a": qa[k], "Q_i_b": qb[k]} for k in labels]})
    fig = Figure("fig1d_qi_pairs", "1d", f"Q_i per design, p = {t.p_value:.2g} ({t.stars})", "design", "Q_i")
    idx = np.array([_design_key(k)[0] for k in labels], dtype=float)
    fig.add(_slug(mat_a), {"design": idx, "Q_i": s.group_a}, "design", "Q_i", "markers", mat_a)
    fig.add(_slug(mat_b), {"design": idx, "Q_i": s.group_b}, "design", "Q_i", "markers", mat_b)
    _write_fragment(ctx, "compare", block, refs, [fig], failures)
    return 3 if t.degenerate else 0


def _design_key(label):
    digits = "".join(ch for ch in label if ch.isdigit())
    return (int(digits) if digits else 0, label)


# ---------------------------------------------------------------- simulate


def cmd_simulate(ctx):
    from . import synth

    args = ctx.args
    preset = args.preset or ctx.config.get("simulate.preset")
    if preset != "paper-chip":
        raise UsageError("simulate needs --preset paper-chip (the only built-in chip)")
    seed = ctx.get("seed", None, args.seed)
    if seed is None:
        raise UsageError("simulate needs an explicit --seed")
    seed = int(seed)
    sigma = float(ctx.get("simulate.sigma", synth.DEFAULT_SIGMA))
    atten = float(ctx.get("simulate.attenuation_dB", synth.DEFAULT_ATTENUATION_DB))
    npts = int(ctx.get("simulate.n_points", 401))
    span = float(ctx.get("simulate.span_lw", 12.0))
    series = ctx.get("simulate.series", ["base", "overview", "temperature", "power", "nonlinear"])
    detail = [int(k) for k in ctx.get("simulate.detail_designs", [1, 4, 8])]
    p_base = float(ctx.get("simulate.base_power_dBm", -100.0))
    temps = np.linspace(float(ctx.get("simulate.T_min", 0.015)), float(ctx.get("simulate.T_max", 4.0)),
                        int(ctx.get("simulate.n_temperatures", 30)))
    powers = synth.default_power_grid(float(ctx.get("simulate.P_min_dBm", -120.0)),
                                      float(ctx.get("simulate.P_max_dBm", -40.0)),
                                      float(ctx.get("simulate.P_step_dB", 2.0)))
    nl_powers = [float(p) for p in ctx.get("simulate.nl_powers_dBm", [-52.0, -50.0, -48.0, -46.0, -44.0])]
    nl_ref = float(ctx.get("simulate.nl_reference_dBm", -80.0))

    out = ctx.out
    chips = [synth.paper_chip(mat, seed, sigma, atten) for mat in ("Nb", "NbAu")]
    jobs = []  # (relative file, TraceRef kwargs, generator)

    def add(chip, idx, ser, T, P, condition, sweep="up"):
        res = chip.resonators[idx]
        tag = f"{ser}_{condition:04d}"
        rel = f"traces/{_slug(chip.material_tag)}/{res.label}_{tag}.csv"
        ref = TraceRef(rel, res.label, chip.material_tag, ser, float(T), P + atten, atten, sweep)

        def gen():
            return synth.simulate_resonator(chip, idx, T=T, power_dBm=P, sweep=sweep, condition=condition,
                                            n_points=npts, span_lw=span)
        jobs.append((rel, ref, gen))

    for chip in chips:
        for i, res in enumerate(chip.resonators):
            k = i + 1
            if "base" in series:
                add(chip, i, "base", synth.T_REF, p_base, 0)
            if k not in detail:
                continue
            if "temperature" in series:
                for j, T in enumerate(temps):
                    add(chip, i, "temperature", float(T), p_base, 1000 + j)
            if "power" in series:
                for j, P in enumerate(powers):
                    add(chip, i, "power", synth.T_REF, float(P), 2000 + j)
            if "nonlinear" in series:
                add(chip, i, "nl_reference", synth.T_REF, nl_ref, 3000)
                for j, P in enumerate(nl_powers):
                    add(chip, i, "nonlinear", synth.T_REF, P, 3001 + j)

    def run(job):
        rel, _, gen = job
        write_csv_trace(out / rel, gen())
        return rel

    _pmap(run, jobs, ctx.jobs)
    refs = [ref for _, ref, _ in jobs]

    if "overview" in series:
        for chip in chips:
            f = _overview_grid(chip, synth)
            tr = synth.simulate_chip(chip, f, synth.T_REF, p_base, condition=0)
            rel = f"traces/{_slug(chip.material_tag)}/overview.csv"
            write_csv_trace(out / rel, tr)
            refs.append(TraceRef(rel, "chip", chip.material_tag, "overview", synth.T_REF, p_base + atten, atten))

    f_sim = synth.simulated_frequencies()
    designs = {f"LER{k}": {"f_sim_Hz": float(f_sim[k - 1]), "L_g_pH": synth.L_G * 1e12}
               for k in range(1, synth.N_DESIGNS + 1)}
    man = SweepManifest(f"paper-chip-seed{seed}", refs, designs,
                        {"preset": "paper-chip", "seed": seed, "rng": synth.RNG_ALGORITHM,
                         "materials": [c.material_tag for c in chips], "attenuation_dB": atten})
    out.mkdir(parents=True, exist_ok=True)
    man.write(out / "manifest.json")
    truth = {"chips": [_chip_truth(c) for c in chips], "seed": seed, "sigma": sigma,
             "provenance": {"tool": "scres", "version": __version__,
                            "config": {k: v for k, v in sorted(ctx.used.items()) if k != "jobs"}}}
    write_json(out / "truth.json", truth)
    return 0


def _overview_grid(chip, synth):
    fs = sorted(r.params.f_r for r in chip.resonators)
    coarse = np.linspace(fs[0] - 20e6, fs[-1] + 20e6, 1501)
    dense = [np.linspace(r.params.f_r - 8 * r.params.f_r / r.params.Q_l,
                         r.params.f_r + 8 * r.params.f_r / r.params.Q_l, 161) for r in chip.resonators]
    return np.unique(np.concatenate([coarse] + dense))


def _chip_truth(chip):
    rows = []
    for r in chip.resonators:
        rows.append({"label": r.label, "f_r": r.params.f_r, "Q_c": r.params.Q_c, "phi": r.params.phi,
                     "T_c": r.material.T_c, "alpha_k": r.material.alpha_k, "n_c": r.tls.n_c,
                     "beta": r.tls.beta, "F_delta0": r.tls.F_delta0, "Q_i_sat": r.tls.Q_i_sat,
                     "E_star": r.E_star})
    return {"material": chip.material_tag, "resonators": rows, **{k: v for k, v in chip.extra.items()}}


# ------------------------------------------------------------------ report


def cmd_report(ctx):
    if ctx.args.run_all and ctx.manifest is None:
        raise UsageError("--run-all needs --manifest")
    codes = [0]
    skipped = {}
    if ctx.args.run_all:
        for st in STAGES:
            ctx.used = {}
            try:
                codes.append(COMMANDS[st](ctx))
            except MissingSeries as exc:
                # a dataset without the series simply has nothing for this stage
                skipped[st] = str(exc)

    merged = {"provenance": {"tool": "scres", "version": __version__, "stages": {}}}
    found = []
    for st in STAGES:
        p = ctx.out / f"{st}.json"
        if not p.is_file():
            continue
        frag = json.loads(p.read_text(encoding="utf-8"))
        merged[st] = frag[st]
        if "failures" in frag:
            merged.setdefault("failures", {})[st] = frag["failures"]
        merged["provenance"]["stages"][st] = frag["provenance"]
        found.append(st)
    if not found:
        raise UsageError(f"no stage outputs found in {ctx.out}")
    if skipped:
        merged["provenance"]["skipped"] = skipped
    merged["units"] = units_for(merged)
    write_json(ctx.out / "report.json", merged)
    if not ctx.args.no_figures:
        descs = sorted((ctx.out / "plots").glob("*.json"))
        for d in descs:
            render_descriptor(d, ctx.out / "figures")
    # usage errors (1) outrank degeneracies (3) so a broken configuration is not masked
    return 1 if 1 in codes else max(codes)


COMMANDS = {
    "fit": cmd_fit,
    "mbfit": cmd_mbfit,
    "tlsfit": cmd_tlsfit,
    "nlfit": cmd_nlfit,
    "compare": cmd_compare,
    "simulate": cmd_simulate,
    "report": cmd_report,
}

HELP = {
    "fit": "fit every trace of a series (default 'base') with the notch model",
    "mbfit": "Mattis-Bardeen fit of each temperature sweep",
    "tlsfit": "TLS loss fit of each power sweep",
    "nlfit": "nonlinearity parameter per power, E* and J*",
    "compare": "paired t-test of Q_i between two materials",
    "simulate": "write a synthetic dataset and manifest",
    "report": "merge stage outputs into report.json and render figures",
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", help="sweep manifest (JSON)")
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, help="master random seed")
    common.add_argument("--jobs", type=int, help="worker threads (results do not depend on it)")
    common.add_argument("--preset", choices=PRESETS, help="built-in chip and analysis defaults")
    common.add_argument("-v", "--verbose", action="store_true")
    p = _Parser(prog="scres", description="Superconducting resonator analysis.")
    p.add_argument("--version", action="version", version=f"scres {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common], help=HELP[name])
        if name == "fit":
            sp.add_argument("--series", help="comma-separated manifest series to fit")
        if name == "report":
            sp.add_argument("--run-all", action="store_true", help="run every analysis stage first")
            sp.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        ctx = Context(args)
        ctx.out.mkdir(parents=True, exist_ok=True)
        return int(COMMANDS[args.command](ctx))
    except ScresError as exc:
        _diag(type(exc).__name__, exc, exc.exit_code, path=str(getattr(exc, "path", None) or "") or None,
              line=getattr(exc, "line", None), field=getattr(exc, "field", None),
              parameter=getattr(exc, "parameter", None))
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

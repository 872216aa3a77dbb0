import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from scres.errors import ParseError
from scres.io import (
    ingest_trace, load_config, load_manifest, read_csv_trace, read_touchstone, resolve, write_csv_trace,
    write_touchstone,
)
from scres.model import ComplexTrace
from scres.synth import paper_chip, simulate_resonator


def _write(path, text, newline="\n"):
    path.write_bytes(text.replace("\n", newline).encode("utf-8"))
    return path


def test_three_line_csv(tmp_path):
    p = _write(tmp_path / "t.csv", "freq_hz,s21_re,s21_im\n1e9,1,0\n2e9,0.5,0.5\n3e9,0,1\n")
    tr = read_csv_trace(p)
    assert len(tr) == 3
    assert np.array_equal(tr.freqs, [1e9, 2e9, 3e9])
    assert tr.s21[1] == 0.5 + 0.5j


def test_crlf_matches_lf(tmp_path):
    body = "freq_hz,s21_re,s21_im\n1e9,1,0\n2e9,0.5,0.5\n3e9,0,1\n"
    a = read_csv_trace(_write(tmp_path / "a.csv", body))
    b = read_csv_trace(_write(tmp_path / "b.csv", body, "\r\n"))
    assert np.array_equal(a.freqs, b.freqs) and np.array_equal(a.s21, b.s21)


@pytest.mark.parametrize("body, line", [
    ("freq,re,im\n1,1,0\n", 1),
    ("freq_hz,s21_re,s21_im\n1e9,1,0\n2e9,nan,0\n", 3),
    ("freq_hz,s21_re,s21_im\n1e9,1,0\n2e9,1,0\n1.5e9,1,0\n", 4),
    ("freq_hz,s21_re,s21_im\n1e9,1,0\n2e9,1\n", 3),
    ("freq_hz,s21_re,s21_im\n1e9,abc,0\n", 2),
])
def test_csv_errors_carry_line(tmp_path, body, line):
    with pytest.raises(ParseError) as exc:
        read_csv_trace(_write(tmp_path / "bad.csv", body))
    assert exc.value.line == line
    assert f":{line}:" in str(exc.value)


def test_simulated_roundtrip_bit_exact(tmp_path):
    tr = simulate_resonator(paper_chip("Nb", seed=7), 4, n_points=401)
    write_csv_trace(tmp_path / "x.csv", tr)
    back = ingest_trace(tmp_path / "x.csv")
    assert np.array_equal(back.freqs, tr.freqs)
    assert np.array_equal(back.s21, tr.s21)
    write_touchstone(tmp_path / "x.s2p", tr)
    back = ingest_trace(tmp_path / "x.s2p")
    assert np.array_equal(back.freqs, tr.freqs)
    assert np.array_equal(back.s21, tr.s21)


@given(st.lists(st.tuples(st.floats(-1e3, 1e3, allow_nan=False), st.floats(-1e3, 1e3, allow_nan=False)),
                min_size=1, max_size=20))
def test_csv_roundtrip_property(tmp_path_factory, vals):
    d = tmp_path_factory.mktemp("rt")
    f = 1e9 + np.arange(len(vals)) * 1.3e3
    z = np.array([complex(a, b) for a, b in vals])
    write_csv_trace(d / "p.csv", ComplexTrace(f, z))
    back = read_csv_trace(d / "p.csv")
    assert np.array_equal(back.s21, z) and np.array_equal(back.freqs, f)


def test_touchstone_formats(tmp_path):
    # S21 = 0.5 at -90 degrees in each format; frequency in MHz
    mag, ang = 0.5, -90.0
    db = 20 * math.log10(mag)
    cases = {
        "RI": f"1000 0 0 0 -0.5 0 -0.5 0 0\n2000 0 0 0 -0.5 0 -0.5 0 0\n",
        "MA": f"1000 0 0 {mag} {ang} {mag} {ang} 0 0\n2000 0 0 {mag} {ang} {mag} {ang} 0 0\n",
        "DB": f"1000 0 0 {db} {ang} {db} {ang} 0 0\n2000 0 0 {db} {ang} {db} {ang} 0 0\n",
    }
    for fmt, rows in cases.items():
        p = _write(tmp_path / f"{fmt}.s2p", f"! comment\n# MHZ S {fmt} R 50\n{rows}")
        tr = read_touchstone(p)
        assert np.array_equal(tr.freqs, [1e9, 2e9])
        assert np.allclose(tr.s21, -0.5j, atol=1e-15)


def test_touchstone_record_split_over_lines(tmp_path):
    p = _write(tmp_path / "w.s2p", "# GHZ S RI\n1.0 0 0\n 0.3 0.4 0.3 0.4\n 0 0\n")
    tr = read_touchstone(p)
    assert tr.s21[0] == 0.3 + 0.4j and tr.freqs[0] == 1e9


@pytest.mark.parametrize("body, line", [
    ("# GHZ Z RI\n1 0 0 1 0 1 0 0 0\n", 1),
    ("# GHZ S RI\n1 0 0 1 0 1 0 0 0\n2 0 0 x 0 1 0 0 0\n", 3),
    ("# GHZ S RI\n2 0 0 1 0 1 0 0 0\n1 0 0 1 0 1 0 0 0\n", 3),
    ("# GHZ S RI\n1 0 0 1 0\n", 2),
])
def test_touchstone_errors(tmp_path, body, line):
    with pytest.raises(ParseError) as exc:
        read_touchstone(_write(tmp_path / "bad.s2p", body))
    assert exc.value.line == line


def _manifest(tmp_path, traces):
    write_csv_trace(tmp_path / "a.csv", ComplexTrace([1e9, 2e9, 3e9], [1, 1, 1]))
    p = tmp_path / "m.json"
    p.write_text(json.dumps({"dataset": "d", "traces": traces}))
    return p


def test_manifest_power_from_attenuation(tmp_path):
    p = _manifest(tmp_path, [{"file": "a.csv", "resonator": "LER1", "material": "Nb", "temperature_K": 0.015,
                              "source_power_dBm": -40.0, "attenuation_dB": 60.0}])
    m = load_manifest(p)
    ref = m.traces[0]
    assert ref.power_dBm == -100.0
    tr = m.load(ref)
    assert tr.power_dBm == -100.0 and tr.temperature_K == 0.015


@pytest.mark.parametrize("entry", [
    {"file": "missing.csv", "resonator": "R", "temperature_K": 0.1},
    {"file": "a.csv", "resonator": "R", "temperature_K": 0.1, "attenuation_dB": -1},
    {"file": "a.csv", "temperature_K": 0.1},
    {"file": "a.csv", "resonator": "R", "temperature_K": 0.1, "sweep": "sideways"},
])
def test_manifest_errors(tmp_path, entry):
    with pytest.raises(ParseError):
        load_manifest(_manifest(tmp_path, [entry]))


def test_manifest_bad_json_line(tmp_path):
    p = tmp_path / "m.json"
    p.write_text('{\n "traces": [\n,]\n}')
    with pytest.raises(ParseError) as exc:
        load_manifest(p)
    assert exc.value.line == 3


def test_config_precedence(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('[fit]\nsigma = 0.5\n[nonlinear]\nlength_m = 2e-3\n')
    cfg = load_config(p)
    assert cfg == {"fit.sigma": 0.5, "nonlinear.length_m": 2e-3}
    assert resolve("fit.sigma", 0.1, cfg, 9.0) == 0.1
    assert resolve("fit.sigma", None, cfg, 9.0) == 0.5
    assert resolve("fit.other", None, cfg, 9.0) == 9.0


def test_config_parse_error(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[fit\nx=1\n")
    with pytest.raises(ParseError):
        load_config(p)

import json
import os
import subprocess
import sys

import numpy as np
import pytest
import yaml
from hypothesis import given
from hypothesis import strategies as st

from homsim.cli import io as hio
from homsim.cli.config import ExperimentConfig, load_yaml, normalize
from homsim.cli.main import main
from homsim.exceptions import ConfigError
from homsim.montecarlo import EventStream

MINIMAL = """\
emitter:
  t1_ps: 375
  t2_ps: 270
optics:
  rep_rate_mhz: 40.5
run:
  n_pulse_pairs: 1000
  seed: 3
"""


def run(*argv):
    return main([str(a) for a in argv])


# ----------------------------------------------------------------------- config

def test_minimal_config_defaults():
    cfg = ExperimentConfig.from_text(MINIMAL)
    assert cfg.data["optics"]["reflectance"] == 0.5
    assert cfg.data["run"]["bin_width_ps"] == 50.0
    assert cfg.geometry.rep_period == pytest.approx(1e6 / 40.5)
    assert "sweep" not in cfg.data


def test_unknown_key_reports_path_and_line():
    text = MINIMAL.replace("  seed: 3", "  seed: 3\n  seeds: 4")
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig.from_text(text)
    assert exc.value.field == "run.seeds"
    assert "line 9" in str(exc.value)


def test_missing_required_field():
    with pytest.raises(ConfigError, match="emitter.t2_ps"):
        ExperimentConfig.from_text("emitter: {t1_ps: 300}\n")


def test_type_errors_are_addressed():
    with pytest.raises(ConfigError, match=r"run.n_pulse_pairs.*line 7"):
        ExperimentConfig.from_text(MINIMAL.replace("1000", "lots"))


def test_geometry_invariant_names_field():
    text = MINIMAL.replace("rep_rate_mhz: 40.5", "rep_rate_mhz: 40.5\n  pump_delay_ns: 30")
    with pytest.raises(ConfigError, match="optics.pump_delay_ns.*rep_period"):
        ExperimentConfig.from_text(text)


def test_invalid_yaml():
    with pytest.raises(ConfigError, match="invalid YAML"):
        load_yaml("emitter: [1, 2\n")


def test_roundtrip_is_idempotent():
    cfg = ExperimentConfig.from_text(MINIMAL + "shaping:\n  gate: {fwhm_ps: 200}\n")
    again = ExperimentConfig.from_text(cfg.dump())
    assert again.data == cfg.data
    assert again.fingerprint() == cfg.fingerprint()
    assert ExperimentConfig.from_text(again.dump()).dump() == again.dump()


@given(st.floats(50, 2000), st.floats(0.05, 1.0), st.floats(0.3, 0.7), st.integers(0, 2 ** 63),
       st.sampled_from([None, "quasi_resonant", "above_band"]))
def test_roundtrip_property(t1, r, refl, seed, scheme):
    raw = {"emitter": {"t1_ps": t1, "t2_ps": 2 * t1 * r, "scheme": scheme},
           "optics": {"reflectance": refl}, "run": {"seed": seed}}
    cfg = ExperimentConfig(raw)
    data, lines = load_yaml(cfg.dump())
    assert normalize(data, lines) == cfg.data


def test_fingerprint_depends_on_seed_not_output():
    a = ExperimentConfig.from_text(MINIMAL)
    b = ExperimentConfig.from_text(MINIMAL + "output: {dir: elsewhere, events_format: csv}\n")
    assert a.fingerprint() == b.fingerprint()
    assert a.with_seed(4).fingerprint() != a.fingerprint()
    # a fixed value guards against accidental changes to canonicalisation
    assert len(a.fingerprint()) == 64


def test_detuning_is_qualitative():
    cfg = ExperimentConfig.from_text(MINIMAL.replace("t2_ps: 270", "t2_ps: 270\n  detuning_ghz: 50"))
    assert cfg.built.qualitative


def test_sweep_validation():
    with pytest.raises(ConfigError, match="2 sweep points"):
        ExperimentConfig.from_text(MINIMAL + "sweep: {parameter: optics.reflectance, values: [0.5]}\n")
    with pytest.raises(ConfigError, match="not a configuration field"):
        ExperimentConfig.from_text(MINIMAL + "sweep: {parameter: optics.colour, values: [1, 2]}\n")
    cfg = ExperimentConfig.from_text(MINIMAL + "sweep: {parameter: shaping.gate.fwhm, "
                                               "linspace: [100, 300, 3]}\n")
    assert cfg.sweep["parameter"] == "shaping.gate.fwhm_ps"
    assert cfg.sweep["values"] == [100.0, 200.0, 300.0]


# ------------------------------------------------------------------------- I/O

@pytest.mark.parametrize("fmt", ["text", "csv", "binary"])
def test_event_roundtrip(tmp_path, fmt):
    ev = EventStream([1, 2, 1], [0.1, 3000.123456789012, 1e9 + 1 / 3], [0, 0, -1])
    path = tmp_path / "ev"
    hio.write_events(path, ev, fmt, "ab" * 32)
    back = hio.read_events(path)
    assert back.equals(ev)
    assert hio.read_fingerprint(path) == "ab" * 32


def test_binary_layout(tmp_path):
    ev = EventStream([2], [12.5], [7])
    path = tmp_path / "ev.bin"
    hio.write_events(path, ev, "binary", "00" * 32)
    raw = path.read_bytes()
    assert raw[:6] == b"HOMSEV" and raw[6] == 1
    assert len(raw) == 6 + 1 + 32 + 8 + 17


def test_result_record_roundtrip(tmp_path):
    rec = hio.ResultRecord("f" * 64, "simulate", seed=1, p=0.3, fit={"x": np.float64(2.0)})
    rec.save(tmp_path / "r.json")
    back = hio.ResultRecord.load(tmp_path / "r.json")
    assert back.p == 0.3 and back.fit == {"x": 2.0}


# -------------------------------------------------------------------- commands

def test_simulate_minimal(write_config, tmp_path, capsys):
    cfg = write_config(MINIMAL)
    out = tmp_path / "out"
    assert run("simulate", "--config", cfg, "--out", out) == 0
    text = capsys.readouterr().out
    assert "seed: 3" in text
    ev = hio.read_events(out / "events.txt")
    centers, counts = hio.read_histogram(out / "histogram.txt")
    assert len(ev) == 2000
    pairs = [ln for ln in text.splitlines() if ln.startswith("events:")][0].split()
    assert int(pairs[6]) == int(counts.sum()) == int(pairs[-1])
    rec = json.loads((out / "result.json").read_text())
    assert rec["fingerprint"] == hio.read_fingerprint(out / "events.txt")


def test_simulate_rejects_bad_geometry(write_config, tmp_path, capsys):
    cfg = write_config(MINIMAL.replace("rep_rate_mhz: 40.5", "rep_rate_mhz: 40.5\n  pump_delay_ns: 30"))
    assert run("simulate", "--config", cfg, "--out", tmp_path) == 1
    err = capsys.readouterr().err
    assert "optics.pump_delay_ns" in err and "rep_period" in err


def test_unwritable_output(write_config, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("simulate", "--config", write_config(MINIMAL), "--out", blocker / "sub") == 2


def test_usage_errors(capsys):
    assert run("simulate") == 1
    assert run("frobnicate") == 1
    assert run("simulate", "--config", "x.yaml", "--jobs", "0") == 1
    assert run("simulate", "--config", "/nonexistent.yaml") == 1


def test_env_output_dir(write_config, tmp_path, monkeypatch):
    monkeypatch.setenv("HOMSIM_OUT", str(tmp_path / "envout"))
    assert run("simulate", "--config", write_config(MINIMAL)) == 0
    assert (tmp_path / "envout" / "histogram.txt").exists()


def test_seed_override_and_reproducibility(write_config, tmp_path):
    cfg = write_config(MINIMAL)
    for name, seed in (("a", 5), ("b", 5), ("c", 6)):
        assert run("simulate", "--config", cfg, "--out", tmp_path / name, "--seed", seed,
                   "--format", "binary") == 0
    a, b, c = (hio.data_payload(tmp_path / n / "events.bin") for n in "abc")
    assert a == b != c


def test_analyze_matches_simulate(write_config, tmp_path):
    cfg = write_config(MINIMAL)
    assert run("simulate", "--config", cfg, "--out", tmp_path / "s", "--format", "csv") == 0
    assert run("analyze", tmp_path / "s" / "events.csv", "--config", cfg,
               "--out", tmp_path / "a") == 0
    assert hio.data_payload(tmp_path / "s" / "histogram.txt") == \
        hio.data_payload(tmp_path / "a" / "histogram.txt")


def test_fit_table(tmp_path, capsys):
    from homsim.model import EmitterParams, coincidence_probability
    tau = np.linspace(-2000, 2000, 21)
    p = coincidence_probability(tau, EmitterParams(800, 450))
    path = tmp_path / "t.csv"
    path.write_text("# synthetic\ntau_ps,P,sigma_P\n" +
                    "".join(f"{a!r},{b!r},0.01\n" for a, b in zip(tau.tolist(), p.tolist())))
    assert run("fit", path, "--out", tmp_path / "f") == 0
    out = capsys.readouterr().out
    assert "P(0) = 0.359375" in out
    res = json.loads((tmp_path / "f" / "fit_result.json").read_text())
    assert res["t1_ps"][0] == pytest.approx(800, rel=1e-6)
    assert (tmp_path / "f" / "fit_curve.csv").exists()


def test_fit_unidentifiable_exit_code(tmp_path, capsys):
    path = tmp_path / "flat.csv"
    path.write_text("tau_ps,P,sigma_P\n" + "".join(f"{t},0.5,0.01\n" for t in range(0, 800, 100)))
    assert run("fit", path, "--out", tmp_path) == 2
    assert "unidentifiable" in capsys.readouterr().err


def test_fit_dip_mode(write_config, tmp_path, capsys):
    cfg = write_config(MINIMAL.replace("1000", "100000") + "shaping: {irf: {fwhm_ps: 35}}\n")
    assert run("simulate", "--config", cfg, "--out", tmp_path, "--dip", "orthogonal") == 0
    assert run("fit", tmp_path / "dip_orthogonal.txt", "--mode", "dip", "--irf-fwhm", 35,
               "--t2-bounds", 150, 450, "--out", tmp_path / "f") == 0
    res = json.loads((tmp_path / "f" / "fit_result.json").read_text())
    assert abs(res["weight"]) < 3 * res["weight_err"]


@pytest.mark.slow
def test_sweep_tau_roundtrip_through_fit(write_config, tmp_path):
    text = MINIMAL.replace("1000", "30000") + (
        "sweep: {parameter: optics.pump_delay_offset, linspace: [0, 1400, 8]}\n")
    assert run("sweep", "--config", write_config(text), "--out", tmp_path / "s") == 0
    swept = json.loads((tmp_path / "s" / "sweep_fit_result.json").read_text())
    assert run("fit", tmp_path / "s" / "sweep.csv", "--model", "wavepacket",
               "--out", tmp_path / "f") == 0
    refit = json.loads((tmp_path / "f" / "fit_result.json").read_text())
    assert refit["t1_ps"][0] == pytest.approx(swept["t1_ps"][0], rel=1e-9)
    assert refit["t2_ps"][0] == pytest.approx(swept["t2_ps"][0], rel=1e-9)


@pytest.mark.slow
def test_jitter_sweep_increases_p(write_config, tmp_path):
    text = MINIMAL.replace("1000", "30000")
    assert run("sweep", "--config", write_config(text), "--param", "emitter.jitter.sigma",
               "--values", 0, 100, 400, "--out", tmp_path) == 0
    p = hio.read_table(tmp_path / "sweep.csv")["P"]
    assert np.all(np.diff(p) > 0)


@pytest.mark.slow
def test_gate_sweep_raises_ratio(write_config, tmp_path):
    text = MINIMAL.replace("1000", "20000")
    assert run("sweep", "--config", write_config(text), "--param", "shaping.gate.fwhm",
               "--values", "none", 200, "--out", tmp_path) == 0
    t = hio.read_table(tmp_path / "sweep.csv")
    assert t["ratio_eff"][1] > t["ratio_eff"][0]
    assert t["mean_overlap"][1] > t["mean_overlap"][0]


def test_sweep_failure_names_point(write_config, tmp_path, capsys):
    text = MINIMAL + "sweep: {parameter: optics.reflectance, values: [0.5, 1.5]}\n"
    assert run("sweep", "--config", write_config(text), "--out", tmp_path) == 1
    assert "sweep point 1" in capsys.readouterr().err


def _record(tmp_path, name, **kw):
    rec = hio.ResultRecord("0" * 64, "simulate", label=name, scheme=name, **kw)
    path = tmp_path / f"{name}.json"
    rec.save(path)
    return path


def test_report_single_and_mismatched(tmp_path, capsys):
    g1 = {"pump_delay_ps": 3000.0}
    one = _record(tmp_path, "quasi_resonant", p=0.31, geometry=g1)
    assert run("report", one, "--out", tmp_path / "r1") == 0
    rows = [ln for ln in (tmp_path / "r1" / "report.csv").read_text().splitlines()
            if not ln.startswith("#")]
    assert len(rows) == 2
    two = _record(tmp_path, "above_band", p=0.49, geometry={"pump_delay_ps": 4000.0})
    assert run("report", one, two, "--out", tmp_path / "r2") == 0
    assert "mismatched geometry" in capsys.readouterr().out
    assert "mismatched geometry" in (tmp_path / "r2" / "report.csv").read_text()


def test_report_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("report", bad, "--out", tmp_path) == 1


@pytest.mark.slow
def test_report_three_schemes(write_config, tmp_path, capsys):
    recs = []
    for scheme, line in (("quasi_resonant", "exciton"), ("two_photon_resonant", "exciton"),
                         ("above_band", "biexciton")):
        text = MINIMAL.replace("1000", "20000").replace(
            "t2_ps: 270", f"t2_ps: 270\n  scheme: {scheme}\n  line: {line}")
        out = tmp_path / scheme
        assert run("simulate", "--config", write_config(text, f"{scheme}.yaml"), "--out", out) == 0
        recs.append(out / "result.json")
    assert run("report", *recs, "--out", tmp_path / "rep") == 0
    table = hio.read_table(tmp_path / "rep" / "report.csv")
    assert len(table["label"]) == 3
    ab = table["label"].index("above_band/biexciton")
    assert table["indistinguishability"][ab] < 0.15
    assert table["indistinguishability"][ab] == min(table["indistinguishability"])


def test_module_entry_point(write_config, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "homsim", "simulate", "--config",
                           write_config(MINIMAL), "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr

"""Experiment configuration: YAML parsing, validation and normalisation.

A configuration has the blocks ``emitter``, ``optics``, ``run``, ``shaping``,
``output`` and an optional ``sweep``. Unknown keys are rejected; errors
name the dotted field path and, when parsed from YAML, the line number.
Geometry is given in ns and emitter times in ps at this boundary.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import numbers
from dataclasses import dataclass

import numpy as np
import yaml

from ..exceptions import ConfigError
from ..model import (ABOVE_BAND_SIGMA, BeamSplitter, EmitterParams, ExcitationScheme,
                     InterferometerGeometry, JitterKind, JitterMixture, JitterModel,
                     scheme_jitter)
from ..montecarlo import SimulationConfig
from ..shaping import DetectorIRF, TemporalGate

REQUIRED = object()

#: schema with defaults; nested dicts are blocks, ``None`` means optional
SCHEMA = {
    "emitter": {
        "t1_ps": REQUIRED,
        "t2_ps": REQUIRED,
        "scheme": None,
        "line": "exciton",
        "jitter": None,
        "efficiency": 1.0,
        "pump_duration_ps": None,
        "detuning_ghz": None,
        "above_band_sigma_ps": ABOVE_BAND_SIGMA,
    },
    "optics": {
        "reflectance": 0.5,
        "pump_delay_ns": 3.0,
        "hom_delay_ns": 3.0,
        "delay_offset_ps": 0.0,
        "rep_rate_mhz": 81.0,
    },
    "run": {
        "n_pulse_pairs": 100_000,
        "seed": 0,
        "bin_width_ps": 50.0,
        "integration_halfwidth_ns": 1.0,
        "hist_range_ns": 20.0,
        "time_grid_step_ps": None,
        "dark_count_rate_hz": 0.0,
        "forced_overlap": None,
    },
    "shaping": {
        "gate": None,
        "irf": None,
    },
    "output": {
        "dir": None,
        "events_format": "text",
    },
    "sweep": None,
}

JITTER_SCHEMA = {"kind": REQUIRED, "width_ps": 0.0}
GATE_SCHEMA = {"fwhm_ps": 200.0, "delay_ps": None, "peak_transmission": 1.0}
IRF_SCHEMA = {"fwhm_ps": 35.0}
SWEEP_SCHEMA = {"parameter": REQUIRED, "values": None, "linspace": None,
                "fit": True, "model": "wavepacket"}

#: scale of the qualitative detuning mapping (GHz)
DETUNING_SCALE_GHZ = 100.0
EVENT_FORMATS = ("text", "binary", "csv")


# ---------------------------------------------------------------------------
# YAML with line numbers
# ---------------------------------------------------------------------------

def _node_lines(node, prefix="", out=None):
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = f"{prefix}.{k.value}" if prefix else str(k.value)
            out[path] = k.start_mark.line + 1
            _node_lines(v, path, out)
    return out


def load_yaml(text):
    """Parse YAML text into ``(data, lines)`` where ``lines`` maps dotted paths to line numbers."""
    try:
        loader = yaml.SafeLoader(text)
        try:
            node = loader.get_single_node()
            data = loader.construct_document(node) if node is not None else {}
        finally:
            loader.dispose()
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" (line {mark.line + 1})" if mark is not None else ""
        raise ConfigError(f"invalid YAML{where}: {getattr(exc, 'problem', exc)}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping")
    return data, _node_lines(node) if node is not None else {}


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------

class _Ctx:
    def __init__(self, lines):
        self.lines = lines or {}

    def error(self, path, msg):
        line = self.lines.get(path)
        where = f" (line {line})" if line else ""
        return ConfigError(f"{msg}{where}", path)


def _merge(schema, data, path, ctx):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ctx.error(path, "must be a mapping")
    unknown = sorted(set(data) - set(schema))
    if unknown:
        key = f"{path}.{unknown[0]}" if path else str(unknown[0])
        raise ctx.error(key, f"unknown key {unknown[0]!r}; allowed: {', '.join(schema)}")
    out = {}
    for key, default in schema.items():
        sub = f"{path}.{key}" if path else key
        if isinstance(default, dict):
            out[key] = _merge(default, data.get(key), sub, ctx)
        elif key in data:
            out[key] = data[key]
        elif default is REQUIRED:
            raise ctx.error(sub, "is required")
        else:
            out[key] = default
    return out


def _num(value, path, ctx, *, positive=False, nonneg=False, integer=False, optional=False):
    if value is None and optional:
        return None
    if isinstance(value, bool) or not isinstance(value, numbers.Real):
        raise ctx.error(path, f"expected a number, got {value!r}")
    if integer:
        if isinstance(value, float) and not value.is_integer():
            raise ctx.error(path, f"expected an integer, got {value!r}")
        value = int(value)
    else:
        value = float(value)
        if not math.isfinite(value):
            raise ctx.error(path, "must be finite")
    if positive and not value > 0:
        raise ctx.error(path, f"must be > 0, got {value!r}")
    if nonneg and value < 0:
        raise ctx.error(path, f"must be >= 0, got {value!r}")
    return value


def _choice(value, path, ctx, options, optional=False):
    if value is None and optional:
        return None
    if value not in options:
        raise ctx.error(path, f"must be one of {', '.join(map(str, options))}; got {value!r}")
    return value


def normalize(data, lines=None):
    """Validate raw config data and return the fully populated canonical dict."""
    ctx = _Ctx(lines)
    cfg = _merge(SCHEMA, data, "", ctx)
    e = cfg["emitter"]
    e["t1_ps"] = _num(e["t1_ps"], "emitter.t1_ps", ctx, positive=True)
    e["t2_ps"] = _num(e["t2_ps"], "emitter.t2_ps", ctx, positive=True)
    e["scheme"] = _choice(e["scheme"], "emitter.scheme", ctx,
                          [s.value for s in ExcitationScheme], optional=True)
    e["line"] = _choice(e["line"], "emitter.line", ctx, ["exciton", "biexciton"])
    e["efficiency"] = _num(e["efficiency"], "emitter.efficiency", ctx, nonneg=True)
    e["pump_duration_ps"] = _num(e["pump_duration_ps"], "emitter.pump_duration_ps", ctx,
                                 nonneg=True, optional=True)
    e["detuning_ghz"] = _num(e["detuning_ghz"], "emitter.detuning_ghz", ctx, optional=True)
    e["above_band_sigma_ps"] = _num(e["above_band_sigma_ps"], "emitter.above_band_sigma_ps",
                                    ctx, nonneg=True)
    if e["jitter"] is not None:
        j = _merge(JITTER_SCHEMA, e["jitter"], "emitter.jitter", ctx)
        j["kind"] = _choice(j["kind"], "emitter.jitter.kind", ctx, [k.value for k in JitterKind])
        j["width_ps"] = _num(j["width_ps"], "emitter.jitter.width_ps", ctx, nonneg=True)
        e["jitter"] = j

    o = cfg["optics"]
    o["reflectance"] = _num(o["reflectance"], "optics.reflectance", ctx, nonneg=True)
    for k in ("pump_delay_ns", "hom_delay_ns", "rep_rate_mhz"):
        o[k] = _num(o[k], f"optics.{k}", ctx, positive=True)
    o["delay_offset_ps"] = _num(o["delay_offset_ps"], "optics.delay_offset_ps", ctx)

    r = cfg["run"]
    r["n_pulse_pairs"] = _num(r["n_pulse_pairs"], "run.n_pulse_pairs", ctx, positive=True,
                              integer=True)
    r["seed"] = _num(r["seed"], "run.seed", ctx, nonneg=True, integer=True)
    if r["seed"] >= 2 ** 64:
        raise ctx.error("run.seed", "must fit in 64 bits")
    for k in ("bin_width_ps", "integration_halfwidth_ns", "hist_range_ns"):
        r[k] = _num(r[k], f"run.{k}", ctx, positive=True)
    r["time_grid_step_ps"] = _num(r["time_grid_step_ps"], "run.time_grid_step_ps", ctx,
                                  positive=True, optional=True)
    r["dark_count_rate_hz"] = _num(r["dark_count_rate_hz"], "run.dark_count_rate_hz", ctx,
                                   nonneg=True)
    r["forced_overlap"] = _num(r["forced_overlap"], "run.forced_overlap", ctx,
                               nonneg=True, optional=True)

    s = cfg["shaping"]
    if s["gate"] is not None:
        g = _merge(GATE_SCHEMA, s["gate"], "shaping.gate", ctx)
        g["fwhm_ps"] = _num(g["fwhm_ps"], "shaping.gate.fwhm_ps", ctx, positive=True)
        g["delay_ps"] = _num(g["delay_ps"], "shaping.gate.delay_ps", ctx, optional=True)
        g["peak_transmission"] = _num(g["peak_transmission"], "shaping.gate.peak_transmission",
                                      ctx, nonneg=True)
        s["gate"] = g
    if s["irf"] is not None:
        i = _merge(IRF_SCHEMA, s["irf"], "shaping.irf", ctx)
        i["fwhm_ps"] = _num(i["fwhm_ps"], "shaping.irf.fwhm_ps", ctx, positive=True)
        s["irf"] = i

    out = cfg["output"]
    if out["dir"] is not None and not isinstance(out["dir"], str):
        raise ctx.error("output.dir", "must be a string path")
    out["events_format"] = _choice(out["events_format"], "output.events_format", ctx,
                                   EVENT_FORMATS)

    if cfg["sweep"] is not None:
        cfg["sweep"] = normalize_sweep(cfg["sweep"], cfg, ctx)
    else:
        del cfg["sweep"]
    # build once so semantic errors surface here
    build(cfg, ctx)
    return cfg


def normalize_sweep(raw, cfg, ctx=None):
    ctx = ctx or _Ctx({})
    sw = _merge(SWEEP_SCHEMA, raw, "sweep", ctx)
    param = sw["parameter"]
    if isinstance(param, str):
        param = ALIASES.get(param, param)
    sw["parameter"] = param
    if not isinstance(param, str) or not _path_exists(cfg, param):
        raise ctx.error("sweep.parameter", f"{param!r} is not a configuration field")
    if (sw["values"] is None) == (sw["linspace"] is None):
        raise ctx.error("sweep", "give exactly one of 'values' or 'linspace'")
    if sw["linspace"] is not None:
        ls = sw["linspace"]
        if not isinstance(ls, list) or len(ls) != 3:
            raise ctx.error("sweep.linspace", "must be [start, stop, n]")
        start = _num(ls[0], "sweep.linspace", ctx)
        stop = _num(ls[1], "sweep.linspace", ctx)
        n = _num(ls[2], "sweep.linspace", ctx, positive=True, integer=True)
        sw["values"] = [float(v) for v in np.linspace(start, stop, n)]
        sw["linspace"] = None
    if not isinstance(sw["values"], list) or len(sw["values"]) < 2:
        raise ctx.error("sweep.values", "need at least 2 sweep points")
    sw["values"] = [None if v is None or v == "none" else _num(v, "sweep.values", ctx)
                    for v in sw["values"]]
    if not isinstance(sw["fit"], bool):
        raise ctx.error("sweep.fit", "must be true or false")
    sw["model"] = _choice(sw["model"], "sweep.model", ctx, ["eq2", "eq2_irf", "wavepacket"])
    return sw


#: shorthand parameter paths accepted in sweeps
ALIASES = {
    "shaping.gate.fwhm": "shaping.gate.fwhm_ps",
    "shaping.gate.delay": "shaping.gate.delay_ps",
    "shaping.irf.fwhm": "shaping.irf.fwhm_ps",
    "optics.pump_delay_offset": "optics.delay_offset_ps",
    "optics.tau": "optics.delay_offset_ps",
    "emitter.t1": "emitter.t1_ps",
    "emitter.t2": "emitter.t2_ps",
}

SWEEPABLE_SUBFIELDS = {
    "shaping.gate.fwhm_ps", "shaping.gate.delay_ps", "shaping.irf.fwhm_ps",
    "emitter.jitter.width_ps", "emitter.jitter.sigma",
}


def _path_exists(cfg, path):
    if path in SWEEPABLE_SUBFIELDS:
        return True
    node = cfg
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            return False
        node = node[part]
    return not isinstance(node, dict)


def set_path(raw, path, value):
    """Return a copy of ``raw`` with ``path`` set; creates optional sub-blocks.

    ``emitter.jitter.sigma`` is accepted as an alias that sets a Gaussian
    jitter of that width. Setting a gate or IRF field to ``None`` removes
    the gate or IRF.
    """
    raw = copy.deepcopy(raw)
    path = ALIASES.get(path, path)
    if path == "emitter.jitter.width_ps" and raw.get("emitter", {}).get("jitter") is None:
        path = "emitter.jitter.sigma"
    if path == "emitter.jitter.sigma":
        raw.setdefault("emitter", {})["jitter"] = {"kind": "gaussian", "width_ps": value}
        return raw
    parts = path.split(".")
    if parts[0] == "shaping" and len(parts) == 3 and value is None:
        raw.setdefault("shaping", {})[parts[1]] = None
        return raw
    node = raw
    for part in parts[:-1]:
        if node.get(part) is None:
            node[part] = {}
        node = node[part]
    node[parts[-1]] = value
    return raw


# ---------------------------------------------------------------------------
# objects
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Built:
    emitter: EmitterParams
    bs: BeamSplitter
    geometry: InterferometerGeometry
    gate: TemporalGate | None
    irf: DetectorIRF | None
    qualitative: bool


def resolve_jitter(e):
    """Jitter model for an emitter block; returns ``(jitter, qualitative)``.

    An explicit ``jitter`` wins over the scheme preset. A detuning mixes in
    above-band-like photons with fraction ``|d| / (|d| + 100 GHz)`` and a
    pump duration widens the Gaussian jitter; both mappings are qualitative.
    """
    qualitative = False
    if e["jitter"] is not None:
        jit = JitterModel(JitterKind(e["jitter"]["kind"]), e["jitter"]["width_ps"])
    elif e["scheme"] is not None:
        kw = {"above_band_sigma": e["above_band_sigma_ps"]}
        if e["pump_duration_ps"] is not None:
            kw["pump_duration"] = e["pump_duration_ps"]
        jit = scheme_jitter(e["scheme"], e["line"], **kw)
    else:
        jit = JitterModel.none()
    if e["pump_duration_ps"] is not None and e["jitter"] is None:
        qualitative = True
        if isinstance(jit, JitterModel) and jit.kind is JitterKind.GAUSSIAN:
            jit = JitterModel.gaussian(max(jit.width, e["pump_duration_ps"]))
    if e["detuning_ghz"] is not None:
        qualitative = True
        d = abs(e["detuning_ghz"])
        frac = d / (d + DETUNING_SCALE_GHZ)
        jit = JitterMixture(jit, JitterModel.gaussian(e["above_band_sigma_ps"]), frac)
    return jit, qualitative


def build(cfg, ctx=None):
    ctx = ctx or _Ctx({})
    e, o, r, s = cfg["emitter"], cfg["optics"], cfg["run"], cfg["shaping"]
    try:
        jit, qual = resolve_jitter(e)
        emitter = EmitterParams(e["t1_ps"], e["t2_ps"], jit, e["efficiency"])
        bs = BeamSplitter.from_reflectance(o["reflectance"])
        geom = InterferometerGeometry.from_ns(
            o["pump_delay_ns"], o["hom_delay_ns"], None, r["integration_halfwidth_ns"],
            o["rep_rate_mhz"], o["delay_offset_ps"])
        gate = None
        if s["gate"] is not None:
            g = s["gate"]
            gate = TemporalGate(g["fwhm_ps"], g["delay_ps"], g["peak_transmission"])
        irf = DetectorIRF(s["irf"]["fwhm_ps"]) if s["irf"] is not None else None
    except ConfigError as exc:
        field = _config_field(exc.field)
        msg = str(exc).split(": ", 1)[-1]
        raise ctx.error(field, msg) from None
    return Built(emitter, bs, geom, gate, irf, qual)


_FIELD_MAP = {
    "emitter.t1": "emitter.t1_ps", "emitter.t2": "emitter.t2_ps",
    "emitter.emission_efficiency": "emitter.efficiency",
    "geometry.pump_delay": "optics.pump_delay_ns", "geometry.hom_delay": "optics.hom_delay_ns",
    "geometry.rep_period": "optics.rep_rate_mhz",
    "geometry.integration_halfwidth": "run.integration_halfwidth_ns",
    "bs.reflectance": "optics.reflectance", "bs": "optics.reflectance",
    "gate.fwhm": "shaping.gate.fwhm_ps", "gate.delay": "shaping.gate.delay_ps",
    "gate.peak_transmission": "shaping.gate.peak_transmission",
    "irf.resolution": "shaping.irf.fwhm_ps",
    "jitter.width": "emitter.jitter.width_ps",
}


def _config_field(field):
    return _FIELD_MAP.get(field, field or "config")


# ---------------------------------------------------------------------------
# experiment config
# ---------------------------------------------------------------------------

class ExperimentConfig:
    """Normalised configuration plus the physics objects it describes."""

    def __init__(self, data, lines=None):
        self.data = normalize(data, lines)
        self.built = build(self.data)

    @classmethod
    def from_text(cls, text):
        data, lines = load_yaml(text)
        return cls(data, lines)

    @classmethod
    def from_file(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror}", "config") from None
        return cls.from_text(text)

    def to_dict(self):
        return copy.deepcopy(self.data)

    def dump(self):
        return yaml.safe_dump(self.data, sort_keys=False)

    def replace(self, path, value):
        """New config with one field changed (see :func:`set_path`)."""
        return ExperimentConfig(set_path(self.raw_for_override(), path, value))

    def raw_for_override(self):
        return self.to_dict()

    def with_seed(self, seed):
        return self.replace("run.seed", seed)

    def fingerprint(self):
        """SHA-256 of the canonical JSON of the config without the output block."""
        payload = {k: v for k, v in self.data.items() if k != "output"}
        text = json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    @property
    def emitter(self):
        return self.built.emitter

    @property
    def geometry(self):
        return self.built.geometry

    @property
    def seed(self):
        return self.data["run"]["seed"]

    def simulation_config(self, jobs_safe=True):
        r = self.data["run"]
        b = self.built
        return SimulationConfig(
            emitter=b.emitter, bs=b.bs, geometry=b.geometry,
            n_pulse_pairs=r["n_pulse_pairs"], seed=r["seed"],
            time_grid_step=r["time_grid_step_ps"], gate=b.gate, irf=b.irf,
            dark_count_rate=r["dark_count_rate_hz"], forced_overlap=r["forced_overlap"])

    @property
    def sweep(self):
        return self.data.get("sweep")

"""File formats.

Events
    text: ``# `` comment header, then one ``detector_id timestamp_ps pulse_index``
    line per event (timestamps printed with ``repr`` so they round-trip).
    csv: the same columns with a ``detector,timestamp_ps,pulse_index`` header.
    binary: ``b"HOMSEV"``, a version byte, the 32-byte raw fingerprint, a
    little-endian ``uint64`` record count, then ``<Bdq`` records (17 bytes).
Histograms
    two columns ``bin_center_ps count`` after a comment header.
Tables
    CSV with a commented header carrying the config fingerprint.
Result records
    JSON.

Comment lines may hold wall-clock stamps; everything else is a pure
function of the configuration.
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone

import numpy as np

from ..exceptions import ConfigError
from ..histogram import CoincidenceHistogram
from ..montecarlo import EventStream

MAGIC = b"HOMSEV"
VERSION = 1
RECORD = struct.Struct("<Bdq")
_RECORD_DTYPE = np.dtype([("detector", "u1"), ("timestamp", "<f8"), ("pulse_index", "<i8")])
_HEADER = struct.Struct("<6sB32sQ")
EXTENSIONS = {"text": "events.txt", "csv": "events.csv", "binary": "events.bin"}


def now_iso():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _comment_header(kind, fingerprint, extra=()):
    lines = [f"# homsim {kind}", f"# fingerprint: {fingerprint}", f"# created: {now_iso()}"]
    lines += [f"# {x}" for x in extra]
    return "\n".join(lines) + "\n"


def _write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def data_payload(path):
    """File content without comment lines; the part covered by the determinism contract."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw.startswith(MAGIC):
        return raw
    return b"".join(ln for ln in raw.splitlines(keepends=True) if not ln.startswith(b"#"))


def read_fingerprint(path):
    with open(path, "rb") as fh:
        head = fh.read(4096)
    if head.startswith(MAGIC):
        return _HEADER.unpack_from(head)[2].hex()
    for ln in head.decode("utf-8", "replace").splitlines():
        if ln.startswith("# fingerprint:"):
            return ln.split(":", 1)[1].strip()
    return None


# ---------------------------------------------------------------------------
# events
# ---------------------------------------------------------------------------

def write_events(path, events, fmt, fingerprint):
    if fmt == "binary":
        rec = np.empty(len(events), dtype=_RECORD_DTYPE)
        rec["detector"] = events.detector
        rec["timestamp"] = events.timestamp
        rec["pulse_index"] = events.pulse_index
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, bytes.fromhex(fingerprint), len(events)))
            fh.write(rec.tobytes())
        return
    sep = "," if fmt == "csv" else " "
    buf = io.StringIO()
    buf.write(_comment_header("events", fingerprint,
                              ["columns: detector_id timestamp_ps pulse_index"]))
    if fmt == "csv":
        buf.write("detector,timestamp_ps,pulse_index\n")
    elif fmt != "text":
        raise ConfigError(f"unknown event format {fmt!r}", "format")
    for d, t, i in zip(events.detector.tolist(), events.timestamp.tolist(),
                       events.pulse_index.tolist()):
        buf.write(f"{d}{sep}{t!r}{sep}{i}\n")
    _write_text(path, buf.getvalue())


def read_events(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw.startswith(MAGIC):
        if len(raw) < _HEADER.size:
            raise ConfigError("truncated binary event file", "events")
        _, version, _, n = _HEADER.unpack_from(raw)
        if version != VERSION:
            raise ConfigError(f"unsupported event file version {version}", "events")
        body = raw[_HEADER.size:]
        if len(body) != n * RECORD.size:
            raise ConfigError(f"expected {n} records, found {len(body) / RECORD.size:g}",
                              "events")
        rec = np.frombuffer(body, dtype=_RECORD_DTYPE)
        return EventStream(rec["detector"], rec["timestamp"], rec["pulse_index"])
    text = raw.decode("utf-8")
    rows = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    if rows and rows[0].startswith("detector"):
        rows = rows[1:]
    det, ts, idx = [], [], []
    for k, ln in enumerate(rows):
        parts = ln.replace(",", " ").split()
        if len(parts) != 3:
            raise ConfigError(f"malformed event line {k + 1}: {ln!r}", "events")
        det.append(int(parts[0]))
        ts.append(float(parts[1]))
        idx.append(int(parts[2]))
    return EventStream(det, ts, idx)


# ---------------------------------------------------------------------------
# histograms and tables
# ---------------------------------------------------------------------------

def write_histogram(path, h, fingerprint):
    buf = io.StringIO()
    buf.write(_comment_header("histogram", fingerprint, [
        f"bin_width_ps: {h.bin_width!r}", f"range_ps: {h.range!r}",
        "columns: bin_center_ps count"]))
    for c, n in zip(h.centers.tolist(), h.counts.tolist()):
        buf.write(f"{c!r} {n}\n")
    _write_text(path, buf.getvalue())


def read_histogram(path):
    """Return ``(centers, counts)`` from a two-column histogram file."""
    data = np.loadtxt(path, comments="#", ndmin=2)
    if data.shape[1] != 2:
        raise ConfigError("histogram file must have two columns", "histogram")
    return data[:, 0], data[:, 1]


def histogram_from_file(path):
    centers, counts = read_histogram(path)
    width = float(np.median(np.diff(centers)))
    return CoincidenceHistogram(width, float(centers[-1]), counts.astype(np.int64))


def write_table(path, header, rows, fingerprint, notes=()):
    buf = io.StringIO()
    buf.write(_comment_header("table", fingerprint, notes))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    _write_text(path, buf.getvalue())


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def read_table(path):
    """CSV table as a dict of columns; numeric where possible."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    if not rows:
        raise ConfigError("empty table", "table")
    header, body = rows[0], rows[1:]
    cols = {}
    for j, name in enumerate(header):
        vals = [r[j] for r in body]
        try:
            cols[name] = np.array([float("nan") if v == "none" else float(v) for v in vals])
        except ValueError:
            cols[name] = vals
    return cols


# ---------------------------------------------------------------------------
# result records
# ---------------------------------------------------------------------------

@dataclass
class ResultRecord:
    """Outcome of one command, keyed by the configuration fingerprint."""

    fingerprint: str
    command: str
    seed: int | None = None
    label: str = ""
    scheme: str | None = None
    line: str | None = None
    geometry: dict = field(default_factory=dict)
    peak_areas: dict = field(default_factory=dict)
    p: float | None = None
    sigma_p: float | None = None
    fit: dict = field(default_factory=dict)
    n_events: int | None = None
    wall_clock_s: float | None = None
    qualitative: bool = False
    created: str = field(default_factory=now_iso)

    def to_json(self):
        return json.dumps(_jsonable(asdict(self)), indent=2, sort_keys=True)

    def save(self, path):
        _write_text(path, self.to_json() + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{os.path.basename(path)} is not valid JSON: {exc.msg}",
                                  "record") from None
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        if "fingerprint" not in known or "command" not in known:
            raise ConfigError(f"{os.path.basename(path)} is not a result record", "record")
        return cls(**known)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if np.isfinite(x) else None
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    return x

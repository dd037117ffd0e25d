"""Serialization of simulation reports."""

from __future__ import annotations

import csv
import io
import json

from ..errors import InvalidArgumentError
from .simulator import CATEGORIES, ENERGY_KEYS, SimReport

FORMATS = ("json", "csv")

_SCALARS = [
    "mode", "icpi", "icpa", "num_layers", "num_heads", "head_dim", "prefill_len", "decode_len",
    "output_tokens", "total_cycles", "ttft_cycles", "ttft_sequential_cycles", "ttft_icpi_cycles",
    "ttft_icpi_icpa_cycles", "decode_cycles", "runtime_s", "tokens_per_s", "tokens_per_j",
    "total_bytes", "total_energy_mj", "macs_scheduled", "macs_performed", "macs_skipped",
    "avg_pruning_ratio", "level_table_bytes",
]
CSV_COLUMNS = (
    _SCALARS
    + [f"bytes.{c}" for c in CATEGORIES]
    + [f"energy_mj.{m}" for m in ENERGY_KEYS]
    + ["diagnostics"]
)


def report_row(report: SimReport) -> list:
    d = report.to_dict()
    row = [d[k] for k in _SCALARS]
    row += [d["bytes_by_category"][c] for c in CATEGORIES]
    row += [repr(d["energy_mj"][m]) for m in ENERGY_KEYS]
    row.append(" | ".join(d["diagnostics"]))
    return [repr(v) if isinstance(v, float) else v for v in row]


def emit_report(report: SimReport, fmt: str = "json") -> bytes:
    if fmt == "json":
        return (json.dumps(report.to_dict(), indent=2) + "\n").encode()
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        w.writerow(report_row(report))
        return buf.getvalue().encode()
    raise InvalidArgumentError(f"unsupported report format {fmt!r}; expected one of {FORMATS}")


def load_report(data) -> SimReport:
    if isinstance(data, (bytes, bytearray)):
        data = data.decode()
    return SimReport.from_dict(json.loads(data))

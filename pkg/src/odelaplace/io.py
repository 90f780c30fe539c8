"""Plain-text artifacts: datasets, reports, chains, bands and matrices.

Every file carries the hash of the configuration that produced it, as a
``# config_hash: ...`` first line in CSV files and a ``config_hash`` field in
JSON documents.
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np

from .errors import InputError
from .laplace import CovarianceReport, SymmetricMatrix
from .posterior import Dataset

__all__ = [
    "IngestError",
    "write_dataset",
    "read_dataset",
    "ingest_csv",
    "read_config_hash",
    "write_json",
    "read_json",
    "report_to_dict",
    "report_from_dict",
    "write_report",
    "read_report",
    "write_matrix_csv",
    "write_chain_csv",
    "write_band_csv",
    "write_table_csv",
]

HASH_PREFIX = "# config_hash:"


class IngestError(InputError):
    """Dataset failed validation; ``problems`` lists ``(row, message)`` pairs."""

    def __init__(self, problems):
        self.problems = list(problems)
        shown = "; ".join(f"row {r}: {m}" if r is not None else m for r, m in self.problems[:10])
        more = f" (+{len(self.problems) - 10} more)" if len(self.problems) > 10 else ""
        super().__init__(f"invalid dataset: {shown}{more}")


def _fmt(v):
    return repr(float(v))


def _write_csv(path, header, rows, config_hash):
    buf = io.StringIO()
    if config_hash is not None:
        buf.write(f"{HASH_PREFIX} {config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([c if isinstance(c, str) else _fmt(c) for c in row])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_config_hash(path):
    path = Path(path)
    if path.suffix == ".json":
        try:
            return json.loads(path.read_text()).get("config_hash")
        except (json.JSONDecodeError, AttributeError):
            return None
    with path.open(encoding="utf-8") as fh:
        first = fh.readline()
    return first[len(HASH_PREFIX) :].strip() if first.startswith(HASH_PREFIX) else None


def write_dataset(path, data, config_hash=None):
    header = ["t"] + [f"x{j + 1}" for j in range(data.p)]
    rows = (np.concatenate([[t], y]) for t, y in zip(data.times, data.Y))
    _write_csv(path, header, rows, config_hash)


def _parse_rows(text):
    rows = []
    header = None
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or (row[0].lstrip().startswith("#")):
            continue
        if header is None:
            try:
                [float(c) for c in row]
            except ValueError:
                header = [c.strip() for c in row]
                continue
            header = []
        rows.append((lineno, row))
    return header, rows


def ingest_csv(path, schema="generic", p=None):
    """Parse and validate a CSV of ``t`` followed by state columns.

    Returns ``(Dataset, report)``; raises ``IngestError`` listing every bad
    row.  Row numbers count physical lines in the file, starting at 1.
    """
    if schema not in ("generic", "sir"):
        raise InputError(f"unknown schema {schema!r}")
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise InputError(f"dataset not found: {path}") from None
    header, rows = _parse_rows(text)
    problems = []
    if not rows:
        raise IngestError([(None, "no data rows")])
    width = len(rows[0][1])
    if header:
        width = len(header)
    expected = (p + 1) if p is not None else (3 if schema == "sir" else width)
    if width != expected or width < 2:
        problems.append((None, f"expected {expected} columns (t and {expected - 1} states), found {width}"))
    values = []
    for lineno, row in rows:
        if len(row) != width:
            problems.append((lineno, f"{len(row)} fields, expected {width}"))
            continue
        try:
            vals = [float(c) for c in row]
        except ValueError:
            problems.append((lineno, "non-numeric field"))
            continue
        if not all(math.isfinite(v) for v in vals):
            problems.append((lineno, "non-finite value"))
        if schema == "sir" and any(v < 0 for v in vals[1:]):
            problems.append((lineno, "negative I or R"))
        if values and not vals[0] > values[-1][1][0]:
            problems.append((lineno, f"time {vals[0]:g} does not increase"))
        values.append((lineno, vals))
    if len(values) < 2:
        problems.append((None, "need at least two time points"))
    if problems:
        raise IngestError(problems)
    arr = np.array([v for _, v in values])
    data = Dataset(arr[:, 0], arr[:, 1:])
    report = {
        "path": str(path),
        "schema": schema,
        "rows": int(arr.shape[0]),
        "states": int(arr.shape[1] - 1),
        "columns": header or None,
        "t_range": [float(arr[0, 0]), float(arr[-1, 0])],
        "ok": True,
    }
    return data, report


def read_dataset(path, schema="generic", p=None):
    return ingest_csv(path, schema, p)[0]


def _default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, SymmetricMatrix):
        return o.array.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _clean(o):
    """Replace non-finite floats by None so the output is strict JSON."""
    if isinstance(o, float):
        return o if math.isfinite(o) else None
    if isinstance(o, dict):
        return {k: _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, np.ndarray):
        return _clean(o.tolist())
    if isinstance(o, np.generic):
        return _clean(o.item())
    return o


def write_json(path, doc, config_hash=None):
    doc = dict(doc)
    if config_hash is not None:
        doc["config_hash"] = config_hash
    Path(path).write_text(json.dumps(_clean(doc), indent=1, default=_default), encoding="utf-8")


def read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InputError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path} is not valid JSON: {exc}") from None


def report_to_dict(report):
    return {
        "method": report.method,
        "labels": list(report.labels),
        "covariance": report.covariance.array,
        "correlation": report.correlation.array if report.correlation is not None else None,
        "variances": report.variances,
        "flags": list(report.flags),
        "meta": dict(report.meta, pd_status=report.covariance.pd_status),
    }


def report_from_dict(doc):
    try:
        cov = np.array(doc["covariance"], dtype=float)
        meta = dict(doc.get("meta") or {})
        status = meta.get("pd_status", "unverified")
        corr = doc.get("correlation")
        corr = np.array([[np.nan if v is None else v for v in row] for row in corr], dtype=float)
        return CovarianceReport(
            doc["method"],
            list(doc["labels"]),
            SymmetricMatrix(cov, status),
            SymmetricMatrix(corr),
            np.array(doc["variances"], dtype=float),
            list(doc.get("flags") or []),
            meta,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed covariance report: {exc}") from None


def write_report(path, report, config_hash=None):
    write_json(path, report_to_dict(report), config_hash)


def read_report(path):
    return report_from_dict(read_json(path))


def write_matrix_csv(path, matrix, labels, config_hash=None):
    a = np.asarray(matrix.array if isinstance(matrix, SymmetricMatrix) else matrix, dtype=float)
    _write_csv(path, ["", *labels], ([lab, *row] for lab, row in zip(labels, a)), config_hash)


def write_chain_csv(path, chain, config_hash=None):
    _write_csv(path, list(chain.labels), chain.samples, config_hash)


def write_band_csv(path, band, state_names, config_hash=None):
    rows = []
    for i, t in enumerate(band.times):
        for j, name in enumerate(state_names):
            rows.append([t, name, band.lower[i, j], band.upper[i, j], band.center[i, j]])
    _write_csv(path, ["t", "state", "lower", "upper", "center"], rows, config_hash)


def write_table_csv(path, header, rows, config_hash=None):
    _write_csv(path, header, rows, config_hash)

"""Versioned CSV/JSON writers shared by every stage.

CSV files start with a ``#format_version=N`` line followed by a normal
header. Floats are written with ``repr`` so a parse/emit cycle is lossless.
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Iterable, Sequence

CSV_VERSION = 1
JSON_VERSION = 1


class ArtifactVersionError(ValueError):
    pass


def _cell(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(float(v))  # np.float64 subclasses float and reprs with its type name
    if hasattr(v, "item"):  # numpy scalar
        return _cell(v.item())
    return str(v)


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    buf.write(f"#format_version={CSV_VERSION}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    Path(path).write_text(buf.getvalue())


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("#format_version="):
        raise ArtifactVersionError(f"{path}: missing format version line")
    version = int(lines[0].split("=", 1)[1])
    if version != CSV_VERSION:
        raise ArtifactVersionError(f"{path}: unsupported CSV format version {version}")
    rows = list(csv.reader(lines[1:]))
    return rows[0], rows[1:]


def write_json(path: str | Path, payload: dict) -> None:
    Path(path).write_text(json.dumps({"format_version": JSON_VERSION, **payload}, indent=2, sort_keys=True) + "\n")


def read_json(path: str | Path) -> dict:
    payload = json.loads(Path(path).read_text())
    if payload.get("format_version") != JSON_VERSION:
        raise ArtifactVersionError(f"{path}: unsupported JSON format version {payload.get('format_version')}")
    return payload

"""Plain-text point/normal/mask files, binary PLY error maps, JSON and CSV helpers.

Text formats follow the usual PCPNet layout: one record per line, fields
separated by whitespace. See ``docs/formats.md`` for the field-by-field
description.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Malformed input file; the message carries ``path:line:column``."""


def _fmt(v: float) -> str:
    # shortest decimal string that round-trips to the same double
    return np.format_float_positional(v, unique=True, trim="-")


def _read_table(path, ncols: int, kind: str, parse=float) -> list:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"{path}: cannot read {kind} file: {exc.strerror or exc}") from exc
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    rows = []
    for lineno, line in enumerate(lines, start=1):
        fields = line.split()
        if len(fields) != ncols:
            raise DataError(f"{path}:{lineno}: expected {ncols} fields in {kind} record, "
                            f"found {len(fields)}")
        row = []
        for col, tok in enumerate(fields, start=1):
            try:
                val = parse(tok)
            except ValueError:
                raise DataError(f"{path}:{lineno}:{col}: cannot parse {tok!r}") from None
            if isinstance(val, float) and not np.isfinite(val):
                raise DataError(f"{path}:{lineno}:{col}: non-finite value {tok!r}")
            row.append(val)
        rows.append(row)
    return rows


def _write_table(path, rows, fmt=_fmt) -> Path:
    path = Path(path)
    with open(path, "w", newline="\n") as fh:
        for row in rows:
            fh.write(" ".join(fmt(float(v)) for v in row) + "\n")
    return path


def read_xyz(path) -> np.ndarray:
    rows = _read_table(path, 3, "point")
    return np.array(rows, dtype=float).reshape(-1, 3)


def write_xyz(path, points) -> Path:
    return _write_table(path, np.asarray(points, dtype=float))


def read_normals(path) -> np.ndarray:
    rows = _read_table(path, 3, "normal")
    return np.array(rows, dtype=float).reshape(-1, 3)


write_normals = write_xyz


def _parse_bit(tok: str) -> int:
    if tok not in ("0", "1"):
        raise ValueError(tok)
    return int(tok)


def read_mask(path) -> np.ndarray:
    rows = _read_table(path, 1, "mask", parse=_parse_bit)
    return np.array([r[0] for r in rows], dtype=bool)


def write_mask(path, mask) -> Path:
    path = Path(path)
    with open(path, "w", newline="\n") as fh:
        for m in np.asarray(mask, dtype=bool):
            fh.write("1\n" if m else "0\n")
    return path


# -- PLY ----------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
}


def write_ply(path, points, colors, errors=None) -> Path:
    """Binary little-endian PLY: double x y z, uchar red green blue, optional double error."""
    path = Path(path)
    pts = np.asarray(points, dtype=float)
    cols = np.asarray(colors, dtype=np.uint8)
    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
              ("red", "u1"), ("green", "u1"), ("blue", "u1")]
    if errors is not None:
        fields.append(("error", "<f8"))
    data = np.empty(len(pts), dtype=fields)
    data["x"], data["y"], data["z"] = pts.T
    data["red"], data["green"], data["blue"] = cols.T
    if errors is not None:
        data["error"] = errors
    names = {"<f8": "double", "u1": "uchar"}
    header = ["ply", "format binary_little_endian 1.0", "comment jetnormal error map",
              f"element vertex {len(pts)}"]
    header += [f"property {names[t]} {n}" for n, t in fields]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())
    return path


def read_ply(path) -> np.ndarray:
    """Vertex records of a binary little-endian PLY as a structured array."""
    path = Path(path)
    raw = path.read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise DataError(f"{path}: not a PLY file")
    header = raw[:end].decode("ascii").split("\n")
    body = raw[end + len(b"end_header\n"):]
    n = None
    fields = []
    in_vertex = False
    for lineno, line in enumerate(header, start=1):
        tok = line.split()
        if not tok or tok[0] in ("ply", "comment", "obj_info"):
            continue
        if tok[0] == "format":
            if tok[1:] != ["binary_little_endian", "1.0"]:
                raise DataError(f"{path}:{lineno}: unsupported format {' '.join(tok[1:])}")
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n = int(tok[2])
            elif n is not None:
                break
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list" or tok[1] not in _PLY_TYPES:
                raise DataError(f"{path}:{lineno}: unsupported property type {tok[1]}")
            fields.append((tok[2], _PLY_TYPES[tok[1]]))
    if n is None:
        raise DataError(f"{path}: no vertex element")
    dtype = np.dtype(fields)
    if len(body) < n * dtype.itemsize:
        raise DataError(f"{path}: truncated vertex data")
    return np.frombuffer(body, dtype=dtype, count=n).copy()


# -- JSON / CSV / hashing ----------------------------------------------------------


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def read_json(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"{path}: cannot read: {exc.strerror or exc}") from exc
    if not text.strip():
        raise DataError(f"{path}: empty file")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) if isinstance(v, float) else v for v in row])
    return path


def read_csv(path) -> tuple[list, list]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

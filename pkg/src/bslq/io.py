"""CSV artifacts with provenance headers and a hash manifest.

Every CSV starts with ``# key: value`` comment lines, followed by a header
row and the numeric body. ``manifest.json`` records the SHA-256 of each body
so later runs can detect edits or corruption.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ValidationError
from .paths import MatrixPath

__all__ = [
    "write_csv",
    "read_csv",
    "matrix_columns",
    "write_matrix_path",
    "write_manifest",
    "check_manifest",
    "body_hash",
    "MANIFEST",
]

MANIFEST = "manifest.json"


def _body(columns: Sequence[str], rows) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows([_fmt(x) for x in row] for row in rows)
    return buf.getvalue()


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    return repr(float(x))


def write_csv(path, columns: Sequence[str], rows: Iterable, provenance: Optional[dict] = None) -> str:
    """Write one CSV artifact and return the SHA-256 of its body."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = _body(columns, rows)
    head = "".join(f"# {k}: {v}\n" for k, v in (provenance or {}).items())
    path.write_text(head + body)
    return hashlib.sha256(body.encode()).hexdigest()


def read_csv(path):
    """Return ``(provenance, columns, rows)``; numeric cells become floats."""
    provenance, lines = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            provenance[key.strip()] = value.strip()
        elif line:
            lines.append(line)
    if not lines:
        raise ValidationError(f"{path}: no header row")
    table = list(csv.reader(lines))
    columns = table[0]
    rows = [[_parse(c) for c in row] for row in table[1:]]
    return provenance, columns, rows


def _parse(cell: str):
    try:
        return float(cell)
    except ValueError:
        return cell


def body_hash(path) -> str:
    text = Path(path).read_text()
    body = "".join(line + "\n" for line in text.splitlines() if not line.startswith("#"))
    return hashlib.sha256(body.encode()).hexdigest()


def matrix_columns(name: str, shape) -> list:
    p, q = shape
    return [f"{name}[{i},{j}]" for i in range(p) for j in range(q)]


def write_matrix_path(path, mpath: MatrixPath, name: str, provenance=None, extra: Optional[dict] = None) -> str:
    """Columns ``t``, then row-major entries, then any ``extra`` per-node columns."""
    extra = extra or {}
    cols = ["t"] + matrix_columns(name, mpath.shape) + list(extra)
    flat = mpath.values.reshape(len(mpath), -1)
    data = np.column_stack([mpath.grid.nodes, flat] + [np.asarray(v).reshape(-1) for v in extra.values()])
    return write_csv(path, cols, data, provenance)


def write_manifest(directory, hashes: dict, meta: Optional[dict] = None, merge: bool = False):
    """Write ``manifest.json``.

    With ``merge`` the new hashes are added to an existing manifest of the
    same problem; a manifest for another problem is replaced.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = dict(meta or {})
    files = {}
    path = directory / MANIFEST
    if merge and path.exists():
        old = json.loads(path.read_text())
        if old.get("problem_hash") == meta.get("problem_hash", old.get("problem_hash")):
            files = old.pop("files", {})
            meta = {**old, **meta}
    files.update(hashes)
    doc = {"files": dict(sorted(files.items())), **meta}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def check_manifest(directory) -> dict:
    """Re-hash every artifact listed in the manifest.

    Raises
    ------
    ValidationError
        If the manifest is missing, a file is missing, or a body hash differs.
    """
    directory = Path(directory)
    mpath = directory / MANIFEST
    if not mpath.exists():
        raise ValidationError(f"no {MANIFEST} in {directory}")
    doc = json.loads(mpath.read_text())
    for name, expected in doc.get("files", {}).items():
        f = directory / name
        if not f.exists():
            raise ValidationError(f"artifact {name} listed in the manifest is missing")
        actual = body_hash(f)
        if actual != expected:
            raise ValidationError(f"hash mismatch for {name}: manifest {expected[:12]}, file {actual[:12]}")
    return doc

"""Atomic artifact writers shared by the modules and the CLI."""
from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path


def fmt(v) -> str:
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(float(v)) if hasattr(v, "dtype") and v.dtype.kind == "f" else fmt(v) for v in row])
    atomic_write_text(path, buf.getvalue())


def atomic_write_json(path: Path, doc) -> None:
    atomic_write_text(path, json.dumps(doc, indent=1, sort_keys=True))

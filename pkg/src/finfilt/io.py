"""CSV and JSON readers and writers used by the command line.

Writers go through a temporary file in the target directory followed by an
atomic rename.  Readers report malformed rows with their 1-based line number.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cir import YieldObservation
from .errors import InputError


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _plain(value):
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def dumps_json(data) -> str:
    return json.dumps(_plain(data), indent=1, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, data) -> None:
    atomic_write_text(path, dumps_json(data))


def read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise InputError("file not found", path) from None
    except json.JSONDecodeError as exc:
        raise InputError(f"invalid JSON: {exc.msg}", path, exc.lineno) from None


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    atomic_write_text(path, buf.getvalue())


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def read_csv(path) -> tuple[list[str] | None, list[tuple[int, list[str]]]]:
    """Header (``None`` when the first row is numeric) and ``(line, fields)`` rows.

    Blank lines and lines starting with ``#`` are skipped.
    """
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            lines = fh.read().splitlines()
    except FileNotFoundError:
        raise InputError("file not found", path) from None
    rows = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        rows.append((lineno, [f.strip() for f in next(csv.reader([line]))]))
    if not rows:
        raise InputError("no data rows", path)
    header = None
    if not all(_is_number(f) for f in rows[0][1] if f):
        header = [h.lower() for h in rows[0][1]]
        rows = rows[1:]
        if not rows:
            raise InputError("no data rows after the header", path)
    return header, rows


def _float(text: str, path, line: int, what: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise InputError(f"{what} {text!r} is not a number", path, line) from None
    if not math.isfinite(value):
        raise InputError(f"{what} must be finite", path, line)
    return value


def read_series(path) -> np.ndarray:
    """Observation series from CSV.

    Accepted layouts: one return per line; ``timestamp,return`` pairs;
    any table with a ``y`` or ``return`` column; or a ``date,price`` table,
    which is turned into log returns ``log S[t+1] - log S[t]``.
    """
    header, rows = read_csv(path)
    width = len(rows[0][1])
    if header is not None:
        width = len(header)
    prices = False
    if header is None:
        col = 0 if width == 1 else 1
    elif "price" in header:
        col, prices = header.index("price"), True
    elif "y" in header:
        col = header.index("y")
    elif "return" in header:
        col = header.index("return")
    elif width in (1, 2):
        col = width - 1
    else:
        raise InputError("cannot find a 'y', 'return' or 'price' column", path, 1)
    values = []
    for line, fields in rows:
        if len(fields) != width:
            raise InputError(f"expected {width} fields, found {len(fields)}", path, line)
        values.append(_float(fields[col], path, line, "value"))
    out = np.array(values)
    if prices:
        if np.any(out <= 0):
            bad = rows[int(np.argmax(out <= 0))][0]
            raise InputError("prices must be positive", path, bad)
        if out.size < 2:
            raise InputError("need at least two prices", path)
        out = np.diff(np.log(out))
    return out


def read_yield_panel(path) -> list[YieldObservation]:
    """Rows ``t, maturity, yield`` grouped by ``t`` in order of first appearance."""
    header, rows = read_csv(path)
    cols = (0, 1, 2)
    if header is not None:
        try:
            cols = tuple(header.index(name) for name in ("t", "maturity", "yield"))
        except ValueError:
            raise InputError("header must contain t, maturity and yield", path, 1) from None
    groups: dict[float, list[tuple[float, float, int]]] = {}
    for line, fields in rows:
        if len(fields) != 3:
            raise InputError(f"expected 3 fields, found {len(fields)}", path, line)
        t = _float(fields[cols[0]], path, line, "t")
        mat = _float(fields[cols[1]], path, line, "maturity")
        y = _float(fields[cols[2]], path, line, "yield")
        if mat <= 0:
            raise InputError("maturity must be positive", path, line)
        groups.setdefault(t, []).append((mat, y, line))
    panel = []
    previous = -math.inf
    for t, entries in groups.items():
        if t <= previous:
            raise InputError(f"time {t:g} is out of order", path, entries[0][2])
        previous = t
        entries.sort()
        mats = [e[0] for e in entries]
        for a, b in zip(entries, entries[1:]):
            if a[0] == b[0]:
                raise InputError(f"duplicate maturity {a[0]:g} at t={t:g}", path, b[2])
        panel.append(YieldObservation(t, mats, [e[1] for e in entries]))
    return panel


def write_yield_panel(path, panel: Sequence[YieldObservation]) -> None:
    rows = ((obs.t, m, y) for obs in panel for m, y in zip(obs.maturities, obs.yields))
    write_csv(path, ["t", "maturity", "yield"], rows)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()

"""File formats: curve/dataset CSVs, schedule text files, JSON sidecars."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import PARAM_NAMES, BValueSchedule
from .simulate import LabeledDataset

ID_COLUMNS = ("case", "id", "index")


def format_number(x) -> str:
    """Shortest text that parses back to the same float64."""
    x = float(x)
    if x.is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(x)


def bvalue_header(schedule: BValueSchedule) -> list:
    return [format_number(b) for b in schedule.values]


def read_schedule(path) -> BValueSchedule:
    values = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                values.append(float(line))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: not a b-value: {line!r}") from None
    return BValueSchedule(values)


def write_schedule(schedule: BValueSchedule, path) -> None:
    Path(path).write_text("".join(f"{v}\n" for v in bvalue_header(schedule)))


def _parse_float(text, path, lineno):
    try:
        return float(text)
    except ValueError:
        raise FormatError(f"{path}:{lineno}: not a number: {text!r}") from None


def read_dataset(path):
    """Read a curve or dataset CSV.

    Columns named ``D``, ``f`` and ``Dstar`` are labels (all three or none),
    an optional ``case``/``id``/``index`` column carries row identifiers, and
    every other column header must be a b-value.

    Returns ``(LabeledDataset, ids)`` where ``ids`` is a list of strings or
    ``None``.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        rows = [row for row in reader if row]
    label_cols = [header.index(n) for n in PARAM_NAMES if n in header]
    if label_cols and len(label_cols) != 3:
        raise FormatError(f"{path}: label columns must be all of {PARAM_NAMES} or none")
    id_col = next((header.index(c) for c in ID_COLUMNS if c in header), None)
    b_cols, bvals = [], []
    for j, name in enumerate(header):
        if j in label_cols or j == id_col:
            continue
        try:
            bvals.append(float(name))
        except ValueError:
            raise FormatError(f"{path}: column {name!r} is not a b-value") from None
        b_cols.append(j)
    if not b_cols:
        raise FormatError(f"{path}: no b-value columns")
    order = np.argsort(bvals, kind="stable")
    schedule = BValueSchedule(np.asarray(bvals)[order])
    signals = np.empty((len(rows), len(b_cols)))
    labels = np.empty((len(rows), 3)) if label_cols else None
    ids = [] if id_col is not None else None
    for i, row in enumerate(rows):
        lineno = i + 2
        if len(row) != len(header):
            raise FormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        signals[i] = [_parse_float(row[j], path, lineno) for j in np.asarray(b_cols)[order]]
        if labels is not None:
            labels[i] = [_parse_float(row[j], path, lineno) for j in label_cols]
        if ids is not None:
            ids.append(row[id_col].strip())
    if len(rows) == 0:
        raise FormatError(f"{path}: no data rows")
    return LabeledDataset(signals, schedule, labels), ids


def write_dataset(dataset: LabeledDataset, path, include_labels: bool = True) -> None:
    header = []
    if include_labels and dataset.labels is not None:
        header += list(PARAM_NAMES)
    header += bvalue_header(dataset.schedule)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(len(dataset)):
            row = []
            if include_labels and dataset.labels is not None:
                row += [format_number(v) for v in dataset.labels[i]]
            row += [format_number(v) for v in dataset.signals[i]]
            writer.writerow(row)


def write_rows(path, header, rows) -> None:
    """CSV of dict rows restricted to ``header``; floats round-trip exactly."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(row[h]) for h in header])


def _cell(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else format_number(v)
    return v


def read_table(path) -> tuple:
    """Header and list of row dicts from a small CSV table."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise FormatError(f"{path}: empty file")
        rows = [{k.strip(): (v or "").strip() for k, v in row.items()} for row in reader]
        return [h.strip() for h in reader.fieldnames], rows


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc

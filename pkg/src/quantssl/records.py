"""Reading example streams from delimited text or JSON lines.

Delimited files need a header. The columns ``id``, ``label`` and
``eval_label`` are reserved; every other column is a numeric feature. An
empty cell means "no label". JSON-lines records carry the same fields with
the features under ``"features"`` as a list.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

RESERVED = ("id", "label", "eval_label")


class RecordError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path, self.line = path, line


@dataclass(frozen=True)
class StreamRecord:
    id: str
    features: tuple[float, ...]
    label: str | None = None
    eval_label: str | None = None
    line: int = 0


def detect_format(path: Path) -> str:
    return "jsonl" if Path(path).suffix.lower() in (".jsonl", ".ndjson", ".json") else "csv"


def _label(value) -> str | None:
    if value is None:
        return None
    value = str(value).strip()
    return value or None


def _features(values, path, line) -> tuple[float, ...]:
    try:
        out = tuple(float(v) for v in values)
    except (TypeError, ValueError) as exc:
        raise RecordError(path, line, f"non-numeric feature ({exc})") from None
    if not out:
        raise RecordError(path, line, "record has no features")
    if not all(math.isfinite(v) for v in out):
        raise RecordError(path, line, "non-finite feature value")
    return out


def read_records(path, fmt: str | None = None, delimiter: str | None = None) -> Iterator[StreamRecord]:
    """Yield records one at a time, checking that the feature dimension stays fixed."""
    path = Path(path)
    fmt = fmt or detect_format(path)
    reader = _read_jsonl(path) if fmt == "jsonl" else _read_delimited(path, delimiter)
    dim = None
    for rec in reader:
        if dim is None:
            dim = len(rec.features)
        elif len(rec.features) != dim:
            raise RecordError(path, rec.line, f"dimension changed from {dim} to {len(rec.features)}")
        yield rec


def _read_delimited(path: Path, delimiter: str | None) -> Iterator[StreamRecord]:
    if delimiter is None:
        delimiter = "\t" if path.suffix.lower() in (".tsv", ".tab") else ","
    with path.open(newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            return
        feature_cols = [i for i, h in enumerate(header) if h not in RESERVED]
        col = {h: i for i, h in enumerate(header) if h in RESERVED}
        if not feature_cols:
            raise RecordError(path, 1, "header names no feature columns")
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise RecordError(path, line, f"expected {len(header)} fields, got {len(row)}")
            yield StreamRecord(
                id=row[col["id"]].strip() if "id" in col else str(line - 1),
                features=_features([row[i] for i in feature_cols], path, line),
                label=_label(row[col["label"]]) if "label" in col else None,
                eval_label=_label(row[col["eval_label"]]) if "eval_label" in col else None,
                line=line,
            )


def _read_jsonl(path: Path) -> Iterator[StreamRecord]:
    with path.open() as fh:
        for line, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                obj = json.loads(text)
            except json.JSONDecodeError as exc:
                raise RecordError(path, line, f"invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict) or "features" not in obj:
                raise RecordError(path, line, "record must be an object with a 'features' list")
            feats = obj["features"]
            if not isinstance(feats, list):
                raise RecordError(path, line, "'features' must be a list")
            yield StreamRecord(
                id=str(obj.get("id", line)),
                features=_features(feats, path, line),
                label=_label(obj.get("label")),
                eval_label=_label(obj.get("eval_label")),
                line=line,
            )

"""Training records and their json-lines / csv report files.

Json-lines reports hold one object per line, preceded by a header object
``{"schema_version": 1, "config": {...}}``. Csv reports
carry the same header as a ``# `` comment line followed by a column row.
Floats are written in shortest round-trip form, missing values as null / empty.
"""

from __future__ import annotations

import csv
import json
import logging
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field, fields
from enum import StrEnum
from pathlib import Path
from typing import Any, Protocol

from .const import REPORT_SCHEMA_VERSION
from .exceptions import ReportWriteFailed

_LOGGER = logging.getLogger(__name__)

COMMENT_PREFIX = "# "
TIMING_FIELD = "wall_time"
TEXT_COLUMNS = frozenset({"kind", "split", "mode", "placement", "layer"})


class ReportFormat(StrEnum):
    """Report file format."""

    JSONL = "jsonl"
    CSV = "csv"


class RecordKind(StrEnum):
    """Training record kind."""

    EPOCH = "epoch"
    EVAL = "eval"


class Reportable(Protocol):
    """Anything exportable as one report row."""

    def to_row(self, include_timing: bool = False) -> dict[str, Any]:
        """Row form."""


@dataclass(frozen=True)
class TrainRecord:
    """One epoch summary or one verification evaluation."""

    kind: RecordKind
    epoch: int
    step: int
    l_cen: float | None = None
    l_unc: float | None = None
    kl_term: float | None = None
    nll_term: float | None = None
    total: float | None = None
    train_accuracy: float | None = None
    verification_accuracy: float | None = None
    sigma_min: float | None = None
    sigma_mean: float | None = None
    sigma_max: float | None = None
    wall_time: float = field(default=0.0, compare=False)

    def to_row(self, include_timing: bool = False) -> dict[str, Any]:
        """Row form; wall time only on request."""
        row: dict[str, Any] = {f.name: getattr(self, f.name) for f in fields(self)}
        row["kind"] = str(self.kind)
        if not include_timing:
            del row[TIMING_FIELD]
        return row

    @classmethod
    def from_row(cls, row: Mapping[str, Any]) -> TrainRecord:
        """Rebuild from a parsed row."""

        def optional(name: str) -> float | None:
            value = row.get(name)
            return None if value is None else float(value)

        return cls(
            kind=RecordKind(row["kind"]),
            epoch=int(row["epoch"]),
            step=int(row["step"]),
            l_cen=optional("l_cen"),
            l_unc=optional("l_unc"),
            kl_term=optional("kl_term"),
            nll_term=optional("nll_term"),
            total=optional("total"),
            train_accuracy=optional("train_accuracy"),
            verification_accuracy=optional("verification_accuracy"),
            sigma_min=optional("sigma_min"),
            sigma_mean=optional("sigma_mean"),
            sigma_max=optional("sigma_max"),
            wall_time=float(row.get(TIMING_FIELD) or 0.0),
        )


def record_columns(include_timing: bool = False) -> list[str]:
    """Column order of TrainRecord rows."""
    names = [f.name for f in fields(TrainRecord)]
    return names if include_timing else [n for n in names if n != TIMING_FIELD]


def _rows(
    records: Iterable[Reportable | Mapping[str, Any]],
    include_timing: bool,
) -> list[dict[str, Any]]:
    rows = []
    for record in records:
        if isinstance(record, Mapping):
            rows.append(dict(record))
        else:
            rows.append(record.to_row(include_timing=include_timing))
    return rows


def _columns(rows: list[dict[str, Any]], include_timing: bool) -> list[str]:
    if not rows:
        return record_columns(include_timing)
    columns: dict[str, None] = {}
    for row in rows:
        columns.update(dict.fromkeys(row))
    return list(columns)


def _header_object(config: Mapping[str, Any] | None) -> dict[str, Any]:
    return {"schema_version": REPORT_SCHEMA_VERSION, "config": dict(config or {})}


def export_report(
    records: Iterable[Reportable | Mapping[str, Any]],
    path: Path | str,
    fmt: ReportFormat = ReportFormat.JSONL,
    config: Mapping[str, Any] | None = None,
    include_timing: bool = False,
) -> None:
    """Write records to path."""
    path = Path(path)
    rows = _rows(records, include_timing)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as stream:
            if fmt is ReportFormat.JSONL:
                stream.write(json.dumps(_header_object(config)) + "\n")
                for row in rows:
                    stream.write(json.dumps(row) + "\n")
            else:
                stream.write(COMMENT_PREFIX + json.dumps(_header_object(config)) + "\n")
                writer = csv.DictWriter(
                    stream,
                    fieldnames=_columns(rows, include_timing),
                    restval="",
                    lineterminator="\n",
                )
                writer.writeheader()
                writer.writerows(
                    {k: "" if v is None else v for k, v in row.items()} for row in rows
                )
    except OSError as e:
        raise ReportWriteFailed(f"cannot write report {path}: {e}") from e
    _LOGGER.debug("[%s] Wrote %s rows", path, len(rows))


def _cell(column: str, text: str) -> Any:  # noqa: ANN401
    if text == "":
        return None
    if column in TEXT_COLUMNS:
        return text
    for convert in (int, float):
        try:
            return convert(text)
        except ValueError:
            continue
    return text


def load_report(
    path: Path | str,
    fmt: ReportFormat | None = None,
) -> tuple[dict[str, Any] | None, list[dict[str, Any]]]:
    """Parse a report back into its header and rows."""
    path = Path(path)
    if fmt is None:
        fmt = ReportFormat.CSV if path.suffix == ".csv" else ReportFormat.JSONL
    header: dict[str, Any] | None = None
    with path.open(encoding="utf-8", newline="") as stream:
        lines = stream.read().splitlines()
    if fmt is ReportFormat.JSONL:
        rows = [json.loads(line) for line in lines if line.strip()]
        if rows and "schema_version" in rows[0]:
            header = rows.pop(0)
        return header, rows
    if lines and lines[0].startswith(COMMENT_PREFIX):
        header = json.loads(lines.pop(0)[len(COMMENT_PREFIX) :])
    reader = csv.DictReader(lines)
    return header, [{k: _cell(k, v) for k, v in row.items()} for row in reader]

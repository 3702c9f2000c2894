"""Test report export and reload."""

import json
from pathlib import Path

import pytest

from partialbnn.data import Split
from partialbnn.evaluate import EvalMode, EvalResult
from partialbnn.exceptions import ReportWriteFailed
from partialbnn.report import (
    RecordKind,
    ReportFormat,
    TrainRecord,
    export_report,
    load_report,
    record_columns,
)

CONFIG = {"command": "train", "groups": "5", "lr": 0.05}


def sample_records() -> list[TrainRecord]:
    """One epoch of records, with awkward floats."""
    return [
        TrainRecord(
            kind=RecordKind.EPOCH,
            epoch=1,
            step=44,
            l_cen=1.9459101090932196,
            l_unc=0.1 + 0.2,
            kl_term=1e-300,
            nll_term=2.5e-7,
            total=2.2459101090932196,
            train_accuracy=0.25,
            sigma_min=0.0067,
            sigma_mean=0.0068,
            sigma_max=0.0071,
            wall_time=3.5,
        ),
        TrainRecord(
            kind=RecordKind.EVAL,
            epoch=1,
            step=44,
            verification_accuracy=1 / 3,
            wall_time=0.25,
        ),
    ]


class TestRoundTrip:
    """Test export then load."""

    @pytest.mark.parametrize(
        ("fmt", "suffix"),
        [(ReportFormat.JSONL, "jsonl"), (ReportFormat.CSV, "csv")],
    )
    def test_records(self, tmp_path: Path, fmt: ReportFormat, suffix: str) -> None:
        """Test records and header survive exactly."""
        path = tmp_path / f"train.{suffix}"
        records = sample_records()
        export_report(records, path, fmt, config=CONFIG)
        header, rows = load_report(path)
        assert header == {"schema_version": 1, "config": CONFIG}
        assert [TrainRecord.from_row(row) for row in rows] == records
        assert rows[1]["l_cen"] is None
        assert "wall_time" not in rows[0]

    @pytest.mark.parametrize("fmt", list(ReportFormat))
    def test_timing(self, tmp_path: Path, fmt: ReportFormat) -> None:
        """Test wall time appears only on request."""
        path = tmp_path / f"train.{fmt}"
        export_report(sample_records(), path, fmt, include_timing=True)
        header, rows = load_report(path, fmt)
        assert header == {"schema_version": 1, "config": {}}
        assert [row["wall_time"] for row in rows] == [3.5, 0.25]
        assert TrainRecord.from_row(rows[0]).wall_time == 3.5

    def test_mixed_rows(self, tmp_path: Path) -> None:
        """Test csv columns are the union over every row."""
        path = tmp_path / "train.csv"
        result = EvalResult(
            split=Split.PUBLIC_TEST,
            accuracy=0.5,
            n_correct=3,
            n_total=6,
            mode=EvalMode.MC,
            mc_samples=8,
        )
        export_report([*sample_records(), result], path, ReportFormat.CSV)
        _, rows = load_report(path)
        assert rows[-1]["kind"] == "result"
        assert rows[-1]["mode"] == "mc(8)"
        assert rows[-1]["n_correct"] == 3
        assert rows[-1]["epoch"] is None
        assert rows[0]["split"] is None

    def test_plain_mappings(self, tmp_path: Path) -> None:
        """Test dict rows are written as given."""
        path = tmp_path / "sweep.jsonl"
        export_report([{"placement": "1,5", "accuracy": 0.75}], path)
        header, rows = load_report(path)
        assert header == {"schema_version": 1, "config": {}}
        assert rows == [{"placement": "1,5", "accuracy": 0.75}]

    def test_text_columns(self, tmp_path: Path) -> None:
        """Test placement labels stay strings when read back from csv."""
        path = tmp_path / "sweep.csv"
        export_report(
            [{"placement": "5", "split": "PublicTest", "accuracy": 0.75}],
            path,
            ReportFormat.CSV,
        )
        _, rows = load_report(path)
        assert rows == [{"placement": "5", "split": "PublicTest", "accuracy": 0.75}]


class TestLayout:
    """Test file layout."""

    def test_empty_csv(self, tmp_path: Path) -> None:
        """Test no records leaves the header and the column row."""
        path = tmp_path / "empty.csv"
        export_report([], path, ReportFormat.CSV)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines == [
            '# {"schema_version": 1, "config": {}}',
            ",".join(record_columns()),
        ]
        assert load_report(path) == ({"schema_version": 1, "config": {}}, [])

    def test_empty_jsonl(self, tmp_path: Path) -> None:
        """Test no records leaves only the header."""
        path = tmp_path / "empty.jsonl"
        export_report([], path)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines == ['{"schema_version": 1, "config": {}}']
        assert load_report(path) == ({"schema_version": 1, "config": {}}, [])

    def test_header_first(self, tmp_path: Path) -> None:
        """Test the config header precedes every record."""
        path = tmp_path / "train.jsonl"
        export_report(sample_records(), path, config=CONFIG)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert len(lines) == 3
        assert json.loads(lines[0])["schema_version"] == 1
        assert json.loads(lines[1])["kind"] == "epoch"

    def test_csv_comment_header(self, tmp_path: Path) -> None:
        """Test csv carries the header as a comment line."""
        path = tmp_path / "train.csv"
        export_report(sample_records(), path, ReportFormat.CSV, config=CONFIG)
        first, second = path.read_text(encoding="utf-8").splitlines()[:2]
        assert first.startswith("# {")
        assert second.startswith("kind,epoch,step")

    def test_creates_directory(self, tmp_path: Path) -> None:
        """Test missing parent directories are created."""
        path = tmp_path / "a" / "b" / "train.jsonl"
        export_report(sample_records(), path)
        assert path.exists()

    def test_write_failure(self, tmp_path: Path) -> None:
        """Test an unwritable target."""
        with pytest.raises(ReportWriteFailed):
            export_report(sample_records(), tmp_path)

    def test_columns(self) -> None:
        """Test record column order."""
        columns = record_columns()
        assert columns[:3] == ["kind", "epoch", "step"]
        assert "wall_time" not in columns
        assert record_columns(include_timing=True)[-1] == "wall_time"

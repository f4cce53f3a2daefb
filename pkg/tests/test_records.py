from pathlib import Path

import pytest

from quantssl.records import RecordError, detect_format, read_records

DATA = Path(__file__).parent / "data"


def test_reads_csv_with_reserved_columns():
    recs = list(read_records(DATA / "smoke.csv"))
    assert len(recs) == 10
    assert recs[0].id == "s1" and recs[0].features == (-3.0, 0.0) and recs[0].label == "pos"
    assert recs[2].label is None and recs[2].eval_label == "pos"
    assert recs[5].eval_label is None
    assert recs[0].line == 2


def test_reads_jsonl_and_skips_blank_lines():
    recs = list(read_records(DATA / "smoke.jsonl"))
    assert [r.id for r in recs] == ["j1", "j2", "4"]
    assert recs[1].eval_label == "neg" and recs[2].label is None


def test_format_detection():
    assert detect_format(Path("a.jsonl")) == "jsonl"
    assert detect_format(Path("a.NDJSON")) == "jsonl"
    assert detect_format(Path("a.tsv")) == "csv"


def test_tsv_and_missing_id(tmp_path):
    p = tmp_path / "x.tsv"
    p.write_text("f1\tf2\n1\t2\n3\t4\n")
    recs = list(read_records(p))
    assert [r.id for r in recs] == ["1", "2"]
    assert recs[1].features == (3.0, 4.0)


@pytest.mark.parametrize(
    "body,msg",
    [
        ("id,a,b\n1,2\n", "expected 3 fields"),
        ("id,a\n1,x\n", "non-numeric"),
        ("id,a\n1,nan\n", "non-finite"),
        ("id,label\n1,pos\n", "no feature columns"),
    ],
)
def test_csv_errors_name_the_line(tmp_path, body, msg):
    p = tmp_path / "bad.csv"
    p.write_text(body)
    with pytest.raises(RecordError, match=msg) as err:
        list(read_records(p))
    assert err.value.line in (1, 2)


def test_dimension_change_is_an_error(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"features": [1, 2]}\n{"features": [1, 2, 3]}\n')
    with pytest.raises(RecordError, match="dimension changed") as err:
        list(read_records(p))
    assert err.value.line == 2


@pytest.mark.parametrize("line", ['{"features": 3}', "[1, 2]", "{oops"])
def test_jsonl_errors(tmp_path, line):
    p = tmp_path / "bad.jsonl"
    p.write_text(line + "\n")
    with pytest.raises(RecordError):
        list(read_records(p))


def test_empty_file_yields_nothing(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("")
    assert list(read_records(p)) == []

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import FIXTURES
from pipewright.model import ColumnType, TaskSpec
from pipewright.profiling import (ProfilingError, cell_type, detect_delimiter, detect_header,
                                  infer_type, load_inputs, parse_rows, profile_file,
                                  profile_inputs, summarize)


@pytest.mark.parametrize("cell,kind", [
    ("12", ColumnType.INTEGER), ("-3", ColumnType.INTEGER), ("1.5", ColumnType.REAL),
    ("1e3", ColumnType.REAL), ("yes", ColumnType.BOOLEAN), ("2021-03-04", ColumnType.DATETIME),
    ("2021-13-04", ColumnType.TEXT), ("west", ColumnType.TEXT), ("NA", None), ("", None),
])
def test_cell_types(cell, kind):
    assert cell_type(cell) is kind


def test_majority_vote():
    assert infer_type(["1", "2", "x"]) is ColumnType.INTEGER
    assert infer_type(["1", "2.5", "x"]) is ColumnType.REAL
    assert infer_type(["1", "x"]) is ColumnType.TEXT
    assert infer_type(["", "null"]) is ColumnType.UNKNOWN


def test_delimiters():
    assert detect_delimiter("a,b\n1,2\n") == ","
    assert detect_delimiter("a\tb\n1\t2\n") == "\t"
    assert detect_delimiter("2021  1  0  23\n2021  1  1  30\n") == "whitespace"
    assert detect_delimiter("single\ncolumn\n") == ","


def test_header_detection():
    assert detect_header(parse_rows("x,y\n1,2\n3,4\n", ","))
    assert not detect_header(parse_rows("1,2\n3,4\n5,6\n", ","))
    assert detect_header(parse_rows("name,n\nfoo,2\n", ","))
    assert not detect_header(parse_rows("1,2\n", ","))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.integers(0, 10**6), min_size=3, max_size=3), min_size=2, max_size=20))
def test_numeric_files_are_headerless(rows):
    text = "\n".join(",".join(map(str, r)) for r in rows)
    assert not detect_header(parse_rows(text, ","))


def test_profile_with_header(tmp_path):
    p = tmp_path / "Sales Data.csv"
    p.write_text("id,region,amount,when\n1,west,2.5,2020-01-01\n2,,3,2020-01-02\n3,east,NA,\n")
    fp = profile_file(p)
    assert fp.name == "sales_data" and fp.has_header and fp.row_count == 3
    types = dict(zip(fp.column_names, fp.column_types))
    assert types == {"id": "integer", "region": "text", "amount": "real", "when": "datetime"}
    amount = fp.columns[2]
    assert amount.null_rate == pytest.approx(1 / 3) and (amount.min, amount.max) == (2.5, 3.0)
    assert fp.columns[1].sample_values == ("west", "east")


def test_headerless_whitespace_file(tmp_path):
    p = tmp_path / "omni.dat"
    p.write_text("2021   1  0  23 9999\n2021   1  1  30  410\n2021   1  2  27  402\n")
    fp = profile_file(p)
    assert not fp.has_header and fp.delimiter == "whitespace"
    assert fp.column_names == ["c0", "c1", "c2", "c3", "c4"]
    assert "headerless" in summarize((fp,)) and "whitespace-aligned" in summarize((fp,))


def test_ragged_and_empty_files(tmp_path):
    rag = tmp_path / "rag.csv"
    rag.write_text("a,b\n1,2\n3\n")
    assert profile_file(rag).warnings
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    fp = profile_file(empty)
    assert fp.row_count == 0 and fp.warnings == ("empty file",)
    with pytest.raises(ProfilingError):
        profile_file(tmp_path / "missing.csv")


def test_profiling_is_deterministic():
    task = TaskSpec("q", [FIXTURES / "golden" / "sales.csv"])
    a, b = profile_inputs(task), profile_inputs(task)
    assert a.to_dict() == b.to_dict() and a.summary == b.summary


def test_duplicate_stems_get_distinct_names(tmp_path):
    (tmp_path / "x").mkdir()
    (tmp_path / "data.csv").write_text("a\n1\n")
    (tmp_path / "x" / "data.csv").write_text("a\n2\n")
    profile = profile_inputs(TaskSpec("q", [tmp_path / "data.csv", tmp_path / "x" / "data.csv"]))
    assert [f.name for f in profile.files] == ["data", "data_2"]


def test_loaded_tables_follow_profile(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("id,flag,score\n1,yes,\n2,no,4.5\n")
    tables = load_inputs(profile_inputs(TaskSpec("q", [p])))
    t = tables["t"]
    assert t["id"].dtype == "int64" and str(t["flag"].dtype) == "boolean"
    assert t["score"].isna().tolist() == [True, False]


def test_summary_caps_columns(tmp_path):
    p = tmp_path / "wide.csv"
    p.write_text(",".join(f"c{i}x" for i in range(40)) + "\n" + ",".join("1" * 40) + "\n")
    text = summarize((profile_file(p),), max_columns=30)
    assert "and 10 more columns" in text

import pytest
from hypothesis import given
from hypothesis import strategies as st

from prodsys.datamodel import (
    BASES,
    DataType,
    Dataset,
    DatasetStatus,
    EventRange,
    MalformedQualifier,
    TransformKind,
    TransformationSpec,
    TypeMismatch,
    UnknownBase,
    check_edge,
    parse_data_type,
    partition_events,
)


def spec(src, dst="AOD", kind=TransformKind.TRANSFORM, **kw):
    return TransformationSpec("t", parse_data_type(src), (parse_data_type(dst),), 1.0, kind, **kw)


@pytest.mark.parametrize(
    "text, base, qualifier",
    [("RAW", "RAW", None), ("NTUP_FTK", "NTUP", "FTK"), ("DESD_FTK", "DESD", "FTK"), ("RDO_FTK", "RDO", "FTK")],
)
def test_parse_data_type(text, base, qualifier):
    dt = parse_data_type(text)
    assert (dt.base, dt.qualifier) == (base, qualifier)


def test_parse_splits_on_first_underscore_only():
    assert parse_data_type("NTUP_FTK_V2") == DataType("NTUP", "FTK_V2")


@pytest.mark.parametrize("text", ["XYZ", "raw", "NTUPX_FTK"])
def test_unknown_base(text):
    with pytest.raises(UnknownBase):
        parse_data_type(text)


@pytest.mark.parametrize("text", ["NTUP_ftk", "AOD_", "AOD_A-B", ""])
def test_malformed_qualifier(text):
    with pytest.raises(MalformedQualifier):
        parse_data_type(text)


@pytest.mark.parametrize("name", ["RAW", "ESD", "AOD", "DPD", "RDO", "DESD", "DAOD", "NTUP", "NTUP_FTK", "HIST"])
def test_format_parse_roundtrip(name):
    assert str(parse_data_type(name)) == name


@given(st.sampled_from(BASES), st.one_of(st.none(), st.from_regex(r"[A-Z0-9][A-Z0-9_]{0,6}", fullmatch=True)))
def test_format_parse_roundtrip_property(base, qualifier):
    dt = DataType(base, qualifier)
    assert parse_data_type(str(dt)) == dt


def test_partition_examples():
    assert partition_events(1000, 100) == [EventRange(i * 100, 100) for i in range(10)]
    r = partition_events(1001, 100)
    assert len(r) == 11 and r[-1] == EventRange(1000, 1)
    assert partition_events(0, 50) == []


@given(st.integers(0, 5000), st.integers(1, 700))
def test_partition_property(total, chunk):
    ranges = partition_events(total, chunk)
    assert len(ranges) == -(-total // chunk)
    assert sum(r.count for r in ranges) == total
    pos = 0
    for r in ranges:
        assert r.first == pos
        pos = r.stop
    assert all(r.count == chunk for r in ranges[:-1])


def test_event_range_invariants():
    with pytest.raises(ValueError):
        EventRange(0, 0)
    with pytest.raises(ValueError):
        EventRange(-1, 3)
    assert EventRange(10, 5).halves() == (EventRange(10, 3), EventRange(13, 2))


def test_check_edge_examples():
    assert check_edge(parse_data_type("ESD"), spec("ESD")) is None
    diag = check_edge(parse_data_type("RAW"), spec("ESD"))
    assert isinstance(diag, TypeMismatch) and "RAW" in str(diag) and "ESD" in str(diag)
    assert isinstance(check_edge(parse_data_type("NTUP_FTK"), spec("NTUP")), TypeMismatch)


@given(st.sampled_from(BASES), st.sampled_from(BASES), st.sampled_from(BASES))
def test_check_edge_depends_only_on_input_type(produced, wanted, out):
    s = TransformationSpec("t", DataType(wanted), (DataType(out),), 2.0)
    assert (check_edge(DataType(produced), s) is None) == (produced == wanted)


def test_transformation_invariants():
    with pytest.raises(ValueError):
        TransformationSpec("m", DataType("AOD"), (DataType("DAOD"),), 1.0, TransformKind.MERGE)
    with pytest.raises(ValueError):
        TransformationSpec("t", DataType("AOD"), (DataType("AOD"),), 0.0)
    with pytest.raises(ValueError):
        spec("AOD", "DAOD", TransformKind.FILTER, selectivity=0.0)
    with pytest.raises(ValueError):
        TransformationSpec("t", DataType("AOD"), (), 1.0)


@given(st.integers(0, 10_000), st.integers(0, 10_000), st.floats(0.01, 1.0))
def test_filter_selection_is_additive(a, b, s):
    f = spec("AOD", "DAOD", TransformKind.FILTER, selectivity=s)
    lo, hi = sorted((a, b))
    if hi - lo < 2:
        return
    mid = (lo + hi) // 2
    whole = f.selected(EventRange(lo, hi - lo))
    assert whole == f.selected(EventRange(lo, mid - lo)) + f.selected(EventRange(mid, hi - mid))
    assert 0 <= whole <= hi - lo


def test_dataset_invariants():
    aod = DataType("AOD")
    ds = Dataset.complete("d", aod, 10)
    assert ds.status is DatasetStatus.COMPLETE and ds.ranges == (EventRange(0, 10),)
    assert Dataset.complete("e", aod, 0).status is DatasetStatus.FAILED
    with pytest.raises(ValueError):
        Dataset("x", aod, 0, (), DatasetStatus.COMPLETE)
    with pytest.raises(ValueError):
        Dataset("x", aod, 10, (EventRange(0, 5),), DatasetStatus.COMPLETE)
    with pytest.raises(ValueError):
        Dataset("x", aod, 10, (EventRange(4, 3), EventRange(0, 2)), DatasetStatus.PARTIAL)
    Dataset("x", aod, 10, (EventRange(0, 2), EventRange(4, 3)), DatasetStatus.PARTIAL)

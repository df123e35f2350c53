import pytest
from hypothesis import given
from hypothesis import strategies as st

from prodsys.protocol import (
    LayerMessage,
    MessageKind,
    ProtocolError,
    decode,
    encode,
    job_status,
    task_activate,
    task_status,
)

json_scalars = st.one_of(
    st.none(), st.booleans(), st.integers(-(2**53), 2**53), st.floats(allow_nan=False, allow_infinity=False), st.text(max_size=12)
)
json_values = st.recursive(
    json_scalars,
    lambda inner: st.one_of(st.lists(inner, max_size=4), st.dictionaries(st.text(max_size=6), inner, max_size=4)),
    max_leaves=12,
)


@given(extra=st.dictionaries(st.text(min_size=1, max_size=8), json_values, max_size=5))
def test_roundtrip_with_arbitrary_extra_fields(extra):
    body = {**extra, "task": "t", "state": "running", "time": 1.5}
    msg = LayerMessage(MessageKind.TASK_STATUS, body)
    assert decode(encode(msg)) == msg
    assert encode(decode(encode(msg))) == encode(msg)


def test_builders_roundtrip(reco_workflow):
    msgs = [
        task_activate(reco_workflow.tasks["r1.recon"], 0.0),
        task_status("r1.recon", "running", 3.0),
        job_status("r1.recon#0", "r1.recon", "A", 1, "success", 0.0, 10.0),
    ]
    for m in msgs:
        assert decode(encode(m)) == m
    body = msgs[0].body
    assert body["transformation"]["input"] == "RAW" and body["outputs"] == ["r1.recon.ESD"]


@pytest.mark.parametrize(
    "text",
    [
        "not json",
        "[]",
        '{"v": 2, "kind": "TaskStatus", "body": {"task": "t", "state": "s", "time": 0}}',
        '{"v": 1, "kind": "Nope", "body": {}}',
        '{"v": 1, "kind": "TaskStatus", "body": {"task": "t"}}',
        '{"v": 1, "kind": "TaskStatus", "body": {}, "extra": 1}',
    ],
)
def test_decode_rejects_bad_messages(text):
    with pytest.raises(ProtocolError):
        decode(text)


def test_non_json_body_rejected():
    with pytest.raises(ProtocolError):
        LayerMessage(MessageKind.TASK_STATUS, {"task": "t", "state": "s", "time": float("nan")})

import socket

import pytest
from hypothesis import given
from hypothesis import strategies as st

from raptor.errors import WireError
from raptor.flight import Membership, PeeringRequest, StateUpdate
from raptor.wire import HEADER, decode, encode, read_message, write_message

json_values = st.recursive(
    st.none() | st.booleans() | st.integers(-2**40, 2**40) | st.text(max_size=10),
    lambda inner: st.lists(inner, max_size=4) | st.dictionaries(st.text(max_size=5), inner, max_size=4),
    max_leaves=10,
)

messages = st.one_of(
    st.builds(StateUpdate, st.text(min_size=1, max_size=8), st.text(min_size=1, max_size=8), json_values,
              st.just(False), st.integers(0, 8), st.integers(1, 1000)),
    st.builds(StateUpdate, st.text(min_size=1, max_size=8), st.text(min_size=1, max_size=8), st.none(),
              st.just(True), st.integers(0, 8), st.integers(1, 1000)),
    st.builds(PeeringRequest, st.text(min_size=1, max_size=8), st.integers(1, 8), st.just("127.0.0.1:9")),
    st.builds(Membership, st.text(min_size=1, max_size=8),
              st.dictionaries(st.integers(0, 8), st.just("h:1"), min_size=1).map(lambda d: tuple(sorted(d.items())))),
)


@given(messages)
def test_roundtrip(msg):
    assert decode(encode(msg)) == msg


def test_frame_layout_is_length_prefixed_json():
    frame = encode(PeeringRequest("a", 1, "h:1"))
    (n,) = HEADER.unpack_from(frame)
    assert n == len(frame) - 4
    assert frame[4:5] == b"{"


@pytest.mark.parametrize("frame", [
    b"\x00\x00",
    HEADER.pack(10) + b"{}",
    HEADER.pack(2) + b"{}",
    HEADER.pack(17) + b'{"kind": "bogus"}',
])
def test_bad_frames(frame):
    with pytest.raises(WireError):
        decode(frame)


def test_error_update_with_output_is_rejected_on_decode():
    body = b'{"kind":"state_update","activation_id":"a","task":"t","output":1,"is_error":true,' \
           b'"origin_offset":0,"sequence":1}'
    with pytest.raises(WireError):
        decode(HEADER.pack(len(body)) + body)


def test_stream_of_messages_over_a_socket():
    a, b = socket.socketpair()
    with a, b:
        msgs = [PeeringRequest("x", 1, "h:1"), StateUpdate("x", "t", [1, 2], False, 1, 1)]
        for m in msgs:
            write_message(a, m)
        a.shutdown(socket.SHUT_WR)
        assert [read_message(b), read_message(b), read_message(b)] == [*msgs, None]


def test_truncated_stream_raises():
    a, b = socket.socketpair()
    with a, b:
        a.sendall(encode(PeeringRequest("x", 1, "h:1"))[:-3])
        a.shutdown(socket.SHUT_WR)
        with pytest.raises(WireError):
            read_message(b)

"""Wire protocol unit tests: frozen fixtures, round-trips, stream decoding."""

import math
import random
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from taskfarm import proto
from taskfarm.proto import (
    Ack, DispatchMode, ErrorClass, FrameDecoder, Heartbeat, InputFile, MsgKind,
    OutputFile, ProtocolError, Register, Result, Role, Shutdown, StatusQuery,
    StatusReply, Submit, SubmitReply, SubmitStatus, Suspend, TaskBundle,
    TaskDispatch, TaskRequest, TaskResult, TaskSpec, WireCalibration,
    bundle_tasks, decode_frame, encode_frame, estimate_wire_bytes_per_task,
)

FIXTURES = Path(__file__).parent / "fixtures" / "frames.txt"


def load_fixtures():
    rows = []
    for line in FIXTURES.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, kind, sender, hexpart = (p.strip() for p in line.split("|"))
        rows.append((name, int(kind), int(sender), bytes.fromhex(hexpart)))
    return rows


@pytest.mark.parametrize("name,kind,sender,raw", load_fixtures(),
                         ids=[r[0] for r in load_fixtures()])
def test_fixture_decodes(name, kind, sender, raw):
    got_sender, msg = decode_frame(raw)
    assert got_sender == sender
    assert proto.kind_of(msg) == kind
    # decode -> encode must reproduce the exact bytes
    assert encode_frame(sender, msg) == raw


def test_heartbeat_is_13_bytes_with_length_9():
    raw = encode_frame(7, Heartbeat())
    assert len(raw) == 13
    assert raw[:4] == (9).to_bytes(4, "little")
    assert raw.hex() == "0900000005" + "0700000000000000"


def test_dispatch_body_contains_verbatim_command():
    spec = TaskSpec(bytes(range(16)), "/bin/sleep 0")
    raw = encode_frame(1, TaskDispatch(0, spec))
    assert raw.count(b"/bin/sleep 0") == 1


SPEC_FULL = TaskSpec(
    task_id=bytes.fromhex("00112233445566778899aabbccddeeff"),
    command="/usr/bin/env python3 run.py --n 7",
    payload=b"\x00\x01binary\xff",
    inputs=(InputFile("db", "/data/db.bin", True),
            InputFile("cfg", "conf/x.yml", False)),
    outputs=(OutputFile("out", "results/x.out"),),
)

RESULT_FULL = TaskResult(
    task_id=b"\xab" * 16, exit_code=-9, error_class=ErrorClass.APP,
    worker_id=2**63 + 5, dispatched_ns=10**15, started_ns=10**15 + 10,
    finished_ns=2**63, detail="killed by signal 9",
)

MESSAGES = [
    Register(Role.WORKER, DispatchMode.PULL, 8, "blk-0"),
    Register(Role.CLIENT, DispatchMode.PUSH, 0, ""),
    TaskDispatch(123456789, SPEC_FULL),
    TaskBundle(42, (SPEC_FULL, TaskSpec(b"\x01" * 16, "true"))),
    Result((RESULT_FULL,)),
    Result(()),
    Heartbeat(),
    Suspend(),
    Shutdown(False),
    Shutdown(True),
    Ack(MsgKind.REGISTER, 2**64 - 1, b'{"run_id":"abc"}'),
    TaskRequest(17),
    Submit(3, (SPEC_FULL,)),
    SubmitReply(3, ((b"\x07" * 16, SubmitStatus.ACCEPTED),
                    (b"\x08" * 16, SubmitStatus.ALREADY_COMPLETE))),
    StatusQuery(),
    StatusReply(b'{"queued":0}'),
]


@pytest.mark.parametrize("msg", MESSAGES, ids=lambda m: type(m).__name__)
def test_roundtrip_every_kind(msg):
    for sender in (0, 1, 2**64 - 1):
        sender_out, decoded = decode_frame(encode_frame(sender, msg))
        assert sender_out == sender
        assert decoded == msg


# --- property-based round-trips ---------------------------------------------

st_id = st.binary(min_size=16, max_size=16)
st_name = st.text(max_size=40)
st_spec = st.builds(
    TaskSpec,
    task_id=st_id,
    command=st.text(max_size=200),
    payload=st.binary(max_size=2000),
    inputs=st.tuples(*[st.builds(InputFile, st_name, st_name, st.booleans())] * 2)
        | st.just(()),
    outputs=st.tuples(st.builds(OutputFile, st_name, st_name)) | st.just(()),
)
st_result = st.builds(
    TaskResult,
    task_id=st_id,
    exit_code=st.integers(-(2**31), 2**31 - 1),
    error_class=st.sampled_from(ErrorClass),
    worker_id=st.integers(0, 2**64 - 1),
    dispatched_ns=st.integers(0, 2**64 - 1),
    started_ns=st.integers(0, 2**64 - 1),
    finished_ns=st.integers(0, 2**64 - 1),
    detail=st.text(max_size=100),
)
st_message = st.one_of(
    st.builds(Register, st.sampled_from(Role), st.sampled_from(DispatchMode),
              st.integers(0, 2**32 - 1), st_name),
    st.builds(TaskDispatch, st.integers(0, 2**64 - 1), st_spec),
    st.builds(TaskBundle, st.integers(0, 2**64 - 1),
              st.lists(st_spec, max_size=4).map(tuple)),
    st.builds(Result, st.lists(st_result, max_size=4).map(tuple)),
    st.just(Heartbeat()),
    st.just(Suspend()),
    st.builds(Shutdown, st.booleans()),
    st.builds(Ack, st.sampled_from(MsgKind), st.integers(0, 2**64 - 1),
              st.binary(max_size=64)),
    st.builds(TaskRequest, st.integers(0, 2**32 - 1)),
    st.builds(Submit, st.integers(0, 2**32 - 1),
              st.lists(st_spec, max_size=3).map(tuple)),
    st.builds(SubmitReply, st.integers(0, 2**32 - 1),
              st.lists(st.tuples(st_id, st.sampled_from(SubmitStatus)),
                       max_size=4).map(tuple)),
    st.just(StatusQuery()),
    st.builds(StatusReply, st.binary(max_size=300)),
)


@given(sender=st.integers(0, 2**64 - 1), msg=st_message)
@settings(max_examples=300, deadline=None)
def test_property_roundtrip(sender, msg):
    sender_out, decoded = decode_frame(encode_frame(sender, msg))
    assert (sender_out, decoded) == (sender, msg)


@given(msgs=st.lists(st.tuples(st.integers(0, 2**64 - 1), st_message),
                     min_size=1, max_size=8),
       chunk=st.integers(1, 37))
@settings(max_examples=100, deadline=None)
def test_stream_decoder_arbitrary_chunking(msgs, chunk):
    stream = b"".join(encode_frame(s, m) for s, m in msgs)
    dec = FrameDecoder()
    out = []
    for i in range(0, len(stream), chunk):
        out.extend(dec.feed(stream[i:i + chunk]))
    assert out == msgs
    assert dec.pending() == 0


def test_stream_decoder_compacts_consumed_prefix():
    dec = FrameDecoder()
    frame = encode_frame(1, Heartbeat())
    n = 0
    for _ in range(40000):
        n += len(list(dec.feed(frame)))
    assert n == 40000
    assert len(dec._buf) < 200000  # consumed bytes are not retained forever


# --- malformed input ---------------------------------------------------------


def test_rejects_unknown_kind():
    raw = bytearray(encode_frame(1, Heartbeat()))
    raw[4] = 99
    with pytest.raises(ProtocolError, match="unknown message kind"):
        decode_frame(bytes(raw))


def test_rejects_bad_length_field():
    raw = bytearray(encode_frame(1, Heartbeat()))
    raw[0] = 10  # claims one more byte than present
    with pytest.raises(ProtocolError):
        decode_frame(bytes(raw))


def test_rejects_trailing_bytes_in_body():
    raw = bytearray(encode_frame(1, Shutdown(True)))
    raw += b"\x00"
    raw[0] += 1
    with pytest.raises(ProtocolError, match="trailing"):
        decode_frame(bytes(raw))


def test_rejects_truncated_body():
    raw = encode_frame(1, TaskRequest(5))
    with pytest.raises(ProtocolError):
        decode_frame(raw[:-2] + raw[-1:] if False else raw[:14])


def test_rejects_oversized_frame_header_in_stream():
    dec = FrameDecoder()
    huge = (proto.MAX_FRAME).to_bytes(4, "little") + b"\x05"
    with pytest.raises(ProtocolError, match="16 MiB"):
        list(dec.feed(huge))


def test_rejects_oversized_body_on_encode():
    with pytest.raises(ProtocolError, match="exceeds"):
        encode_frame(1, StatusReply(b"x" * proto.MAX_FRAME))


def test_frame_raw_matches_encode():
    msg = TaskDispatch(77, SPEC_FULL)
    raw = encode_frame(5, msg)
    body = raw[13:]
    assert proto.frame_raw(5, MsgKind.TASK_DISPATCH, body) == raw


def test_task_id_must_be_16_bytes():
    with pytest.raises(ValueError):
        TaskSpec(b"\x00" * 15, "true")


# --- bundling ----------------------------------------------------------------


def test_bundle_tasks_splits_preserving_order():
    specs = [TaskSpec(i.to_bytes(16, "little"), "true") for i in range(23)]
    groups = bundle_tasks(specs, 10)
    assert [len(g) for g in groups] == [10, 10, 3]
    assert [s for g in groups for s in g] == specs
    assert bundle_tasks(specs, 1) == [[s] for s in specs]
    with pytest.raises(ValueError):
        bundle_tasks(specs, 0)


def test_bundle_frame_amortizes_header_bytes():
    specs = [TaskSpec(i.to_bytes(16, "little"), "true") for i in range(10)]
    one = sum(len(encode_frame(1, TaskDispatch(0, s))) for s in specs)
    bundled = len(encode_frame(1, TaskBundle(0, tuple(specs))))
    assert bundled < one


# --- wire cost model ---------------------------------------------------------


def test_wire_model_calibration_points():
    b10, p10 = estimate_wire_bytes_per_task(10)
    assert round(b10) == 934
    assert round(p10, 2) == 7.36
    b10k, p10k = estimate_wire_bytes_per_task(10 * 1024)
    assert round(p10k, 2) == 28.67
    assert 22.2e3 <= b10k <= 22.35e3
    # header cost of the payload growth alone
    assert round(40.0 * (p10k - p10)) in range(845, 861)


def test_wire_model_monotone_and_positive():
    calib = WireCalibration()
    sizes = [0, 1, 10, 100, 1000, 10**4, 10**6]
    costs = [estimate_wire_bytes_per_task(s, calib)[0] for s in sizes]
    assert all(b > 0 for b in costs)
    assert costs == sorted(costs)
    with pytest.raises(ValueError):
        estimate_wire_bytes_per_task(-1)


def test_wire_throughput_bound():
    per_task, _ = estimate_wire_bytes_per_task(10)
    bound = proto.wire_throughput_bound(10, 100.0)
    assert bound == pytest.approx(100e6 / 8 / per_task)
    assert proto.wire_throughput_bound(10, 0) == math.inf


# --- bulk random round-trip (seeded, used again by the acceptance gate) ------


def random_message(rng: random.Random):
    kind = rng.randrange(1, 14)
    mk_id = lambda: rng.randbytes(16)
    mk_spec = lambda: TaskSpec(
        mk_id(), "".join(rng.choices("abc /.-_09", k=rng.randrange(0, 30))),
        rng.randbytes(rng.randrange(0, 64)),
        tuple(InputFile(f"in{i}", f"/p/{i}", rng.random() < 0.5)
              for i in range(rng.randrange(0, 3))),
        tuple(OutputFile(f"out{i}", f"/q/{i}")
              for i in range(rng.randrange(0, 2))),
    )
    mk_result = lambda: TaskResult(
        mk_id(), rng.randrange(-256, 256), ErrorClass(rng.randrange(0, 4)),
        rng.randrange(0, 2**64), rng.randrange(0, 2**50),
        rng.randrange(0, 2**50), rng.randrange(0, 2**50), "d" * rng.randrange(0, 9))
    if kind == 1:
        return Register(Role(rng.randrange(1, 3)), DispatchMode(rng.randrange(0, 2)),
                        rng.randrange(0, 2**32), "t" * rng.randrange(0, 5))
    if kind == 2:
        return TaskDispatch(rng.randrange(0, 2**64), mk_spec())
    if kind == 3:
        return TaskBundle(rng.randrange(0, 2**64),
                          tuple(mk_spec() for _ in range(rng.randrange(0, 4))))
    if kind == 4:
        return Result(tuple(mk_result() for _ in range(rng.randrange(0, 4))))
    if kind == 5:
        return Heartbeat()
    if kind == 6:
        return Suspend()
    if kind == 7:
        return Shutdown(rng.random() < 0.5)
    if kind == 8:
        return Ack(MsgKind(rng.randrange(1, 14)), rng.randrange(0, 2**64),
                   rng.randbytes(rng.randrange(0, 20)))
    if kind == 9:
        return TaskRequest(rng.randrange(0, 2**32))
    if kind == 10:
        return Submit(rng.randrange(0, 2**32),
                      tuple(mk_spec() for _ in range(rng.randrange(0, 3))))
    if kind == 11:
        return SubmitReply(rng.randrange(0, 2**32),
                           tuple((mk_id(), SubmitStatus(rng.randrange(0, 3)))
                                 for _ in range(rng.randrange(0, 4))))
    if kind == 12:
        return StatusQuery()
    return StatusReply(rng.randbytes(rng.randrange(0, 128)))


def test_bulk_random_roundtrip_sample():
    rng = random.Random(20260816)
    for _ in range(2000):
        sender = rng.randrange(0, 2**64)
        msg = random_message(rng)
        assert decode_frame(encode_frame(sender, msg)) == (sender, msg)

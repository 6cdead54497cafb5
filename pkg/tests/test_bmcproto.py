import random
import socket
import threading

import pytest
from hypothesis import given, settings, strategies as st

from clusteradm import bmcproto as bp
from clusteradm.bmcproto import (
    BmcMessage, ChassisState, Command, Event, Power, Reason, SensorKind, SensorRecord, Version,
)

messages = st.builds(
    BmcMessage,
    st.sampled_from(list(Version)),
    st.integers(0, 0xFFFF),
    st.sampled_from(list(Command)),
    st.binary(max_size=bp.MAX_PAYLOAD),
)
records = st.builds(
    SensorRecord,
    st.integers(0, 255),
    st.sampled_from(list(SensorKind)),
    st.integers(0, 0xFFFF),
    st.integers(0, 0xFFFF),
)

# (power, command) -> expected (power, last_event) or the error reason
TRANSITIONS = {
    (Power.OFF, Command.POWER_ON): (Power.ON, Event.POWERED_ON),
    (Power.OFF, Command.POWER_OFF): "unchanged",
    (Power.OFF, Command.POWER_CYCLE): Reason.INVALID_STATE,
    (Power.OFF, Command.GET_CHASSIS_STATE): "unchanged",
    (Power.ON, Command.POWER_ON): "unchanged",
    (Power.ON, Command.POWER_OFF): (Power.OFF, Event.POWERED_OFF),
    (Power.ON, Command.POWER_CYCLE): (Power.ON, Event.CYCLED),
    (Power.ON, Command.GET_CHASSIS_STATE): "unchanged",
}


# -- codec -----------------------------------------------------------------

def test_ack_frame_bytes():
    frame = bp.encode(BmcMessage(Version.V15, 0, Command.ACK))
    assert frame == bytes([0x42, 0x4D, 0x15, 0x00, 0x00, 0x80, 0x00, 0x00, 0xDC])
    assert len(frame) == 9
    assert sum(frame) % 256 == 0


def test_header_field_order():
    frame = bp.encode(BmcMessage(Version.V09, 0x1234, Command.POWER_CYCLE, b"\xaa\xbb"))
    assert frame[:8] == b"BM\x09\x12\x34\x04\x00\x02"
    assert frame[8:10] == b"\xaa\xbb"


@settings(max_examples=500)
@given(messages)
def test_round_trip(msg):
    assert bp.decode(bp.encode(msg)) == msg


@settings(max_examples=200)
@given(messages, st.data())
def test_single_byte_corruption_detected(msg, data):
    frame = bytearray(bp.encode(msg))
    pos = data.draw(st.integers(0, len(frame) - 1))
    delta = data.draw(st.integers(1, 255))
    frame[pos] = (frame[pos] + delta) % 256
    with pytest.raises(bp.DecodeError):
        bp.decode(bytes(frame))


def test_oversized_payload():
    with pytest.raises(ValueError):
        bp.encode(BmcMessage(Version.V15, 1, Command.ACK, b"x" * (bp.MAX_PAYLOAD + 1)))


def _frame_with(byte_index, value, msg=BmcMessage(Version.V15, 7, Command.ACK, b"ab")):
    body = bytearray(bp.encode(msg)[:-1])
    body[byte_index] = value
    return bytes(body) + bytes([bp.checksum(body)])


def test_decode_errors_are_distinct():
    good = bp.encode(BmcMessage(Version.V15, 7, Command.ACK, b"ab"))
    with pytest.raises(bp.ShortFrame):
        bp.decode(good[:5])
    with pytest.raises(bp.BadMagic):
        bp.decode(b"XX" + good[2:])
    with pytest.raises(bp.LengthMismatch):
        bp.decode(good + b"\x00")
    with pytest.raises(bp.BadChecksum):
        bp.decode(good[:-1] + bytes([(good[-1] + 1) % 256]))
    with pytest.raises(bp.UnknownVersion):
        bp.decode(_frame_with(2, 0x20))
    with pytest.raises(bp.UnknownCommand):
        bp.decode(_frame_with(5, 0x42))


@given(st.lists(records, max_size=20))
def test_dual_layout_equivalence(repo):
    for version in Version:
        assert bp.decode_sensors(bp.encode_sensors(repo, version), version) == repo
    v09, v15 = bp.encode_sensors(repo, Version.V09), bp.encode_sensors(repo, Version.V15)
    assert bp.decode_sensors(v09, Version.V09) == bp.decode_sensors(v15, Version.V15)


def test_layout_bytes():
    rec = [SensorRecord(5, SensorKind.CPU_TEMP, 45, 70)]
    assert bp.encode_sensors(rec, Version.V09) == b"\x05\x01\x00\x2d\x00\x46"
    assert bp.encode_sensors(rec, Version.V15) == b"\x01\x05\x00\x46\x00\x2d\x00\x00"


def test_malformed_sensor_payload():
    with pytest.raises(bp.MalformedPayload):
        bp.decode_sensors(b"\x00" * 7, Version.V09)
    with pytest.raises(bp.MalformedPayload):
        bp.decode_sensors(b"\x01\x09\x00\x00\x00\x00", Version.V09)


def test_sensor_kind_tokens():
    assert SensorKind.parse("cputemp") is SensorKind.CPU_TEMP
    assert SensorKind.parse("FanSpeed") is SensorKind.FAN_SPEED
    with pytest.raises(ValueError):
        SensorKind.parse("humidity")


# -- state machine ---------------------------------------------------------

@pytest.mark.parametrize("power,command", list(TRANSITIONS))
@pytest.mark.parametrize("prior_event", list(Event))
def test_transition_table(power, command, prior_event):
    state = ChassisState(power, prior_event)
    expected = TRANSITIONS[(power, command)]
    if isinstance(expected, Reason):
        with pytest.raises(bp.BmcError) as info:
            bp.transition(state, command)
        assert info.value.reason == expected
    elif expected == "unchanged":
        assert bp.transition(state, command) == state
    else:
        assert bp.transition(state, command) == ChassisState(*expected)


# -- emulator + client -----------------------------------------------------

@pytest.fixture
def emulator():
    repo = [SensorRecord(1, SensorKind.CPU_TEMP, 45, 70),
            SensorRecord(2, SensorKind.FAN_SPEED, 5400, 9000),
            SensorRecord(3, SensorKind.VOLTAGE, 1450, 1600)]
    with bp.BmcEmulator(("127.0.0.1", 0), repo, ChassisState(Power.OFF)) as emu:
        yield emu


def test_read_sensors(emulator):
    recs = bp.read_sensors(emulator.address, Version.V15)
    assert recs[0] == SensorRecord(1, SensorKind.CPU_TEMP, 45, 70)
    assert bp.read_sensors(emulator.address, Version.V09) == recs


def test_read_empty_repository():
    with bp.BmcEmulator(("127.0.0.1", 0), []) as emu:
        assert bp.read_sensors(emu.endpoint) == []


def test_power_sequence(emulator):
    assert bp.power_control(emulator.address, "on") == ChassisState(Power.ON, Event.POWERED_ON)
    assert bp.power_control(emulator.address, "cycle") == ChassisState(Power.ON, Event.CYCLED)
    assert bp.power_control(emulator.address, "off") == ChassisState(Power.OFF, Event.POWERED_OFF)
    assert bp.chassis_state(emulator.address).power == Power.OFF


def test_cycle_while_off_is_error(emulator):
    with pytest.raises(bp.BmcError) as info:
        bp.power_control(emulator.address, "cycle")
    assert info.value.reason == Reason.INVALID_STATE
    assert emulator.state.power == Power.OFF


@pytest.mark.parametrize("power", list(Power))
@pytest.mark.parametrize("command", [Command.POWER_ON, Command.POWER_OFF,
                                     Command.POWER_CYCLE, Command.GET_CHASSIS_STATE])
def test_emulator_follows_table(power, command):
    with bp.BmcEmulator(("127.0.0.1", 0), [], ChassisState(power)) as emu:
        expected = TRANSITIONS[(power, command)]
        if isinstance(expected, Reason):
            with pytest.raises(bp.BmcError):
                bp.request(emu.address, command)
            assert emu.state == ChassisState(power)
        else:
            reply = bp.request(emu.address, command)
            want = ChassisState(power) if expected == "unchanged" else ChassisState(*expected)
            assert bp.decode_state(reply.payload) == want == emu.state


def test_concurrent_power_cycles():
    with bp.BmcEmulator(("127.0.0.1", 0), [], ChassisState(Power.ON)) as emu:
        errors = []

        def client():
            try:
                bp.power_control(emu.address, "cycle")
            except Exception as e:  # noqa: BLE001
                errors.append(e)

        threads = [threading.Thread(target=client) for _ in range(100)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert errors == []
        assert emu.state == ChassisState(Power.ON, Event.CYCLED)
        assert len(emu.events) == 100
        assert all(e.command == Command.POWER_CYCLE for e in emu.events)


def test_timeout_against_silent_endpoint():
    silent = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    silent.bind(("127.0.0.1", 0))
    try:
        with pytest.raises(bp.BmcTimeout):
            bp.read_sensors(silent.getsockname(), timeout=0.05, retries=2)
        # every retry carries a fresh sequence number
        seqs = set()
        silent.settimeout(0.5)
        for _ in range(3):
            data, _ = silent.recvfrom(2048)
            seqs.add(bp.decode(data).sequence)
        assert len(seqs) == 3
    finally:
        silent.close()


def test_late_ack_from_earlier_attempt_is_accepted():
    """A slow BMC answers the first attempt after the client has retried."""
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.bind(("127.0.0.1", 0))

    def slow_bmc():
        first, peer = sock.recvfrom(2048)
        sock.recvfrom(2048)  # the retry
        msg = bp.decode(first)
        state = bp.encode_state(ChassisState(Power.ON, Event.POWERED_ON))
        sock.sendto(bp.encode(BmcMessage(msg.version, msg.sequence, Command.ACK, state)), peer)

    t = threading.Thread(target=slow_bmc)
    t.start()
    try:
        assert bp.power_control(sock.getsockname(), "on", timeout=0.2, retries=3).power == Power.ON
    finally:
        t.join()
        sock.close()


def test_garbage_datagrams_do_not_crash(emulator):
    rng = random.Random(1234)
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.settimeout(0.2)
    try:
        for _ in range(300):
            sock.sendto(bytes(rng.randrange(256) for _ in range(rng.randrange(0, 40))), emulator.address)
        # a frame with good magic but bad checksum gets an Error(BadFrame) reply
        bad = bytearray(bp.encode(BmcMessage(Version.V09, 0xBEEF, Command.GET_SENSORS)))
        bad[-1] ^= 0xFF
        sock.sendto(bytes(bad), emulator.address)
        while True:
            reply = bp.decode(sock.recvfrom(2048)[0])
            if reply.sequence == 0xBEEF:
                break
        assert reply.command == Command.ERROR and reply.payload == bytes([Reason.BAD_FRAME])
        assert reply.version == Version.V09
    finally:
        sock.close()
    assert emulator.bad_frames >= 300
    assert bp.read_sensors(emulator.address)  # still serving


def test_emulator_handle_drops_unrecoverable():
    emu = bp.BmcEmulator(("127.0.0.1", 0), [])
    try:
        assert emu.handle(b"") is None
        assert emu.handle(b"XXXXXXXXXX") is None
    finally:
        emu.stop()


def test_set_reading(emulator):
    emulator.set_reading(1, 75)
    (cpu, *_rest) = bp.read_sensors(emulator.address)
    assert cpu.reading == 75 and cpu.over


def test_emulator_config():
    text = "# farm node\nsensor 1 cputemp 45 70\nsensor 2 fanspeed 5400 9000\npower on\n"
    repo, state = bp.parse_emulator_config(text)
    assert repo == [SensorRecord(1, SensorKind.CPU_TEMP, 45, 70),
                    SensorRecord(2, SensorKind.FAN_SPEED, 5400, 9000)]
    assert state == ChassisState(Power.ON)
    with pytest.raises(ValueError, match="line 1"):
        bp.parse_emulator_config("sensor x cputemp 1 2\n")


def test_parse_address():
    assert bp.parse_address("10.0.0.5:7000") == ("10.0.0.5", 7000)
    assert bp.parse_address("bmc-w1") == ("bmc-w1", bp.DEFAULT_PORT)

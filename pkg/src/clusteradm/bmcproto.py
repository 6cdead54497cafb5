"""A small IPMI-style management protocol over UDP, plus a BMC emulator.

Frame layout (big-endian)::

    magic(2) | version(1) | sequence(2) | command(1) | payload-length(2) | payload | checksum(1)

The checksum byte makes the sum of every byte in the frame zero mod 256.

Sensor records differ between protocol versions only in layout:

    V09: id(1) kind(1) reading(2) limit(2)
    V15: kind(1) id(1) limit(2) reading(2) reserved(2)
"""

from __future__ import annotations

import argparse
import itertools
import logging
import random
import socket
import struct
import sys
import threading
import time
from dataclasses import dataclass
from enum import IntEnum

log = logging.getLogger(__name__)

MAGIC = b"BM"
HEADER = struct.Struct(">2sBHBH")
MAX_PAYLOAD = 1024
DEFAULT_PORT = 9623
DEFAULT_TIMEOUT = 2.0
DEFAULT_RETRIES = 3


class Version(IntEnum):
    V09 = 0x09
    V15 = 0x15


class Command(IntEnum):
    GET_SENSORS = 0x01
    POWER_ON = 0x02
    POWER_OFF = 0x03
    POWER_CYCLE = 0x04
    GET_CHASSIS_STATE = 0x05
    ACK = 0x80
    ERROR = 0x81


class SensorKind(IntEnum):
    CPU_TEMP = 1
    FAN_SPEED = 2
    VOLTAGE = 3

    @property
    def units(self):
        return {SensorKind.CPU_TEMP: "C", SensorKind.FAN_SPEED: "RPM", SensorKind.VOLTAGE: "mV"}[self]

    @property
    def token(self):
        return self.name.lower().replace("_", "")

    @classmethod
    def parse(cls, text: str) -> "SensorKind":
        key = text.lower().replace("_", "").replace("-", "")
        for kind in cls:
            if kind.token == key:
                return kind
        raise ValueError(f"unknown sensor kind {text!r}")


class Power(IntEnum):
    OFF = 0
    ON = 1


class Event(IntEnum):
    NONE = 0
    POWERED_ON = 1
    POWERED_OFF = 2
    CYCLED = 3


class Reason(IntEnum):
    BAD_FRAME = 1
    INVALID_STATE = 2
    UNSUPPORTED = 3


# -- errors ----------------------------------------------------------------

class DecodeError(ValueError):
    pass


class ShortFrame(DecodeError):
    pass


class BadMagic(DecodeError):
    pass


class LengthMismatch(DecodeError):
    pass


class BadChecksum(DecodeError):
    pass


class UnknownVersion(DecodeError):
    pass


class UnknownCommand(DecodeError):
    pass


class MalformedPayload(DecodeError):
    pass


class BmcError(Exception):
    """The BMC answered with an Error message."""

    def __init__(self, reason):
        try:
            reason = Reason(reason)
            text = reason.name
        except ValueError:
            text = f"reason {reason}"
        super().__init__(text)
        self.reason = reason


class BmcTimeout(Exception):
    pass


# -- types and codec ---------------------------------------------------------

@dataclass(frozen=True)
class BmcMessage:
    version: Version
    sequence: int
    command: Command
    payload: bytes = b""


@dataclass(frozen=True)
class SensorRecord:
    sensor_id: int
    kind: SensorKind
    reading: int
    upper_limit: int

    @property
    def over(self) -> bool:
        return self.reading > self.upper_limit


@dataclass(frozen=True)
class ChassisState:
    power: Power = Power.OFF
    last_event: Event = Event.NONE


def checksum(data: bytes) -> int:
    return -sum(data) & 0xFF


def encode(msg: BmcMessage) -> bytes:
    if len(msg.payload) > MAX_PAYLOAD:
        raise ValueError(f"payload of {len(msg.payload)} bytes exceeds {MAX_PAYLOAD}")
    body = HEADER.pack(MAGIC, msg.version, msg.sequence, msg.command, len(msg.payload)) + msg.payload
    return body + bytes([checksum(body)])


def decode(data: bytes) -> BmcMessage:
    if len(data) < HEADER.size + 1:
        raise ShortFrame(f"frame of {len(data)} bytes is shorter than {HEADER.size + 1}")
    magic, version, seq, command, length = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}")
    if len(data) != HEADER.size + length + 1:
        raise LengthMismatch(f"length field {length} does not match frame of {len(data)} bytes")
    if sum(data) & 0xFF:
        raise BadChecksum("checksum mismatch")
    try:
        version = Version(version)
    except ValueError:
        raise UnknownVersion(f"unknown version 0x{version:02x}") from None
    try:
        command = Command(command)
    except ValueError:
        raise UnknownCommand(f"unknown command 0x{command:02x}") from None
    return BmcMessage(version, seq, command, bytes(data[HEADER.size:-1]))


_V09 = struct.Struct(">BBHH")
_V15 = struct.Struct(">BBHHH")


def encode_sensors(records, version: Version) -> bytes:
    out = bytearray()
    for r in records:
        if version == Version.V09:
            out += _V09.pack(r.sensor_id, r.kind, r.reading, r.upper_limit)
        else:
            out += _V15.pack(r.kind, r.sensor_id, r.upper_limit, r.reading, 0)
    return bytes(out)


def decode_sensors(payload: bytes, version: Version) -> list[SensorRecord]:
    layout = _V09 if version == Version.V09 else _V15
    if len(payload) % layout.size:
        raise MalformedPayload(f"{len(payload)} bytes is not a whole number of {layout.size}-byte records")
    records = []
    for fields in layout.iter_unpack(payload):
        if version == Version.V09:
            sid, kind, reading, limit = fields
        else:
            kind, sid, limit, reading, _reserved = fields
        try:
            kind = SensorKind(kind)
        except ValueError:
            raise MalformedPayload(f"unknown sensor kind {kind}") from None
        records.append(SensorRecord(sid, kind, reading, limit))
    return records


def encode_state(state: ChassisState) -> bytes:
    return bytes([state.power, state.last_event])


def decode_state(payload: bytes) -> ChassisState:
    if len(payload) != 2:
        raise MalformedPayload(f"chassis state payload is {len(payload)} bytes, expected 2")
    try:
        return ChassisState(Power(payload[0]), Event(payload[1]))
    except ValueError as e:
        raise MalformedPayload(str(e)) from None


# -- chassis state machine -------------------------------------------------

def transition(state: ChassisState, command: Command) -> ChassisState:
    """Apply a power command; raises BmcError(INVALID_STATE) for a cycle
    while off.  Redundant on/off requests leave the state untouched."""
    if command == Command.GET_CHASSIS_STATE:
        return state
    if command == Command.POWER_ON:
        return state if state.power == Power.ON else ChassisState(Power.ON, Event.POWERED_ON)
    if command == Command.POWER_OFF:
        return state if state.power == Power.OFF else ChassisState(Power.OFF, Event.POWERED_OFF)
    if command == Command.POWER_CYCLE:
        if state.power == Power.OFF:
            raise BmcError(Reason.INVALID_STATE)
        return ChassisState(Power.ON, Event.CYCLED)
    raise BmcError(Reason.UNSUPPORTED)


# -- client ----------------------------------------------------------------

_seq_lock = threading.Lock()
_seq = itertools.count(random.randrange(0x10000))


def next_sequence() -> int:
    with _seq_lock:
        return next(_seq) & 0xFFFF


def parse_address(text: str, default_port: int = DEFAULT_PORT) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep:
        return text, default_port
    return host, int(port)


def request(endpoint, command: Command, payload: bytes = b"", version: Version = Version.V15,
            timeout: float = DEFAULT_TIMEOUT, retries: int = DEFAULT_RETRIES) -> BmcMessage:
    """Send one request and return the Ack.

    Each retry uses a fresh sequence number; a late answer to any earlier
    attempt of the same call is accepted as well.
    """
    if isinstance(endpoint, str):
        endpoint = parse_address(endpoint)
    sent = set()
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as sock:
        for _attempt in range(retries + 1):
            seq = next_sequence()
            sent.add(seq)
            sock.sendto(encode(BmcMessage(version, seq, command, payload)), endpoint)
            deadline = time.monotonic() + timeout
            while True:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                sock.settimeout(remaining)
                try:
                    data, _ = sock.recvfrom(65535)
                except socket.timeout:
                    break
                except ConnectionRefusedError:
                    # ICMP port unreachable surfaced by the kernel
                    time.sleep(min(remaining, 0.05))
                    continue
                try:
                    reply = decode(data)
                except DecodeError as e:
                    log.debug("dropping undecodable reply from %s: %s", endpoint, e)
                    continue
                if reply.sequence not in sent:
                    continue
                if reply.command == Command.ERROR:
                    raise BmcError(reply.payload[0] if reply.payload else Reason.BAD_FRAME)
                if reply.command == Command.ACK:
                    return reply
    raise BmcTimeout(f"no answer from {endpoint[0]}:{endpoint[1]} after {retries + 1} attempts")


def read_sensors(endpoint, version: Version = Version.V15, timeout: float = DEFAULT_TIMEOUT,
                 retries: int = DEFAULT_RETRIES) -> list[SensorRecord]:
    reply = request(endpoint, Command.GET_SENSORS, b"", version, timeout, retries)
    return decode_sensors(reply.payload, version)


POWER_COMMANDS = {"on": Command.POWER_ON, "off": Command.POWER_OFF, "cycle": Command.POWER_CYCLE}


def power_control(endpoint, cmd, timeout: float = DEFAULT_TIMEOUT,
                  retries: int = DEFAULT_RETRIES) -> ChassisState:
    command = POWER_COMMANDS[cmd] if isinstance(cmd, str) else Command(cmd)
    reply = request(endpoint, command, b"", Version.V15, timeout, retries)
    return decode_state(reply.payload)


def chassis_state(endpoint, timeout: float = DEFAULT_TIMEOUT,
                  retries: int = DEFAULT_RETRIES) -> ChassisState:
    reply = request(endpoint, Command.GET_CHASSIS_STATE, b"", Version.V15, timeout, retries)
    return decode_state(reply.payload)


# -- emulator --------------------------------------------------------------

@dataclass(frozen=True)
class LoggedEvent:
    at: float
    command: Command
    before: ChassisState
    after: ChassisState | None
    error: Reason | None = None


class BmcEmulator:
    """UDP BMC stand-in.  One emulator is one endpoint with its own chassis.

    Requests are handled one at a time by the serving thread; the lock
    guards against callers that poke the state from other threads.
    """

    def __init__(self, bind=("127.0.0.1", 0), repository=(), initial: ChassisState = ChassisState()):
        if isinstance(bind, str):
            bind = parse_address(bind)
        self.repository = list(repository)
        self.state = initial
        self.events: list[LoggedEvent] = []
        self.bad_frames = 0
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._thread = None
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind(bind)
        self.sock.settimeout(0.1)

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()

    @property
    def endpoint(self) -> str:
        host, port = self.address
        return f"{host}:{port}"

    def set_reading(self, sensor_id: int, reading: int):
        with self._lock:
            self.repository = [
                SensorRecord(r.sensor_id, r.kind, reading, r.upper_limit) if r.sensor_id == sensor_id else r
                for r in self.repository
            ]

    def handle(self, data: bytes) -> bytes | None:
        """Answer one datagram; None means drop it silently."""
        try:
            msg = decode(data)
        except DecodeError:
            self.bad_frames += 1
            if len(data) >= 5 and data[:2] == MAGIC:
                seq = struct.unpack_from(">H", data, 3)[0]
                ver = data[2] if data[2] in (Version.V09, Version.V15) else Version.V15
                return encode(BmcMessage(Version(ver), seq, Command.ERROR, bytes([Reason.BAD_FRAME])))
            return None

        def reply(command, payload=b""):
            return encode(BmcMessage(msg.version, msg.sequence, command, payload))

        with self._lock:
            if msg.command == Command.GET_SENSORS:
                return reply(Command.ACK, encode_sensors(self.repository, msg.version))
            before = self.state
            try:
                after = transition(before, msg.command)
            except BmcError as e:
                if msg.command in POWER_COMMANDS.values():
                    self.events.append(LoggedEvent(time.time(), msg.command, before, None, e.reason))
                return reply(Command.ERROR, bytes([e.reason]))
            self.state = after
            if msg.command != Command.GET_CHASSIS_STATE:
                self.events.append(LoggedEvent(time.time(), msg.command, before, after))
            return reply(Command.ACK, encode_state(after))

    def serve_forever(self):
        while not self._stop.is_set():
            try:
                data, peer = self.sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                if self._stop.is_set():
                    break
                raise
            try:
                answer = self.handle(data)
            except Exception:  # noqa: BLE001 - one bad datagram must not kill the BMC
                log.exception("emulator failed on datagram from %s", peer)
                continue
            if answer is not None:
                self.sock.sendto(answer, peer)

    def start(self) -> "BmcEmulator":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True,
                                        name=f"bmc-emulator-{self.endpoint}")
        self._thread.start()
        return self

    def stop(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join(2)
        self.sock.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


def emulator_serve(bind, repository, initial: ChassisState = ChassisState()):
    """Serve until interrupted."""
    emu = BmcEmulator(bind, repository, initial)
    log.info("BMC emulator listening on %s", emu.endpoint)
    try:
        emu.serve_forever()
    finally:
        emu.sock.close()


def parse_emulator_config(text: str) -> tuple[list[SensorRecord], ChassisState]:
    """Lines ``sensor <id> <kind> <reading> <limit>`` and ``power on|off``."""
    repo = []
    state = ChassisState()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        words = line.split()
        try:
            if words[0] == "sensor" and len(words) == 5:
                repo.append(SensorRecord(int(words[1]), SensorKind.parse(words[2]),
                                         int(words[3]), int(words[4])))
            elif words[0] == "power" and len(words) == 2 and words[1] in ("on", "off"):
                state = ChassisState(Power.ON if words[1] == "on" else Power.OFF)
            else:
                raise ValueError("unrecognized line")
        except ValueError as e:
            raise ValueError(f"line {lineno}: {e}: {raw!r}") from None
    return repo, state


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="bmc-emulator", description="Serve an emulated BMC over UDP.")
    ap.add_argument("--bind", default=f"127.0.0.1:{DEFAULT_PORT}")
    ap.add_argument("--config", help="sensor/power config file")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)
    repo, state = [], ChassisState()
    if args.config:
        with open(args.config) as f:
            repo, state = parse_emulator_config(f.read())
    try:
        emulator_serve(args.bind, repo, state)
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    sys.exit(main())

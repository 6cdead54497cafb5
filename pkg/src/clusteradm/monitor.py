"""Head-node monitoring: health push, resource poll, alarms and a status page.

Workers push one health line per interval over UDP, syslog style::

    <14> 1060000000 wnode21 HEALTH cputemp=45,fan0=5400,vcore=1450

The head node polls disk space and service liveness through the fanout
module.  Both feed a StatusModel that is owned by the cycle driver; the UDP
listener thread only hands raw datagrams over through a queue.  Each cycle
evaluates thresholds, rewrites a static HTML page and mails new alarms in
one batch.
"""

from __future__ import annotations

import argparse
import configparser
import html
import logging
import queue
import re
import socket
import sys
import threading
import time
from dataclasses import dataclass, field
from enum import Enum

from clusteradm import bmcproto, fanout, nodeset, notify
from clusteradm._fileio import atomic_write
from clusteradm.bmcproto import SensorKind

log = logging.getLogger(__name__)

DEFAULT_PORT = 9514
DEFAULT_INTERVAL = 60.0
# severity 6 (info), facility 1 (user)
SYSLOG_PRI = 14


class MalformedSample(ValueError):
    pass


# -- samples -----------------------------------------------------------------

@dataclass(frozen=True)
class Reading:
    name: str
    kind: SensorKind
    value: int


@dataclass(frozen=True)
class HealthSample:
    node: str
    timestamp: int
    sensors: tuple[Reading, ...]


@dataclass(frozen=True)
class ResourceSample:
    node: str
    timestamp: int
    disk_free: int
    services: tuple[tuple[str, bool], ...] = ()

    @property
    def service_map(self) -> dict[str, bool]:
        return dict(self.services)


def sensor_kind(name: str) -> SensorKind:
    """Map a sensor name from a health line to its kind by prefix."""
    low = name.lower()
    if low.startswith(("cpu", "temp")):
        return SensorKind.CPU_TEMP
    if low.startswith("fan"):
        return SensorKind.FAN_SPEED
    if low.startswith("v"):
        return SensorKind.VOLTAGE
    raise MalformedSample(f"unknown sensor name {name!r}")


_HEALTH = re.compile(r"<(\d{1,3})>\s*(\d+)\s+(\S+)\s+HEALTH\s+(\S+)\s*")
_SENSOR_NAME = re.compile(r"[A-Za-z][A-Za-z0-9_.-]*")


def parse_health(datagram: bytes | str) -> HealthSample:
    if isinstance(datagram, bytes):
        try:
            datagram = datagram.decode("ascii")
        except UnicodeDecodeError:
            raise MalformedSample("not ASCII") from None
    m = _HEALTH.fullmatch(datagram)
    if not m:
        raise MalformedSample(f"not a HEALTH line: {datagram[:80]!r}")
    readings = []
    for item in m.group(4).split(","):
        name, sep, value = item.partition("=")
        if not sep or not _SENSOR_NAME.fullmatch(name) or not value.isdigit():
            raise MalformedSample(f"bad sensor field {item!r}")
        readings.append(Reading(name, sensor_kind(name), int(value)))
    return HealthSample(m.group(3), int(m.group(2)), tuple(readings))


def format_health(node: str, timestamp: int, readings) -> str:
    fields = ",".join(f"{r.name}={r.value}" for r in readings)
    return f"<{SYSLOG_PRI}> {int(timestamp)} {node} HEALTH {fields}"


def parse_resources(node: str, text: str, timestamp: int) -> ResourceSample:
    """Parse probe output such as ``disk_free=20480 svc pbs_mom=up``."""
    disk, services, in_svc = None, [], False
    for tok in text.split():
        if tok == "svc":
            in_svc = True
            continue
        key, sep, value = tok.partition("=")
        if not sep:
            raise MalformedSample(f"bad probe token {tok!r}")
        if key == "disk_free" and not in_svc:
            if not value.isdigit():
                raise MalformedSample(f"bad disk_free {value!r}")
            disk = int(value)
        elif in_svc and value in ("up", "down"):
            services.append((key, value == "up"))
        else:
            raise MalformedSample(f"bad probe token {tok!r}")
    if disk is None:
        raise MalformedSample("probe output has no disk_free")
    return ResourceSample(node, int(timestamp), disk, tuple(services))


def default_probe(services=("pbs_mom",), path="/") -> str:
    parts = [f"printf 'disk_free=%s' \"$(df -Pm {path} | awk 'NR==2 {{print $4}}')\""]
    if services:
        parts.append("printf ' svc'")
    for s in services:
        parts.append(f"if pgrep -x {s} >/dev/null 2>&1; then printf ' {s}=up'; else printf ' {s}=down'; fi")
    parts.append("echo")
    return "; ".join(parts)


def poll_resources(nodes, transport, probe: str | None = None, timeout: float = 10.0,
                   nway: int = 0, now: float | None = None):
    """Run the probe on every node via fanout.

    Returns (samples, failed) where *failed* lists nodes that timed out or
    produced unparsable output; they get no sample and eventually go stale.
    """
    nodes = list(nodes)
    if not nodes:
        return [], []
    report = fanout.execute(fanout.build_tree(nodes, nway), probe or default_probe(), timeout, transport)
    stamp = int(time.time() if now is None else now)
    samples, failed = [], []
    for r in report.results:
        if r.timed_out:
            failed.append(r.node)
            continue
        try:
            samples.append(parse_resources(r.node, r.stdout.decode(errors="replace"), stamp))
        except MalformedSample as e:
            log.warning("resource probe on %s: %s", r.node, e)
            failed.append(r.node)
    return samples, failed


# -- thresholds, alarms, model -----------------------------------------------

@dataclass
class ThresholdConfig:
    sensor_limits: dict = field(default_factory=lambda: {
        SensorKind.CPU_TEMP: 70, SensorKind.FAN_SPEED: 9000, SensorKind.VOLTAGE: 1600})
    min_disk_free: int = 1024
    required_services: tuple[str, ...] = ("pbs_mom",)
    interval: float = DEFAULT_INTERVAL
    staleness: float | None = None

    def __post_init__(self):
        if self.staleness is None:
            # one lost datagram must not look like a dead node
            self.staleness = 3 * self.interval
        limits = list(self.sensor_limits.values()) + [self.min_disk_free, self.interval, self.staleness]
        if any(v <= 0 for v in limits):
            raise ValueError("all thresholds must be positive")


class AlarmKind(Enum):
    SENSOR_OVER = "SensorOver"
    DISK_LOW = "DiskLow"
    SERVICE_DOWN = "ServiceDown"
    STALE = "Stale"


@dataclass(frozen=True)
class Alarm:
    node: str
    kind: AlarmKind
    subject: str
    observed: float
    limit: float
    raised_at: float

    @property
    def key(self):
        return (self.kind, self.subject)

    def describe(self) -> str:
        if self.kind == AlarmKind.SENSOR_OVER:
            return f"{self.subject} {self.observed:g} > {self.limit:g}"
        if self.kind == AlarmKind.DISK_LOW:
            return f"disk_free {self.observed:g} MiB < {self.limit:g}"
        if self.kind == AlarmKind.SERVICE_DOWN:
            return f"{self.subject} down"
        return f"no {self.subject} for {self.observed:g}s > {self.limit:g}s"


class Display(Enum):
    GREEN = "Green"
    RED = "Red"


@dataclass
class NodeStatus:
    health: HealthSample | None = None
    resources: ResourceSample | None = None
    alarms: dict = field(default_factory=dict)
    # set when the node joins the poll list, so a node that never answers still goes stale
    polled_since: float | None = None

    @property
    def display(self) -> Display:
        return Display.RED if self.alarms else Display.GREEN


@dataclass
class StatusModel:
    nodes: dict[str, NodeStatus] = field(default_factory=dict)
    dropped_stale: int = 0
    malformed: int = 0

    def status(self, node: str) -> NodeStatus:
        return self.nodes.setdefault(node, NodeStatus())

    def ingest_health(self, sample: HealthSample) -> bool:
        st = self.status(sample.node)
        if st.health is not None and sample.timestamp < st.health.timestamp:
            self.dropped_stale += 1
            return False
        st.health = sample
        return True

    def ingest_datagram(self, datagram: bytes) -> HealthSample | None:
        try:
            sample = parse_health(datagram)
        except MalformedSample:
            self.malformed += 1
            return None
        return sample if self.ingest_health(sample) else None

    def ingest_resources(self, sample: ResourceSample) -> bool:
        st = self.status(sample.node)
        if st.resources is not None and sample.timestamp < st.resources.timestamp:
            self.dropped_stale += 1
            return False
        st.resources = sample
        return True

    def expect(self, nodes, now: float):
        for n in nodes:
            st = self.status(n)
            if st.polled_since is None:
                st.polled_since = now

    def active_alarms(self) -> list[Alarm]:
        return [a for n in sorted(self.nodes) for a in self.nodes[n].alarms.values()]


def _violations(node: str, st: NodeStatus, cfg: ThresholdConfig, now: float) -> dict:
    """Current (kind, subject) -> (observed, limit) for one node."""
    found = {}
    if st.health is not None:
        for r in st.health.sensors:
            limit = cfg.sensor_limits.get(r.kind)
            if limit is not None and r.value > limit:
                found[(AlarmKind.SENSOR_OVER, r.name)] = (r.value, limit)
        age = now - st.health.timestamp
        if age > cfg.staleness:
            found[(AlarmKind.STALE, "health")] = (age, cfg.staleness)
    if st.resources is not None:
        if st.resources.disk_free < cfg.min_disk_free:
            found[(AlarmKind.DISK_LOW, "disk")] = (st.resources.disk_free, cfg.min_disk_free)
        services = st.resources.service_map
        for s in cfg.required_services:
            if not services.get(s, False):
                found[(AlarmKind.SERVICE_DOWN, s)] = (0, 1)
    last_poll = st.resources.timestamp if st.resources is not None else st.polled_since
    if last_poll is not None and now - last_poll > cfg.staleness:
        found[(AlarmKind.STALE, "resources")] = (now - last_poll, cfg.staleness)
    return found


def evaluate(model: StatusModel, cfg: ThresholdConfig, now: float):
    """Update active alarms; returns (raised, cleared), both edge-triggered."""
    raised, cleared = [], []
    for node in sorted(model.nodes):
        st = model.nodes[node]
        current = _violations(node, st, cfg, now)
        for key in sorted(set(st.alarms) - set(current), key=lambda k: (k[0].value, k[1])):
            cleared.append(st.alarms.pop(key))
        for key in sorted(set(current) - set(st.alarms), key=lambda k: (k[0].value, k[1])):
            observed, limit = current[key]
            alarm = Alarm(node, key[0], key[1], observed, limit, now)
            st.alarms[key] = alarm
            raised.append(alarm)
    return raised, cleared


# -- page and mail -----------------------------------------------------------

_CSS = """\
body { font-family: sans-serif; }
table { border-collapse: collapse; }
td, th { border: 1px solid #999; padding: 2px 8px; }
tr.ok td.node { background: #3a3; color: #fff; }
tr.alarm td { color: #c00; }
tr.alarm td.node { background: #c00; color: #fff; }
.blink td.node { animation: blink 1s step-start infinite; }
@keyframes blink { 50% { opacity: 0; } }
"""


def _iso(ts: float) -> str:
    return time.strftime("%Y-%m-%d %H:%M:%S UTC", time.gmtime(ts))


def render_status(model: StatusModel, now: float) -> str:
    """Static HTML page; identical input gives identical bytes."""
    esc = html.escape
    rows = []
    for node in sorted(model.nodes):
        st = model.nodes[node]
        red = st.display == Display.RED
        health = " ".join(f"{r.name}={r.value}" for r in st.health.sensors) if st.health else ""
        seen = _iso(st.health.timestamp) if st.health else ""
        disk, services = "", ""
        if st.resources is not None:
            disk = str(st.resources.disk_free)
            services = " ".join(f"{s}={'up' if up else 'down'}" for s, up in st.resources.services)
        alarms = "<br>".join(esc(a.describe()) for a in st.alarms.values())
        rows.append(
            f'<tr class="{"alarm blink" if red else "ok"}">'
            f'<td class="node">{esc(node)}</td><td>{st.display.value}</td>'
            f"<td>{esc(health)}</td><td>{esc(seen)}</td><td>{esc(disk)}</td>"
            f"<td>{esc(services)}</td><td>{alarms}</td></tr>"
        )
    red = sum(1 for st in model.nodes.values() if st.display == Display.RED)
    body = "\n".join(rows)
    return (
        "<!DOCTYPE html>\n"
        '<html><head><meta charset="utf-8"><title>Cluster status</title>\n'
        f"<style>\n{_CSS}</style></head>\n<body>\n"
        f"<h1>Cluster status</h1>\n<p>Generated {_iso(now)}: {len(model.nodes)} nodes, {red} in alarm</p>\n"
        "<table>\n<thead><tr><th>Node</th><th>State</th><th>Health</th><th>Last report</th>"
        "<th>Disk free (MiB)</th><th>Services</th><th>Alarms</th></tr></thead>\n"
        f"<tbody>\n{body}{chr(10) if body else ''}</tbody>\n</table>\n</body></html>\n"
    )


def notify_alarms(alarms, notifier) -> notify.Delivery | None:
    """One message for all alarms raised in a cycle; nothing when there are none."""
    alarms = list(alarms)
    if not alarms:
        return None
    body = "".join(
        f"{a.node} {a.kind.value}: {a.describe()} (since {_iso(a.raised_at)})\n" for a in alarms)
    return notify.deliver(notifier, f"cluster-monitor: {len(alarms)} new alarm(s)", body)


# -- UDP listener ------------------------------------------------------------

class HealthListener:
    """Receives health datagrams on a thread and queues the raw bytes."""

    def __init__(self, bind=("0.0.0.0", DEFAULT_PORT), inbox: queue.Queue | None = None):
        self.inbox = inbox if inbox is not None else queue.Queue()
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        try:
            self.sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 4 << 20)
        except OSError:
            pass
        self.sock.bind(bind)
        self.sock.settimeout(0.2)
        self._stop = threading.Event()
        self._thread = None
        self.received = 0

    @property
    def address(self):
        return self.sock.getsockname()

    def _loop(self):
        while not self._stop.is_set():
            try:
                data, _ = self.sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                break
            self.received += 1
            self.inbox.put(data)

    def start(self) -> "HealthListener":
        self._thread = threading.Thread(target=self._loop, name="health-listener", daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2)
        self.sock.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


# -- cycle driver ------------------------------------------------------------

@dataclass
class CycleReport:
    ingested: int = 0
    polled: int = 0
    poll_failed: list = field(default_factory=list)
    raised: list = field(default_factory=list)
    cleared: list = field(default_factory=list)
    page_written: bool = False
    delivery: notify.Delivery | None = None
    errors: list = field(default_factory=list)


class Monitor:
    def __init__(self, cfg: ThresholdConfig, page_path=None, notifier=None, inbox=None,
                 poll_nodes=(), transport=None, probe=None, poll_timeout=10.0, nway=0,
                 clock=time.time):
        self.cfg = cfg
        self.page_path = page_path
        self.notifier = notifier
        self.inbox = inbox if inbox is not None else queue.Queue()
        self.poll_nodes = list(poll_nodes)
        self.transport = transport
        self.probe = probe
        self.poll_timeout = poll_timeout
        self.nway = nway
        self.clock = clock
        self.model = StatusModel()

    def drain(self) -> int:
        # only what is queued now, so a flood cannot starve the rest of the cycle
        count = 0
        for _ in range(self.inbox.qsize()):
            try:
                data = self.inbox.get_nowait()
            except queue.Empty:
                break
            if self.model.ingest_datagram(data) is not None:
                count += 1
        return count

    def _stage(self, report, name, fn):
        try:
            return fn()
        except Exception as e:  # noqa: BLE001 - one broken stage must not stop the cycle
            log.exception("monitor stage %s failed", name)
            report.errors.append(f"{name}: {e}")
            return None

    def run_cycle(self, now: float | None = None) -> CycleReport:
        now = self.clock() if now is None else now
        report = CycleReport()
        report.ingested = self._stage(report, "ingest", self.drain) or 0

        if self.poll_nodes and self.transport is not None:
            self.model.expect(self.poll_nodes, now)
            polled = self._stage(report, "poll", lambda: poll_resources(
                self.poll_nodes, self.transport, self.probe, self.poll_timeout, self.nway, now))
            if polled is not None:
                samples, report.poll_failed = polled
                for s in samples:
                    self.model.ingest_resources(s)
                report.polled = len(samples)

        result = self._stage(report, "evaluate", lambda: evaluate(self.model, self.cfg, now))
        if result is not None:
            report.raised, report.cleared = result

        if self.page_path:
            written = self._stage(report, "render",
                                  lambda: atomic_write(self.page_path, render_status(self.model, now)) or True)
            report.page_written = bool(written)

        report.delivery = self._stage(report, "notify", lambda: notify_alarms(report.raised, self.notifier))
        if report.delivery is not None and not report.delivery.sent:
            report.errors.append(f"notify: {report.delivery.error}")
        return report

    def run_forever(self, stop: threading.Event | None = None):
        stop = stop or threading.Event()
        while not stop.is_set():
            started = time.monotonic()
            report = self.run_cycle()
            log.info("cycle: %d samples, %d polled, %d raised, %d cleared",
                     report.ingested, report.polled, len(report.raised), len(report.cleared))
            stop.wait(max(0.0, self.cfg.interval - (time.monotonic() - started)))


# -- configuration -----------------------------------------------------------

def load_config(path):
    """Read the monitor's INI file; returns (ThresholdConfig, settings dict)."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise ValueError(f"cannot read config {path}")
    mon = cp["monitor"] if cp.has_section("monitor") else {}
    thr = cp["thresholds"] if cp.has_section("thresholds") else {}
    note = cp["notify"] if cp.has_section("notify") else {}
    interval = float(mon.get("interval", DEFAULT_INTERVAL))
    limits = ThresholdConfig().sensor_limits
    for kind in SensorKind:
        if kind.token in thr:
            limits[kind] = int(thr[kind.token])
    services = tuple(s for s in thr.get("services", "pbs_mom").replace(",", " ").split())
    staleness = thr.get("staleness")
    cfg = ThresholdConfig(limits, int(thr.get("min_disk_free", 1024)), services, interval,
                          float(staleness) if staleness else None)
    settings = {
        "page": mon.get("page", "status.html"),
        "listen": mon.get("listen", f"0.0.0.0:{DEFAULT_PORT}"),
        "nodes": mon.get("nodes", ""),
        "transport": mon.get("transport", "shell"),
        "rsh": mon.get("rsh", "ssh"),
        "nway": int(mon.get("nway", 0)),
        "poll_timeout": float(mon.get("poll_timeout", 10)),
        "probe": mon.get("probe") or None,
        "notify": note.get("kind", "none"),
        "notify_target": note.get("target") or None,
    }
    return cfg, settings


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="cluster-monitor", description="Collect health data and render a status page.")
    ap.add_argument("--config", required=True)
    ap.add_argument("--once", action="store_true", help="wait one interval for datagrams, run one cycle, exit")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg, s = load_config(args.config)
        nodes = nodeset.expand(s["nodes"]) if s["nodes"] else []
        transport = fanout.make_transport(s["transport"], s["rsh"]) if nodes else None
        listen = bmcproto.parse_address(s["listen"], DEFAULT_PORT)
    except (ValueError, KeyError, nodeset.PatternError, nodeset.ExpansionTooLargeError) as e:
        print(f"cluster-monitor: {e}", file=sys.stderr)
        return 2
    try:
        notifier = notify.make_notifier(s["notify"], s["notify_target"])
    except ValueError as e:
        # a broken notifier must not keep the page from being produced
        log.error("%s; alarms will not be mailed", e)
        notifier = None
    monitor = Monitor(cfg, s["page"], notifier, poll_nodes=nodes, transport=transport,
                      probe=s["probe"], poll_timeout=s["poll_timeout"], nway=s["nway"])
    with HealthListener(listen, monitor.inbox):
        if args.once:
            time.sleep(cfg.interval)
            report = monitor.run_cycle()
            return 1 if report.errors else 0
        try:
            monitor.run_forever()
        except KeyboardInterrupt:
            pass
    return 0


# -- worker agent ------------------------------------------------------------

_PREFIX = {SensorKind.CPU_TEMP: "cputemp", SensorKind.FAN_SPEED: "fan", SensorKind.VOLTAGE: "volt"}


def sensor_name(record) -> str:
    return f"{_PREFIX[record.kind]}{record.sensor_id}"


def collect_health(node: str, bmc_endpoint, version=bmcproto.Version.V15, now=None,
                   timeout=bmcproto.DEFAULT_TIMEOUT, retries=bmcproto.DEFAULT_RETRIES) -> str:
    records = bmcproto.read_sensors(bmc_endpoint, version, timeout=timeout, retries=retries)
    readings = [Reading(sensor_name(r), r.kind, r.reading) for r in records]
    return format_health(node, int(time.time() if now is None else now), readings)


def send_health(line: str, collector):
    if isinstance(collector, str):
        collector = bmcproto.parse_address(collector, DEFAULT_PORT)
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as sock:
        sock.sendto(line.encode("ascii"), collector)


def agent_main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="health-agent",
                                 description="Read the local BMC and push a HEALTH datagram to the head node.")
    ap.add_argument("--bmc", default=f"127.0.0.1:{bmcproto.DEFAULT_PORT}", help="BMC endpoint host:port")
    ap.add_argument("--collector", required=True, help="head node host:port")
    ap.add_argument("--node", default=socket.gethostname().split(".")[0])
    ap.add_argument("--interval", type=float, default=DEFAULT_INTERVAL)
    ap.add_argument("--ipmi-version", choices=["0.9", "1.5"], default="1.5")
    ap.add_argument("--timeout", type=float, default=bmcproto.DEFAULT_TIMEOUT)
    ap.add_argument("--retries", type=int, default=bmcproto.DEFAULT_RETRIES)
    ap.add_argument("--once", action="store_true")
    args = ap.parse_args(argv)
    version = bmcproto.Version.V09 if args.ipmi_version == "0.9" else bmcproto.Version.V15
    while True:
        try:
            line = collect_health(args.node, args.bmc, version, timeout=args.timeout, retries=args.retries)
            send_health(line, args.collector)
        except (OSError, bmcproto.BmcTimeout, bmcproto.BmcError, bmcproto.DecodeError) as e:
            print(f"health-agent: {e}", file=sys.stderr)
            if args.once:
                return 1
        if args.once:
            return 0
        time.sleep(args.interval)


if __name__ == "__main__":
    sys.exit(main())

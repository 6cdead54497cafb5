"""Scriptable power and health control for node sets over the BMC protocol."""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from clusteradm import bmcproto, nodeset
from clusteradm.bmcproto import SensorRecord, Version

MAX_CONCURRENT = 64
DEFAULT_ENDPOINTS = os.environ.get("POWERCTL_ENDPOINTS", "/etc/clusteradm/bmc-endpoints")


class UnknownNodes(KeyError):
    def __init__(self, nodes):
        super().__init__(", ".join(nodes))
        self.nodes = nodes


def parse_endpoints(text: str) -> dict[str, tuple[str, int]]:
    """``<hostname> <addr:port>`` per line; ``#`` starts a comment."""
    endpoints = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        words = line.split()
        if len(words) != 2:
            raise ValueError(f"line {lineno}: expected '<hostname> <addr:port>': {raw!r}")
        host, addr = words
        if host in endpoints:
            raise ValueError(f"line {lineno}: {host} listed twice")
        endpoints[host] = bmcproto.parse_address(addr)
    return endpoints


def load_endpoints(path) -> dict[str, tuple[str, int]]:
    with open(path) as f:
        return parse_endpoints(f.read())


def check_known(nodes, endpoints):
    missing = [n for n in nodes if n not in endpoints]
    if missing:
        raise UnknownNodes(missing)


@dataclass
class NodeOutcome:
    node: str
    ok: bool
    error: str = ""
    state: bmcproto.ChassisState | None = None
    sensors: list[SensorRecord] = field(default_factory=list)

    def line(self) -> str:
        return f"{self.node} ok" if self.ok else f"{self.node} error: {self.error}"


def _describe(exc: Exception) -> str:
    if isinstance(exc, bmcproto.BmcTimeout):
        return "timeout"
    return str(exc) or type(exc).__name__


def _fan_out(nodes, endpoints, fn, max_concurrent):
    check_known(nodes, endpoints)

    def one(node):
        try:
            return fn(node, endpoints[node])
        except (bmcproto.BmcError, bmcproto.BmcTimeout, bmcproto.DecodeError, OSError) as e:
            return NodeOutcome(node, False, _describe(e))

    if not nodes:
        return []
    with ThreadPoolExecutor(max_workers=min(max_concurrent, len(nodes))) as pool:
        return list(pool.map(one, nodes))


def power(nodes, action: str, endpoints, timeout=bmcproto.DEFAULT_TIMEOUT,
          retries=bmcproto.DEFAULT_RETRIES, max_concurrent=MAX_CONCURRENT) -> list[NodeOutcome]:
    if action not in bmcproto.POWER_COMMANDS:
        raise ValueError(f"unknown power action {action!r}")

    def one(node, addr):
        state = bmcproto.power_control(addr, action, timeout, retries)
        return NodeOutcome(node, True, state=state)

    return _fan_out(nodes, endpoints, one, max_concurrent)


def health(nodes, endpoints, version=Version.V15, timeout=bmcproto.DEFAULT_TIMEOUT,
           retries=bmcproto.DEFAULT_RETRIES, max_concurrent=MAX_CONCURRENT) -> list[NodeOutcome]:
    def one(node, addr):
        return NodeOutcome(node, True, sensors=bmcproto.read_sensors(addr, version, timeout, retries))

    return _fan_out(nodes, endpoints, one, max_concurrent)


def health_lines(outcomes) -> list[str]:
    lines = []
    for o in outcomes:
        if not o.ok:
            lines.append(o.line())
            continue
        for s in o.sensors:
            verdict = "OVER" if s.reading > s.upper_limit else "OK"
            lines.append(f"{o.node} {s.kind.token} {s.reading} {s.upper_limit} {verdict}")
    return lines


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="powerctl", description="Power and health control via node BMCs.")
    ap.add_argument("action", choices=["on", "off", "cycle", "health"])
    ap.add_argument("pattern", help="node pattern, or - to read nodes from stdin")
    ap.add_argument("--endpoints", default=DEFAULT_ENDPOINTS, help="file of '<hostname> <addr:port>' lines")
    ap.add_argument("--timeout", type=float, default=bmcproto.DEFAULT_TIMEOUT)
    ap.add_argument("--retries", type=int, default=bmcproto.DEFAULT_RETRIES)
    ap.add_argument("--ipmi-version", choices=["0.9", "1.5"], default="1.5",
                    help="sensor record layout to request")
    ap.add_argument("--max-concurrent", type=int, default=MAX_CONCURRENT)
    args = ap.parse_args(argv)

    try:
        nodes = nodeset.resolve(args.pattern)
        endpoints = load_endpoints(args.endpoints)
        check_known(nodes, endpoints)
    except UnknownNodes as e:
        print(f"powerctl: unknown nodes: {', '.join(e.nodes)}", file=sys.stderr)
        return 2
    except (nodeset.PatternError, nodeset.ExpansionTooLargeError, ValueError, OSError) as e:
        print(f"powerctl: {e}", file=sys.stderr)
        return 2

    if args.action == "health":
        version = Version.V09 if args.ipmi_version == "0.9" else Version.V15
        outcomes = health(nodes, endpoints, version, args.timeout, args.retries, args.max_concurrent)
        lines = health_lines(outcomes)
    else:
        outcomes = power(nodes, args.action, endpoints, args.timeout, args.retries, args.max_concurrent)
        lines = [o.line() for o in outcomes]
    for line in lines:
        print(line)
    return 0 if all(o.ok for o in outcomes) else 1


if __name__ == "__main__":
    sys.exit(main())

"""Parallel command execution over many nodes (``rgang``).

A flat plan forks one remote-shell child per node.  With ``nway=k`` the node
list is cut into *k* contiguous slices; the head of each slice is a delegate
that runs a copy of the relay (see :mod:`clusteradm._relay`), which executes
the command on itself and fans out over the rest of its slice.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass

from clusteradm import nodeset
from clusteradm._relay import (  # noqa: F401 - re-exported
    DEFAULT_OUTPUT_CAP,
    LAUNCH_FAILURE_STATUS,
    TIMEOUT_STATUS,
    ExecResult,
    FrameError,
    LocalProcess,
    NodeTimeout,
    PlanError,
    RemoteShell,
    RunOutput,
    Transport,
    TreeNode,
    decode_frames,
    encode_frame,
    make_transport,
    run_process,
    run_subtree,
)

DEFAULT_TIMEOUT = 30.0


@dataclass
class FanoutPlan:
    tree: TreeNode
    nway: int
    root: str = "controller"

    def nodes(self) -> list[str]:
        return self.tree.nodes()

    def dumps(self) -> str:
        return self.tree.dumps()

    @classmethod
    def loads(cls, text: str, nway: int = 0) -> "FanoutPlan":
        return cls(TreeNode.loads(text), nway)


def _slices(nodes: list[str], k: int) -> list[list[str]]:
    base, extra = divmod(len(nodes), k)
    out, start = [], 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        if size:
            out.append(nodes[start:start + size])
        start += size
    return out


def build_tree(nodes: list[str], nway: int = 0) -> FanoutPlan:
    if not nodes:
        raise PlanError("empty node list")
    if nway < 0:
        raise PlanError("nway must be non-negative")
    dups = nodeset.duplicates(nodes)
    if dups:
        raise PlanError(f"duplicate nodes: {', '.join(dups)}")

    root = TreeNode(None)
    work = [(root, list(nodes))]
    while work:
        tn, rest = work.pop()
        if nway == 0 or len(rest) <= nway:
            tn.leaves = rest
            continue
        for chunk in _slices(rest, nway):
            child = TreeNode(chunk[0])
            tn.children.append(child)
            work.append((child, chunk[1:]))
    return FanoutPlan(root, nway)


@dataclass
class ExecReport:
    results: list[ExecResult]

    @property
    def aggregate_status(self) -> int:
        status = 0
        for r in self.results:
            status |= r.exit_status
        return status

    def exit_code(self) -> int:
        return min(self.aggregate_status, 255)


def execute(plan: FanoutPlan, command: str, timeout: float, transport: Transport) -> ExecReport:
    if timeout <= 0:
        raise ValueError("timeout must be positive")
    order = {n: i for i, n in enumerate(plan.nodes())}
    results = run_subtree(plan.tree, command, timeout, transport, transport.local())
    results.sort(key=lambda r: order.get(r.node, len(order)))
    return ExecReport(results)


def format_report(report: ExecReport) -> str:
    lines = []
    for r in report.results:
        lines.append(f"= {r.node} =")
        lines.extend(r.stdout.decode(errors="replace").splitlines())
        lines.extend("! " + line for line in r.stderr.decode(errors="replace").splitlines())
        if r.truncated:
            lines.append("! [output truncated]")
        if r.timed_out:
            lines.append("TIMEOUT")
    return "".join(line + "\n" for line in lines)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="rgang", description="Run a command on many nodes in parallel.")
    ap.add_argument("--nway", type=int, default=0, help="tree fan-out factor (0 = flat)")
    ap.add_argument("--timeout", type=float, default=DEFAULT_TIMEOUT, help="per-node timeout in seconds")
    ap.add_argument("--transport", choices=["local", "shell"], default="shell")
    ap.add_argument("--rsh", default=os.environ.get("RGANG_RSH", "ssh"),
                    help="remote shell program for --transport shell")
    ap.add_argument("--relay-python", default="python3",
                    help="interpreter used to start relay copies on delegate nodes")
    ap.add_argument("pattern", help="node pattern, or - to read nodes from stdin")
    ap.add_argument("command", nargs=argparse.REMAINDER)
    args = ap.parse_args(argv)
    if not args.command:
        ap.error("no command given")

    try:
        nodes = nodeset.resolve(args.pattern)
        plan = build_tree(nodes, args.nway)
    except (nodeset.PatternError, nodeset.ExpansionTooLargeError, PlanError) as e:
        print(f"rgang: {e}", file=sys.stderr)
        return 2
    transport = make_transport(args.transport, args.rsh, args.relay_python)
    report = execute(plan, " ".join(args.command), args.timeout, transport)
    sys.stdout.write(format_report(report))
    sys.stdout.flush()
    return report.exit_code()


if __name__ == "__main__":
    sys.exit(main())

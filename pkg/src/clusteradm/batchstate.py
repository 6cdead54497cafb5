"""Batch-scheduler node state tool (``fermistat``).

Sets nodes offline or free and lists the nodes of a job.  Node arguments are
patterns or ``-`` for a list on stdin, so invocations compose through pipes::

    fermistat -l 12xy.myjob | fermistat -o -
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
from dataclasses import dataclass
from enum import Enum

from clusteradm import nodeset
from clusteradm._fileio import atomic_write


class NodeState(Enum):
    FREE = "free"
    DOWN = "down"
    OFFLINE = "offline"
    RESERVED = "reserved"
    JOB_EXCLUSIVE = "job-exclusive"
    JOB_SHARING = "job-sharing"

    @classmethod
    def parse(cls, token: str) -> "NodeState":
        try:
            return cls(token.strip().lower())
        except ValueError:
            raise ValueError(f"unknown node state {token!r}") from None


class BackendError(Exception):
    pass


class UnknownJob(BackendError):
    pass


# what gets echoed for each mutation, byte-exact
ECHO = {NodeState.OFFLINE: "pbsnodes -o {node}", NodeState.FREE: "pbsnodes -c {node}"}


class BatchBackend:
    def get_state(self, node: str) -> NodeState:
        raise NotImplementedError

    def set_offline(self, node: str) -> None:
        raise NotImplementedError

    def set_free(self, node: str) -> None:
        raise NotImplementedError

    def job_nodes(self, job_id: str) -> list[str]:
        raise NotImplementedError


class MockBackend(BatchBackend):
    """In-memory cluster, optionally persisted to a small text file so that
    separate CLI invocations (e.g. both ends of a pipe) share state.

    File lines: ``node <name> <state>`` and ``job <id> <node> [<node> ...]``.
    """

    def __init__(self, states=None, jobs=None, path=None):
        self.states: dict[str, NodeState] = dict(states or {})
        self.jobs: dict[str, list[str]] = {k: list(v) for k, v in (jobs or {}).items()}
        self.path = path

    @classmethod
    def parse(cls, text: str, path=None) -> "MockBackend":
        states, jobs = {}, {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            words = raw.split("#", 1)[0].split()
            if not words:
                continue
            if words[0] == "node" and len(words) == 3:
                states[words[1]] = NodeState.parse(words[2])
            elif words[0] == "job" and len(words) >= 3:
                jobs[words[1]] = words[2:]
            else:
                raise ValueError(f"line {lineno}: cannot parse {raw!r}")
        return cls(states, jobs, path)

    @classmethod
    def load(cls, path) -> "MockBackend":
        with open(path) as f:
            return cls.parse(f.read(), path)

    def render(self) -> str:
        lines = [f"node {n} {s.value}" for n, s in self.states.items()]
        lines += [f"job {j} {' '.join(ns)}" for j, ns in self.jobs.items()]
        return "".join(line + "\n" for line in lines)

    def _save(self):
        if self.path is not None:
            atomic_write(self.path, self.render())

    def get_state(self, node):
        try:
            return self.states[node]
        except KeyError:
            raise BackendError(f"Unknown node {node}") from None

    def _set(self, node, state):
        if node not in self.states:
            raise BackendError(f"Unknown node {node}")
        self.states[node] = state
        self._save()

    def set_offline(self, node):
        self._set(node, NodeState.OFFLINE)

    def set_free(self, node):
        # permitted from any state, including down
        self._set(node, NodeState.FREE)

    def job_nodes(self, job_id):
        try:
            return list(self.jobs[job_id])
        except KeyError:
            raise UnknownJob(f"Unknown job {job_id}") from None


class ExecBackend(BatchBackend):
    """Shells out to the scheduler's ``pbsnodes`` and ``qstat`` commands."""

    def __init__(self, pbsnodes="pbsnodes", qstat="qstat", timeout=60):
        self.pbsnodes = pbsnodes
        self.qstat = qstat
        self.timeout = timeout

    def _run(self, argv) -> str:
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout)
        except (OSError, subprocess.TimeoutExpired) as e:
            raise BackendError(str(e)) from None
        if proc.returncode != 0:
            raise BackendError(proc.stderr.strip() or f"{argv[0]} exited {proc.returncode}")
        return proc.stdout

    def get_state(self, node):
        for line in self._run([self.pbsnodes, node]).splitlines():
            key, sep, value = line.partition("=")
            if sep and key.strip() == "state":
                # e.g. "job-exclusive,busy": the first flag is the state
                return NodeState.parse(value.split(",")[0])
        raise BackendError(f"no state reported for {node}")

    def set_offline(self, node):
        self._run([self.pbsnodes, "-o", node])

    def set_free(self, node):
        self._run([self.pbsnodes, "-c", node])

    def job_nodes(self, job_id):
        try:
            text = self._run([self.qstat, "-f", job_id])
        except BackendError as e:
            raise UnknownJob(str(e)) from None
        return parse_exec_host(text)


def parse_exec_host(qstat_f: str) -> list[str]:
    """Hostnames of ``exec_host = a/0+a/1+b/0`` in order, deduplicated.
    Handles qstat's tab-indented continuation lines."""
    joined = []
    for line in qstat_f.splitlines():
        if line.startswith("\t") and joined:
            joined[-1] += line.strip()
        else:
            joined.append(line.strip())
    for line in joined:
        key, sep, value = line.partition("=")
        if sep and key.strip() == "exec_host":
            nodes = []
            for slot in value.strip().split("+"):
                host = slot.split("/")[0]
                if host and host not in nodes:
                    nodes.append(host)
            return nodes
    raise UnknownJob("job has no exec_host")


@dataclass
class StateChange:
    node: str
    command: str
    ok: bool
    error: str = ""


def set_state(nodes, target: NodeState, backend: BatchBackend, out=None, err=None) -> list[StateChange]:
    """Apply *target* to each node in order, one at a time.  Each node's
    command line is echoed to *out* before it runs; failures go to *err* and
    do not stop the remaining nodes."""
    if target not in ECHO:
        raise ValueError(f"cannot set nodes to {target.value}")
    apply = backend.set_offline if target == NodeState.OFFLINE else backend.set_free
    changes = []
    for node in nodes:
        command = ECHO[target].format(node=node)
        if out is not None:
            out.write(command + "\n")
            out.flush()
        try:
            apply(node)
        except BackendError as e:
            changes.append(StateChange(node, command, False, str(e)))
            if err is not None:
                err.write(f"fermistat: {node}: {e}\n")
            continue
        changes.append(StateChange(node, command, True))
    return changes


def list_job_nodes(job_id: str, backend: BatchBackend) -> list[str]:
    if not job_id:
        raise ValueError("empty job id")
    return backend.job_nodes(job_id)


def make_backend(args) -> BatchBackend:
    if args.backend == "mock":
        if not args.mock_state:
            raise ValueError("--backend mock needs --mock-state FILE")
        return MockBackend.load(args.mock_state)
    return ExecBackend(args.pbsnodes, args.qstat)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="fermistat", description="Set batch node states and list job nodes.")
    mode = ap.add_mutually_exclusive_group(required=True)
    mode.add_argument("-o", dest="offline", metavar="NODES", help="set nodes offline (pattern or -)")
    mode.add_argument("-f", dest="free", metavar="NODES", help="set nodes free (pattern or -)")
    mode.add_argument("-l", dest="job", metavar="JOBID", help="list the nodes of a job")
    ap.add_argument("--parallel", action="store_true", help="reserved; not implemented")
    ap.add_argument("--backend", choices=["exec", "mock"],
                    default=os.environ.get("FERMISTAT_BACKEND", "exec"))
    ap.add_argument("--mock-state", default=os.environ.get("FERMISTAT_MOCK_STATE"),
                    help="state file for the mock backend")
    ap.add_argument("--pbsnodes", default="pbsnodes")
    ap.add_argument("--qstat", default="qstat")
    args = ap.parse_args(argv)
    if args.parallel:
        print("fermistat: --parallel is not implemented yet", file=sys.stderr)
        return 2

    try:
        backend = make_backend(args)
    except (ValueError, OSError) as e:
        print(f"fermistat: {e}", file=sys.stderr)
        return 2

    if args.job is not None:
        try:
            nodes = list_job_nodes(args.job, backend)
        except (UnknownJob, ValueError) as e:
            print(f"fermistat: {e}", file=sys.stderr)
            return 2
        except BackendError as e:
            print(f"fermistat: {e}", file=sys.stderr)
            return 1
        sys.stdout.write("".join(n + "\n" for n in nodes))
        return 0

    nodes_arg, target = (args.offline, NodeState.OFFLINE) if args.offline is not None else (args.free, NodeState.FREE)
    try:
        nodes = nodeset.resolve(nodes_arg)
    except (nodeset.PatternError, nodeset.ExpansionTooLargeError) as e:
        print(f"fermistat: {e}", file=sys.stderr)
        return 2
    changes = set_state(nodes, target, backend, sys.stdout, sys.stderr)
    return 0 if all(c.ok for c in changes) else 1


if __name__ == "__main__":
    sys.exit(main())

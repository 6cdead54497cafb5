"""Network install orchestration.

The boot server hands an install image to every host with an enabled entry
in its bootptab.  An installing node disables its own entry (the callback)
just before it reboots, so the next boot comes from local disk.  Installs
run in waves of at most ``cap`` nodes to keep the single boot server from
being overrun.

bootptab entries look like::

    wnode21:ha=0050DA123456:ip=10.0.0.21:bf=/tftpboot/pxelinux.0

and a disabled entry is the same line with a leading ``#``.
"""

from __future__ import annotations

import argparse
import contextlib
import fcntl
import itertools
import logging
import os
import queue
import re
import shlex
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field
from enum import Enum

from clusteradm import nodeset
from clusteradm._fileio import atomic_write

log = logging.getLogger(__name__)

ENCODING = "utf-8"
ERRORS = "surrogateescape"  # keeps arbitrary bytes intact through str


# -- bootptab ----------------------------------------------------------------

class BootptabError(ValueError):
    pass


class DuplicateHost(BootptabError):
    def __init__(self, host, first, second):
        super().__init__(f"host {host} is enabled on line {first} and line {second}")
        self.host, self.lines = host, (first, second)


class HostNotFound(BootptabError, KeyError):
    def __str__(self):
        return f"no bootptab entry for {self.args[0]}"


@dataclass(frozen=True)
class BootptabEntry:
    host: str
    hardware_address: str
    ip: str
    bootfile: str
    enabled: bool
    lineno: int = 0


_HOST = re.compile(r"[A-Za-z0-9][A-Za-z0-9._-]*")


def parse_entry(line: str, lineno: int = 0) -> BootptabEntry | None:
    """Entry for one line, or None if the line is not a host entry."""
    body = line.rstrip("\r\n")
    enabled = not body.startswith("#")
    if not enabled:
        body = body[1:]
    fields = body.split(":")
    if fields and fields[-1] == "":
        fields.pop()  # tolerate a trailing ':'
    if len(fields) < 4 or not _HOST.fullmatch(fields[0]):
        return None
    tags = {}
    for f in fields[1:]:
        key, sep, value = f.partition("=")
        if not sep or not key or key in tags:
            return None
        tags[key] = value
    if not all(tags.get(k) for k in ("ha", "ip", "bf")):
        return None
    return BootptabEntry(fields[0], tags["ha"], tags["ip"], tags["bf"], enabled, lineno)


class Bootptab:
    """Parsed bootptab that renders back to the identical bytes."""

    def __init__(self, lines: list[str]):
        self.lines = lines
        self.entries: list[BootptabEntry] = []
        enabled_at = {}
        for i, line in enumerate(lines, 1):
            entry = parse_entry(line, i)
            if entry is None:
                continue
            if entry.enabled:
                if entry.host in enabled_at:
                    raise DuplicateHost(entry.host, enabled_at[entry.host], i)
                enabled_at[entry.host] = i
            self.entries.append(entry)

    @classmethod
    def parse(cls, text: str) -> "Bootptab":
        return cls(text.splitlines(keepends=True))

    @classmethod
    def parse_bytes(cls, data: bytes) -> "Bootptab":
        return cls.parse(data.decode(ENCODING, ERRORS))

    def render(self) -> str:
        return "".join(self.lines)

    def render_bytes(self) -> bytes:
        return self.render().encode(ENCODING, ERRORS)

    def find(self, host: str) -> list[BootptabEntry]:
        return [e for e in self.entries if e.host == host]

    def enabled_hosts(self) -> list[str]:
        return [e.host for e in self.entries if e.enabled]

    def is_enabled(self, host: str) -> bool:
        return any(e.enabled for e in self.find(host))

    def _replace(self, entry: BootptabEntry, line: str) -> "Bootptab":
        lines = list(self.lines)
        lines[entry.lineno - 1] = line
        return Bootptab(lines)

    def comment_out(self, host: str) -> "Bootptab":
        """Copy with *host*'s enabled line prefixed by ``#``; self if already disabled."""
        entries = self.find(host)
        if not entries:
            raise HostNotFound(host)
        for e in entries:
            if e.enabled:
                return self._replace(e, "#" + self.lines[e.lineno - 1])
        log.warning("bootptab entry for %s is already disabled", host)
        return self

    def enable(self, host: str) -> "Bootptab":
        entries = self.find(host)
        if not entries:
            raise HostNotFound(host)
        if any(e.enabled for e in entries):
            log.warning("bootptab entry for %s is already enabled", host)
            return self
        e = entries[0]
        return self._replace(e, self.lines[e.lineno - 1][1:])


def parse_bootptab(text: str) -> Bootptab:
    return Bootptab.parse(text)


@contextlib.contextmanager
def locked(path):
    # the lock lives on a sidecar: atomic rename swaps the bootptab inode
    with open(os.fspath(path) + ".lock", "a") as lock:
        fcntl.flock(lock, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(lock, fcntl.LOCK_UN)


def load_bootptab(path) -> Bootptab:
    with open(path, "rb") as f:
        return Bootptab.parse_bytes(f.read())


def _edit(path, host, op) -> bool:
    with locked(path):
        before = load_bootptab(path)
        after = op(before, host)
        if after is before:
            return False
        atomic_write(path, after.render_bytes())
        return True


def comment_out(path, host) -> bool:
    """Disable *host* in the bootptab at *path*.  Returns whether the file changed."""
    return _edit(path, host, Bootptab.comment_out)


def enable(path, host) -> bool:
    return _edit(path, host, Bootptab.enable)


# -- waves -------------------------------------------------------------------

@dataclass(frozen=True)
class WavePlan:
    waves: tuple[tuple[str, ...], ...]
    max_concurrent: int

    @property
    def nodes(self) -> list[str]:
        return [n for w in self.waves for n in w]


def plan_waves(nodes, max_concurrent: int) -> WavePlan:
    if max_concurrent < 1:
        raise ValueError("max_concurrent must be at least 1")
    nodes = list(nodes)
    waves = tuple(tuple(nodes[i:i + max_concurrent]) for i in range(0, len(nodes), max_concurrent))
    return WavePlan(waves, max_concurrent)


# -- install jobs ------------------------------------------------------------

class Flavor(Enum):
    OS_INSTALL = "os"
    FIRMWARE_INSTALL = "firmware"


class JobState(Enum):
    PENDING = "Pending"
    SERVING = "Serving"
    INSTALLING = "Installing"
    CONFIGURED = "Configured"
    REBOOT_REQUESTED = "RebootRequested"
    DONE = "Done"
    FAILED = "Failed"

    @property
    def terminal(self) -> bool:
        return self in (JobState.DONE, JobState.FAILED)


S = JobState
PATHS = {
    Flavor.OS_INSTALL: (S.PENDING, S.SERVING, S.INSTALLING, S.CONFIGURED, S.REBOOT_REQUESTED, S.DONE),
    Flavor.FIRMWARE_INSTALL: (S.PENDING, S.SERVING, S.INSTALLING, S.REBOOT_REQUESTED, S.DONE),
}


def legal(flavor: Flavor, src: JobState, dst: JobState) -> bool:
    if src.terminal:
        return False
    if dst == JobState.FAILED:
        return True
    path = PATHS[flavor]
    return src in path and path.index(src) + 1 < len(path) and path[path.index(src) + 1] == dst


class IllegalTransition(RuntimeError):
    pass


class WrongState(RuntimeError):
    pass


@dataclass
class LogEvent:
    at: float
    kind: str  # "state", "progress", "artifact" or "error"
    detail: str


_job_ids = itertools.count(1)


@dataclass
class InstallJob:
    node: str
    flavor: Flavor
    state: JobState = JobState.PENDING
    log: list[LogEvent] = field(default_factory=list)
    artifact: str | None = None
    error: str | None = None
    job_id: int = field(default_factory=lambda: next(_job_ids))

    def advance(self, dst: JobState, at: float | None = None):
        if not legal(self.flavor, self.state, dst):
            raise IllegalTransition(f"{self.node}: {self.state.value} -> {dst.value} is not allowed "
                                    f"for {self.flavor.value}")
        if (dst == JobState.REBOOT_REQUESTED and self.flavor == Flavor.FIRMWARE_INSTALL
                and self.artifact is None):
            raise IllegalTransition(f"{self.node}: firmware install must upload its log before reboot")
        self.state = dst
        self.log.append(LogEvent(time.time() if at is None else at, "state", dst.value))

    def note(self, kind: str, detail: str, at: float | None = None):
        self.log.append(LogEvent(time.time() if at is None else at, kind, detail))

    def fail(self, reason: str, at: float | None = None):
        if self.state.terminal:
            return
        self.error = reason
        self.note("error", reason, at)
        self.advance(JobState.FAILED, at)

    def states(self) -> list[JobState]:
        return [JobState.PENDING] + [JobState(e.detail) for e in self.log if e.kind == "state"]


def upload_log(job: InstallJob, content: bytes, store_dir) -> str:
    """Store a firmware job's console log on the head side."""
    if job.flavor != Flavor.FIRMWARE_INSTALL or job.state != JobState.INSTALLING:
        raise WrongState(f"{job.node}: log upload needs a firmware job in Installing, "
                         f"not {job.flavor.value} in {job.state.value}")
    path = os.path.join(os.fspath(store_dir), f"{job.node}.{job.flavor.value}.{job.job_id}.log")
    try:
        os.makedirs(os.fspath(store_dir), exist_ok=True)
        atomic_write(path, bytes(content))
    except OSError as e:
        job.fail(f"log upload failed: {e}")
        raise
    job.artifact = path
    job.note("artifact", path)
    return path


# -- agents ------------------------------------------------------------------

class AgentFailure(RuntimeError):
    pass


class InstallContext:
    """What an agent sees of the head node while installing one node.

    Events travel to the wave driver through a queue; the driver alone
    changes job state.  ``comment_out`` edits the bootptab directly, the way
    a real node rsh'es to the boot server.
    """

    def __init__(self, node, flavor, events: queue.Queue, bootptab):
        self.node, self.flavor = node, flavor
        self._events = events
        self._bootptab = bootptab

    def state(self, s: JobState):
        self._events.put(("state", self.node, s))

    def progress(self, phase: str):
        self._events.put(("progress", self.node, phase))

    def upload(self, content: bytes):
        reply = queue.Queue(maxsize=1)
        self._events.put(("upload", self.node, bytes(content), reply))
        ok, err = reply.get()
        if not ok:
            raise AgentFailure(err)

    def comment_out(self):
        comment_out(self._bootptab, self.node)
        self.progress("bootptab entry disabled")


OS_STEPS = ("partition", "mkfs", "copy", "unpack")
FIRMWARE_STEPS = ("firmware", "discover-ip")


class Agent:
    def install(self, ctx: InstallContext) -> None:
        raise NotImplementedError


class SimulatedAgent(Agent):
    """Walks the install steps with optional delays and injected failures.

    *fail_on* maps node -> step name; a failing step raises, leaving the
    remaining steps (including the bootptab callback) undone.
    """

    STEPS = {
        Flavor.OS_INSTALL: ("serving", "installing") + OS_STEPS + ("ipconfig", "callback", "reboot", "up"),
        Flavor.FIRMWARE_INSTALL: ("serving", "installing") + FIRMWARE_STEPS + ("upload", "callback", "reboot", "up"),
    }

    def __init__(self, delay: float = 0.0, delays=None, fail_on=None, log_content=b"flash ok\n"):
        self.delay = delay
        self.delays = dict(delays or {})
        self.fail_on = dict(fail_on or {})
        self.log_content = log_content
        known = set(self.STEPS[Flavor.OS_INSTALL]) | set(self.STEPS[Flavor.FIRMWARE_INSTALL])
        bad = {s for s in self.fail_on.values()} - known
        if bad:
            raise ValueError(f"unknown step(s) {sorted(bad)}")

    def _step(self, ctx, name):
        pause = self.delays.get(name, self.delay)
        if pause:
            time.sleep(pause)
        if self.fail_on.get(ctx.node) == name:
            raise AgentFailure(f"injected failure at {name}")

    def install(self, ctx):
        for step in self.STEPS[ctx.flavor]:
            self._step(ctx, step)
            if step == "serving":
                ctx.state(JobState.SERVING)
            elif step == "installing":
                ctx.state(JobState.INSTALLING)
            elif step == "ipconfig":
                ctx.state(JobState.CONFIGURED)
            elif step == "upload":
                ctx.upload(self.log_content)
            elif step == "callback":
                ctx.comment_out()
            elif step == "reboot":
                ctx.state(JobState.REBOOT_REQUESTED)
            elif step == "up":
                ctx.state(JobState.DONE)
            else:
                ctx.progress(step)


class ExecAgent(Agent):
    """Runs an external install driver per node and relays what it prints.

    The command template gets ``{node}`` and ``{flavor}``.  Recognized output
    lines: ``STATE <name>``, ``PROGRESS <text>``, ``LOG <text>`` (collected
    for the log upload), ``UPLOAD`` and ``CALLBACK``.  A non-zero exit fails
    the job.
    """

    def __init__(self, template: str, timeout: float = 3600.0):
        self.template = template
        self.timeout = timeout

    def install(self, ctx):
        argv = shlex.split(self.template.format(node=ctx.node, flavor=ctx.flavor.value))
        proc = subprocess.Popen(argv, stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
        timer = threading.Timer(self.timeout, proc.kill)
        timer.start()
        captured = []
        try:
            for line in proc.stdout:
                word, _, rest = line.rstrip("\n").partition(" ")
                if word == "STATE":
                    ctx.state(JobState(rest.strip()))
                elif word == "PROGRESS":
                    ctx.progress(rest)
                elif word == "LOG":
                    captured.append(rest + "\n")
                elif word == "UPLOAD":
                    ctx.upload("".join(captured).encode())
                elif word == "CALLBACK":
                    ctx.comment_out()
            err = proc.stderr.read()
            code = proc.wait()
        finally:
            timer.cancel()
        if code != 0:
            raise AgentFailure(f"{argv[0]} exited {code}: {err.strip()}")


# -- wave driver -------------------------------------------------------------

@dataclass
class RunLogEntry:
    at: float
    node: str
    event: str
    active: int


@dataclass
class RunResult:
    jobs: list[InstallJob]
    run_log: list[RunLogEntry]
    peak: int
    max_concurrent: int

    def failed(self) -> list[InstallJob]:
        return [j for j in self.jobs if j.state != JobState.DONE]

    def summary(self) -> str:
        lines = [f"{j.node} {j.state.value}" + (f": {j.error}" if j.error else "") for j in self.jobs]
        done = sum(1 for j in self.jobs if j.state == JobState.DONE)
        lines.append(f"{done}/{len(self.jobs)} done, peak concurrency {self.peak} (cap {self.max_concurrent})")
        return "".join(line + "\n" for line in lines)


class NotEnabled(BootptabError):
    pass


class _Gauge:
    def __init__(self, run_log):
        self.lock = threading.Lock()
        self.active = 0
        self.peak = 0
        self.run_log = run_log

    def change(self, node, delta, event):
        with self.lock:
            self.active += delta
            self.peak = max(self.peak, self.active)
            self.run_log.append(RunLogEntry(time.time(), node, event, self.active))


def run_waves(plan: WavePlan, flavor: Flavor, agent: Agent, bootptab, store_dir,
              job_timeout: float | None = None) -> RunResult:
    """Install every node of *plan*, one wave at a time.

    A job that fails after its node already disabled itself gets its entry
    re-enabled, so the bootptab always lists exactly the nodes still to do.
    """
    table = load_bootptab(bootptab)
    missing = [n for n in plan.nodes if not table.is_enabled(n)]
    if missing:
        raise NotEnabled(f"not enabled in bootptab: {' '.join(missing)}")

    run_log: list[RunLogEntry] = []
    gauge = _Gauge(run_log)
    jobs: list[InstallJob] = []

    for wave in plan.waves:
        events: queue.Queue = queue.Queue()
        wave_jobs = {n: InstallJob(n, flavor) for n in wave}
        jobs.extend(wave_jobs.values())
        running = set(wave)

        def worker(node, events=events):
            gauge.change(node, +1, "start")
            try:
                agent.install(InstallContext(node, flavor, events, bootptab))
            except Exception as e:  # noqa: BLE001 - any agent error fails just this job
                events.put(("failed", node, str(e) or type(e).__name__))
            finally:
                gauge.change(node, -1, "exit")
                events.put(("exit", node))

        threads = [threading.Thread(target=worker, args=(n,), name=f"install-{n}", daemon=True) for n in wave]
        for t in threads:
            t.start()
        deadline = None if job_timeout is None else time.monotonic() + job_timeout
        while running:
            try:
                wait = None if deadline is None else max(0.0, deadline - time.monotonic())
                event = events.get(timeout=wait)
            except queue.Empty:
                for n in sorted(running):
                    wave_jobs[n].fail("timed out")
                break
            kind, node = event[0], event[1]
            job = wave_jobs[node]
            if kind == "exit":
                running.discard(node)
                if not job.state.terminal:
                    job.fail("agent finished before the install completed")
            elif kind == "upload":
                content, reply = event[2], event[3]
                try:
                    upload_log(job, content, store_dir)
                except (WrongState, OSError) as e:
                    job.fail(str(e))
                    reply.put((False, str(e)))
                else:
                    reply.put((True, ""))
            elif job.state.terminal:
                continue
            elif kind == "state":
                try:
                    job.advance(event[2])
                except IllegalTransition as e:
                    job.fail(str(e))
            elif kind == "progress":
                job.note("progress", event[2])
            elif kind == "failed":
                job.fail(event[2])
        if deadline is None:
            for t in threads:
                t.join()
        for job in wave_jobs.values():
            if job.state == JobState.FAILED:
                try:
                    if not load_bootptab(bootptab).is_enabled(job.node) and enable(bootptab, job.node):
                        job.note("progress", "bootptab entry re-enabled")
                except (OSError, BootptabError) as e:
                    log.error("could not re-enable %s: %s", job.node, e)
    return RunResult(jobs, run_log, gauge.peak, plan.max_concurrent)


def write_run_log(path, result: RunResult):
    with open(path, "w") as f:
        for e in result.run_log:
            f.write(f"{e.at:.6f} {e.node} {e.event} active={e.active}\n")
        for job in result.jobs:
            for ev in job.log:
                f.write(f"{ev.at:.6f} {job.node} {ev.kind} {ev.detail}\n")
        f.write(f"peak {result.peak} cap {result.max_concurrent}\n")


# -- command line ------------------------------------------------------------

def _parse_fail(text):
    node, _, step = text.partition(":")
    return node, step or "installing"


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="netboot", description="Plan and run network install waves.")
    ap.add_argument("--bootptab", default=os.environ.get("NETBOOT_BOOTPTAB", "/etc/bootptab"))
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("plan", help="show the install waves")
    p.add_argument("pattern")
    p.add_argument("--cap", type=int, required=True)

    r = sub.add_parser("run", help="install nodes wave by wave")
    r.add_argument("pattern")
    r.add_argument("--cap", type=int, required=True)
    r.add_argument("--flavor", choices=[f.value for f in Flavor], default="os")
    r.add_argument("--agent", choices=["sim", "exec"], default="sim")
    r.add_argument("--command", help="exec agent command template ({node}, {flavor})")
    r.add_argument("--store", default="netboot-logs", help="directory for uploaded install logs")
    r.add_argument("--sim-delay", type=float, default=0.0)
    r.add_argument("--fail", action="append", type=_parse_fail, default=[], metavar="NODE[:STEP]",
                   help="simulated agent: fail NODE at STEP")
    r.add_argument("--run-log")
    r.add_argument("--job-timeout", type=float)

    for name in ("disable", "enable"):
        d = sub.add_parser(name, help=f"{name} a host's bootptab entry")
        d.add_argument("host")

    args = ap.parse_args(argv)
    try:
        if args.cmd in ("disable", "enable"):
            changed = (comment_out if args.cmd == "disable" else enable)(args.bootptab, args.host)
            if not changed:
                print(f"netboot: {args.host} already {args.cmd}d", file=sys.stderr)
            return 0
        nodes = nodeset.resolve(args.pattern)
        plan = plan_waves(nodes, args.cap)
        if args.cmd == "plan":
            for i, wave in enumerate(plan.waves, 1):
                print(f"wave {i}: {' '.join(wave)}")
            return 0
        if args.agent == "exec":
            if not args.command:
                ap.error("--agent exec needs --command")
            agent = ExecAgent(args.command)
        else:
            agent = SimulatedAgent(args.sim_delay, fail_on=dict(args.fail))
        result = run_waves(plan, Flavor(args.flavor), agent, args.bootptab, args.store, args.job_timeout)
    except (OSError, ValueError, nodeset.ExpansionTooLargeError) as e:
        print(f"netboot: {e}", file=sys.stderr)
        return 2
    sys.stdout.write(result.summary())
    if args.run_log:
        write_run_log(args.run_log, result)
    return 0 if not result.failed() else 1


if __name__ == "__main__":
    sys.exit(main())

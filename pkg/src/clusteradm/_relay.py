"""Low-level execution machinery shared by the controller and relay copies.

A relay is started once per delegate node in an ``nway`` tree, so this
module is kept to a minimal set of stdlib imports: its import time is paid
once per tree level.

Relay invocation::

    python -m clusteradm._relay --timeout S --transport local|shell [--rsh PROG] -- COMMAND

with the serialized subtree on stdin.  Results go to stdout as frames::

    u32 big-endian header length | node \\x1f status \\x1f stdout-len \\x1f stderr-len | stdout | stderr
"""

import os
import selectors
import signal
import struct
import subprocess
import sys
import threading
import time
from collections import namedtuple

TIMEOUT_STATUS = 124
LAUNCH_FAILURE_STATUS = 125
DEFAULT_OUTPUT_CAP = 16 * 1024 * 1024
MAX_PARALLEL = 256
# extra wall-clock allowance per relay level, on top of the per-node timeout
RELAY_GRACE = 5.0

FIELD_SEP = b"\x1f"

_BOOTSTRAP = "import sys; from clusteradm._relay import main; sys.exit(main(sys.argv[1:]))"

RunOutput = namedtuple("RunOutput", "exit_status stdout stderr truncated", defaults=(False,))


class PlanError(ValueError):
    pass


class FrameError(ValueError):
    pass


class NodeTimeout(Exception):
    def __init__(self, stdout=b"", stderr=b""):
        super().__init__("timed out")
        self.stdout = stdout
        self.stderr = stderr


class TreeNode:
    """One level of the fanout tree; ``delegate`` is None at the controller."""

    __slots__ = ("delegate", "children", "leaves")

    def __init__(self, delegate, children=None, leaves=None):
        self.delegate = delegate
        self.children = children if children is not None else []
        self.leaves = leaves if leaves is not None else []

    def __eq__(self, other):
        if not isinstance(other, TreeNode):
            return NotImplemented
        return self.to_records() == other.to_records()

    def __repr__(self):
        return f"TreeNode({self.delegate!r}, children={self.children!r}, leaves={self.leaves!r})"

    def walk(self):
        stack = [self]
        while stack:
            tn = stack.pop()
            yield tn
            stack.extend(reversed(tn.children))

    def nodes(self):
        """Every target covered by this subtree, delegates included."""
        out = []
        for tn in self.walk():
            if tn.delegate is not None:
                out.append(tn.delegate)
            out.extend(tn.leaves)
        return out

    def height(self):
        best = 0
        stack = [(self, 0)]
        while stack:
            tn, depth = stack.pop()
            best = max(best, depth)
            stack.extend((c, depth + 1) for c in tn.children)
        return best

    def to_records(self):
        """Flat pre-order encoding: ``[name, parent_index, kind]`` rows.

        Flat so that deep (nway=1) chains never hit recursion limits.
        """
        rows = []
        stack = [(self, -1)]
        while stack:
            tn, parent = stack.pop()
            idx = len(rows)
            rows.append([tn.delegate, parent, "d"])
            for leaf in tn.leaves:
                rows.append([leaf, idx, "l"])
            stack.extend((c, idx) for c in reversed(tn.children))
        return rows

    @classmethod
    def from_records(cls, rows):
        built = []
        root = None
        for name, parent, kind in rows:
            if kind == "l":
                built[parent].leaves.append(name)
                built.append(None)
                continue
            tn = cls(name)
            if parent < 0:
                if root is not None:
                    raise PlanError("serialized plan has more than one root")
                root = tn
            else:
                built[parent].children.append(tn)
            built.append(tn)
        if root is None:
            raise PlanError("serialized plan is empty")
        return root

    def dumps(self):
        """Line format, one row per line: ``<d|l> <parent_index> <name>``
        (empty name for the controller)."""
        return "".join(f"{kind} {parent} {name or ''}\n" for name, parent, kind in self.to_records())

    @classmethod
    def loads(cls, text):
        rows = []
        for line in text.splitlines():
            try:
                kind, parent, name = line.split(" ", 2)
                rows.append([name or None, int(parent), kind])
            except ValueError:
                raise PlanError(f"bad plan row {line!r}") from None
            if kind not in ("d", "l"):
                raise PlanError(f"bad plan row {line!r}")
        return cls.from_records(rows)


class ExecResult:
    __slots__ = ("node", "exit_status", "stdout", "stderr", "timed_out", "duration", "truncated")

    def __init__(self, node, exit_status, stdout=b"", stderr=b"", timed_out=False,
                 duration=0.0, truncated=False):
        self.node = node
        self.exit_status = exit_status
        self.stdout = stdout
        self.stderr = stderr
        self.timed_out = timed_out
        self.duration = duration
        self.truncated = truncated

    def _key(self):
        return tuple(getattr(self, f) for f in self.__slots__ if f != "duration")

    def __eq__(self, other):
        if not isinstance(other, ExecResult):
            return NotImplemented
        return self._key() == other._key()

    def __repr__(self):
        return (f"ExecResult(node={self.node!r}, exit_status={self.exit_status}, "
                f"stdout={self.stdout!r}, stderr={self.stderr!r}, timed_out={self.timed_out})")


def encode_frame(result):
    header = FIELD_SEP.join([
        result.node.encode(),
        str(result.exit_status).encode(),
        str(len(result.stdout)).encode(),
        str(len(result.stderr)).encode(),
    ])
    return struct.pack(">I", len(header)) + header + result.stdout + result.stderr


def decode_frames(data):
    results = []
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise FrameError(f"truncated frame length at byte {pos}")
        (hlen,) = struct.unpack_from(">I", data, pos)
        pos += 4
        header = data[pos:pos + hlen]
        if len(header) != hlen:
            raise FrameError(f"truncated frame header at byte {pos}")
        pos += hlen
        parts = header.split(FIELD_SEP)
        if len(parts) != 4:
            raise FrameError(f"frame header has {len(parts)} fields, expected 4")
        try:
            node = parts[0].decode()
            status, out_len, err_len = (int(p) for p in parts[1:])
        except (UnicodeDecodeError, ValueError) as e:
            raise FrameError(f"bad frame header: {e}") from None
        body = data[pos:pos + out_len + err_len]
        if len(body) != out_len + err_len:
            raise FrameError(f"truncated frame body for {node}")
        pos += out_len + err_len
        results.append(ExecResult(node, status, body[:out_len], body[out_len:],
                                  timed_out=status == TIMEOUT_STATUS))
    return results


def _normalize_status(code):
    return 128 - code if code < 0 else code


def run_process(argv, timeout, cap=DEFAULT_OUTPUT_CAP, stdin=None, env=None):
    """Run *argv*, draining both pipes into buffers bounded by *cap*.

    Raises NodeTimeout (carrying partial output) when *timeout* expires and
    OSError when the program cannot be launched.
    """
    proc = subprocess.Popen(
        argv,
        stdin=subprocess.PIPE if stdin is not None else subprocess.DEVNULL,
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE,
        start_new_session=True,
        env=env,
    )
    deadline = time.monotonic() + timeout
    if stdin is not None:
        # small payload (a serialized plan); fits the pipe buffer
        try:
            proc.stdin.write(stdin)
        except BrokenPipeError:
            pass
        proc.stdin.close()
    bufs = {proc.stdout: bytearray(), proc.stderr: bytearray()}
    truncated = False
    timed_out = False
    with selectors.DefaultSelector() as sel:
        for f in bufs:
            sel.register(f, selectors.EVENT_READ)
        while sel.get_map():
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                timed_out = True
                break
            for key, _ in sel.select(remaining):
                chunk = os.read(key.fd, 65536)
                if not chunk:
                    sel.unregister(key.fileobj)
                    continue
                buf = bufs[key.fileobj]
                room = cap - len(buf)
                if len(chunk) > room:
                    truncated = True
                    chunk = chunk[:max(room, 0)]
                buf += chunk
    if not timed_out:
        try:
            proc.wait(max(deadline - time.monotonic(), 0))
        except subprocess.TimeoutExpired:
            timed_out = True
    if timed_out:
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except (ProcessLookupError, PermissionError):
            pass
        proc.wait()
    proc.stdout.close()
    proc.stderr.close()
    out, err = bytes(bufs[proc.stdout]), bytes(bufs[proc.stderr])
    if timed_out:
        raise NodeTimeout(out, err)
    return RunOutput(_normalize_status(proc.returncode), out, err, truncated)


class Transport:
    """Runs a command on one node.

    Subclasses implement ``run(node, command, timeout)`` returning
    ``(exit_status, stdout, stderr)``; they raise NodeTimeout on timeout and
    OSError when the node cannot be reached.  ``relay`` hands a whole subtree
    to its delegate; the default simulates the relay in-process but still
    round-trips results through the frame codec.
    """

    output_cap = DEFAULT_OUTPUT_CAP

    def run(self, node, command, timeout):
        raise NotImplementedError

    def local(self):
        """Transport a relay uses to run the command on its own node."""
        return self

    def relay(self, tree, command, timeout):
        results = run_subtree(tree, command, timeout, self, self.local())
        return decode_frames(b"".join(encode_frame(r) for r in results))


class LocalProcess(Transport):
    """Every node is a local ``/bin/sh -c`` child with ``$NODE`` set."""

    def __init__(self, shell="/bin/sh", output_cap=DEFAULT_OUTPUT_CAP):
        self.shell = shell
        self.output_cap = output_cap

    def run(self, node, command, timeout):
        env = dict(os.environ, NODE=node)
        return run_process([self.shell, "-c", command], timeout, self.output_cap, env=env)

    def relay_argv(self, delegate, command, timeout):
        # -S and -c skip site and runpy setup, which dominate relay startup
        return [sys.executable, "-S", "-c", _BOOTSTRAP,
                "--timeout", str(timeout), "--transport", "local", "--", command]

    def relay_env(self):
        pkg_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
        path = os.pathsep.join(p for p in (pkg_root, os.environ.get("PYTHONPATH")) if p)
        return dict(os.environ, PYTHONPATH=path)

    def relay(self, tree, command, timeout):
        return process_relay(self, tree, command, timeout)


class RemoteShell(Transport):
    """Invokes an external remote-shell program (``rsh``/``ssh``) per node."""

    def __init__(self, program="ssh", relay_python="python3", output_cap=DEFAULT_OUTPUT_CAP):
        import shlex
        self.argv = shlex.split(program)
        self.relay_python = relay_python
        self.output_cap = output_cap

    def run(self, node, command, timeout):
        return run_process(self.argv + [node, command], timeout, self.output_cap)

    def local(self):
        return LocalProcess(output_cap=self.output_cap)

    def relay_argv(self, delegate, command, timeout):
        import shlex
        remote = shlex.join([
            self.relay_python, "-m", "clusteradm._relay",
            "--timeout", str(timeout), "--transport", "shell",
            "--rsh", shlex.join(self.argv), "--", command,
        ])
        return self.argv + [delegate, remote]

    def relay_env(self):
        return None

    def relay(self, tree, command, timeout):
        return process_relay(self, tree, command, timeout)


def process_relay(transport, tree, command, timeout):
    """Start a relay copy on ``tree.delegate`` and collect its frames.

    Nodes the relay never reports on come back as launch failures; a relay
    that overruns its budget marks its whole subtree timed out.
    """
    covered = tree.nodes()
    budget = timeout + RELAY_GRACE * (tree.height() + 1)
    start = time.monotonic()
    argv = transport.relay_argv(tree.delegate, command, timeout)
    try:
        out = run_process(argv, budget, cap=1 << 62, stdin=tree.dumps().encode(),
                          env=transport.relay_env())
    except NodeTimeout:
        took = time.monotonic() - start
        return [ExecResult(n, TIMEOUT_STATUS, timed_out=True, duration=took) for n in covered]
    except OSError as e:
        return [ExecResult(n, LAUNCH_FAILURE_STATUS, stderr=f"relay launch failed: {e}\n".encode())
                for n in covered]
    took = time.monotonic() - start
    try:
        got = {r.node: r for r in decode_frames(out.stdout)}
    except FrameError as e:
        sys.stderr.write(f"relay on {tree.delegate} sent bad frames: {e}\n")
        got = {}
    results = []
    for n in covered:
        r = got.get(n)
        if r is None:
            why = out.stderr or f"relay on {tree.delegate} exited {out.exit_status}\n".encode()
            r = ExecResult(n, LAUNCH_FAILURE_STATUS, stderr=why)
        r.duration = took
        results.append(r)
    return results


def run_one(transport, node, command, timeout):
    start = time.monotonic()
    try:
        out = transport.run(node, command, timeout)
    except NodeTimeout as e:
        return ExecResult(node, TIMEOUT_STATUS, e.stdout, e.stderr, True, time.monotonic() - start)
    except OSError as e:
        return ExecResult(node, LAUNCH_FAILURE_STATUS, stderr=f"launch failed: {e}\n".encode(),
                          duration=time.monotonic() - start)
    status, stdout, stderr = out[0], out[1], out[2]
    truncated = bool(getattr(out, "truncated", False))
    cap = transport.output_cap
    if len(stdout) > cap or len(stderr) > cap:
        truncated = True
        stdout, stderr = stdout[:cap], stderr[:cap]
    return ExecResult(node, status, stdout, stderr, False, time.monotonic() - start, truncated)


def run_subtree(tree, command, timeout, transport, self_transport):
    """Run *command* on the delegate of *tree* (through *self_transport*), on
    its leaves, and on its relayed children, all concurrently."""
    jobs = []
    if tree.delegate is not None:
        jobs.append(("self", tree.delegate))
    jobs.extend(("leaf", n) for n in tree.leaves)
    jobs.extend(("relay", c) for c in tree.children)
    if not jobs:
        return []

    slots = [None] * len(jobs)
    gate = threading.BoundedSemaphore(MAX_PARALLEL)

    def work(i, kind, target):
        with gate:
            try:
                if kind == "self":
                    slots[i] = [run_one(self_transport, target, command, timeout)]
                elif kind == "leaf":
                    slots[i] = [run_one(transport, target, command, timeout)]
                else:
                    slots[i] = transport.relay(target, command, timeout)
            except Exception as e:  # per-node failures never abort the run
                names = target.nodes() if kind == "relay" else [target]
                slots[i] = [ExecResult(n, LAUNCH_FAILURE_STATUS,
                                       stderr=f"transport error: {e}\n".encode()) for n in names]

    threads = [threading.Thread(target=work, args=(i, k, t), daemon=True)
               for i, (k, t) in enumerate(jobs)]
    for th in threads:
        th.start()
    # a hung transport must not hold the report hostage
    overall = timeout + RELAY_GRACE * (tree.height() + 1)
    deadline = time.monotonic() + overall
    results = []
    for i, th in enumerate(threads):
        th.join(max(deadline - time.monotonic(), 0))
        got = slots[i]
        if got is None:
            kind, target = jobs[i]
            names = target.nodes() if kind == "relay" else [target]
            got = [ExecResult(n, TIMEOUT_STATUS, timed_out=True, duration=overall) for n in names]
        results.extend(got)
    return results


def make_transport(kind, rsh="ssh", relay_python="python3"):
    if kind == "local":
        return LocalProcess()
    if kind == "shell":
        return RemoteShell(rsh, relay_python=relay_python)
    raise ValueError(f"unknown transport {kind!r}")


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    opts = {"--timeout": None, "--transport": "shell", "--rsh": "ssh", "--relay-python": "python3"}
    while argv and argv[0] != "--":
        flag = argv.pop(0)
        if flag not in opts or not argv:
            sys.stderr.write(f"relay: bad argument {flag!r}\n")
            return 2
        opts[flag] = argv.pop(0)
    if opts["--timeout"] is None or not argv:
        sys.stderr.write("relay: usage: --timeout S [--transport local|shell] [--rsh PROG] -- COMMAND\n")
        return 2
    command = " ".join(argv[1:])
    tree = TreeNode.loads(sys.stdin.read())
    transport = make_transport(opts["--transport"], opts["--rsh"], opts["--relay-python"])
    results = run_subtree(tree, command, float(opts["--timeout"]), transport, transport.local())
    out = sys.stdout.buffer
    for r in results:
        out.write(encode_frame(r))
    out.flush()
    return 0


if __name__ == "__main__":
    sys.exit(main())

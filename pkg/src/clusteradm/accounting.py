"""Project accounting and allocation enforcement (``fermitrack``).

Each night the batch accounting file is read and every project is charged
node-hours (nodes x walltime) for the jobs that ended since the last run.
A project whose allocation runs out is deleted from the project file, and
the submission gate rejects any job that names it, directly or as a user's
default project.

Accounting line (one finished job)::

    E;<job id>;<user>;<project>;wall=<s>;cpu=<s>;nodes=<n>;end=<epoch>

Project file::

    # comments are kept as written
    project <name> <remaining node-hours>
    default <user> <project>
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Callable, Iterable

from clusteradm import notify
from clusteradm._fileio import atomic_write

SECONDS_PER_HOUR = 3600


# -- accounting records ------------------------------------------------------

@dataclass(frozen=True)
class AccountingRecord:
    job_id: str
    user: str
    project: str
    walltime: int
    cputime: int
    node_count: int
    end_timestamp: int

    @property
    def node_seconds(self) -> int:
        return self.node_count * self.walltime

    @property
    def node_hours(self) -> Fraction:
        return Fraction(self.node_seconds, SECONDS_PER_HOUR)


@dataclass(frozen=True)
class ParseIssue:
    lineno: int
    line: str
    reason: str


_FIELDS = {"wall": "walltime", "cpu": "cputime", "nodes": "node_count", "end": "end_timestamp"}


def parse_line(line: str) -> AccountingRecord | None:
    """Parse one accounting line.  Returns None for record types that carry
    no usage (anything but ``E``); raises ValueError on malformed input."""
    parts = line.rstrip("\r\n").split(";")
    if len(parts) < 2:
        raise ValueError("not a ';'-separated record")
    if parts[0] != "E":
        if len(parts[0]) == 1 and parts[0].isalpha():
            return None
        raise ValueError(f"bad record type {parts[0]!r}")
    if len(parts) != 8:
        raise ValueError(f"expected 8 fields, got {len(parts)}")
    job_id, user, project = parts[1:4]
    if not (job_id and user and project):
        raise ValueError("empty job id, user or project")
    values = {}
    for item in parts[4:]:
        key, sep, value = item.partition("=")
        if not sep or key not in _FIELDS or _FIELDS[key] in values:
            raise ValueError(f"bad field {item!r}")
        if not value.isdigit():
            raise ValueError(f"field {key} is not a non-negative integer: {value!r}")
        values[_FIELDS[key]] = int(value)
    if values["node_count"] < 1:
        raise ValueError("nodes must be at least 1")
    return AccountingRecord(job_id, user, project, **values)


def parse_accounting(stream: Iterable[str],
                     parse: Callable[[str], AccountingRecord | None] = parse_line,
                     ) -> tuple[list[AccountingRecord], list[ParseIssue]]:
    """Parse an accounting stream, tolerating bad lines.

    Returns the good records and one ParseIssue per rejected line.  *parse*
    is the per-line adapter for other accounting formats.
    """
    records, issues = [], []
    for lineno, line in enumerate(stream, 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        try:
            rec = parse(line)
        except (ValueError, KeyError) as e:
            issues.append(ParseIssue(lineno, line.rstrip("\n"), str(e)))
            continue
        if rec is not None:
            records.append(rec)
    return records, issues


# -- project ledger ----------------------------------------------------------

def format_hours(value: Fraction) -> str:
    """Shortest exact text for *value*: integer, terminating decimal, or n/d."""
    value = Fraction(value)
    if value.denominator == 1:
        return str(value.numerator)
    for places in range(1, 7):
        scaled = value * 10 ** places
        if scaled.denominator == 1:
            sign = "-" if scaled < 0 else ""
            digits = str(abs(scaled.numerator)).rjust(places + 1, "0")
            return f"{sign}{digits[:-places]}.{digits[-places:]}"
    return f"{value.numerator}/{value.denominator}"


def parse_hours(text: str) -> Fraction:
    try:
        return Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise ValueError(f"bad node-hour amount {text!r}") from None


def _classify(line: str):
    """('project', name, amount) | ('default', user, project) | None."""
    words = line.split("#", 1)[0].split()
    if not words:
        return None
    if words[0] == "project" and len(words) == 3:
        return ("project", words[1], parse_hours(words[2]))
    if words[0] == "default" and len(words) == 3:
        return ("default", words[1], words[2])
    raise ValueError(f"cannot parse project file line {line.rstrip()!r}")


@dataclass
class ProjectLedger:
    projects: dict[str, Fraction] = field(default_factory=dict)
    defaults: dict[str, str] = field(default_factory=dict)
    # source text, kept so rewrites touch only the lines that changed
    lines: list[str] = field(default_factory=list, compare=False, repr=False)

    @classmethod
    def parse(cls, text: str) -> "ProjectLedger":
        ledger = cls(lines=text.splitlines(keepends=True))
        for lineno, line in enumerate(ledger.lines, 1):
            try:
                entry = _classify(line)
            except ValueError as e:
                raise ValueError(f"line {lineno}: {e}") from None
            if entry is None:
                continue
            kind, key, value = entry
            table = ledger.projects if kind == "project" else ledger.defaults
            if key in table:
                raise ValueError(f"line {lineno}: {kind} {key} defined twice")
            if kind == "project" and value < 0:
                raise ValueError(f"line {lineno}: negative allocation for {key}")
            table[key] = value
        return ledger

    @classmethod
    def load(cls, path) -> "ProjectLedger":
        with open(path) as f:
            return cls.parse(f.read())

    def render(self) -> str:
        out, seen_p, seen_d = [], set(), set()
        for line in self.lines:
            entry = _classify(line)
            if entry is None:
                out.append(line)
                continue
            kind, key, value = entry
            body, hash_, comment = line.partition("#")
            gap = body[len(body.rstrip()):] if hash_ else ""
            ending = gap + hash_ + comment if hash_ else line[len(line.rstrip("\r\n")):]
            if kind == "project":
                seen_p.add(key)
                if key not in self.projects:
                    continue
                if self.projects[key] != value:
                    line = f"project {key} {format_hours(self.projects[key])}{ending}"
            else:
                seen_d.add(key)
                if key not in self.defaults:
                    continue
                if self.defaults[key] != value:
                    line = f"default {key} {self.defaults[key]}{ending}"
            out.append(line)
        if out and not out[-1].endswith("\n"):
            out[-1] += "\n"
        out += [f"project {p} {format_hours(v)}\n" for p, v in self.projects.items() if p not in seen_p]
        out += [f"default {u} {p}\n" for u, p in self.defaults.items() if u not in seen_d]
        return "".join(out)

    def save(self, path):
        atomic_write(path, self.render())

    def dangling(self) -> list[tuple[str, str]]:
        return [(u, p) for u, p in self.defaults.items() if p not in self.projects]

    def copy(self) -> "ProjectLedger":
        return ProjectLedger(dict(self.projects), dict(self.defaults), list(self.lines))


# -- charging ----------------------------------------------------------------

@dataclass
class ChargeReport:
    charges: dict[str, Fraction] = field(default_factory=dict)
    unledgered: list[str] = field(default_factory=list)
    removed: list[str] = field(default_factory=list)
    overage: dict[str, Fraction] = field(default_factory=dict)
    remaining: dict[str, Fraction] = field(default_factory=dict)
    dangling_defaults: list[tuple[str, str]] = field(default_factory=list)
    jobs: int = 0
    high_water: int | None = None

    @property
    def total(self) -> Fraction:
        return sum(self.charges.values(), Fraction(0))

    def to_json(self) -> dict:
        return {
            "charges": {p: str(v) for p, v in self.charges.items()},
            "removed": self.removed,
            "jobs": self.jobs,
            "high_water": self.high_water,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ChargeReport":
        return cls(charges={p: Fraction(v) for p, v in doc["charges"].items()},
                   removed=list(doc.get("removed", [])), jobs=doc.get("jobs", 0),
                   high_water=doc.get("high_water"))

    def render(self) -> str:
        lines = []
        for p in sorted(self.charges):
            note = " (unledgered)" if p in self.unledgered else ""
            tail = f" remaining {format_hours(self.remaining[p])}" if p in self.remaining else ""
            lines.append(f"charged {p} {format_hours(self.charges[p])}{tail}{note}")
        for p in self.removed:
            over = self.overage.get(p, Fraction(0))
            lines.append(f"removed {p} overage {format_hours(over)}")
        for user, p in self.dangling_defaults:
            lines.append(f"dangling default {user} {p}")
        lines.append(f"total {format_hours(self.total)} node-hours over {self.jobs} jobs")
        return "".join(line + "\n" for line in lines)


def charge(records: Iterable[AccountingRecord], ledger: ProjectLedger | None = None) -> ChargeReport:
    """Group node-hour charges by project.  Projects missing from *ledger*
    are still charged but listed as unledgered."""
    node_seconds: dict[str, int] = {}
    report = ChargeReport()
    for rec in records:
        node_seconds[rec.project] = node_seconds.get(rec.project, 0) + rec.node_seconds
        report.jobs += 1
        if report.high_water is None or rec.end_timestamp > report.high_water:
            report.high_water = rec.end_timestamp
    report.charges = {p: Fraction(ns, SECONDS_PER_HOUR) for p, ns in node_seconds.items()}
    if ledger is not None:
        report.unledgered = sorted(p for p in report.charges if p not in ledger.projects)
    return report


def nightly_run(ledger: ProjectLedger, records: Iterable[AccountingRecord],
                since: int | None = None) -> tuple[ProjectLedger, ChargeReport]:
    """Charge records that ended after *since* and decrement allocations.

    A project left with zero or less is removed; users whose default it was
    are reported as dangling.  Returns a new ledger; *ledger* is untouched.
    """
    fresh = [r for r in records if since is None or r.end_timestamp > since]
    report = charge(fresh, ledger)
    if report.high_water is None or (since is not None and since > report.high_water):
        report.high_water = since
    new = ledger.copy()
    for project, amount in report.charges.items():
        if project not in new.projects:
            continue
        left = new.projects[project] - amount
        if left <= 0:
            del new.projects[project]
            report.removed.append(project)
            report.overage[project] = -left
        else:
            new.projects[project] = left
            report.remaining[project] = left
    report.removed.sort()
    report.dangling_defaults = new.dangling()
    return new, report


class GateReason(Enum):
    NO_SUCH_PROJECT = "NoSuchProject"
    NO_DEFAULT_PROJECT = "NoDefaultProject"
    DANGLING_DEFAULT = "DanglingDefault"


@dataclass(frozen=True)
class GateDecision:
    accepted: bool
    project: str | None = None
    reason: GateReason | None = None


def gate_submission(ledger: ProjectLedger, user: str, requested_project: str | None = None) -> GateDecision:
    if requested_project is not None:
        if requested_project in ledger.projects:
            return GateDecision(True, requested_project)
        return GateDecision(False, requested_project, GateReason.NO_SUCH_PROJECT)
    default = ledger.defaults.get(user)
    if default is None:
        return GateDecision(False, None, GateReason.NO_DEFAULT_PROJECT)
    if default not in ledger.projects:
        return GateDecision(False, default, GateReason.DANGLING_DEFAULT)
    return GateDecision(True, default)


def cumulative_usage(history: Iterable[ChargeReport]) -> dict[str, Fraction]:
    totals: dict[str, Fraction] = {}
    for report in history:
        for p, v in report.charges.items():
            totals[p] = totals.get(p, Fraction(0)) + v
    return totals


def usage_report(history: Iterable[ChargeReport]) -> str:
    totals = cumulative_usage(history)
    width = max([len("PROJECT")] + [len(p) for p in totals])
    lines = [f"{'PROJECT':<{width}}  NODE-HOURS"]
    lines += [f"{p:<{width}}  {float(totals[p]):>10.2f}" for p in sorted(totals)]
    return "".join(line + "\n" for line in lines)


def notify_violations(report: ChargeReport, notifier) -> notify.Delivery | None:
    """Tell the administrators about projects removed for exhausting their time."""
    if not report.removed:
        return None
    body = "".join(
        f"project {p} used up its allocation (overage {format_hours(report.overage.get(p, 0))} node-hours)"
        " and was removed from the project file\n"
        for p in report.removed
    )
    body += "".join(f"user {u} now has dangling default project {p}\n" for u, p in report.dangling_defaults)
    return notify.deliver(notifier, f"fermitrack: {len(report.removed)} project(s) exhausted", body)


# -- history -----------------------------------------------------------------

def load_history(path) -> list[ChargeReport]:
    if not path or not os.path.exists(path):
        return []
    with open(path) as f:
        return [ChargeReport.from_json(json.loads(line)) for line in f if line.strip()]


def append_history(path, report: ChargeReport, run_at: float | None = None):
    doc = report.to_json()
    doc["run_at"] = int(run_at if run_at is not None else time.time())
    with open(path, "a") as f:
        f.write(json.dumps(doc, sort_keys=True) + "\n")


def last_high_water(history: list[ChargeReport]) -> int | None:
    marks = [h.high_water for h in history if h.high_water is not None]
    return max(marks) if marks else None


# -- command line ------------------------------------------------------------

def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="fermitrack", description="Charge projects and enforce allocations.")
    sub = ap.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="charge new accounting records against the project file")
    run.add_argument("--ledger", required=True)
    run.add_argument("--accounting", required=True)
    run.add_argument("--since", type=int, help="only charge jobs that ended after this epoch")
    run.add_argument("--history", help="charge history file (default: <ledger>.history)")
    run.add_argument("--notify", choices=["none", "file", "command", "console"], default="none")
    run.add_argument("--notify-target", help="mbox path or mail command")
    run.add_argument("--dry-run", action="store_true")

    gate = sub.add_parser("gate", help="decide whether a job submission is allowed")
    gate.add_argument("--ledger", required=True)
    gate.add_argument("--user", required=True)
    gate.add_argument("--project")

    rep = sub.add_parser("report", help="cumulative usage per project")
    rep.add_argument("--history")
    rep.add_argument("--ledger")

    args = ap.parse_args(argv)

    if args.cmd == "gate":
        try:
            ledger = ProjectLedger.load(args.ledger)
        except (OSError, ValueError) as e:
            print(f"fermitrack: {e}", file=sys.stderr)
            return 2
        decision = gate_submission(ledger, args.user, args.project)
        if decision.accepted:
            print(f"accept {decision.project}")
            return 0
        print(f"reject {decision.reason.value}" + (f" {decision.project}" if decision.project else ""))
        return 1

    history_path = args.history or (args.ledger + ".history" if args.ledger else None)
    if args.cmd == "report":
        if not history_path:
            ap.error("report needs --history or --ledger")
        sys.stdout.write(usage_report(load_history(history_path)))
        return 0

    try:
        ledger = ProjectLedger.load(args.ledger)
        with open(args.accounting) as f:
            records, issues = parse_accounting(f)
        history = load_history(history_path)
    except (OSError, ValueError) as e:
        print(f"fermitrack: {e}", file=sys.stderr)
        return 2
    for issue in issues:
        print(f"fermitrack: {args.accounting}:{issue.lineno}: skipped: {issue.reason}", file=sys.stderr)
    since = args.since if args.since is not None else last_high_water(history)
    new_ledger, report = nightly_run(ledger, records, since)
    sys.stdout.write(report.render())
    if args.dry_run:
        return 0
    new_ledger.save(args.ledger)
    append_history(history_path, report)
    try:
        notifier = notify.make_notifier(args.notify, args.notify_target)
    except ValueError as e:
        print(f"fermitrack: {e}", file=sys.stderr)
        return 2
    notify_violations(report, notifier)
    return 0


if __name__ == "__main__":
    sys.exit(main())

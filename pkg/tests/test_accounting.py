import json
import mailbox
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from clusteradm import accounting
from clusteradm.accounting import (AccountingRecord, GateReason, ProjectLedger, charge,
                                   gate_submission, nightly_run, parse_accounting, usage_report)

SAMPLE = "E;12xy.myjob;alice;lqcd;wall=3600;cpu=3400;nodes=4;end=1060000000\n"

LEDGER_TEXT = """\
# allocations for the current quarter
project lqcd 10
project astro 2.5   # trailing comments stay put
project spare 1/3

# default projects
default alice lqcd
default bob astro
"""


def rec(project="lqcd", wall=3600, nodes=1, end=1000, job="1.j", user="alice", cpu=0):
    return AccountingRecord(job, user, project, wall, cpu, nodes, end)


# -- parsing -----------------------------------------------------------------

def test_parse_golden_line():
    records, issues = parse_accounting([SAMPLE])
    assert issues == []
    assert records == [AccountingRecord("12xy.myjob", "alice", "lqcd", 3600, 3400, 4, 1060000000)]


def test_parse_empty():
    assert parse_accounting([]) == ([], [])


def test_parse_one_garbled_line_of_three():
    lines = [SAMPLE, "E;broken;;wall=x\n", SAMPLE.replace("12xy", "13xy")]
    records, issues = parse_accounting(lines)
    assert [r.job_id for r in records] == ["12xy.myjob", "13xy.myjob"]
    assert [i.lineno for i in issues] == [2]


@pytest.mark.parametrize("line", [
    "E;j;u;p;wall=1;cpu=1;nodes=0;end=1",
    "E;j;u;p;wall=-1;cpu=1;nodes=1;end=1",
    "E;j;u;p;wall=1;cpu=1;nodes=1",
    "E;j;u;p;wall=1;wall=1;nodes=1;end=1",
    "E;j;u;p;wall=1;cpu=1;nodes=1;when=1",
    "garbage",
])
def test_parse_rejects(line):
    records, issues = parse_accounting([line])
    assert records == [] and len(issues) == 1


def test_non_end_records_ignored():
    records, issues = parse_accounting(["Q;1.j;queued\n", "S;1.j;started\n", SAMPLE])
    assert len(records) == 1 and issues == []


def test_custom_line_adapter():
    def csv(line):
        job, user, project, wall, nodes = line.strip().split(",")
        return AccountingRecord(job, user, project, int(wall), 0, int(nodes), 0)
    records, _ = parse_accounting(["1,a,p,7200,2\n"], parse=csv)
    assert charge(records).charges == {"p": 4}


# -- charging ----------------------------------------------------------------

def test_charge_examples():
    assert charge([rec(wall=3600, nodes=4)]).charges == {"lqcd": 4}
    assert charge([rec(wall=0, nodes=8)]).charges == {"lqcd": 0}
    r = charge([rec(wall=3600, nodes=4), rec(wall=7200, nodes=1)])
    assert r.charges == {"lqcd": 6} and r.total == 6


def test_charge_flags_unledgered():
    ledger = ProjectLedger.parse(LEDGER_TEXT)
    r = charge([rec(project="ghost", wall=3600)], ledger)
    assert r.charges == {"ghost": 1} and r.unledgered == ["ghost"]


records_st = st.lists(
    st.builds(rec, project=st.sampled_from(["lqcd", "astro", "spare", "ghost"]),
              wall=st.integers(0, 10 ** 6), nodes=st.integers(1, 512), end=st.integers(0, 10 ** 9)),
    max_size=60)


@given(records_st)
def test_charge_conservation(records):
    # independent fold in plain integers
    expected_total = Fraction(sum(r.node_count * r.walltime for r in records), 3600)
    report = charge(records)
    assert report.total == expected_total
    for p in {r.project for r in records}:
        assert report.charges[p] == Fraction(
            sum(r.node_count * r.walltime for r in records if r.project == p), 3600)


# -- nightly run -------------------------------------------------------------

def test_nightly_decrement_retained():
    ledger = ProjectLedger.parse(LEDGER_TEXT)
    new, report = nightly_run(ledger, [rec(wall=3600, nodes=4)])
    assert new.projects["lqcd"] == 6 and report.removed == []
    assert ledger.projects["lqcd"] == 10  # input untouched


def test_nightly_exact_exhaustion_removes():
    new, report = nightly_run(ProjectLedger.parse(LEDGER_TEXT), [rec(wall=36000, nodes=1)])
    assert "lqcd" not in new.projects and report.removed == ["lqcd"]
    assert report.overage["lqcd"] == 0
    assert report.dangling_defaults == [("alice", "lqcd")]


def test_nightly_overage_reported():
    new, report = nightly_run(ProjectLedger.parse(LEDGER_TEXT), [rec(project="astro", wall=3600, nodes=4)])
    assert report.removed == ["astro"] and report.overage["astro"] == Fraction(3, 2)


def test_gate_after_exhaustion():
    ledger = ProjectLedger.parse(LEDGER_TEXT)
    assert gate_submission(ledger, "alice").accepted
    new, _ = nightly_run(ledger, [rec(wall=40000, nodes=1)])
    d = gate_submission(new, "alice")
    assert not d.accepted and d.reason == GateReason.DANGLING_DEFAULT
    d = gate_submission(new, "bob", "lqcd")
    assert not d.accepted and d.reason == GateReason.NO_SUCH_PROJECT


def test_gate_cases():
    ledger = ProjectLedger.parse(LEDGER_TEXT)
    assert gate_submission(ledger, "alice") == accounting.GateDecision(True, "lqcd")
    assert gate_submission(ledger, "alice", "astro") == accounting.GateDecision(True, "astro")
    assert gate_submission(ledger, "carol").reason == GateReason.NO_DEFAULT_PROJECT
    assert gate_submission(ledger, "carol", "spare").accepted


def test_high_water_skips_old_records():
    ledger = ProjectLedger.parse(LEDGER_TEXT)
    records = [rec(wall=3600, end=100), rec(wall=3600, end=200)]
    new, report = nightly_run(ledger, records, since=100)
    assert report.charges == {"lqcd": 1} and report.high_water == 200
    again, report2 = nightly_run(new, records, since=report.high_water)
    assert report2.charges == {} and again.projects == new.projects and report2.high_water == 200


@given(records_st)
def test_run_properties(records):
    ledger = ProjectLedger.parse(LEDGER_TEXT)
    new, report = nightly_run(ledger, records)
    # monotone
    for p, v in new.projects.items():
        assert v <= ledger.projects[p] and v > 0
    # gate soundness
    for p in ["lqcd", "astro", "spare", "ghost"]:
        assert gate_submission(new, "anyone", p).accepted == (p in new.projects)
    assert set(report.removed) == set(ledger.projects) - set(new.projects)
    assert ProjectLedger.parse(new.render()) == new


# -- ledger file -------------------------------------------------------------

def test_ledger_render_unchanged_is_byte_identical():
    assert ProjectLedger.parse(LEDGER_TEXT).render() == LEDGER_TEXT


def test_ledger_rewrite_touches_only_changed_lines():
    new, _ = nightly_run(ProjectLedger.parse(LEDGER_TEXT),
                         [rec(project="lqcd", wall=3600, nodes=4), rec(project="spare", wall=3600)])
    assert new.render() == LEDGER_TEXT.replace("project lqcd 10", "project lqcd 6").replace(
        "project spare 1/3\n", "")


def test_ledger_fractional_values_survive():
    ledger = ProjectLedger.parse("project p 10\n")
    new, _ = nightly_run(ledger, [rec(project="p", wall=1200)])
    assert new.render() == "project p 29/3\n"
    assert ProjectLedger.parse(new.render()).projects["p"] == Fraction(29, 3)
    assert accounting.format_hours(Fraction(5, 4)) == "1.25"


@pytest.mark.parametrize("text", ["project p\n", "project p -1\n", "project p 1\nproject p 2\n", "bogus\n"])
def test_ledger_parse_errors(text):
    with pytest.raises(ValueError):
        ProjectLedger.parse(text)


@given(st.dictionaries(st.from_regex(r"[a-z][a-z0-9]{0,6}", fullmatch=True),
                       st.fractions(min_value=0, max_value=10 ** 6, max_denominator=3600)),
       st.dictionaries(st.from_regex(r"[a-z]{1,6}", fullmatch=True),
                       st.from_regex(r"[a-z]{1,6}", fullmatch=True)))
def test_ledger_round_trip(projects, defaults):
    ledger = ProjectLedger(projects, defaults)
    assert ProjectLedger.parse(ledger.render()) == ledger


# -- reports -----------------------------------------------------------------

def test_usage_report():
    a = accounting.ChargeReport(charges={"P": Fraction(4)})
    b = accounting.ChargeReport(charges={"P": Fraction(6), "Q": Fraction(1, 2)}, removed=["Q"])
    assert accounting.cumulative_usage([a, b]) == {"P": 10, "Q": Fraction(1, 2)}
    assert usage_report([a, b]) == ("PROJECT  NODE-HOURS\n"
                                    "P             10.00\n"
                                    "Q              0.50\n")
    assert usage_report([]) == "PROJECT  NODE-HOURS\n"


# -- CLI ---------------------------------------------------------------------

def test_cli_run_gate_report(tmp_path, capsys):
    ledger = tmp_path / "projects"
    ledger.write_text(LEDGER_TEXT)
    acct = tmp_path / "accounting"
    acct.write_text(SAMPLE + "junk\n" + "E;2.j;bob;astro;wall=3600;cpu=1;nodes=3;end=1060000100\n")
    mbox = tmp_path / "mail"

    assert accounting.main(["run", "--ledger", str(ledger), "--accounting", str(acct),
                            "--notify", "file", "--notify-target", str(mbox)]) == 0
    out, err = capsys.readouterr()
    assert "charged lqcd 4 remaining 6" in out and "removed astro overage 0.5" in out
    assert "accounting:2: skipped" in err
    assert "project astro" not in ledger.read_text()
    msgs = list(mailbox.mbox(str(mbox)))
    assert len(msgs) == 1 and "astro" in msgs[0].get_payload()

    history = (tmp_path / "projects.history").read_text().splitlines()
    assert json.loads(history[0])["high_water"] == 1060000100

    # replay is a no-op thanks to the recorded high-water mark
    assert accounting.main(["run", "--ledger", str(ledger), "--accounting", str(acct)]) == 0
    assert "total 0 node-hours over 0 jobs" in capsys.readouterr().out
    assert "project lqcd 6\n" in ledger.read_text()

    assert accounting.main(["gate", "--ledger", str(ledger), "--user", "bob"]) == 1
    assert capsys.readouterr().out == "reject DanglingDefault astro\n"
    assert accounting.main(["gate", "--ledger", str(ledger), "--user", "alice"]) == 0
    assert capsys.readouterr().out == "accept lqcd\n"

    assert accounting.main(["report", "--ledger", str(ledger)]) == 0
    assert capsys.readouterr().out.splitlines()[1:] == ["astro          3.00", "lqcd           4.00"]


def test_changed_line_keeps_trailing_comment():
    new, _ = nightly_run(ProjectLedger.parse(LEDGER_TEXT), [rec(project="astro", wall=1800)])
    assert "project astro 2   # trailing comments stay put\n" in new.render()

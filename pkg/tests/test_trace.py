import dataclasses
import json

import pytest

from testdata import read_fixture, read_golden
from threadbox.audit import AuditLog
from threadbox.engine import Verdict
from threadbox.errors import LearningError, TraceParseError
from threadbox.promises import Promise, PromiseSet, parse_promises
from threadbox.trace import (
    DECLARE,
    TraceDirective,
    TraceEvent,
    learn_from_trace,
    parse_trace,
    replay,
)


class TestParse:
    def test_event_line(self):
        (line,) = parse_trace("5 5 openat open_access=read\n")
        assert isinstance(line, TraceEvent)
        assert (line.tid, line.tgid, line.syscall) == (5, 5, "openat")
        assert line.open_access == "read"
        assert line.seq == 1

    def test_declare_directive(self):
        (line,) = parse_trace('@declare 5 5 "net rpath" name=login complain=false\n')
        assert isinstance(line, TraceDirective)
        assert line.kind == DECLARE
        assert line.promises == parse_promises("net rpath")
        assert line.name == "login"
        assert not line.complain

    def test_declare_name_with_spaces(self):
        (line,) = parse_trace('@declare 5 5 "wpath" name="Extract file"\n')
        assert line.name == "Extract file"

    def test_mapped_syscall_needs_context(self):
        with pytest.raises(TraceParseError, match="line 3"):
            parse_trace("# hdr\n5 5 getpid\n5 5 clone\n")

    def test_structure_only_mode_skips_context_check(self):
        (line,) = parse_trace("5 5 clone\n", mapping=None)
        assert line.syscall == "clone"

    def test_unknown_syscalls_kept(self):
        (line,) = parse_trace("5 5 frobnicate\n")
        assert line.syscall == "frobnicate"

    @pytest.mark.parametrize(
        "doc,fragment",
        [
            ("5 openat\n", "event lines"),
            ("x 5 openat\n", "not an integer"),
            ("0 5 openat\n", ">= 1"),
            ("5 5 openat open_access=append\n", "bad value"),
            ("5 5 openat color=red\n", "unknown context key"),
            ("5 5 openat open_access=read open_access=read\n", "duplicate"),
            ("@frobnicate 5\n", "unknown directive"),
            ("@register\n", "@register takes"),
            ('@declare 5 5 "net" shade=dark\n', "unknown declare option"),
            ('@declare 5 5 "nope"\n', "unknown promise token"),
            ('@declare 5 5 "net" complain=maybe\n', "true or false"),
            ("@exit 5\n", "@exit takes"),
        ],
    )
    def test_malformed_lines_rejected(self, doc, fragment):
        with pytest.raises(TraceParseError, match=fragment):
            parse_trace(doc)

    def test_error_carries_line_number(self):
        with pytest.raises(TraceParseError) as excinfo:
            parse_trace("# one\n\n5 5 openat open_access=nope\n")
        assert excinfo.value.line == 3

    def test_unbalanced_quote_rejected(self):
        with pytest.raises(TraceParseError, match="quoting"):
            parse_trace('@declare 5 5 "net rpath name=x\n')

    def test_comments_and_blanks_skipped(self):
        lines = parse_trace("# top\n\n5 5 getpid  # inline\n")
        assert len(lines) == 1

    def test_seq_strictly_increasing_and_shared(self):
        lines = parse_trace("@register 5\n5 5 getpid\n@exit 5 5\n")
        assert [l.seq for l in lines] == [1, 2, 3]


FIXTURE_GOLDENS = [
    ("login.trace", "login.replay.txt"),
    ("register_exploit.trace", "register_exploit.replay.txt"),
    ("wormhole_extract.trace", "wormhole_extract.replay.txt"),
    ("wormhole_backdoor.trace", "wormhole_backdoor.replay.txt"),
    ("pdf_viewer.trace", "pdf_viewer.replay.txt"),
]


class TestReplay:
    @pytest.mark.parametrize("fixture,golden", FIXTURE_GOLDENS)
    def test_fixture_matches_golden(self, fixture, golden):
        result = replay(parse_trace(read_fixture(fixture)))
        assert result.to_text() == read_golden(golden)

    def test_login_all_allowed(self):
        result = replay(parse_trace(read_fixture("login.trace")))
        assert not result.killed
        assert all(s.decision.verdict is Verdict.ALLOW for s in result.steps)

    def test_register_exploit_kills_at_exec(self):
        result = replay(parse_trace(read_fixture("register_exploit.trace")))
        assert result.kill_points == {10: 6}
        kill_step = next(s for s in result.steps if s.seq == 6)
        assert kill_step.syscall == "execve"
        assert kill_step.decision.promise is Promise.PROC

    def test_post_kill_markers_after_kill(self):
        result = replay(parse_trace(read_fixture("register_exploit.trace")))
        for step in result.steps:
            if step.seq > 6:
                assert step.post_kill

    def test_pdf_xxe_kills_whole_process(self):
        # One violating thread takes down both sandboxed threads of the
        # process: the main thread's later event is post-kill.
        result = replay(parse_trace(read_fixture("pdf_viewer.trace")))
        assert result.kill_points == {30: 12}
        kill_step = next(s for s in result.steps if s.seq == 12)
        assert kill_step.decision.promise is Promise.NET
        last = result.steps[-1]
        assert last.tid == 30 and last.post_kill

    def test_unsandboxed_trace_is_transparent(self):
        doc = "1 1 execve\n1 1 socket sock_domain=inet\n1 1 mkdir\n"
        result = replay(parse_trace(doc))
        assert not result.killed
        assert all(s.decision.verdict is Verdict.ALLOW for s in result.steps)

    def test_interleaved_processes_fail_independently(self):
        doc = (
            "@register 10\n"
            "@register 20\n"
            '@declare 11 10 "rpath" name=a\n'
            '@declare 21 20 "rpath" name=b\n'
            "11 10 openat open_access=read\n"
            "21 20 execve\n"
            "11 10 openat open_access=read\n"
            "21 20 openat open_access=read\n"
            "@exit 11 10\n"
        )
        result = replay(parse_trace(doc))
        assert result.kill_points == {20: 6}
        by_seq = {s.seq: s for s in result.steps}
        # the other process keeps being evaluated normally after the kill
        assert by_seq[7].decision.verdict is Verdict.ALLOW
        assert by_seq[8].post_kill

    def test_determinism_byte_for_byte(self):
        lines = parse_trace(read_fixture("pdf_viewer.trace"))
        a = replay(lines)
        b = replay(lines)
        assert a.to_text() == b.to_text()
        assert a.to_jsonl() == b.to_jsonl()

    def test_registries_are_per_replay(self):
        lines = parse_trace(read_fixture("login.trace"))
        replay(lines)
        # the declare in the first replay must not leak into the second
        result = replay(parse_trace("11 10 execve\n"))
        assert result.steps[0].decision.reason == "unregistered"

    def test_audit_records_on_kill(self):
        audit = AuditLog()
        replay(parse_trace(read_fixture("register_exploit.trace")), audit=audit)
        (rec,) = audit.query(mode="enforce")
        assert rec.name == "register"
        assert rec.syscall == "execve"
        assert rec.promise == "proc"

    def test_jsonl_one_object_per_line_with_all_fields(self):
        result = replay(parse_trace(read_fixture("register_exploit.trace")))
        lines = result.to_jsonl().strip().split("\n")
        objs = [json.loads(l) for l in lines]
        events = [o for o in objs if o["type"] == "event"]
        assert len(events) == len(result.steps)
        for obj in events:
            assert {"seq", "tid", "tgid", "syscall", "verdict", "promise", "reason"} <= set(obj)
        assert {"type": "kill", "tgid": 10, "seq": 6} in objs
        assert objs[-1] == {"type": "summary", "events": 5, "kills": 1}


LEARNING_FIXTURES = {
    "login_learning.trace": ("login", {Promise.RPATH, Promise.NET}),
    "wormhole_extract_learning.trace": ("Extract file", {Promise.WPATH}),
    "pdf_learning.trace": ("parser", {Promise.RPATH, Promise.IPC}),
    "handle_text_learning.trace": ("handle-text", set()),
}


class TestLearning:
    @pytest.mark.parametrize("fixture", LEARNING_FIXTURES)
    def test_learned_sets(self, fixture):
        name, expected = LEARNING_FIXTURES[fixture]
        results = learn_from_trace(parse_trace(read_fixture(fixture)))
        assert results == [(name, str(PromiseSet.from_iterable(expected)))]

    def test_complain_record_per_mapped_event(self):
        audit = AuditLog()
        replay(parse_trace(read_fixture("login_learning.trace")), audit=audit)
        # openat, getdents64, socket, connect violate the empty promise set;
        # lseek is ungated and produces nothing.
        assert len(audit.query(mode="complain")) == 4

    def test_learn_requires_complain_declarations(self):
        with pytest.raises(LearningError):
            learn_from_trace(parse_trace(read_fixture("login.trace")))

    def test_no_kills_in_complain_traces(self):
        for fixture in LEARNING_FIXTURES:
            result = replay(parse_trace(read_fixture(fixture)))
            assert not result.killed

    @pytest.mark.parametrize("fixture", LEARNING_FIXTURES)
    def test_learning_then_enforce_is_sound(self, fixture):
        lines = parse_trace(read_fixture(fixture))
        learned = dict(learn_from_trace(lines))
        result = replay(_enforce_with(lines, learned))
        assert not result.killed

    @pytest.mark.parametrize("fixture", LEARNING_FIXTURES)
    def test_learned_sets_are_minimal(self, fixture):
        lines = parse_trace(read_fixture(fixture))
        learned = dict(learn_from_trace(lines))
        for name, promise_string in learned.items():
            granted = parse_promises(promise_string)
            for dropped in granted:
                weakened = dict(learned)
                weakened[name] = str(PromiseSet(granted.bits & ~(1 << dropped.value)))
                result = replay(_enforce_with(lines, weakened))
                assert result.killed, f"{fixture}: {name} without {dropped.token}"


def _enforce_with(lines, promise_strings_by_name):
    """Rewrite complain declares to enforce mode with the given promises."""
    out = []
    for line in lines:
        if isinstance(line, TraceDirective) and line.kind == DECLARE and line.complain:
            name = line.name if line.name else f"tid:{line.tid}"
            out.append(
                dataclasses.replace(
                    line,
                    complain=False,
                    promises=parse_promises(promise_strings_by_name[name]),
                )
            )
        else:
            out.append(line)
    return out

"""Live supervision integration tests.

These run only where per-thread tracing works (Linux x86_64 with ptrace
available); everywhere else they skip, never fail.
"""

import os
import sys
import tempfile

import pytest

from threadbox.audit import AuditLog
from threadbox.engine import Verdict
from threadbox.errors import CapabilityError
from threadbox.live import KILL_EXIT_CODE, probe_support, supervise
from threadbox.promises import Promise
from threadbox.trace import parse_trace, replay

HELPERS = os.path.join(os.path.dirname(__file__), "helpers")

supported, reason = probe_support()
pytestmark = pytest.mark.skipif(
    not supported, reason=f"live tracing unavailable: {reason}"
)


def run_helper(name, extra_env=None, audit=None, timeout=120):
    sp = supervise(
        [sys.executable, os.path.join(HELPERS, name)],
        audit=audit,
        extra_env=extra_env,
    )
    code = sp.wait(timeout)
    return sp, code


class TestEnforcement:
    def test_rpath_helper_runs_to_completion(self):
        sp, code = run_helper("helper_read_ok.py")
        assert code == 0
        assert sp.kill_info is None
        # the control write produced exactly this entry
        assert '"rpath" name=reader' in sp.recording_text()

    def test_exec_killed_before_sentinel_side_effect(self):
        sentinel = os.path.join(tempfile.mkdtemp(), "sentinel")
        audit = AuditLog()
        sp, code = run_helper(
            "helper_exec_violation.py",
            extra_env={"SENTINEL": sentinel},
            audit=audit,
        )
        assert code == KILL_EXIT_CODE
        assert not os.path.exists(sentinel), "denied exec must never run"
        assert sp.kill_info is not None
        assert sp.kill_info.decision.verdict is Verdict.KILL
        assert sp.kill_info.decision.promise is Promise.PROC
        (record,) = audit.query(mode="enforce")
        assert record.syscall == "execve"
        assert record.promise == "proc"
        assert record.name == "reader"

    def test_socket_classified_across_declare_boundary(self):
        # socket created before the declaration; the connect after it must
        # still be recognised as inet and kill the process.
        sp, code = run_helper("helper_socket_violation.py")
        assert code == KILL_EXIT_CODE
        assert sp.kill_info.decision.promise is Promise.NET
        assert sp.kill_info.event.syscall == "connect"


class TestNonInheritance:
    def test_cloned_thread_starts_unsandboxed(self):
        # the child thread writes a file and forks+execs a process, neither
        # of which the declaring main thread could do
        scratch = os.path.join(tempfile.mkdtemp(), "out.txt")
        sp, code = run_helper(
            "helper_clone_unsandboxed.py", extra_env={"SCRATCH": scratch}
        )
        assert code == 0
        assert os.path.exists(scratch), "child thread had to write freely"
        # exactly one thread ever declared
        assert len(sp.threads_seen) >= 2
        recording = sp.recording_text()
        assert recording.count("@declare") == 1
        assert " execve" in recording  # the sibling's exec went through


class TestControlSemantics:
    def test_write_once_acks_with_note_and_keeps_first_set(self):
        sp, code = run_helper("helper_second_declare.py")
        assert code == 0

    def test_no_new_privs_injected_for_raw_clients(self):
        sp, code = run_helper("helper_nnp.py")
        assert code == 0
        assert sp.nnp_applied and all(sp.nnp_applied.values())


class TestModularSandboxes:
    def test_four_independent_sandboxes_in_one_process(self):
        # one process, four threads, four different promise sets, each doing
        # something only its own sandbox allows; the complain-mode one logs
        # its violation instead of dying and reports what it used
        audit = AuditLog()
        sp, code = run_helper("helper_many_threads.py", audit=audit)
        assert code == 0
        assert sp.kill_info is None
        recording = sp.recording_text()
        assert recording.count("@declare") == 5
        for name in ("main", "worker-read", "worker-write", "worker-probe", "worker-net"):
            assert f"name={name}" in recording
        complain = audit.query(mode="complain")
        assert [r.name for r in complain] == ["worker-probe"]
        assert complain[0].syscall == "mkdir" and complain[0].promise == "wpath"
        (summary,) = audit.query(mode="learn-exit")
        assert summary.name == "worker-probe" and summary.promise == "wpath"
        # and the whole interleaved run replays to the same verdicts
        result = replay(parse_trace(recording))
        replayed = [
            (s.tid, s.tgid, s.syscall, str(s.decision.verdict),
             s.decision.promise.token if s.decision.promise is not None else None)
            for s in result.steps
            if not s.post_kill
        ]
        assert replayed == sp.verdicts


class TestLearning:
    def test_live_learning_report(self):
        audit = AuditLog()
        sp, code = run_helper("helper_learning.py", audit=audit)
        assert code == 0
        (record,) = audit.query(mode="learn-exit")
        assert record.name == "probe"
        assert record.promise == "wpath"


class TestRecordReplayEquivalence:
    @pytest.mark.parametrize(
        "helper,env",
        [
            ("helper_read_ok.py", None),
            ("helper_exec_violation.py", {"SENTINEL": "/tmp/never-made"}),
            ("helper_learning.py", None),
        ],
    )
    def test_replay_reproduces_live_verdicts(self, helper, env):
        sp, _ = run_helper(helper, extra_env=env)
        recorded = sp.recording_text()
        result = replay(parse_trace(recorded), mapping=sp.mapping)
        replayed = [
            (s.tid, s.tgid, s.syscall, str(s.decision.verdict),
             s.decision.promise.token if s.decision.promise is not None else None)
            for s in result.steps
            if not s.post_kill
        ]
        assert replayed == sp.verdicts
        assert len(result.steps) == len(sp.verdicts)  # nothing post-kill


class TestCapabilityGate:
    def test_unsupported_platform_fails_closed(self, monkeypatch):
        import threadbox.live.supervisor as sup

        def refuse():
            raise CapabilityError("unsupported platform: testos")

        monkeypatch.setattr(sup, "require_support", refuse)
        with pytest.raises(CapabilityError):
            supervise([sys.executable, "-c", "pass"])

"""Live per-thread enforcement by syscall interception.

supervise() launches a command stopped-then-traced and checks every syscall
entry of every thread before it executes. Threads opt in through the control
channel; everything else rides the fast allow path. A violation kills the
whole process before the offending syscall runs. New threads and processes
are attached at creation by the kernel, so nothing slips through between
clone and attach, and none of them inherit a sandbox.

The whole ptrace conversation stays on one dedicated supervisor thread (the
kernel ties tracees to the attaching task). The control server threads only
touch the registry, engine, and recorder, all behind one ordering lock so
the recorded trace replays to the same verdict sequence the live run made.
"""

from __future__ import annotations

import os
import shlex
import signal
import tempfile
import threading
from dataclasses import dataclass
from typing import Optional

from ..audit import MODE_ENFORCE, AuditLog
from ..engine import Decision, Engine, Verdict, kill_semantics
from ..errors import (
    CapacityError,
    ClassificationError,
    DecodeError,
    PromiseParseError,
    ThreadboxError,
    UnregisteredProcessError,
)
from ..mapping import MappingTable, default_mapping
from ..promises import SyscallEvent, parse_promises, promises_to_string
from ..registry import TaskRegistry
from .control import (
    CTRL_ENV,
    ENDPOINT_COMPLAIN,
    ENDPOINT_DEBUG,
    ENDPOINT_SANDBOX_PS,
    ControlServer,
)
from .decoder import Decoder
from .ptrace import (
    NR_PRCTL,
    PR_SET_NO_NEW_PRIVS,
    PTRACE_EVENT_CLONE,
    PTRACE_EVENT_EXEC,
    PTRACE_EVENT_FORK,
    PTRACE_EVENT_VFORK,
    SYSCALL_TRAP,
    UserRegs,
    geteventmsg,
    getregs,
    no_new_privs,
    require_support,
    resume_syscall,
    set_trace_options,
    setregs,
    syscall_name,
    tgid_of,
    traceme,
)

WALL = 0x40000000

ENOSYS_RAX = (1 << 64) - 38  # rax == -ENOSYS marks a syscall entry stop

KILL_EXIT_CODE = 137  # 128 + SIGKILL; the documented status of a killed child

# never inject on top of these: register state is special around them
_NO_INJECT_AFTER = {"rt_sigreturn", "sigreturn", "execve", "execveat", "exit", "exit_group"}


def _signed(value: int) -> int:
    return value - (1 << 64) if value >= (1 << 63) else value


@dataclass
class KillInfo:
    tgid: int
    decision: Decision
    event: Optional[SyscallEvent]


class SupervisedProcess:
    """Handle to a traced process tree and its sandbox state."""

    def __init__(self, argv, mapping, audit, extra_env, record, cwd):
        self.argv = list(argv)
        self.mapping = mapping
        self.audit = audit
        self.registry = TaskRegistry(audit=audit)
        self.engine = Engine(mapping, self.registry, audit=audit)
        self.decoder = Decoder()
        self.kill_info: Optional[KillInfo] = None
        self.nnp_applied: dict[int, bool] = {}
        self.threads_seen: set[int] = set()
        # (tid, tgid, syscall, verdict, promise-token) per evaluated entry
        self.verdicts: list[tuple] = []
        self.tgid = 0  # root child pid, set at launch
        self.error: Optional[BaseException] = None

        self._extra_env = dict(extra_env or {})
        self._cwd = cwd
        self._record = record
        self._recording: list[str] = []
        self._order_lock = threading.Lock()  # registry/engine mutation + recording
        self._staged: dict[tuple[int, int], dict] = {}
        self._pending_nnp: set[int] = set()
        self._live_tgids: set[int] = set()

        # ptrace-side state, touched only by the supervisor thread
        self._tracees: set[int] = set()
        self._tgid_by_tid: dict[int, int] = {}
        self._pending_child: dict[int, int] = {}  # announced child -> parent tgid
        self._pending_syscall: dict[int, tuple[int, tuple]] = {}
        self._injection: dict[int, tuple[str, UserRegs]] = {}
        self._exit_status: Optional[int] = None
        self._started = threading.Event()
        self._thread = threading.Thread(
            target=self._main, name="threadbox-supervisor", daemon=True
        )
        self._ctrl_dir: Optional[tempfile.TemporaryDirectory] = None
        self._ctrl: Optional[ControlServer] = None

    # -- public surface ------------------------------------------------------

    def wait(self, timeout: Optional[float] = 60.0) -> int:
        """Block until the child tree is gone; returns the exit code."""
        self._thread.join(timeout)
        if self._thread.is_alive():
            for tgid in set(self._live_tgids) | {self.tgid}:
                try:
                    os.kill(tgid, signal.SIGKILL)
                except OSError:
                    pass
            self._thread.join(10.0)
            if self._thread.is_alive():
                raise TimeoutError("supervisor did not finish")
        if self.error is not None:
            raise self.error
        return self.exit_code

    @property
    def exit_code(self) -> int:
        status = self._exit_status
        if status is None:
            return -1
        if os.WIFEXITED(status):
            return os.WEXITSTATUS(status)
        if os.WIFSIGNALED(status):
            return 128 + os.WTERMSIG(status)
        return -1

    def recording_text(self) -> str:
        with self._order_lock:
            lines = list(self._recording)
        return "\n".join(lines) + "\n" if lines else ""

    # -- recording -----------------------------------------------------------

    def _note(self, line: str) -> None:
        if self._record:
            self._recording.append(line)

    def _note_event(self, event: SyscallEvent) -> None:
        if not self._record:
            return
        parts = [str(event.tid), str(event.tgid), event.syscall]
        if event.sock_domain is not None:
            parts.append(f"sock_domain={event.sock_domain}")
        if event.clone_is_thread is not None:
            parts.append(
                f"clone_is_thread={'true' if event.clone_is_thread else 'false'}"
            )
        if event.open_access is not None:
            parts.append(f"open_access={event.open_access}")
        self._recording.append(" ".join(parts))

    # -- control channel -----------------------------------------------------

    def _handle_control(
        self, endpoint: str, tid: int, tgid: int, payload: str, peer_pid
    ) -> str:
        if peer_pid is not None and peer_pid != tgid:
            return f"err mismatched-peer claimed tgid {tgid} but peer is {peer_pid}"
        if tgid not in self._live_tgids:
            return f"err not-supervised process {tgid} is not supervised"
        if endpoint == ENDPOINT_SANDBOX_PS:
            with self._order_lock:
                if not self.registry.is_registered(tgid):
                    try:
                        self.registry.register_process(tgid)
                    except CapacityError as exc:
                        return f"err capacity {exc}"
                    self._note(f"@register {tgid}")
            return "ok"
        if endpoint == ENDPOINT_DEBUG:
            self._staged.setdefault((tgid, tid), {})["name"] = payload
            return "ok"
        if endpoint == ENDPOINT_COMPLAIN:
            if payload not in ("true", "false"):
                return "err bad-request complain payload must be true or false"
            self._staged.setdefault((tgid, tid), {})["complain"] = payload == "true"
            return "ok"
        # promises: the declaration itself
        try:
            promise_set = parse_promises(payload)
        except PromiseParseError as exc:
            return f"err bad-promises {exc}"
        staged = self._staged.pop((tgid, tid), {})
        name = staged.get("name", "")
        complain = staged.get("complain", False)
        with self._order_lock:
            try:
                entry, created = self.registry.declare_promises(
                    tid, tgid, promise_set,
                    name=name, debug=bool(name), complain=complain,
                )
            except UnregisteredProcessError as exc:
                return f"err unregistered-process {exc}"
            except CapacityError as exc:
                return f"err capacity {exc}"
            if not created:
                return "ok note=write-once"
            line = f'@declare {tid} {tgid} "{promises_to_string(promise_set)}"'
            if entry.name:
                line += f" name={shlex.quote(entry.name)}"
            if complain:
                line += " complain=true"
            self._note(line)
            if complain:
                self.engine.start_learning(tid, tgid, name=entry.name)
            self._pending_nnp.add(tid)
        return "ok"

    # -- launch and event loop -------------------------------------------------

    def start(self) -> None:
        self._ctrl_dir = tempfile.TemporaryDirectory(prefix="threadbox-")
        path = os.path.join(self._ctrl_dir.name, "ctrl.sock")
        self._ctrl = ControlServer(path, self._handle_control)
        self._ctrl.start()
        self._ctrl_path = path
        self._thread.start()
        if not self._started.wait(20.0):
            raise ThreadboxError("supervised child failed to launch in time")
        if self.error is not None:
            raise self.error

    def _spawn_child(self) -> int:
        env = dict(os.environ)
        env.update(self._extra_env)
        env[CTRL_ENV] = self._ctrl_path
        pid = os.fork()
        if pid == 0:
            try:
                traceme()
                if self._cwd is not None:
                    os.chdir(self._cwd)
                os.execvpe(self.argv[0], self.argv, env)
            except BaseException:
                os._exit(127)
        return pid

    def _main(self) -> None:
        try:
            child = self._spawn_child()
            self.tgid = child
            _, status = os.waitpid(child, 0)
            if not os.WIFSTOPPED(status):
                raise ThreadboxError(
                    f"child {self.argv[0]!r} failed to launch (status {status:#x})"
                )
            set_trace_options(child)
            self._adopt(child, child)
            self._started.set()
            resume_syscall(child)
            self._loop()
        except BaseException as exc:
            self.error = exc
            try:
                if self.tgid:
                    os.kill(self.tgid, signal.SIGKILL)
            except OSError:
                pass
        finally:
            self._started.set()
            if self._ctrl is not None:
                self._ctrl.close()
            if self._ctrl_dir is not None:
                self._ctrl_dir.cleanup()

    def _adopt(self, tid: int, tgid: Optional[int] = None) -> None:
        if tgid is None:
            try:
                tgid = tgid_of(tid)
            except ProcessLookupError:
                tgid = self._pending_child.pop(tid, None)
                if tgid is None:
                    # unknown task we cannot place: fail closed
                    try:
                        os.kill(tid, signal.SIGKILL)
                    except OSError:
                        pass
                    self._note(f"# aborted unplaceable task {tid}")
                    return
        self._pending_child.pop(tid, None)
        self._tracees.add(tid)
        self._tgid_by_tid[tid] = tgid
        self._live_tgids.add(tgid)
        self.threads_seen.add(tid)

    def _loop(self) -> None:
        while self._tracees:
            try:
                tid, status = os.waitpid(-1, WALL)
            except ChildProcessError:
                break
            if tid not in self._tracees:
                if os.WIFEXITED(status) or os.WIFSIGNALED(status):
                    continue
                self._adopt(tid)
                if tid not in self._tracees:
                    continue
                # the initial stop of an auto-attached task: suppress it
                self._resume(tid)
                continue
            if os.WIFEXITED(status) or os.WIFSIGNALED(status):
                self._on_task_gone(tid, status)
                continue
            if not os.WIFSTOPPED(status):
                continue
            sig = os.WSTOPSIG(status)
            event = status >> 16
            if sig == SYSCALL_TRAP:
                self._on_syscall_stop(tid)
            elif event in (PTRACE_EVENT_CLONE, PTRACE_EVENT_FORK, PTRACE_EVENT_VFORK):
                new = geteventmsg(tid)
                parent_tgid = self._tgid_by_tid.get(tid, tid)
                if event == PTRACE_EVENT_CLONE:
                    self._pending_child.setdefault(new, parent_tgid)
                else:
                    self._pending_child.setdefault(new, new)
                    self.decoder.fork_inherit(parent_tgid, new)
                self._resume(tid)
            elif event == PTRACE_EVENT_EXEC:
                self._on_exec(tid)
                self._resume(tid)
            elif sig == signal.SIGSTOP and tid in self._pending_child:
                self._resume(tid)
            else:
                self._resume(tid, sig)

    def _resume(self, tid: int, sig: int = 0) -> None:
        try:
            resume_syscall(tid, sig)
        except OSError:
            pass  # task died under us; waitpid will report it

    # -- stop handling ---------------------------------------------------------

    def _on_task_gone(self, tid: int, status: int) -> None:
        self._tracees.discard(tid)
        tgid = self._tgid_by_tid.pop(tid, None)
        self._pending_syscall.pop(tid, None)
        self._injection.pop(tid, None)
        self._pending_nnp.discard(tid)
        if tgid is None:
            return
        with self._order_lock:
            try:
                self.engine.finalize_learning(tid, tgid)
            except ThreadboxError:
                pass
            self.registry.remove_task(tid, tgid)
            self._note(f"@exit {tid} {tgid}")
            if tgid not in self._tgid_by_tid.values():
                for l_tid, l_tgid in self.engine.learning_tasks(tgid):
                    try:
                        self.engine.finalize_learning(l_tid, l_tgid)
                    except ThreadboxError:
                        pass
                self.registry.remove_process(tgid)
                self._note(f"@exit_process {tgid}")
                self._live_tgids.discard(tgid)
                self.decoder.clear_process(tgid)
        if tid == self.tgid:
            self._exit_status = status

    def _on_exec(self, tid: int) -> None:
        tgid = self._tgid_by_tid.get(tid, tid)
        stale = [t for t, g in self._tgid_by_tid.items() if g == tgid and t != tid]
        for t in stale:
            self._tracees.discard(t)
            self._tgid_by_tid.pop(t, None)
            self._pending_syscall.pop(t, None)
            self._injection.pop(t, None)
            self._pending_nnp.discard(t)
        with self._order_lock:
            for l_tid, l_tgid in self.engine.learning_tasks(tgid):
                try:
                    self.engine.finalize_learning(l_tid, l_tgid)
                except ThreadboxError:
                    pass
            # the new image is unconfined and must opt in from scratch
            self.registry.remove_process(tgid)
            self._note(f"@exit_process {tgid}")
        self.decoder.clear_process(tgid)
        self._tgid_by_tid[tid] = tgid

    def _on_syscall_stop(self, tid: int) -> None:
        try:
            regs = getregs(tid)
        except OSError:
            return  # killed between stop and inspection
        inj = self._injection.get(tid)
        if inj is not None:
            self._injection_step(tid, regs, inj)
            return
        if regs.rax == ENOSYS_RAX:
            self._on_syscall_entry(tid, regs)
        else:
            self._on_syscall_exit(tid, regs)

    def _on_syscall_entry(self, tid: int, regs: UserRegs) -> None:
        nr = regs.orig_rax
        args = regs.syscall_args()
        tgid = self._tgid_by_tid.get(tid)
        if tgid is None:
            self._resume(tid)
            return
        entry = self.registry.lookup(tid, tgid)
        sandboxed = entry is not None
        decision: Optional[Decision] = None
        event: Optional[SyscallEvent] = None
        try:
            event = self.decoder.decode(tid, tgid, nr, args, sandboxed)
        except DecodeError as exc:
            decision = self._decode_kill(tid, tgid, nr, str(exc))
        if decision is None:
            with self._order_lock:
                try:
                    decision = self.engine.evaluate(event)
                except ClassificationError:
                    decision = None
                if decision is not None:
                    self._note_event(event)
                    self.verdicts.append(
                        (
                            event.tid,
                            event.tgid,
                            event.syscall,
                            str(decision.verdict),
                            decision.promise.token
                            if decision.promise is not None
                            else None,
                        )
                    )
            if decision is None:
                decision = self._decode_kill(tid, tgid, nr, "missing context")
        if decision.verdict is Verdict.KILL:
            self._kill_process(tid, tgid, regs, decision, event)
            return
        self._pending_syscall[tid] = (nr, args)
        self._resume(tid)

    def _decode_kill(self, tid: int, tgid: int, nr: int, detail: str) -> Decision:
        """Fail closed when a mapped syscall's context cannot be determined."""
        name = syscall_name(nr)
        candidates = self.mapping.candidate_promises(name)
        promise = candidates[0] if candidates else None
        entry = self.registry.lookup(tid, tgid)
        with self._order_lock:
            self._note(f"# decode-failure tid={tid} tgid={tgid} syscall={name}")
            if self.audit is not None:
                self.audit.log(
                    name=entry.name if entry else "",
                    tid=tid,
                    tgid=tgid,
                    mode=MODE_ENFORCE,
                    syscall=name,
                    promise=promise.token if promise is not None else "-",
                )
        if promise is None:
            # unmapped syscall cannot fail decode, but stay safe anyway
            promise = self.mapping.candidate_promises("execve")[0]
        return Decision(Verdict.KILL, promise, reason="decode")

    def _kill_process(
        self,
        tid: int,
        tgid: int,
        regs: UserRegs,
        decision: Decision,
        event: Optional[SyscallEvent],
    ) -> None:
        directive = kill_semantics(tgid)
        self.kill_info = KillInfo(directive.tgid, decision, event)
        # make the pending syscall unexecutable, then kill the whole group
        regs.orig_rax = (1 << 64) - 1
        try:
            setregs(tid, regs)
        except OSError:
            pass
        try:
            os.kill(directive.tgid, signal.SIGKILL)
        except OSError:
            pass
        self._resume(tid)

    def _on_syscall_exit(self, tid: int, regs: UserRegs) -> None:
        tgid = self._tgid_by_tid.get(tid)
        info = self._pending_syscall.pop(tid, None)
        if info is not None and tgid is not None:
            nr, args = info
            self.decoder.after_exit(tid, tgid, nr, args, _signed(regs.rax))
            if tid in self._pending_nnp and syscall_name(nr) not in _NO_INJECT_AFTER:
                self._pending_nnp.discard(tid)
                self._begin_injection(tid, regs)
                return
        self._resume(tid)

    # -- no-new-privs injection --------------------------------------------------

    def _begin_injection(self, tid: int, exit_regs: UserRegs) -> None:
        """Make the thread run prctl(PR_SET_NO_NEW_PRIVS, 1) before going on.

        At a syscall exit, rip points just past the 2-byte syscall insn.
        Rewinding rip and loading prctl's number and arguments re-executes
        the instruction as our call; afterwards the saved registers are
        restored so the thread never sees a difference.
        """
        saved = exit_regs.clone()
        inj = exit_regs.clone()
        inj.rip -= 2
        inj.rax = NR_PRCTL
        inj.rdi = PR_SET_NO_NEW_PRIVS
        inj.rsi = 1
        inj.rdx = 0
        inj.r10 = 0
        inj.r8 = 0
        inj.r9 = 0
        try:
            setregs(tid, inj)
        except OSError:
            return
        self._injection[tid] = ("entry", saved)
        self._resume(tid)

    def _injection_step(self, tid: int, regs: UserRegs, state) -> None:
        phase, saved = state
        if phase == "entry":
            self._injection[tid] = ("exit", saved)
            self._resume(tid)
            return
        tgid = self._tgid_by_tid.get(tid, 0)
        del self._injection[tid]
        try:
            setregs(tid, saved)
        except OSError:
            return
        applied = _signed(regs.rax) == 0
        if not applied:
            try:
                applied = no_new_privs(tgid, tid)
            except OSError:
                applied = False
        self.nnp_applied[tid] = applied
        self._resume(tid)


def supervise(
    argv,
    mapping: Optional[MappingTable] = None,
    audit: Optional[AuditLog] = None,
    extra_env: Optional[dict] = None,
    record: bool = True,
    cwd: Optional[str] = None,
) -> SupervisedProcess:
    """Launch argv under live per-thread enforcement.

    Raises CapabilityError if the host cannot trace (wrong platform or
    insufficient privileges); nothing is launched in that case.
    """
    if not argv:
        raise ValueError("argv must not be empty")
    require_support()
    if mapping is None:
        mapping = default_mapping()
    if audit is None:
        audit = AuditLog()
    process = SupervisedProcess(argv, mapping, audit, extra_env, record, cwd)
    process.start()
    return process

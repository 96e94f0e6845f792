import pytest

from threadbox.errors import ClassificationError, MappingError
from threadbox.mapping import default_mapping, parse_mapping
from threadbox.promises import Promise, SyscallEvent


def ev(syscall, **ctx):
    return SyscallEvent(tid=5, tgid=5, syscall=syscall, **ctx)


class TestGrammar:
    def test_single_conditional_rule(self):
        # A freestanding conditional rule still has to cover the domain.
        table = parse_mapping(
            "syscall bind when sock_domain=inet -> net\n"
            "syscall bind when sock_domain=unix -> ipc\n"
            "syscall bind when sock_domain=other -> none\n"
        )
        rules = table.rules_for("bind")
        assert len(rules) == 3
        assert rules[0].context_key == "sock_domain"
        assert rules[0].promise is Promise.NET

    def test_none_rule(self):
        table = parse_mapping("syscall lseek -> none\n")
        (rule,) = table.rules_for("lseek")
        assert rule.promise is None
        assert table.required_promise(ev("lseek")) is None

    def test_comments_and_blank_lines(self):
        table = parse_mapping("# top\n\nsyscall execve -> proc  # inline\n")
        assert table.required_promise(ev("execve")) is Promise.PROC

    def test_alias_promise_tokens_accepted(self):
        table = parse_mapping(
            "syscall socket when sock_domain=inet -> net\n"
            "syscall socket when sock_domain=unix -> unix\n"
            "syscall socket when sock_domain=other -> none\n"
        )
        assert table.required_promise(ev("socket", sock_domain="unix")) is Promise.IPC


class TestLoadFailures:
    @pytest.mark.parametrize(
        "doc,lineno,fragment",
        [
            # overlapping conditions for one syscall
            (
                "syscall bind when sock_domain=inet -> net\n"
                "syscall bind when sock_domain=inet -> ipc\n"
                "syscall bind when sock_domain=unix -> ipc\n"
                "syscall bind when sock_domain=other -> none\n",
                2,
                "overlapping",
            ),
            # unconditional rule overlapping a conditional one
            (
                "syscall bind -> net\n"
                "syscall bind when sock_domain=unix -> ipc\n",
                2,
                "overlaps",
            ),
            # duplicate unconditional rule
            (
                "syscall execve -> proc\nsyscall execve -> proc\n",
                2,
                "duplicate",
            ),
            # two different context keys on one syscall
            (
                "syscall clone when clone_is_thread=true -> threading\n"
                "syscall clone when clone_is_thread=false -> proc\n"
                "syscall clone when sock_domain=inet -> net\n",
                3,
                "mix",
            ),
            # incomplete coverage of the key's domain
            (
                "syscall bind when sock_domain=inet -> net\n"
                "syscall bind when sock_domain=unix -> ipc\n",
                1,
                "totality",
            ),
            # unknown promise
            ("syscall execve -> root\n", 1, "unknown promise"),
            # unknown context key
            ("syscall bind when port=80 -> net\n", 1, "unknown context key"),
            # bad context value
            ("syscall bind when sock_domain=ax25 -> net\n", 1, "bad value"),
            # malformed line
            ("syscall execve proc\n", 1, "malformed"),
            ("execve -> proc\n", 1, "malformed"),
        ],
    )
    def test_rejected_with_line_number(self, doc, lineno, fragment):
        with pytest.raises(MappingError) as excinfo:
            parse_mapping(doc)
        assert excinfo.value.line == lineno
        assert fragment in str(excinfo.value)


class TestDefaultTable:
    def test_loads_and_caches(self):
        assert default_mapping() is default_mapping()

    @pytest.mark.parametrize(
        "event,expected",
        [
            (ev("bind", sock_domain="inet"), Promise.NET),
            (ev("bind", sock_domain="unix"), Promise.IPC),
            (ev("bind", sock_domain="other"), None),
            (ev("clone", clone_is_thread=True), Promise.THREADING),
            (ev("clone", clone_is_thread=False), Promise.PROC),
            (ev("execve"), Promise.PROC),
            (ev("lseek"), None),
            (ev("openat", open_access="read"), Promise.RPATH),
            (ev("openat", open_access="write"), Promise.WPATH),
            (ev("openat", open_access="readwrite"), Promise.WPATH),
            (ev("mkdir"), Promise.WPATH),
            (ev("setuid"), Promise.ID),
            (ev("stat"), Promise.RPATH),
            (ev("getdents64"), Promise.RPATH),
        ],
    )
    def test_known_mappings(self, event, expected):
        assert default_mapping().required_promise(event) is expected

    def test_default_allow_for_absent_syscalls(self):
        table = default_mapping()
        for name in ("futex", "mmap", "read", "write", "epoll_wait", "sys_9999"):
            assert table.required_promise(ev(name)) is None

    def test_fstat_style_entry_points_are_stdio_grade(self):
        # libc routes fstat(fd) through newfstatat/statx; they stay ungated
        # so sandboxes built on buffered i/o keep working without rpath.
        table = default_mapping()
        for name in ("fstat", "newfstatat", "statx"):
            assert table.required_promise(ev(name)) is None

    def test_socket_domain_split_everywhere(self):
        # Every socket-family syscall in the table: inet needs net and unix
        # needs ipc, with no exceptions.
        table = default_mapping()
        family = [
            s
            for s in table.mapped_syscalls()
            if table.context_key_for(s) == "sock_domain"
        ]
        assert set(family) >= {
            "socket", "bind", "connect", "listen", "accept", "socketpair",
        }
        for syscall in family:
            assert table.required_promise(ev(syscall, sock_domain="inet")) is Promise.NET
            assert table.required_promise(ev(syscall, sock_domain="unix")) is Promise.IPC

    def test_missing_context_is_classification_error(self):
        table = default_mapping()
        with pytest.raises(ClassificationError):
            table.required_promise(ev("clone"))
        with pytest.raises(ClassificationError):
            table.required_promise(ev("bind"))
        with pytest.raises(ClassificationError):
            table.required_promise(ev("openat"))

    def test_determinism(self):
        table = default_mapping()
        event = ev("connect", sock_domain="inet")
        results = {table.required_promise(event) for _ in range(100)}
        assert results == {Promise.NET}

    def test_candidate_promises(self):
        table = default_mapping()
        assert table.candidate_promises("bind") == [Promise.NET, Promise.IPC]
        assert table.candidate_promises("clone") == [Promise.PROC, Promise.THREADING]
        assert table.candidate_promises("execve") == [Promise.PROC]
        assert table.candidate_promises("lseek") == []
        assert table.candidate_promises("futex") == []

    def test_matches_hand_written_oracle(self):
        # The bundled table must agree with the independently maintained
        # reference policy on every (syscall, context) pair it defines.
        from oracle import required_promises

        table = default_mapping()
        checked = 0
        for syscall in table.mapped_syscalls():
            for event in _events_for(table, syscall):
                expected = required_promises(
                    event.syscall,
                    sock_domain=event.sock_domain,
                    clone_is_thread=event.clone_is_thread,
                    open_access=event.open_access,
                )
                got = table.required_promise(event)
                if event.open_access == "readwrite":
                    # table stores wpath; the extra rpath is engine policy
                    assert expected == {Promise.RPATH, Promise.WPATH}
                    assert got is Promise.WPATH
                elif expected:
                    assert got is min(expected)
                else:
                    assert got is None
                checked += 1
        assert checked > 60


def _events_for(table, syscall):
    """Enumerate one event per context value the syscall's rules cover."""
    from threadbox.promises import CONTEXT_DOMAINS

    key = table.context_key_for(syscall)
    if key is None:
        yield ev(syscall)
        return
    for value in CONTEXT_DOMAINS[key]:
        if key == "clone_is_thread":
            yield ev(syscall, clone_is_thread=(value == "true"))
        elif key == "sock_domain":
            yield ev(syscall, sock_domain=value)
        else:
            yield ev(syscall, open_access=value)

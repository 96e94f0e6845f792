"""Declares rpath, then execs a shell that would drop a sentinel file.

Enforcement must kill the process at the execve entry, so the sentinel
never appears and this print is never reached.
"""
import os
import ctl

ctl.sandbox_ps()
ctl.declare("rpath", name="reader")
sentinel = os.environ["SENTINEL"]
os.execv("/bin/sh", ["/bin/sh", "-c", f"touch {sentinel}"])
print("EXEC_SURVIVED", flush=True)

from __future__ import annotations

import os
import sys
import time

import pytest

from evoarchive.sandbox import (
    SandboxLimits,
    SandboxSpawnError,
    TRUNCATION_MARKER,
    sandbox_execute,
)


def test_limits_validation():
    with pytest.raises(ValueError):
        SandboxLimits(wall_clock_seconds=0)
    with pytest.raises(ValueError):
        SandboxLimits(cpu_seconds=0)
    with pytest.raises(ValueError):
        SandboxLimits(max_output_bytes=0)
    with pytest.raises(ValueError):
        SandboxLimits(network="enabled")


def test_exit_zero_success():
    outcome = sandbox_execute(["true"], SandboxLimits(wall_clock_seconds=10))
    assert outcome.exit_status == 0
    assert not outcome.limit_breached


def test_captures_stdout_and_stderr():
    outcome = sandbox_execute(
        [sys.executable, "-c", "import sys; print('out'); print('err', file=sys.stderr)"],
        SandboxLimits(wall_clock_seconds=20),
    )
    assert outcome.stdout.strip() == b"out"
    assert outcome.stderr.strip() == b"err"


def test_sleeping_command_killed_within_margin():
    limits = SandboxLimits(wall_clock_seconds=1.0)
    start = time.monotonic()
    outcome = sandbox_execute([sys.executable, "-c", "import time; time.sleep(30)"], limits)
    elapsed = time.monotonic() - start
    assert outcome.timed_out
    assert outcome.exit_status is None
    assert elapsed < limits.wall_clock_seconds + 1.0


def test_process_tree_does_not_survive_timeout():
    # the grandchild writes its pid then everyone sleeps; after the kill the
    # whole group must be gone
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        pid_file = os.path.join(tmp, "pid")
        code = (
            "import os, time, sys\n"
            "pid = os.fork()\n"
            "if pid == 0:\n"
            f"    open({pid_file!r}, 'w').write(str(os.getpid()))\n"
            "    time.sleep(60)\n"
            "else:\n"
            "    time.sleep(60)\n"
        )
        outcome = sandbox_execute(
            [sys.executable, "-c", code], SandboxLimits(wall_clock_seconds=1.5)
        )
        assert outcome.timed_out
        deadline = time.monotonic() + 5
        grandchild = None
        while time.monotonic() < deadline:
            if os.path.exists(pid_file):
                grandchild = int(open(pid_file).read())
                break
            time.sleep(0.05)
        assert grandchild is not None, "grandchild never started"
        deadline = time.monotonic() + 5
        while time.monotonic() < deadline:
            try:
                os.kill(grandchild, 0)
            except ProcessLookupError:
                return
            time.sleep(0.05)
        pytest.fail(f"grandchild {grandchild} survived the sandbox call")


def test_output_beyond_cap_truncated_with_marker():
    limits = SandboxLimits(wall_clock_seconds=30, max_output_bytes=10_000)
    outcome = sandbox_execute(
        [sys.executable, "-c", "import sys; sys.stdout.write('x' * 1000000)"], limits
    )
    assert outcome.output_truncated
    assert outcome.stdout.endswith(TRUNCATION_MARKER)
    assert len(outcome.stdout) == 10_000 + len(TRUNCATION_MARKER)
    assert outcome.exit_status == 0  # the command itself still finished


def test_spawn_failure_is_a_distinct_error():
    with pytest.raises(SandboxSpawnError):
        sandbox_execute(["/no/such/binary"], SandboxLimits())


def test_cpu_limit_kills_busy_loop():
    limits = SandboxLimits(wall_clock_seconds=30, cpu_seconds=1)
    outcome = sandbox_execute(
        [sys.executable, "-c", "while True: pass"], limits
    )
    assert not outcome.timed_out
    assert outcome.exit_status != 0  # SIGXCPU / SIGKILL


def test_stdin_reaches_command():
    outcome = sandbox_execute(
        [sys.executable, "-c", "import sys; print(sys.stdin.read().upper())"],
        SandboxLimits(wall_clock_seconds=20),
        stdin_data=b"hello",
    )
    assert outcome.stdout.strip() == b"HELLO"

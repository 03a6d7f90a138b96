from __future__ import annotations

import os

import torch

# acceptance criterion number -> (passed, detail)
ACCEPTANCE: dict[int, tuple[bool, str]] = {}

torch.set_num_threads(int(os.environ.get("WMEVAL_THREADS", "1")))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")

"""Pass/fail record for the acceptance criteria, printed at the end of the session."""

from __future__ import annotations

import time
from contextlib import contextmanager

RESULTS = {}


@contextmanager
def criterion(number, title, limit_s=None, setup_s=0.0):
    """Record whether the body passes, including a runtime limit when given.

    ``setup_s`` is time already spent in fixtures (pipeline runs) that counts
    toward the criterion's runtime.  The yielded dict collects a ``detail``
    string shown in the summary line.
    """
    info = {"detail": ""}
    t0 = time.perf_counter()
    try:
        yield info
        elapsed = setup_s + time.perf_counter() - t0
        info["elapsed"] = elapsed
        if limit_s is not None:
            assert elapsed < limit_s, f"runtime {elapsed:.0f}s exceeds the {limit_s:.0f}s limit"
    except BaseException as e:
        RESULTS[number] = (title, False, f"{type(e).__name__}: {e}".splitlines()[0][:300],
                           setup_s + time.perf_counter() - t0)
        raise
    RESULTS[number] = (title, True, info["detail"], info["elapsed"])


def summary_lines():
    lines = []
    for n in sorted(RESULTS):
        title, ok, detail, elapsed = RESULTS[n]
        lines.append(f"criterion {n} [{'PASS' if ok else 'FAIL'}] {title} ({elapsed:.0f}s): {detail}")
    return lines

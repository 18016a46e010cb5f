"""Process-wide solver invocation counters.

Every LP solve and every GPD likelihood maximization bumps a counter here,
which lets callers prove that online prediction never touches a solver.
"""
import threading
from collections import Counter

_lock = threading.Lock()
_counts = Counter()


def bump(name):
    with _lock:
        _counts[name] += 1


def snapshot():
    """Return a copy of the current counts, e.g. ``{"lp": 3, "mle": 120}``."""
    with _lock:
        return {"lp": _counts["lp"], "mle": _counts["mle"], **_counts}


def reset():
    with _lock:
        _counts.clear()

import sys
import threading

import pytest


def direct_hash(capacity):
    """Hash that places key k at slot k of a table with ``capacity`` cells."""
    shift = 64 - (capacity.bit_length() - 1)
    return lambda k: (k % capacity) << shift


@pytest.fixture
def fast_switching():
    """Force frequent GIL hand-offs so races actually interleave."""
    old = sys.getswitchinterval()
    sys.setswitchinterval(1e-6)
    yield
    sys.setswitchinterval(old)


def run_threads(n, target, *args):
    errors = []

    def wrap(i):
        try:
            target(i, *args)
        except BaseException as exc:  # surfaced below
            errors.append(exc)

    threads = [threading.Thread(target=wrap, args=(i,)) for i in range(n)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]


def sequential_oracle(source, capacity):
    """Reference grow: walk the circle from an empty cell, probe-insert.

    Returns the target ``(keys, values)`` lists.
    """
    from folkmap.table import DEL_KEY, EMPTY_KEY, MARK_BIT

    c = source.capacity
    keys, values = source.cells.keys, source.cells.values
    start = next(i for i in range(c) if keys[i] & ~MARK_BIT == EMPTY_KEY)
    out_k = [EMPTY_KEY] * capacity
    out_v = [0] * capacity
    for step in range(1, c + 1):
        i = (start + step) % c
        k = keys[i] & ~MARK_BIT
        if k in (EMPTY_KEY, DEL_KEY):
            continue
        j = (source.hash_fn(k) * capacity) >> 64
        while out_k[j] != EMPTY_KEY:
            j = (j + 1) % capacity
        out_k[j] = k
        out_v[j] = values[i]
    return out_k, out_v


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

"""Emulated atomic primitives.

CPython exposes no compare-exchange instructions, so every read-modify-write
on a cell goes through a striped lock. Plain loads of a single word are
atomic (one list subscript), which is what the lock-free readers rely on.
"""

import threading

_STRIPES = 1024
_LOCKS = [threading.Lock() for _ in range(_STRIPES)]
_MASK = _STRIPES - 1


class AtomicCounter:
    """Integer with fetch-and-add semantics."""

    __slots__ = ("_value", "_lock")

    def __init__(self, value=0):
        self._value = value
        self._lock = threading.Lock()

    def fetch_add(self, delta=1):
        with self._lock:
            old = self._value
            self._value = old + delta
            return old

    def load(self):
        return self._value

    def store(self, value):
        with self._lock:
            self._value = value


class CellArray:
    """Two parallel word arrays forming ``capacity`` (key, value) cells.

    Key word and value word are separate list slots so that each can be
    loaded atomically on its own; a pair read may be torn. Writers that
    change both words store the value first and the key last, so a reader
    that sees the new key always sees the value written with it.

    With ``initialized=False`` key slots hold ``None`` until a migration
    thread writes them.
    """

    __slots__ = ("keys", "values", "capacity")

    def __init__(self, capacity, initialized=True):
        self.capacity = capacity
        fill = 0 if initialized else None
        self.keys = [fill] * capacity
        self.values = [0] * capacity

    def cas(self, i, expect_key, expect_value, key, value):
        with _LOCKS[i & _MASK]:
            if self.keys[i] != expect_key or self.values[i] != expect_value:
                return False
            self.values[i] = value
            self.keys[i] = key
            return True

    def cas_key(self, i, expect_key, key):
        with _LOCKS[i & _MASK]:
            if self.keys[i] != expect_key:
                return False
            self.keys[i] = key
            return True

    def mark_range(self, start, stop, bit):
        """Set ``bit`` in every key word of ``[start, stop)``, cell by cell."""
        keys = self.keys
        for i in range(start, stop):
            with _LOCKS[i & _MASK]:
                k = keys[i]
                if not k & bit:
                    keys[i] = k | bit

    def store_value(self, i, key, value):
        # single-word store; only legal where marks cannot appear
        with _LOCKS[i & _MASK]:
            if self.keys[i] != key:
                return False
            self.values[i] = value
            return True

    def fetch_add_value(self, i, key, delta):
        with _LOCKS[i & _MASK]:
            if self.keys[i] != key:
                return False
            self.values[i] = (self.values[i] + delta) & 0xFFFFFFFFFFFFFFFF
            return True

    def store(self, i, key, value):
        """Plain store into a cell owned by the calling thread."""
        self.values[i] = value
        self.keys[i] = key

    def write_range(self, start, keys, values):
        """Plain bulk store into an owned, non-wrapping range."""
        stop = start + len(keys)
        self.values[start:stop] = values
        self.keys[start:stop] = keys

    def release(self):
        self.keys = None
        self.values = None


class CountingCellArray(CellArray):
    """CellArray that records how often each cell was written."""

    __slots__ = ("writes",)

    def __init__(self, capacity, initialized=True):
        super().__init__(capacity, initialized)
        self.writes = [0] * capacity

    def _count(self, i):
        with _LOCKS[i & _MASK]:
            self.writes[i] += 1

    def cas(self, i, expect_key, expect_value, key, value):
        ok = super().cas(i, expect_key, expect_value, key, value)
        if ok:
            self._count(i)
        return ok

    def cas_key(self, i, expect_key, key):
        ok = super().cas_key(i, expect_key, key)
        if ok:
            self._count(i)
        return ok

    def mark_range(self, start, stop, bit):
        keys = self.keys
        for i in range(start, stop):
            if not keys[i] & bit:
                self.cas_key(i, keys[i], keys[i] | bit)

    def store_value(self, i, key, value):
        ok = super().store_value(i, key, value)
        if ok:
            self._count(i)
        return ok

    def fetch_add_value(self, i, key, delta):
        ok = super().fetch_add_value(i, key, delta)
        if ok:
            self._count(i)
        return ok

    def store(self, i, key, value):
        super().store(i, key, value)
        self._count(i)

    def write_range(self, start, keys, values):
        super().write_range(start, keys, values)
        for i in range(start, start + len(keys)):
            self._count(i)

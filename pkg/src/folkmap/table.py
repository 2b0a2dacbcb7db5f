"""Bounded lock-free linear-probing table (the folklore table).

Keys and values are 64-bit words. Key 0 marks an empty cell, ``DEL_KEY``
marks a tombstone and bit 63 is reserved for migration marks, so user keys
must lie in ``[1, 2**63 - 2]``.
"""

import enum

from folkmap._atomic import CellArray
from folkmap.workload import hash64

EMPTY_KEY = 0
MARK_BIT = 1 << 63
DEL_KEY = MARK_BIT - 1
MAX_KEY = DEL_KEY - 1
WORD_MASK = (1 << 64) - 1
MIN_CAPACITY = 4096
MAX_PROBE = 4096
CELL_BYTES = 16


class Outcome(enum.Enum):
    INSERTED = "inserted"
    UPDATED = "updated"
    KEY_PRESENT = "key_present"
    NOT_FOUND = "not_found"
    DELETED = "deleted"
    OVERFLOW = "overflow"
    # a writer ran into a cell frozen by an in-flight migration
    MARKED = "marked"


def overwrite(key, current, arg):
    return arg


def add(key, current, arg):
    return (current + arg) & WORD_MASK


def check_key(key):
    if not 0 < key <= MAX_KEY:
        raise ValueError(f"key {key!r} outside the user key range [1, 2**63 - 2]")


def capacity_for(expected_n, min_capacity=MIN_CAPACITY):
    """Smallest power of two >= max(2 * expected_n, min_capacity)."""
    if expected_n < 0:
        raise ValueError("expected_n must be non-negative")
    need = max(2 * expected_n, min_capacity, 1)
    return 1 << (need - 1).bit_length()


def slot_of(h, capacity):
    """Scale a 64-bit hash onto ``0..capacity-1`` using its top bits."""
    return (h * capacity) >> 64


class FolkloreTable:
    """One bounded table version.

    All element operations are safe to call from any number of threads.
    Writers return ``Outcome.MARKED`` instead of touching a cell that a
    migration has frozen; plain bounded use never produces marks.
    """

    def __init__(self, capacity, hash_fn=hash64, *, version=0, cells=None,
                 plain_updates=False):
        if capacity < 1 or capacity & (capacity - 1):
            raise ValueError(f"capacity must be a power of two, got {capacity}")
        self.capacity = capacity
        self.hash_fn = hash_fn
        self.version = version
        self.cells = cells if cells is not None else CellArray(capacity)
        if self.cells.capacity != capacity:
            raise ValueError("cell array does not match capacity")
        self.probe_limit = min(capacity, MAX_PROBE)
        # single-word value stores for overwrite/add; only sound when no
        # migration marks can coexist with updates
        self.plain_updates = plain_updates
        self.released = False

    def __repr__(self):
        return f"FolkloreTable(capacity={self.capacity}, version={self.version})"

    def slot(self, key):
        return (self.hash_fn(key) * self.capacity) >> 64

    def insert(self, key, value):
        check_key(key)
        cells = self.cells
        keys = cells.keys
        mask = self.capacity - 1
        i = (self.hash_fn(key) * self.capacity) >> 64
        for _ in range(self.probe_limit):
            kr = keys[i]
            if kr == EMPTY_KEY:
                if cells.cas(i, EMPTY_KEY, 0, key, value):
                    return Outcome.INSERTED
                continue
            if kr == key:
                return Outcome.KEY_PRESENT
            if kr & MARK_BIT:
                kr ^= MARK_BIT
                if kr == key or kr == EMPTY_KEY:
                    return Outcome.MARKED
            i = (i + 1) & mask
        return Outcome.OVERFLOW

    def update(self, key, value, up=overwrite):
        check_key(key)
        cells = self.cells
        keys = cells.keys
        values = cells.values
        mask = self.capacity - 1
        i = (self.hash_fn(key) * self.capacity) >> 64
        for _ in range(self.probe_limit):
            kr = keys[i]
            if kr == key:
                if self._atomic_update(i, key, value, up, values):
                    return Outcome.UPDATED
                continue
            if kr == EMPTY_KEY:
                return Outcome.NOT_FOUND
            if kr & MARK_BIT:
                kr ^= MARK_BIT
                if kr == key or kr == EMPTY_KEY:
                    return Outcome.MARKED
            i = (i + 1) & mask
        return Outcome.NOT_FOUND

    def insert_or_update(self, key, value, up=overwrite):
        check_key(key)
        cells = self.cells
        keys = cells.keys
        values = cells.values
        mask = self.capacity - 1
        i = (self.hash_fn(key) * self.capacity) >> 64
        for _ in range(self.probe_limit):
            kr = keys[i]
            if kr == EMPTY_KEY:
                if cells.cas(i, EMPTY_KEY, 0, key, value):
                    return Outcome.INSERTED
                continue
            if kr == key:
                if self._atomic_update(i, key, value, up, values):
                    return Outcome.UPDATED
                continue
            if kr & MARK_BIT:
                kr ^= MARK_BIT
                if kr == key or kr == EMPTY_KEY:
                    return Outcome.MARKED
            i = (i + 1) & mask
        return Outcome.OVERFLOW

    def _atomic_update(self, i, key, arg, up, values):
        if self.plain_updates:
            if up is overwrite:
                return self.cells.store_value(i, key, arg)
            if up is add:
                return self.cells.fetch_add_value(i, key, arg)
        current = values[i]
        return self.cells.cas(i, key, current, key, up(key, current, arg))

    def find(self, key):
        """Value stored under ``key`` or None. Performs no writes."""
        check_key(key)
        keys = self.cells.keys
        values = self.cells.values
        mask = self.capacity - 1
        marked = key | MARK_BIT
        i = (self.hash_fn(key) * self.capacity) >> 64
        for _ in range(self.probe_limit):
            kr = keys[i]
            if kr == key or kr == marked:
                # key word first, value word second: a torn read only ever
                # yields a value that was stored under this key
                return values[i]
            if kr == EMPTY_KEY or kr == MARK_BIT:
                return None
            i = (i + 1) & mask
        return None

    def erase(self, key):
        check_key(key)
        cells = self.cells
        keys = cells.keys
        mask = self.capacity - 1
        i = (self.hash_fn(key) * self.capacity) >> 64
        for _ in range(self.probe_limit):
            kr = keys[i]
            if kr == key:
                if cells.cas_key(i, key, DEL_KEY):
                    return Outcome.DELETED
                continue
            if kr == EMPTY_KEY:
                return Outcome.NOT_FOUND
            if kr & MARK_BIT:
                kr ^= MARK_BIT
                if kr == key or kr == EMPTY_KEY:
                    return Outcome.MARKED
            i = (i + 1) & mask
        return Outcome.NOT_FOUND

    def items(self):
        """Live (key, value) pairs; only meaningful at a quiescent point."""
        keys = self.cells.keys
        values = self.cells.values
        for i in range(self.capacity):
            k = keys[i] & ~MARK_BIT
            if k != EMPTY_KEY and k != DEL_KEY:
                yield k, values[i]

    def occupied(self):
        """Number of non-empty cells, tombstones included."""
        return sum(1 for k in self.cells.keys if k & ~MARK_BIT != EMPTY_KEY)

    def release(self):
        self.released = True
        self.cells.release()


def make_table(expected_n, hash_fn=hash64, *, min_capacity=MIN_CAPACITY,
               cells_cls=CellArray):
    """Bounded table sized for ``expected_n`` insertions."""
    capacity = capacity_for(expected_n, min_capacity)
    return FolkloreTable(capacity, hash_fn, cells=cells_cls(capacity))

"""Parallel migration of one table version into another.

Growing (and same-size cleanup) moves whole clusters: a cluster a..b of the
source lands in ``gamma*a .. gamma*(b+1)`` of the target no matter what
else the source holds, so threads that own disjoint sets of clusters never
touch the same target cell and the result equals a sequential migration.

Ownership is dealt out in fixed source blocks. The owner of block [d, e)
migrates every cluster that starts inside it, which moves the effective
block borders forward to the next position following an empty cell.

Shrinking has no such structure and runs in two phases separated by a
barrier: elements that fit into the owner's disjoint target block are
placed sequentially, the rest are inserted afterwards with atomic inserts.
"""

import logging
import threading

from folkmap._atomic import AtomicCounter, CellArray
from folkmap.table import (
    DEL_KEY,
    EMPTY_KEY,
    MARK_BIT,
    FolkloreTable,
    Outcome,
)

log = logging.getLogger(__name__)

BLOCK_SIZE = 4096
_UNMARK = ~MARK_BIT
LEFTOVER_CHUNK = 256


class _NoEmptyCell(Exception):
    pass


class MigrationJob:
    """Source-to-target migration shared by any number of worker threads.

    Workers call :meth:`work`; the thread that completes the last piece of
    work finalises the job and sets :attr:`done`. ``mark=True`` selects the
    asynchronous protocol, where every source cell is frozen with the mark
    bit before it is read.
    """

    def __init__(self, source, target, *, block_size=BLOCK_SIZE, mark=False,
                 on_finish=None):
        c, c2 = source.capacity, target.capacity
        if c2 >= c:
            if c2 % c:
                raise ValueError("growth ratio must be a power of two")
            self.ratio = c2 // c
        else:
            if c % c2:
                raise ValueError("shrink ratio must be a power of two")
            self.ratio = None
            self.shrink_shift = (c // c2).bit_length() - 1
        self.source = source
        self.target = target
        self.block_size = max(1, min(block_size, c))
        self.nblocks = -(-c // self.block_size)
        self.mark = mark
        self.on_finish = on_finish
        self.gamma = c2 / c
        self.block_counter = AtomicCounter()
        self.done = threading.Event()
        self.tallies = {}
        self.phase2_inserted = 0
        self.fallback = None
        self.error = None
        self._remaining = AtomicCounter(self.nblocks)
        self._tally_lock = threading.Lock()
        self._leftovers = []
        self._chunks = []
        self._chunk_counter = AtomicCounter()
        self._remaining2 = AtomicCounter()
        self._phase2_ready = threading.Event()
        self._full_circle = False
        self._shrink_failed = False
        self._read = self._read_marking if mark else self._read_plain

    @property
    def growing(self):
        return self.ratio is not None

    @property
    def moved(self):
        with self._tally_lock:
            return sum(self.tallies.values())

    def claim_block(self):
        """Next unclaimed source block as ``(start, stop)``, or None."""
        i = self.block_counter.fetch_add(1)
        if i >= self.nblocks:
            return None
        start = i * self.block_size
        return start, min(start + self.block_size, self.source.capacity)

    def _read_plain(self, i):
        cells = self.source.cells
        return cells.keys[i], cells.values[i]

    def _read_marking(self, i):
        cells = self.source.cells
        keys = cells.keys
        while True:
            kr = keys[i]
            if kr & MARK_BIT:
                return kr ^ MARK_BIT, cells.values[i]
            if cells.cas_key(i, kr, kr | MARK_BIT):
                # writers compare the whole key word, so the value is frozen now
                return kr, cells.values[i]

    def _boundary(self, j):
        """Smallest ``i >= j`` whose predecessor cell is empty."""
        c = self.source.capacity
        read = self._read
        i = j
        while read((i - 1) % c)[0] != EMPTY_KEY:
            i += 1
            if i - j > c:
                raise _NoEmptyCell
        return i

    def _freeze(self, start, stop):
        if self.mark:
            c = self.source.capacity
            if start < 0:
                self.source.cells.mark_range(c + start, c, MARK_BIT)
                start = 0
            self.source.cells.mark_range(start, stop, MARK_BIT)

    def migrate_block_grow(self, start, stop):
        """Migrate every cluster whose first cell lies in ``[start, stop)``.

        Also writes every other target cell of the owned region exactly
        once, as empty. Returns the number of elements moved.
        """
        c = self.source.capacity
        self._freeze(start - 1, stop)
        lo = self._boundary(start)
        hi = self._boundary(stop)
        if lo >= hi:
            return 0
        g = self.ratio
        target = self.target
        c2 = target.capacity
        hash_fn = target.hash_fn
        keys = self.source.cells.keys
        values = self.source.cells.values
        base = g * lo
        n = g * (hi - lo)
        lkeys = [EMPTY_KEY] * n
        lvals = [0] * n
        moved = 0
        # every cell of [lo, hi) is frozen by now
        for j in range(lo, hi):
            if j >= c:
                j -= c
            k = keys[j] & _UNMARK
            if k == EMPTY_KEY or k == DEL_KEY:
                continue
            off = (((hash_fn(k) * c2) >> 64) - base) % c2
            if off >= n:
                raise RuntimeError(f"key {k} hashes outside its cluster's target range")
            while lkeys[off] != EMPTY_KEY:
                off += 1
            lkeys[off] = k
            lvals[off] = values[j]
            moved += 1
        first = base % c2
        if first + n <= c2:
            target.cells.write_range(first, lkeys, lvals)
        else:
            split = c2 - first
            target.cells.write_range(first, lkeys[:split], lvals[:split])
            target.cells.write_range(0, lkeys[split:], lvals[split:])
        return moved

    def target_block(self, start, stop):
        s = self.shrink_shift
        return -(-start >> s), -(-stop >> s)

    def migrate_block_shrink(self, start, stop):
        """Phase one of a shrink for source block ``[start, stop)``.

        Returns ``(moved, leftovers)``; leftovers did not fit into the
        block's own target range and wait for phase two.
        """
        tlo, thi = self.target_block(start, stop)
        n = thi - tlo
        c2 = self.target.capacity
        hash_fn = self.target.hash_fn
        self._freeze(start, stop)
        keys = self.source.cells.keys
        values = self.source.cells.values
        lkeys = [EMPTY_KEY] * n
        lvals = [0] * n
        leftovers = []
        moved = 0
        for i in range(start, stop):
            k = keys[i] & _UNMARK
            if k == EMPTY_KEY or k == DEL_KEY:
                continue
            v = values[i]
            off = ((hash_fn(k) * c2) >> 64) - tlo
            if 0 <= off < n:
                while off < n and lkeys[off] != EMPTY_KEY:
                    off += 1
                if off < n:
                    lkeys[off] = k
                    lvals[off] = v
                    moved += 1
                    continue
            leftovers.append((k, v))
        if n:
            self.target.cells.write_range(tlo, lkeys, lvals)
        return moved, leftovers

    def _tally(self, moved):
        tid = threading.get_ident()
        with self._tally_lock:
            self.tallies[tid] = self.tallies.get(tid, 0) + moved

    def work(self):
        """Help until no work is left to claim. Does not wait for others."""
        try:
            self._work()
        except BaseException as exc:
            if self.error is None:
                self.error = exc
            self.done.set()
            raise

    def _work(self):
        while True:
            block = self.claim_block()
            if block is None:
                break
            if self.growing:
                try:
                    moved = self.migrate_block_grow(*block)
                except _NoEmptyCell:
                    self._full_circle = True
                    moved = 0
            else:
                moved, leftovers = self.migrate_block_shrink(*block)
                if leftovers:
                    with self._tally_lock:
                        self._leftovers.extend(leftovers)
            self._tally(moved)
            if self._remaining.fetch_add(-1) == 1:
                self._end_phase1()
        if self.growing:
            return
        self._phase2_ready.wait()
        while True:
            i = self._chunk_counter.fetch_add(1)
            if i >= len(self._chunks):
                return
            self._insert_leftovers(self._chunks[i])
            if self._remaining2.fetch_add(-1) == 1:
                self._finish()

    def _end_phase1(self):
        if self.growing:
            self._finish()
            return
        left = self._leftovers
        self._chunks = [left[i:i + LEFTOVER_CHUNK]
                        for i in range(0, len(left), LEFTOVER_CHUNK)]
        self._remaining2.store(len(self._chunks))
        self._phase2_ready.set()
        if not self._chunks:
            self._finish()

    def _insert_leftovers(self, chunk):
        moved = 0
        for k, v in chunk:
            outcome = self.target.insert(k, v)
            if outcome is Outcome.INSERTED:
                moved += 1
            elif outcome is Outcome.OVERFLOW:
                self._shrink_failed = True
                break
        with self._tally_lock:
            self.phase2_inserted += moved
        self._tally(moved)

    def _finish(self):
        try:
            self._complete()
        except BaseException as exc:
            # waiters must not hang on a job that can no longer finish
            self.error = exc
            raise
        finally:
            self.done.set()

    def _complete(self):
        if self._full_circle:
            log.warning("source table has no empty cell; migrating sequentially")
            self.fallback = "full_circle"
            self._sequential_fallback()
        elif self._shrink_failed:
            log.warning("shrink to %d cells overflowed; retrying at %d",
                        self.target.capacity, 2 * self.target.capacity)
            self.fallback = "shrink_retry"
            self._retry_larger()
        if self.on_finish is not None:
            self.on_finish(self)

    def _fresh_target(self, capacity):
        t = self.target
        return FolkloreTable(capacity, t.hash_fn, version=t.version,
                             plain_updates=t.plain_updates)

    def _sequential_fallback(self):
        target = self._fresh_target(self.target.capacity)
        c = self.source.capacity
        moved = 0
        for i in range(c):
            k, v = self._read(i)
            if k != EMPTY_KEY and k != DEL_KEY:
                if target.insert(k, v) is not Outcome.INSERTED:
                    raise RuntimeError("fallback migration overflowed the target")
                moved += 1
        self.target = target
        with self._tally_lock:
            self.tallies = {threading.get_ident(): moved}

    def _retry_larger(self):
        retry = MigrationJob(self.source, self._fresh_target(2 * self.target.capacity),
                             block_size=self.block_size, mark=self.mark)
        retry.work()
        retry.done.wait()
        if retry.error is not None:
            raise retry.error
        self.target = retry.target
        with self._tally_lock:
            self.tallies = dict(retry.tallies)

    def finalize(self, counters=None):
        """Counter state for the new table: ``(I, D) = (moved, 0)``.

        Resets ``counters`` to that state when given.
        """
        moved = self.moved
        if counters is not None:
            counters.reset(self.target.version, moved)
        return moved, 0


def new_target(source, capacity, *, version=None, cells_cls=CellArray,
               plain_updates=False):
    """Uninitialised target table; migration writes every cell."""
    return FolkloreTable(capacity, source.hash_fn,
                         version=source.version + 1 if version is None else version,
                         cells=cells_cls(capacity, initialized=False),
                         plain_updates=plain_updates)


def _help(job):
    try:
        job.work()
    except Exception:
        pass  # kept in job.error and re-raised by the caller


def migrate(source, capacity, *, threads=1, block_size=BLOCK_SIZE, mark=False,
            cells_cls=CellArray):
    """Run a complete migration with ``threads`` workers; returns the job."""
    job = MigrationJob(source, new_target(source, capacity, cells_cls=cells_cls),
                       block_size=block_size, mark=mark)
    if threads <= 1:
        job.work()
    else:
        workers = [threading.Thread(target=_help, args=(job,)) for _ in range(threads)]
        for w in workers:
            w.start()
        for w in workers:
            w.join()
    job.done.wait()
    if job.error is not None:
        raise RuntimeError("migration failed") from job.error
    return job

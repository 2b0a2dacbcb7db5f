"""Growing, deletion-capable table built from folklore table versions.

Two independent choices give four variants:

* who migrates: application threads that run into the migration
  (``strategy="user"``) or a dedicated pool (``strategy="pool"``);
* how copied cells are protected: a mark bit set on every source cell before
  it is copied (``protocol="async"``), or busy flags that keep table
  operations and migrations disjoint (``protocol="sync"``).
"""

import itertools
import logging
import threading
import time
from dataclasses import dataclass
from typing import NamedTuple, Optional

from folkmap.migration import BLOCK_SIZE, MigrationJob, new_target
from folkmap.size import GlobalCounters, Handle
from folkmap.table import (
    MIN_CAPACITY,
    FolkloreTable,
    Outcome,
    add,
    capacity_for,
    check_key,
    overwrite,
)
from folkmap.workload import hash64

log = logging.getLogger(__name__)

VARIANTS = {
    "uaGrow": ("user", "async"),
    "usGrow": ("user", "sync"),
    "paGrow": ("pool", "async"),
    "psGrow": ("pool", "sync"),
}


@dataclass
class GrowConfig:
    alpha: float = 0.6
    gamma: int = 2
    strategy: str = "user"
    protocol: str = "async"
    threads: Optional[int] = None
    block_size: int = BLOCK_SIZE
    min_capacity: int = MIN_CAPACITY
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie strictly between 0 and 1")
        if self.gamma < 1 or self.gamma & (self.gamma - 1):
            raise ValueError("gamma must be a power of two >= 1")
        if self.strategy not in ("user", "pool"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.protocol not in ("async", "sync"):
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if self.min_capacity < 1 or self.min_capacity & (self.min_capacity - 1):
            raise ValueError("min_capacity must be a power of two")

    @classmethod
    def for_variant(cls, name, **kwargs):
        try:
            strategy, protocol = VARIANTS[name]
        except KeyError:
            raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None
        return cls(strategy=strategy, protocol=protocol, **kwargs)

    @property
    def variant(self):
        return self.strategy[0] + self.protocol[0] + "Grow"


class Decision(NamedTuple):
    kind: str  # "grow", "cleanup" or "shrink"
    capacity: int


def next_capacity(inserted, deleted, capacity, config):
    live = max(inserted - deleted, 0)
    new = capacity_for(live, config.min_capacity)
    if new > capacity:
        new = max(new, capacity * config.gamma)
    return new


def _decide(inserted, deleted, capacity, config):
    new = next_capacity(inserted, deleted, capacity, config)
    if new > capacity:
        return Decision("grow", new)
    if new == capacity:
        return Decision("cleanup", new)
    return Decision("shrink", new)


def check_trigger(inserted, deleted, capacity, config):
    """Migration decision once ``inserted >= alpha * capacity``, else None.

    ``inserted`` counts every cell ever filled in this version, tombstones
    included; the new size only depends on the live count.
    """
    if inserted < config.alpha * capacity:
        return None
    return _decide(inserted, deleted, capacity, config)


def _check(job):
    if job.error is not None:
        raise RuntimeError("table migration failed") from job.error


class _MigrationPool:
    """Parked worker threads that wake up for each submitted job."""

    def __init__(self, size):
        self._cond = threading.Condition()
        self._job = None
        self._generation = 0
        self._stop = False
        self._threads = [
            threading.Thread(target=self._run, name=f"migration-{i}", daemon=True)
            for i in range(size)
        ]
        for t in self._threads:
            t.start()

    def submit(self, job):
        with self._cond:
            self._job = job
            self._generation += 1
            self._cond.notify_all()

    def _run(self):
        seen = 0
        while True:
            with self._cond:
                while self._generation == seen and not self._stop:
                    self._cond.wait()
                if self._stop:
                    return
                seen = self._generation
                job = self._job
            try:
                job.work()
            except Exception:
                # the job keeps the error; waiting threads re-raise it
                log.exception("migration worker failed")

    def close(self):
        with self._cond:
            self._stop = True
            self._cond.notify_all()
        for t in self._threads:
            t.join()


class TableHandle(Handle):
    """Per-thread access object for a :class:`GrowTable`."""

    def __init__(self, table, seed):
        super().__init__(table.counters, seed)
        self.table = table
        self.busy = False
        self.version = None
        table._refresh(self)

    def insert(self, key, value):
        return self.table._insert(self, key, value)

    def update(self, key, value, up=overwrite):
        return self.table._update(self, key, value, up)

    def insert_or_update(self, key, value, up=overwrite):
        return self.table._insert_or_update(self, key, value, up)

    def increment(self, key, by=1):
        return self.table._insert_or_update(self, key, by, add)

    def find(self, key):
        return self.table._find(self, key)

    def erase(self, key):
        return self.table._erase(self, key)

    def close(self):
        if not self.closed:
            super().close()
            self.table._drop(self)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class GrowTable:
    """Concurrent hash table that grows, shrinks and cleans up tombstones.

    Every thread works through its own handle::

        table = GrowTable(config=GrowConfig.for_variant("uaGrow"))
        with table.handle() as h:
            h.insert(5, 10)
            h.find(5)

    Keys must lie in ``[1, 2**63 - 2]``; values are 64-bit words.
    """

    def __init__(self, expected_n=0, config=None, hash_fn=hash64):
        self.config = config or GrowConfig()
        self.hash_fn = hash_fn
        self._sync = self.config.protocol == "sync"
        self._use_pool = self.config.strategy == "pool"
        self.counters = GlobalCounters(self.config.threads, on_update=self._on_counter_update)
        self._current = FolkloreTable(
            capacity_for(expected_n, self.config.min_capacity), hash_fn,
            plain_updates=self._sync)
        self._publish_lock = threading.Lock()
        self._trigger_level = self.config.alpha * self._current.capacity
        self._refs = {self._current.version: 0}
        self._job = None
        self._growing = False
        self._handle_ids = itertools.count()
        self.migrations = []
        self.released = []
        self._pool = _MigrationPool(self.counters.threads) if self._use_pool else None

    @classmethod
    def variant(cls, name, expected_n=0, hash_fn=hash64, **config):
        return cls(expected_n, GrowConfig.for_variant(name, **config), hash_fn)

    def __repr__(self):
        return (f"GrowTable({self.config.variant}, capacity={self.capacity}, "
                f"version={self.version})")

    @property
    def capacity(self):
        return self._current.capacity

    @property
    def version(self):
        return self._current.version

    @property
    def current(self):
        return self._current

    def handle(self):
        return TableHandle(self, self.config.seed * 1_000_003 + next(self._handle_ids))

    def close(self):
        if self._pool is not None:
            self._pool.close()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- version lifetime ------------------------------------------------

    def _refresh(self, h):
        with self._publish_lock:
            old, new = h.version, self._current
            h.version = new
            if old is new:
                return new
            if not self._sync:
                self._refs[new.version] += 1
                if old is not None:
                    self._unref(old)
            return new

    def _drop(self, h):
        with self._publish_lock:
            if h.version is not None and not self._sync:
                self._unref(h.version)
            h.version = None

    def _unref(self, t):
        # caller holds the publication lock
        self._refs[t.version] -= 1
        if self._refs[t.version] == 0 and t is not self._current:
            self._release(t)

    def _release(self, t):
        del self._refs[t.version]
        t.release()
        self.released.append(t.version)

    def settle(self):
        """Block until no migration is in flight."""
        while True:
            job = self._job
            if job is not None:
                job.done.wait()
                _check(job)
            elif not self._growing:
                return
            else:
                time.sleep(0)

    def live_versions(self):
        with self._publish_lock:
            return sorted(self._refs)

    # -- migration -------------------------------------------------------

    def _on_counter_update(self, epoch, ins, dels):
        if ins < self._trigger_level:
            return
        t = self._current
        if t.version != epoch or self._job is not None or self._growing:
            return
        decision = check_trigger(ins, dels, t.capacity, self.config)
        if decision is not None:
            self._migrate(t, decision)

    def _overflow(self, t):
        _, ins, dels = self.counters.snapshot()
        self._migrate(t, _decide(ins, dels, t.capacity, self.config))

    def _migrate(self, t, decision):
        if self._sync:
            self._migrate_sync(t, decision)
        else:
            self._migrate_async(t, decision)

    def _new_job(self, t, decision):
        log.debug("%s: %s %d -> %d", self.config.variant, decision.kind,
                  t.capacity, decision.capacity)
        target = new_target(t, decision.capacity, plain_updates=self._sync)
        return MigrationJob(t, target, block_size=self.config.block_size,
                            mark=not self._sync, on_finish=self._publish)

    def _migrate_async(self, t, decision):
        with self._publish_lock:
            if self._current is not t or self._job is not None:
                return
            job = self._job = self._new_job(t, decision)
        if self._use_pool:
            self._pool.submit(job)
        else:
            job.work()

    def _migrate_sync(self, t, decision):
        with self._publish_lock:
            if self._current is not t or self._growing:
                return
            self._growing = True
        # every operation that started before the flag went up must finish
        for h in self.counters.handles():
            while h.busy:
                time.sleep(0)
        with self._publish_lock:
            job = self._job = self._new_job(t, decision)
        if self._use_pool:
            self._pool.submit(job)
        else:
            job.work()
            job.done.wait()
            _check(job)

    def _publish(self, job):
        with self._publish_lock:
            old = self._current
            new = job.target
            self._current = new
            self._trigger_level = self.config.alpha * new.capacity
            self._refs.setdefault(new.version, 0)
            self.counters.reset(new.version, job.moved)
            self.migrations.append((old.capacity, new.capacity, job.moved))
            self._job = None
            if self._sync:
                # nobody can be inside the old version here
                self._release(old)
                self._growing = False
            elif self._refs[old.version] == 0:
                self._release(old)

    def _wait_async(self, t):
        job = self._job
        if job is None or job.source is not t:
            return
        if not self._use_pool:
            job.work()
        job.done.wait()
        _check(job)

    def _wait_sync(self):
        while self._growing:
            job = self._job
            if job is None:
                time.sleep(0)
                continue
            if not self._use_pool:
                job.work()
            job.done.wait()
            _check(job)

    # -- element operations ----------------------------------------------

    def _modify(self, h, fn, *args):
        if self._sync:
            while True:
                h.busy = True
                if self._growing:
                    h.busy = False
                    self._wait_sync()
                    continue
                t = h.version
                if t is not self._current:
                    t = self._refresh(h)
                res = fn(t, *args)
                h.busy = False
                if res is Outcome.OVERFLOW:
                    self._overflow(t)
                    continue
                return res, t.version
        while True:
            t = h.version
            if t is not self._current:
                t = self._refresh(h)
            res = fn(t, *args)
            if res is Outcome.MARKED:
                self._wait_async(t)
                continue
            if res is Outcome.OVERFLOW:
                self._overflow(t)
                self._wait_async(t)
                continue
            return res, t.version

    def _insert(self, h, key, value):
        res, version = self._modify(h, FolkloreTable.insert, key, value)
        if res is Outcome.INSERTED:
            h.note_insertion(version)
            return True
        return False

    def _update(self, h, key, value, up):
        res, _ = self._modify(h, FolkloreTable.update, key, value, up)
        return res is Outcome.UPDATED

    def _insert_or_update(self, h, key, value, up):
        res, version = self._modify(h, FolkloreTable.insert_or_update, key, value, up)
        if res is Outcome.INSERTED:
            h.note_insertion(version)
            return True
        return False

    def _erase(self, h, key):
        res, version = self._modify(h, FolkloreTable.erase, key)
        if res is Outcome.DELETED:
            h.note_deletion(version)
            return True
        return False

    def _find(self, h, key):
        if not self._sync:
            t = h.version
            if t is not self._current:
                t = self._refresh(h)
            return t.find(key)
        while True:
            h.busy = True
            if self._growing:
                h.busy = False
                self._wait_sync()
                continue
            t = h.version
            if t is not self._current:
                t = self._refresh(h)
            try:
                return t.find(key)
            finally:
                h.busy = False

    # -- whole-table queries -----------------------------------------------

    def estimate_size(self):
        return self.counters.estimate_size()

    def exact_size(self):
        """Exact element count; the caller guarantees quiescence."""
        return self.counters.exact_size_quiescent()

    def items(self):
        """Live elements of the current version; quiescent use only."""
        return list(self._current.items())

    def to_dict(self):
        return dict(self._current.items())

    @classmethod
    def build_from(cls, pairs, config=None, hash_fn=hash64, threads=None):
        """Bulk-construct a table; the last occurrence of a key wins."""
        config = config or GrowConfig()
        last = {}
        for k, d in pairs:
            check_key(k)
            last[k] = d
        table = cls(len(last), config, hash_fn)
        t = table._current
        c = t.capacity
        ordered = sorted(last.items(), key=lambda kv: (hash_fn(kv[0]) * c) >> 64)
        workers = max(1, threads or table.counters.threads)
        bounds = [len(ordered) * i // workers for i in range(workers + 1)]

        def fill(lo, hi):
            for k, d in ordered[lo:hi]:
                if t.insert(k, d) is not Outcome.INSERTED:
                    raise RuntimeError("bulk build overflowed its table")

        if workers == 1:
            fill(0, len(ordered))
        else:
            errors = []

            def run(lo, hi):
                try:
                    fill(lo, hi)
                except Exception as exc:  # re-raised in the caller
                    errors.append(exc)

            threads_ = [threading.Thread(target=run, args=(bounds[i], bounds[i + 1]))
                        for i in range(workers)]
            for th in threads_:
                th.start()
            for th in threads_:
                th.join()
            if errors:
                raise errors[0]
        table.counters.reset(t.version, len(ordered))
        return table

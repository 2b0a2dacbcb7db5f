"""Approximate element counting with thread-local handles.

Each handle counts its own successful insertions and deletions and only
publishes them to the shared counters every 1..p operations (redrawn at
random after every flush), so the shared counters see little contention and
lag the truth by less than p*(p-1) in each direction.
"""

import os
import random
import threading


class GlobalCounters:
    """Shared insertion (I) and deletion (D) counters plus handle registry.

    ``epoch`` identifies the table version the counts refer to; flushes
    tagged with an older epoch are discarded because a migration has
    already recounted those elements.
    """

    def __init__(self, threads=None, flush_range=None, on_update=None):
        self.threads = threads or os.cpu_count() or 1
        self.flush_range = flush_range or (1, self.threads)
        self.on_update = on_update
        self.epoch = 0
        self.inserted = 0
        self.deleted = 0
        self._lock = threading.Lock()
        self._handles = []
        self._registry_lock = threading.Lock()

    @property
    def slack(self):
        """Largest possible unflushed count summed over ``threads`` handles."""
        return self.threads * (self.flush_range[1] - 1)

    def register(self, handle):
        with self._registry_lock:
            self._handles.append(handle)

    def handles(self):
        with self._registry_lock:
            return list(self._handles)

    def add(self, epoch, inserted, deleted):
        with self._lock:
            if epoch != self.epoch:
                return False
            self.inserted += inserted
            self.deleted += deleted
            ins, dels = self.inserted, self.deleted
        if self.on_update is not None:
            self.on_update(epoch, ins, dels)
        return True

    def reset(self, epoch, inserted):
        """Restart counting for a freshly migrated table."""
        with self._lock:
            self.epoch = epoch
            self.inserted = inserted
            self.deleted = 0

    def snapshot(self):
        with self._lock:
            return self.epoch, self.inserted, self.deleted

    def estimate_size(self):
        """(lower, upper) bounds on the element count."""
        _, ins, dels = self.snapshot()
        est = ins - dels
        return max(est - self.slack, 0), est + self.slack

    def exact_size_quiescent(self):
        """Exact element count. Only valid while nobody modifies the table."""
        with self._lock:
            epoch, total = self.epoch, self.inserted - self.deleted
        for h in self.handles():
            if h.counter_epoch == epoch:
                total += h.local_ins - h.local_del
        return total


class Handle:
    """Per-thread counting state. Never share one between running threads."""

    def __init__(self, counters, seed=None):
        self.counters = counters
        self.owner = threading.get_ident()
        self._rng = random.Random(seed)
        self.local_ins = 0
        self.local_del = 0
        self.counter_epoch = counters.epoch
        self.flush_threshold = self._draw()
        self.closed = False
        counters.register(self)

    def _draw(self):
        lo, hi = self.counters.flush_range
        return lo + int(self._rng.random() * (hi - lo + 1))

    def _sync_epoch(self, epoch):
        if epoch == self.counter_epoch:
            return True
        if epoch < self.counter_epoch:
            return False
        self.local_ins = self.local_del = 0
        self.counter_epoch = epoch
        return True

    def note_insertion(self, epoch=None):
        if epoch is None:
            epoch = self.counters.epoch
        if epoch != self.counter_epoch and not self._sync_epoch(epoch):
            return
        self.local_ins += 1
        if self.local_ins >= self.flush_threshold:
            self.flush()

    def note_deletion(self, epoch=None):
        if epoch is None:
            epoch = self.counters.epoch
        if epoch != self.counter_epoch and not self._sync_epoch(epoch):
            return
        self.local_del += 1
        if self.local_del >= self.flush_threshold:
            self.flush()

    def flush(self):
        ins, dels = self.local_ins, self.local_del
        self.local_ins = self.local_del = 0
        self.flush_threshold = self._draw()
        if ins or dels:
            self.counters.add(self.counter_epoch, ins, dels)

    def close(self):
        if not self.closed:
            self.flush()
            self.closed = True


def register_handle(counters, seed=None):
    return Handle(counters, seed)

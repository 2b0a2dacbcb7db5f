"""Benchmark scenarios with built-in correctness oracles."""

import csv
import json
import logging
import os
import statistics
import threading
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from folkmap._atomic import AtomicCounter
from folkmap.grow import VARIANTS, GrowConfig, GrowTable
from folkmap.table import (
    CELL_BYTES,
    DEL_KEY,
    EMPTY_KEY,
    MIN_CAPACITY,
    Outcome,
    add,
    capacity_for,
    check_key,
    make_table,
    overwrite,
)
from folkmap.workload import RNG_NAME, ZipfSpec, gen_uniform, gen_zipf, hash64

log = logging.getLogger(__name__)

WORK_BLOCK = 4096
SCENARIOS = (
    "insert_prealloc", "insert_grow", "find_succ", "find_unsucc",
    "contention_update", "contention_find", "aggregation", "deletion_window",
    "mixed",
)
TABLE_VARIANTS = ("folklore", *VARIANTS, "sequential")
CSV_FIELDS = (
    "scenario", "variant", "threads", "ops", "param_s", "param_wp", "seed", "rep",
    "wall_ms", "mops", "capacity_final", "mem_bytes", "oracle_pass",
)


class CapacityExhausted(RuntimeError):
    pass


class SequentialTable:
    """Single-threaded linear probing with the same cell layout, no atomics.

    Grows, cleans up and shrinks with the same trigger rule as the
    concurrent tables, migrating by plain re-insertion.
    """

    def __init__(self, expected_n=0, alpha=0.6, hash_fn=hash64,
                 min_capacity=MIN_CAPACITY, growing=True):
        self.alpha = alpha
        self.hash_fn = hash_fn
        self.min_capacity = min_capacity
        self.growing = growing
        self._alloc(capacity_for(expected_n, min_capacity))
        self.live = 0

    def _alloc(self, capacity):
        self.capacity = capacity
        self.keys = [EMPTY_KEY] * capacity
        self.values = [0] * capacity
        self.used = 0

    def _slot(self, key):
        return (self.hash_fn(key) * self.capacity) >> 64

    def _locate(self, key):
        keys = self.keys
        mask = self.capacity - 1
        i = self._slot(key)
        while True:
            k = keys[i]
            if k == key or k == EMPTY_KEY:
                return i
            i = (i + 1) & mask

    def _place(self, key, value):
        if self.used + 1 > self.alpha * self.capacity:
            if not self.growing:
                if self.used + 1 >= self.capacity:
                    raise CapacityExhausted(f"table of {self.capacity} cells is full")
            else:
                self._migrate()
        i = self._locate(key)
        self.keys[i] = key
        self.values[i] = value
        self.used += 1
        self.live += 1

    def _migrate(self):
        keys, values = self.keys, self.values
        new = capacity_for(self.live + 1, self.min_capacity)
        if new > self.capacity:
            new = max(new, 2 * self.capacity)
        # start after an empty cell so wrapped clusters stay in order
        start = keys.index(EMPTY_KEY) if EMPTY_KEY in keys else 0
        c = len(keys)
        self._alloc(new)
        for j in range(start, start + c):
            k = keys[j % c]
            if k != EMPTY_KEY and k != DEL_KEY:
                i = self._locate(k)
                self.keys[i] = k
                self.values[i] = values[j % c]
                self.used += 1

    def insert(self, key, value):
        check_key(key)
        i = self._locate(key)
        if self.keys[i] == key:
            return False
        self._place(key, value)
        return True

    def update(self, key, value, up=overwrite):
        check_key(key)
        i = self._locate(key)
        if self.keys[i] != key:
            return False
        self.values[i] = up(key, self.values[i], value)
        return True

    def insert_or_update(self, key, value, up=overwrite):
        check_key(key)
        i = self._locate(key)
        if self.keys[i] == key:
            self.values[i] = up(key, self.values[i], value)
            return False
        self._place(key, value)
        return True

    def increment(self, key, by=1):
        return self.insert_or_update(key, by, add)

    def find(self, key):
        check_key(key)
        i = self._locate(key)
        return self.values[i] if self.keys[i] == key else None

    def erase(self, key):
        check_key(key)
        i = self._locate(key)
        if self.keys[i] != key:
            return False
        self.keys[i] = DEL_KEY
        self.live -= 1
        return True

    def items(self):
        for k, v in zip(self.keys, self.values):
            if k != EMPTY_KEY and k != DEL_KEY:
                yield k, v

    def close(self):
        pass


class _FolkloreSession:
    """Bool-returning view of a bounded table, shared by all threads."""

    def __init__(self, table):
        self.t = table

    def insert(self, key, value):
        res = self.t.insert(key, value)
        if res is Outcome.OVERFLOW:
            raise CapacityExhausted(f"bounded table of {self.t.capacity} cells overflowed")
        return res is Outcome.INSERTED

    def update(self, key, value, up=overwrite):
        return self.t.update(key, value, up) is Outcome.UPDATED

    def insert_or_update(self, key, value, up=overwrite):
        res = self.t.insert_or_update(key, value, up)
        if res is Outcome.OVERFLOW:
            raise CapacityExhausted(f"bounded table of {self.t.capacity} cells overflowed")
        return res is Outcome.INSERTED

    def increment(self, key, by=1):
        return self.insert_or_update(key, by, add)

    def find(self, key):
        return self.t.find(key)

    def erase(self, key):
        return self.t.erase(key) is Outcome.DELETED

    def close(self):
        pass


class _Map:
    """One benchmark table plus per-thread sessions."""

    def __init__(self, variant, expected_n, threads, seed):
        self.variant = variant
        if variant == "sequential":
            if threads != 1:
                raise ValueError("the sequential baseline only runs with --threads 1")
            self.table = SequentialTable(expected_n)
        elif variant == "folklore":
            self.table = make_table(expected_n)
        elif variant in VARIANTS:
            self.table = GrowTable(expected_n, GrowConfig.for_variant(variant, threads=threads, seed=seed))
        else:
            raise ValueError(f"unknown variant {variant!r}")

    def session(self):
        if self.variant == "sequential":
            return self.table
        if self.variant == "folklore":
            return _FolkloreSession(self.table)
        return self.table.handle()

    def _settle(self):
        # pool variants may still be migrating after the last operation returned
        if isinstance(self.table, GrowTable):
            self.table.settle()

    @property
    def capacity(self):
        self._settle()
        return self.table.capacity

    def contents(self):
        self._settle()
        return dict(self.table.items())

    def size(self):
        if isinstance(self.table, GrowTable):
            self.table.settle()
            return self.table.exact_size()
        return len(self.contents())

    def close(self):
        if isinstance(self.table, GrowTable):
            self.table.close()


@dataclass
class Scenario:
    kind: str
    variant: str = "uaGrow"
    threads: int = 1
    ops: int = 1_000_000
    prefill: int = None
    capacity: int = None
    zipf_s: float = 1.0
    zipf_n: int = 1_000_000
    wp: float = 0.1
    window: int = 10_000
    seed: int = 1
    reps: int = 5
    verify: bool = True
    pin: str = "auto"

    def __post_init__(self):
        if self.kind not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.kind!r}")
        if self.variant not in TABLE_VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.ops <= 0:
            raise ValueError("ops must be positive")
        if not 0 <= self.wp <= 1:
            raise ValueError("wp must lie in [0, 1]")
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        if self.threads < 1:
            raise ValueError("threads must be at least 1")
        if self.variant == "sequential" and self.threads != 1:
            raise ValueError("the sequential baseline only runs with --threads 1")


@dataclass
class RunResult:
    scenario: Scenario
    wall_s: list = field(default_factory=list)
    capacity_final: int = 0
    oracles: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)
    pinned: str = "off"

    @property
    def mean_wall_s(self):
        return statistics.fmean(self.wall_s)

    @property
    def mops(self):
        wall = self.mean_wall_s
        return self.scenario.ops / wall / 1e6 if wall > 0 else 0.0

    @property
    def mem_bytes(self):
        return self.capacity_final * CELL_BYTES

    @property
    def passed(self):
        return all(self.oracles.values())

    def failures(self):
        return sorted(name for name, ok in self.oracles.items() if not ok)


def _pin(index, mode):
    if mode == "off" or not hasattr(os, "sched_setaffinity"):
        return "off" if mode == "off" else "unavailable"
    try:
        cpus = sorted(os.sched_getaffinity(0))
        os.sched_setaffinity(0, {cpus[index % len(cpus)]})
        return "pinned"
    except OSError:
        return "unavailable"


class Aborted(RuntimeError):
    pass


def run_parallel(total, body, sessions, pin="off", abort=None):
    """Deal ``range(total)`` out in blocks of 4096 to one thread per session.

    ``body(session, lo, hi)`` returns a Counter of statistics. Returns
    ``(seconds, merged counter, pin status)``; the clock covers only the
    operation phase. The first worker exception sets ``abort`` and is
    re-raised once every worker has stopped.
    """
    abort = abort or threading.Event()
    counter = AtomicCounter()
    start = threading.Barrier(len(sessions) + 1)
    stats = Counter()
    errors = []
    status = []
    lock = threading.Lock()

    def worker(index, sess):
        local = Counter()
        pin_state = _pin(index, pin)
        start.wait()
        try:
            while not abort.is_set():
                lo = counter.fetch_add(WORK_BLOCK)
                if lo >= total:
                    break
                local.update(body(sess, lo, min(lo + WORK_BLOCK, total)))
        except Exception as exc:
            errors.append(exc)
            abort.set()
        with lock:
            stats.update(local)
            status.append(pin_state)

    threads = [threading.Thread(target=worker, args=(i, s)) for i, s in enumerate(sessions)]
    for t in threads:
        t.start()
    start.wait()
    t0 = time.perf_counter()
    for t in threads:
        t.join()
    elapsed = time.perf_counter() - t0
    real = [e for e in errors if not isinstance(e, Aborted)]
    if real or errors:
        raise (real or errors)[0]
    return elapsed, stats, status[0] if status else "off"


def _prefill(m, keys, values=None):
    sess = m.session()
    for i, k in enumerate(keys):
        sess.insert(k, i + 1 if values is None else values[i])
    sess.close()


def _expected_n(sc, default):
    return sc.capacity if sc.capacity is not None else default


def _keys_zipf(sc, n, seed_offset=0):
    return gen_zipf(n, ZipfSpec(sc.zipf_n, sc.zipf_s, sc.seed + seed_offset)).tolist()


class _Prepared:
    """Pregenerated inputs for one scenario; identical across repetitions."""

    def __init__(self, sc):
        self.sc = sc
        self.abort = threading.Event()
        kind = sc.kind
        p = sc.threads
        if kind in ("insert_prealloc", "insert_grow"):
            self.keys = gen_uniform(sc.ops, sc.seed, distinct=True).tolist()
        elif kind in ("find_succ", "find_unsucc"):
            both = gen_uniform(2 * sc.ops, sc.seed, distinct=True).tolist()
            self.present, self.fresh = both[:sc.ops], both[sc.ops:]
        elif kind in ("contention_update", "contention_find"):
            self.keys = _keys_zipf(sc, sc.ops)
        elif kind == "aggregation":
            self.keys = _keys_zipf(sc, sc.ops)
            self.histogram = Counter(self.keys)
        elif kind == "deletion_window":
            self.keys = gen_uniform(sc.window + sc.ops, sc.seed, distinct=True).tolist()
        elif kind == "mixed":
            self.pre = sc.prefill if sc.prefill is not None else 8192 * p
            rng = np.random.Generator(np.random.PCG64(sc.seed + 1))
            is_insert = rng.random(sc.ops) < sc.wp
            n_ins = int(is_insert.sum())
            self.keys = gen_uniform(self.pre + n_ins, sc.seed, distinct=True).tolist()
            # inserted-so-far count seen by each op, then a find target at
            # least `pre` insertion positions back
            ins_before = np.concatenate([[0], np.cumsum(is_insert)[:-1]]) + self.pre
            span = np.maximum(ins_before - 8192 * p, 1)
            pick = (rng.random(sc.ops) * span).astype(np.int64)
            ins_index = ins_before
            self.plan = [(True, int(ins_index[j])) if is_insert[j] else (False, int(pick[j]))
                         for j in range(sc.ops)]
            self.n_finds = sc.ops - n_ins


def _run_once(prep, rep):
    sc = prep.sc
    prep.abort.clear()
    kind = sc.kind
    oracles = {}
    details = {}
    universe = None

    if kind == "insert_prealloc":
        m = _Map(sc.variant, _expected_n(sc, sc.ops), sc.threads, sc.seed)
    elif kind == "insert_grow":
        m = _Map(sc.variant, _expected_n(sc, 0), sc.threads, sc.seed)
    elif kind in ("find_succ", "find_unsucc"):
        m = _Map(sc.variant, _expected_n(sc, sc.ops), sc.threads, sc.seed)
        _prefill(m, prep.present)
    elif kind in ("contention_update", "contention_find"):
        m = _Map(sc.variant, _expected_n(sc, sc.zipf_n), sc.threads, sc.seed)
        universe = range(1, sc.zipf_n + 1)
        _prefill(m, universe, [0] * sc.zipf_n)
    elif kind == "aggregation":
        m = _Map(sc.variant, _expected_n(sc, 0), sc.threads, sc.seed)
    elif kind == "deletion_window":
        m = _Map(sc.variant, _expected_n(sc, int(1.5 * sc.window)), sc.threads, sc.seed)
        _prefill(m, prep.keys[:sc.window])
    else:
        growing = sc.variant in VARIANTS or sc.variant == "sequential"
        size = prep.pre + int(sc.wp * sc.ops)
        m = _Map(sc.variant, _expected_n(sc, size // 2 if growing else size), sc.threads, sc.seed)
        _prefill(m, prep.keys[:prep.pre])

    sessions = [m.session() for _ in range(sc.threads)]
    body = _BODIES[kind](prep)
    elapsed = 0.0
    pin_state = "off"
    stats = Counter()
    try:
        if kind == "deletion_window":
            elapsed, stats, pin_state, oracles = _deletion_phases(prep, m, sessions, body)
        else:
            elapsed, stats, pin_state = run_parallel(sc.ops, body, sessions, sc.pin, prep.abort)
    except CapacityExhausted as exc:
        log.error("%s/%s: %s", kind, sc.variant, exc)
        oracles["capacity"] = False
        details["error"] = str(exc)
    for s in sessions:
        s.close()

    if sc.verify and "capacity" not in oracles:
        oracles.update(_verify(prep, m, stats, universe))
    oracles.setdefault("work_conservation", stats.get("ops", 0) == sc.ops)
    if "capacity" in oracles:
        oracles["work_conservation"] = False
    details.update({k: v for k, v in stats.items() if k != "ops"})
    cap = m.capacity
    m.close()
    return elapsed, cap, oracles, details, pin_state


def _body_insert(prep):
    keys = prep.keys

    def body(s, lo, hi):
        ins = s.insert
        ok = 0
        for i in range(lo, hi):
            ok += ins(keys[i], i + 1)
        return Counter(ops=hi - lo, inserted=ok)
    return body


def _body_find(prep):
    keys = prep.present if prep.sc.kind == "find_succ" else prep.fresh

    def body(s, lo, hi):
        find = s.find
        found = 0
        for i in range(lo, hi):
            found += find(keys[i]) is not None
        return Counter(ops=hi - lo, found=found)
    return body


def _body_update(prep):
    keys = prep.keys

    def body(s, lo, hi):
        upd = s.update
        ok = 0
        for i in range(lo, hi):
            ok += upd(keys[i], i + 1)
        return Counter(ops=hi - lo, updated=ok)
    return body


def _body_contention_find(prep):
    keys = prep.keys

    def body(s, lo, hi):
        find = s.find
        found = 0
        for i in range(lo, hi):
            found += find(keys[i]) is not None
        return Counter(ops=hi - lo, found=found)
    return body


def _body_aggregation(prep):
    keys = prep.keys

    def body(s, lo, hi):
        inc = s.increment
        for i in range(lo, hi):
            inc(keys[i])
        return Counter(ops=hi - lo)
    return body


def _body_deletion(prep):
    keys = prep.keys
    window = prep.sc.window
    abort = prep.abort

    def body(s, lo, hi):
        ins, erase = s.insert, s.erase
        retries = 0
        if not window:
            # no deletions configured: a plain insert run
            for i in range(lo, hi):
                ins(keys[i], i + 1)
            return Counter(ops=hi - lo, erase_retries=0)
        for i in range(lo, hi):
            ins(keys[window + i], window + i + 1)
            # the key may still be in flight in another thread's earlier block
            while not erase(keys[i]):
                if abort.is_set():
                    raise Aborted
                retries += 1
                time.sleep(0)
        return Counter(ops=hi - lo, erase_retries=retries)
    return body


def _body_mixed(prep):
    keys = prep.keys
    plan = prep.plan

    def body(s, lo, hi):
        ins, find = s.insert, s.find
        missed = 0
        for j in range(lo, hi):
            is_ins, idx = plan[j]
            if is_ins:
                ins(keys[idx], idx + 1)
            elif find(keys[idx]) is None:
                missed += 1
        return Counter(ops=hi - lo, unsuccessful_finds=missed)
    return body


_BODIES = {
    "insert_prealloc": _body_insert,
    "insert_grow": _body_insert,
    "find_succ": _body_find,
    "find_unsucc": _body_find,
    "contention_update": _body_update,
    "contention_find": _body_contention_find,
    "aggregation": _body_aggregation,
    "deletion_window": _body_deletion,
    "mixed": _body_mixed,
}

CHECKPOINTS = 10


def _deletion_phases(prep, m, sessions, body):
    """Run the sliding window in segments, checking at each quiescent stop."""
    sc = prep.sc
    keys = prep.keys
    window = sc.window
    rng = np.random.Generator(np.random.PCG64(sc.seed + 7))
    bounds = np.linspace(0, sc.ops, CHECKPOINTS + 1).astype(int)
    elapsed = 0.0
    stats = Counter()
    pin_state = "off"
    ok_size = ok_window = ok_expired = True
    for seg in range(CHECKPOINTS):
        lo, hi = int(bounds[seg]), int(bounds[seg + 1])
        if hi <= lo:
            continue

        def shifted(s, a, b, lo=lo):
            return body(s, lo + a, lo + b)

        t, st, pin_state = run_parallel(hi - lo, shifted, sessions, sc.pin, prep.abort)
        elapsed += t
        stats.update(st)
        if not sc.verify:
            continue
        # quiescent checkpoint: live keys are exactly keys[hi : hi + window],
        # or everything inserted so far when nothing is deleted
        live = range(hi, hi + window) if window else range(hi)
        if abs(m.size() - len(live)) > sc.threads:
            ok_size = False
        probe = sessions[0]
        for i in live:
            if probe.find(keys[i]) != i + 1:
                ok_window = False
                break
        if hi and window:
            sample = rng.choice(hi, size=max(1, hi // 100), replace=False)
            if any(probe.find(keys[int(i)]) is not None for i in sample):
                ok_expired = False
    oracles = {"window_size": ok_size, "window_present": ok_window,
               "expired_absent": ok_expired} if sc.verify else {}
    return elapsed, stats, pin_state, oracles


def _verify(prep, m, stats, universe):
    sc = prep.sc
    kind = sc.kind
    if kind in ("insert_prealloc", "insert_grow"):
        contents = m.contents()
        ok = len(contents) == len(prep.keys) and all(
            contents.get(k) == i + 1 for i, k in enumerate(prep.keys))
        return {"roundtrip": ok, "inserted": stats["inserted"] == sc.ops}
    if kind == "find_succ":
        return {"all_found": stats["found"] == sc.ops}
    if kind == "find_unsucc":
        return {"none_found": stats["found"] == 0}
    if kind == "contention_update":
        contents = m.contents()
        keys = prep.keys
        # the final value names the op that wrote it; it must target that key
        ok = all(v == 0 or keys[v - 1] == k for k, v in contents.items())
        return {"all_updated": stats["updated"] == sc.ops, "last_writer": ok,
                "universe": len(contents) == len(universe)}
    if kind == "contention_find":
        return {"all_found": stats["found"] == sc.ops}
    if kind == "aggregation":
        return {"histogram": m.contents() == dict(prep.histogram)}
    if kind == "mixed":
        n_finds = prep.n_finds
        missed = stats["unsuccessful_finds"]
        return {"negligible_misses": n_finds == 0 or missed < 0.001 * n_finds}
    return {}


def run(sc):
    """Execute every repetition of ``sc``; tables are rebuilt each time."""
    prep = _Prepared(sc)
    result = RunResult(sc)
    for rep in range(sc.reps):
        elapsed, cap, oracles, details, pinned = _run_once(prep, rep)
        result.wall_s.append(elapsed)
        result.capacity_final = cap
        result.pinned = pinned
        for name, ok in oracles.items():
            result.oracles[name] = result.oracles.get(name, True) and ok
        result.details = details
        log.info("%s/%s rep %d: %.3f s, oracles %s", sc.kind, sc.variant, rep,
                 elapsed, "pass" if all(oracles.values()) else "FAIL")
    return result


def csv_rows(result):
    sc = result.scenario
    base = {"scenario": sc.kind, "variant": sc.variant, "threads": sc.threads,
            "ops": sc.ops, "param_s": sc.zipf_s, "param_wp": sc.wp, "seed": sc.seed,
            "capacity_final": result.capacity_final, "mem_bytes": result.mem_bytes,
            "oracle_pass": int(result.passed)}
    rows = []
    for rep, wall in enumerate(result.wall_s):
        mops = sc.ops / wall / 1e6 if wall > 0 else 0.0
        rows.append({**base, "rep": rep, "wall_ms": f"{wall * 1e3:.3f}", "mops": f"{mops:.6f}"})
    if len(result.wall_s) > 1:
        rows.append({**base, "rep": "mean", "wall_ms": f"{result.mean_wall_s * 1e3:.3f}",
                     "mops": f"{result.mops:.6f}"})
    return rows


def emit_csv(results, path):
    """Append result rows to ``path``, writing the header for a new file."""
    if not results:
        raise ValueError("no results to write")
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        if fresh:
            writer.writeheader()
        for r in results:
            writer.writerows(csv_rows(r))


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def metadata(results):
    return {
        "rng": RNG_NAME,
        "hash": "folkmap.workload.hash64",
        "tables_rebuilt_each_rep": True,
        "runs": [
            {"scenario": asdict(r.scenario), "pinned": r.pinned,
             "oracles": r.oracles, "failed": r.failures(), "details": r.details}
            for r in results
        ],
    }


def write_metadata(results, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(metadata(results), fh, indent=2, default=str)
        fh.write("\n")

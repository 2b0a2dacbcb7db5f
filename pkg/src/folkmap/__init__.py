"""Concurrent linear-probing hash tables with scalable growing."""

from folkmap.grow import VARIANTS, Decision, GrowConfig, GrowTable, TableHandle, check_trigger
from folkmap.migration import MigrationJob, migrate
from folkmap.size import GlobalCounters, Handle, register_handle
from folkmap.table import (
    DEL_KEY,
    EMPTY_KEY,
    MARK_BIT,
    MIN_CAPACITY,
    FolkloreTable,
    Outcome,
    add,
    capacity_for,
    make_table,
    overwrite,
    slot_of,
)
from folkmap.workload import KeySequence, ZipfSpec, gen_uniform, gen_zipf, hash64

__all__ = [
    "DEL_KEY", "EMPTY_KEY", "MARK_BIT", "MIN_CAPACITY", "VARIANTS",
    "Decision", "FolkloreTable", "GlobalCounters", "GrowConfig", "GrowTable",
    "Handle", "KeySequence", "MigrationJob", "Outcome", "TableHandle", "ZipfSpec",
    "add", "capacity_for", "check_trigger", "gen_uniform", "gen_zipf", "hash64",
    "make_table", "migrate", "overwrite", "register_handle", "slot_of",
]

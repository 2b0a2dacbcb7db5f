"""Key sequences and the 64-bit hash used by the tables and benchmarks."""

import struct
from dataclasses import dataclass, field

import numpy as np

_M64 = (1 << 64) - 1
_SEED = 0x9E3779B97F4A7C15
_MUL1 = 0xBF58476D1CE4E5B9
_MUL2 = 0x94D049BB133111EB

KEY_LOW = 1
KEY_HIGH = (1 << 63) - 2
RNG_NAME = "numpy.PCG64"
DUMP_MAGIC = b"GTKEYS01"


def hash64(key):
    """Two-round multiply/xor-shift finalizer over the full 64-bit range."""
    x = (key ^ _SEED) & _M64
    x = ((x ^ (x >> 30)) * _MUL1) & _M64
    x = ((x ^ (x >> 27)) * _MUL2) & _M64
    return x ^ (x >> 31)


def hash64_array(keys):
    """Vectorised :func:`hash64` over a uint64 array."""
    x = np.asarray(keys, dtype=np.uint64) ^ np.uint64(_SEED)
    with np.errstate(over="ignore"):
        x = (x ^ (x >> np.uint64(30))) * np.uint64(_MUL1)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(_MUL2)
    return x ^ (x >> np.uint64(31))


@dataclass(frozen=True)
class ZipfSpec:
    N: int
    s: float
    seed: int = 0

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("Zipf universe must hold at least one key")
        if self.s < 0:
            raise ValueError("Zipf exponent must be non-negative")


@dataclass(frozen=True)
class KeySequence:
    keys: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.keys.setflags(write=False)

    def __len__(self):
        return len(self.keys)

    def tolist(self):
        return self.keys.tolist()


def _rng(seed):
    return np.random.Generator(np.random.PCG64(seed))


def gen_uniform(n, seed, distinct=False):
    """``n`` keys drawn uniformly from the user key range.

    With ``distinct=True`` duplicates are rejected and redrawn; order of
    first appearance is kept.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = _rng(seed)
    keys = rng.integers(KEY_LOW, KEY_HIGH + 1, size=n, dtype=np.uint64)
    if distinct:
        while True:
            _, first = np.unique(keys, return_index=True)
            if len(first) == len(keys) or len(keys) == 0:
                break
            kept = keys[np.sort(first)]
            extra = rng.integers(KEY_LOW, KEY_HIGH + 1, size=n - len(kept),
                                 dtype=np.uint64)
            keys = np.concatenate([kept, extra])
    prov = {"generator": "uniform", "n": n, "seed": seed, "distinct": distinct,
            "rng": RNG_NAME}
    return KeySequence(keys, prov)


def zipf_weights(N, s):
    return np.arange(1, N + 1, dtype=np.float64) ** -s


def harmonic_number(N, s, chunk=1 << 22):
    """Generalised harmonic number H_{N,s}, summed smallest terms first."""
    total = 0.0
    for stop in range(N, 0, -chunk):
        start = max(stop - chunk, 0)
        ks = np.arange(stop, start, -1, dtype=np.float64)
        total += float(np.sum(ks ** -s))
    return total


def zipf_probability(k, N, s):
    return 1.0 / (k ** s * harmonic_number(N, s))


def zipf_cdf(N, s):
    cdf = np.cumsum(zipf_weights(N, s))
    cdf /= cdf[-1]
    return cdf


def gen_zipf(n, spec):
    """``n`` independent Zipf draws over keys ``1..N`` by inverse CDF."""
    if n < 0:
        raise ValueError("n must be non-negative")
    cdf = zipf_cdf(spec.N, spec.s)
    u = _rng(spec.seed).random(n)
    idx = np.searchsorted(cdf, u, side="right")
    np.minimum(idx, spec.N - 1, out=idx)
    keys = (idx + 1).astype(np.uint64)
    prov = {"generator": "zipf", "n": n, "N": spec.N, "s": spec.s,
            "seed": spec.seed, "rng": RNG_NAME}
    return KeySequence(keys, prov)


def dump_keys(seq, path):
    keys = np.ascontiguousarray(seq.keys, dtype="<u8")
    with open(path, "wb") as fh:
        fh.write(DUMP_MAGIC)
        fh.write(struct.pack("<Q", len(keys)))
        fh.write(keys.tobytes())


def load_keys(path):
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:8] != DUMP_MAGIC:
            raise ValueError(f"{path}: not a key dump")
        (count,) = struct.unpack("<Q", header[8:])
        data = fh.read()
    if len(data) != 8 * count:
        raise ValueError(f"{path}: expected {count} keys, found {len(data) // 8}")
    keys = np.frombuffer(data, dtype="<u8").astype(np.uint64)
    return KeySequence(keys, {"generator": "file", "path": str(path), "n": count})

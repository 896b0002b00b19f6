"""Small shared helpers: stable seeded RNG streams, worker pools, CSV I/O."""

import csv
import hashlib
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np


def seeded(seed, *tags):
    """A numpy Generator derived stably from a seed plus context tags.

    The derivation uses sha256 of the repr, so the same (seed, tags) pair
    yields the same stream on every platform and run.
    """
    digest = hashlib.sha256(repr((int(seed),) + tags).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def worker_count():
    """Parallelism cap: RALAB_THREADS if set, else 1 (sequential)."""
    raw = os.environ.get("RALAB_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)


def parallel_map(fn, items):
    """Order-preserving map, threaded when RALAB_THREADS allows it.

    Results are independent of the worker count: fn must be pure per item.
    """
    items = list(items)
    n = worker_count()
    if n <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def write_csv(path, header, rows):
    """Write rows (lists of already-formatted strings) under a header."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def append_csv(path, header, row):
    """Append one row, creating the file with a header if needed."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(header)
        w.writerow(row)


def read_csv(path):
    """Read a CSV into (header, list-of-row-lists), all strings."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return [], []
    return rows[0], rows[1:]


def fmt(x, places=6):
    """Fixed-point float formatting used by every CSV writer (reproducibility)."""
    return f"{float(x):.{places}f}"


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()

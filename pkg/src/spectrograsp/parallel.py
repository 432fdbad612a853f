"""Worker-count handling shared by the CLI and the trainers.

Results are always collected in submission order, so output never depends on
how many workers ran or in which order they finished.
"""

import os
from concurrent.futures import ThreadPoolExecutor

ENV_THREADS = "SPECTROGRASP_THREADS"


def worker_count() -> int:
    raw = os.environ.get(ENV_THREADS, "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n <= 0:
        n = os.cpu_count() or 1
    return n


def pmap(fn, items):
    items = list(items)
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))

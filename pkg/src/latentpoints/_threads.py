"""Worker-pool sizing, capped by the LION_THREADS environment variable."""

import os


def worker_count(requested=None):
    cap = os.environ.get("LION_THREADS")
    cap = int(cap) if cap else (os.cpu_count() or 1)
    if requested is None:
        requested = cap
    return max(1, min(int(requested), cap))

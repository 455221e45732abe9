"""Process-level allocator tuning for the numpy-heavy training loop.

glibc returns large blocks to the OS eagerly, so every fresh activation
array pays page faults. Raising the mmap and trim thresholds keeps those
blocks in the heap; on this workload it cuts step time by roughly 3x.
"""

import ctypes
import ctypes.util

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_done = False


def tune_allocator(threshold=1 << 30):
    """Best-effort; silently does nothing off glibc."""
    global _done
    if _done:
        return True
    name = ctypes.util.find_library("c")
    if not name:
        return False
    try:
        libc = ctypes.CDLL(name)
        ok = libc.mallopt(_M_MMAP_THRESHOLD, threshold) and libc.mallopt(_M_TRIM_THRESHOLD, threshold)
    except (OSError, AttributeError):
        return False
    _done = bool(ok)
    return _done

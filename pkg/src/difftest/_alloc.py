"""Allocator tuning for long Monte Carlo runs.

glibc serves every large temporary array with a fresh ``mmap`` and returns it
on free, so each quasi-likelihood evaluation pays page faults for its
temporaries.  Raising the mmap and trim thresholds keeps those pages in the
heap.  No-op off glibc.
"""

import ctypes
import sys

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_done = False


def tune_allocator() -> bool:
    global _done
    if _done or not sys.platform.startswith("linux"):
        return _done
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(_M_MMAP_THRESHOLD, 256 * 1024 * 1024)
        libc.mallopt(_M_TRIM_THRESHOLD, 512 * 1024 * 1024)
        _done = True
    except (OSError, AttributeError):
        pass
    return _done

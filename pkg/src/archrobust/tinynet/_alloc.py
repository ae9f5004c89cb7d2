"""Allocator tuning for many short-lived mid-sized arrays.

glibc returns large freed blocks to the OS and faults fresh pages back in on
the next allocation, which on small VMs costs more than the arithmetic of a
desk-scale forward pass.  Raising the mmap and trim thresholds keeps freed
memory in the process.
"""

import ctypes
import ctypes.util
import sys

_M_TRIM_THRESHOLD = -1
_M_TOP_PAD = -2
_M_MMAP_THRESHOLD = -3


def keep_freed_memory(threshold=1 << 30) -> bool:
    """Best effort; returns False where glibc's ``mallopt`` is unavailable."""
    if not sys.platform.startswith("linux"):
        return False
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    ok = mallopt(_M_MMAP_THRESHOLD, threshold) and mallopt(_M_TRIM_THRESHOLD, threshold)
    mallopt(_M_TOP_PAD, 64 << 20)
    return bool(ok)

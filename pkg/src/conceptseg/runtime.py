"""Process-level performance settings."""

from __future__ import annotations

import ctypes
import ctypes.util

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def tune_allocator(mmap_threshold: int = 32 << 20) -> bool:
    """Keep large array temporaries on the heap instead of fresh mmap pages.

    glibc hands blocks above its mmap threshold straight to the kernel, so every
    large numpy temporary costs page faults, which can dominate elementwise work
    on virtualised hosts.  Results are unaffected.  Returns False where glibc's
    ``mallopt`` is unavailable.
    """
    name = ctypes.util.find_library("c")
    if name is None:
        return False
    try:
        libc = ctypes.CDLL(name)
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    ok = mallopt(_M_MMAP_THRESHOLD, int(mmap_threshold))
    ok &= mallopt(_M_TRIM_THRESHOLD, int(2 * mmap_threshold))
    return bool(ok)

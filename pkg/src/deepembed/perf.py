"""Process-level performance knobs for the numeric hot paths."""

import ctypes
import ctypes.util

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3

_done = False


def tune_malloc():
    """Keep large numpy temporaries on the heap instead of fresh mmaps.

    The batch loops allocate many short-lived ~50 MB arrays; with glibc's
    default mmap threshold every one of them page-faults from scratch,
    which costs more than the arithmetic.  Raising the threshold lets the
    allocator recycle the pages.  No-op where glibc is unavailable.
    """
    global _done
    if _done:
        return
    _done = True
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6",
                           use_errno=True)
        libc.mallopt(_M_MMAP_THRESHOLD, 1 << 30)
        libc.mallopt(_M_TRIM_THRESHOLD, 256 * 1024 * 1024)
    except (OSError, AttributeError):
        pass

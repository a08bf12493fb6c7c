"""Small shared helpers."""

from __future__ import annotations

import contextlib
import hashlib


def derive_seed(base: int, tag: str) -> int:
    """Stable per-task seed from a base seed and a name; order-independent."""
    digest = hashlib.sha256(f"{base}:{tag}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def single_thread_blas():
    """Pin BLAS to one thread so results do not depend on worker scheduling."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - present in the supported env
        return contextlib.nullcontext()
    return threadpool_limits(limits=1)

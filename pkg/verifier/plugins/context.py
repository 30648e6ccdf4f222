import contextvars
from typing import Optional

DEFAULT_BLOCK_SIZE = 1024

_workers = contextvars.ContextVar("workers", default=1)
_block_size = contextvars.ContextVar("block_size", default=DEFAULT_BLOCK_SIZE)
_start_method = contextvars.ContextVar("start_method", default=None)


def set_parallelism(workers: int, block_size: Optional[int] = None, start_method: Optional[str] = None):
    """Sets the worker count (and optionally block size) for ensembles run in the current context."""
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    _workers.set(int(workers))
    if block_size is not None:
        if block_size < 1:
            raise ValueError(f"block_size must be >= 1, got {block_size}")
        _block_size.set(int(block_size))
    if start_method is not None:
        _start_method.set(start_method)


def get_workers() -> int:
    return _workers.get()


def get_block_size() -> int:
    return _block_size.get()


def get_start_method() -> Optional[str]:
    """Multiprocessing start method for worker pools; None means the platform default."""
    return _start_method.get()

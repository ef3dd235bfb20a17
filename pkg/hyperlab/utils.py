from __future__ import annotations

import asyncio
import hashlib
import sys
import time
from enum import Enum
from typing import Any, Callable, TypeVar

import numpy as np
import numpy.typing as npt

from hyperlab.globals import ctx

T = TypeVar("T")

FloatArray = npt.NDArray[np.float64]


class Style(str, Enum):
    RED = "\033[91m"
    GREEN = "\033[92m"
    BLUE = "\033[94m"
    BOLD = "\033[1m"
    DIM = "\033[2m"
    RESET = "\033[0m"

    # Enum.__format__ returns "Style.RED" on 3.11+; switch to StrEnum once 3.10 is dropped
    def __format__(self, format_spec: str) -> str:
        return self.value


def debug_print(obj: Any) -> None:
    assert ctx.get().debug
    print(obj, file=sys.stderr)


# ==============================
# errors
# ==============================


class HyperlabError(Exception):
    exit_code = 1


class ConfigError(HyperlabError):
    exit_code = 2

    def __init__(self, message: str, *, key: str | None = None) -> None:
        super().__init__(message)
        # the config field at fault, when known
        self.key = key


class StructuralError(HyperlabError):
    exit_code = 2


class NumericError(HyperlabError, ArithmeticError):
    exit_code = 3


class DimensionError(HyperlabError, ValueError):
    exit_code = 3


class CheckpointError(HyperlabError):
    exit_code = 4


class TrainingAborted(NumericError):
    def __init__(self, message: str, *, step: int, loss_curve: list[float]) -> None:
        super().__init__(message)
        self.step = step
        self.loss_curve = loss_curve


# ==============================
# formatting and hashing
# ==============================


def format_float(x: float) -> str:
    # 17 significant digits round-trips every float64
    return format(float(x), ".17g")


def sha256_array(arr: npt.NDArray[Any]) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()


# ==============================
# concurrency
# ==============================

_semaphore: asyncio.Semaphore | None = None


def reset_semaphore() -> None:
    global _semaphore
    _semaphore = None


async def run_in_thread(
    fn: Callable[..., T], *args: Any, label: str = "", **kwargs: Any
) -> tuple[T, float]:
    global _semaphore
    if _semaphore is None:
        _semaphore = asyncio.BoundedSemaphore(ctx.get().threads)
    async with _semaphore:
        if ctx.get().debug:
            debug_print(f"{Style.BLUE}start {label or fn.__name__}{Style.RESET}")
        start_t = time.perf_counter()
        result = await asyncio.to_thread(fn, *args, **kwargs)
        end_t = time.perf_counter()
        if ctx.get().debug:
            debug_print(
                f"{Style.BLUE}{label or fn.__name__} took {end_t - start_t:.2f}s{Style.RESET}"
            )
    return result, end_t - start_t

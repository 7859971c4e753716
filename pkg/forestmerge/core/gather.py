"""
Worker pool and the one-shot gather channel.

Machines run concurrently and report back exactly once; the channel counts
inbound messages so the one-shot communication contract can be checked.
"""

import logging
import threading
from collections import Counter
from typing import Any, Callable, Iterable, Optional, TypeVar

from joblib import Parallel, delayed

from forestmerge.config import settings
from forestmerge.core.exceptions import ValidationError
from forestmerge.schemas.posterior import PooledDraws, SubposteriorSample
from forestmerge.services.posterior_service import pool_draws

logger = logging.getLogger(__name__)

T = TypeVar("T")


def parallel_map(
    fn: Callable[..., T], items: Iterable[Any], n_jobs: Optional[int] = None
) -> list[T]:
    """
    Apply fn to every item on a joblib worker pool, preserving input order.

    Args:
        fn: Task function; must not touch shared mutable state
        items: Task arguments
        n_jobs: Worker count (defaults to settings.N_JOBS)

    Returns:
        Results in input order
    """
    n_jobs = settings.N_JOBS if n_jobs is None else n_jobs
    return Parallel(n_jobs=n_jobs, prefer=settings.PARALLEL_PREFER)(
        delayed(fn)(item) for item in items
    )


class OneShotChannel:
    """
    Inbound side of the single reduce.

    Each of the m machines may deliver one (draws, log densities) message;
    a second message from the same machine, or any message after the gather,
    is rejected.
    """

    def __init__(self, m: int):
        """
        Initialize the channel.

        Args:
            m: Number of machines expected to report
        """
        if m < 1:
            raise ValidationError("m must be at least 1")
        self.m = m
        self._messages: dict[int, SubposteriorSample] = {}
        self._counts: Counter = Counter()
        self._closed = False
        self._lock = threading.Lock()

    @property
    def message_counts(self) -> dict[int, int]:
        """Inbound message count per machine (1-based)."""
        return {i: self._counts.get(i, 0) for i in range(1, self.m + 1)}

    def send(self, machine: int, sample: SubposteriorSample) -> None:
        """
        Deliver one machine's draws.

        Raises:
            ValidationError: On an unknown machine, a repeated message or a closed channel
        """
        with self._lock:
            self._counts[machine] += 1
            if self._closed:
                raise ValidationError(f"machine {machine} sent after the gather completed")
            if not 1 <= machine <= self.m:
                raise ValidationError(f"unknown machine {machine}; expected 1..{self.m}")
            if machine in self._messages:
                raise ValidationError(f"machine {machine} sent a second message")
            self._messages[machine] = sample

    def gather(self) -> PooledDraws:
        """
        Pool all messages in machine order and close the channel.

        Raises:
            ValidationError: If a machine has not reported
        """
        with self._lock:
            missing = [i for i in range(1, self.m + 1) if i not in self._messages]
            if missing:
                raise ValidationError(f"machines {missing} have not reported")
            self._closed = True
            pooled = pool_draws([self._messages[i] for i in range(1, self.m + 1)])
        logger.info(f"Gathered {pooled.size} draws from {self.m} machines")
        return pooled

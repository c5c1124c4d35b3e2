"""
Retry with exponential backoff and jitter.

Defaults: 500 ms base delay, factor 2, +/-20 % jitter, 5 attempts.
"""

import functools
import logging
import random
import time
from typing import Callable, Iterator, Optional, Tuple, Type, TypeVar

from pydantic import BaseModel, ConfigDict, Field

logger = logging.getLogger(__name__)

T = TypeVar("T")


class RetryPolicy(BaseModel):
    """Backoff schedule for retried operations."""

    model_config = ConfigDict(frozen=True)

    base_delay: float = Field(default=0.5, ge=0)
    factor: float = Field(default=2.0, ge=1)
    jitter: float = Field(default=0.2, ge=0, lt=1)
    max_attempts: int = Field(default=5, ge=1)
    max_delay: float = Field(default=30.0, ge=0)

    def delay(self, attempt: int, rng: Optional[random.Random] = None) -> float:
        """
        Delay before the retry that follows ``attempt`` (1-based).

        Args:
            attempt: Number of the attempt that just failed
            rng: Random source for jitter

        Returns:
            Seconds to sleep
        """
        nominal = min(self.base_delay * self.factor ** (attempt - 1), self.max_delay)
        spread = (rng or random).uniform(-self.jitter, self.jitter)
        return max(0.0, nominal * (1.0 + spread))

    def delays(self, rng: Optional[random.Random] = None) -> Iterator[float]:
        """Yield the sleep before each retry, ``max_attempts - 1`` values."""
        for attempt in range(1, self.max_attempts):
            yield self.delay(attempt, rng)

    def call(
        self,
        func: Callable[[], T],
        retry_on: Tuple[Type[BaseException], ...] = (Exception,),
        describe: str = "",
        sleep: Callable[[float], None] = time.sleep,
    ) -> T:
        """
        Call ``func`` until it succeeds or the attempts run out.

        Args:
            func: Zero-argument callable
            retry_on: Exception types that trigger a retry
            describe: Label used in log messages
            sleep: Sleep function (injectable for tests)

        Returns:
            Whatever ``func`` returns

        Raises:
            The last exception once ``max_attempts`` calls failed
        """
        label = describe or getattr(func, "__name__", "call")
        for attempt in range(1, self.max_attempts + 1):
            try:
                return func()
            except retry_on as exc:
                if attempt >= self.max_attempts:
                    logger.error("%s failed after %d attempts: %s", label, attempt, exc)
                    raise
                wait = self.delay(attempt)
                logger.warning(
                    "%s failed (attempt %d/%d), retrying in %.2fs: %s",
                    label,
                    attempt,
                    self.max_attempts,
                    wait,
                    exc,
                )
                sleep(wait)
        raise AssertionError("unreachable")


DEFAULT_RETRY = RetryPolicy()


def retry_with_backoff(
    policy: RetryPolicy = DEFAULT_RETRY,
    retry_on: Tuple[Type[BaseException], ...] = (Exception,),
):
    """
    Decorator form of ``RetryPolicy.call``.

    Usage:
        @retry_with_backoff(RetryPolicy(max_attempts=3), retry_on=(TransientNetworkError,))
        def fetch():
            ...
    """

    def decorator(func: Callable[..., T]) -> Callable[..., T]:
        @functools.wraps(func)
        def wrapper(*args, **kwargs) -> T:
            return policy.call(lambda: func(*args, **kwargs), retry_on=retry_on, describe=func.__name__)

        return wrapper

    return decorator

"""
Per-user quota accounting.

Reservations are taken when an upload session opens and converted to
committed usage when the object becomes visible. With a hard policy the sum
of reserved and committed bytes for a user never exceeds the limit.
"""

import logging
import threading
from collections import defaultdict
from typing import Dict

from pydantic import BaseModel, ConfigDict, Field

from mdx_relay.core.errors import QuotaExceeded

logger = logging.getLogger(__name__)

TiB = 1024**4


class QuotaPolicy(BaseModel):
    model_config = ConfigDict(frozen=True)

    per_user_limit: int = Field(default=TiB, ge=0)
    hard: bool = True


class QuotaLedger:
    """Atomic reservation counter per user."""

    def __init__(self, policy: QuotaPolicy = QuotaPolicy()):
        self.policy = policy
        self._reserved: Dict[str, int] = defaultdict(int)
        self._committed: Dict[str, int] = defaultdict(int)
        self._lock = threading.Lock()

    def reserve(self, user: str, size: int, force: bool = False) -> None:
        """
        Reserve ``size`` bytes for ``user``.

        Args:
            user: Owner of the reservation
            size: Bytes to reserve
            force: Record the reservation even past the limit (session recovery)

        Raises:
            QuotaExceeded: if a hard limit would be exceeded
        """
        with self._lock:
            used = self._reserved[user] + self._committed[user]
            if size > 0 and used + size > self.policy.per_user_limit:
                detail = {
                    "user": user,
                    "limit": self.policy.per_user_limit,
                    "used": used,
                    "requested": size,
                }
                if self.policy.hard and not force:
                    raise QuotaExceeded(f"quota exceeded for {user}", detail=detail)
                logger.warning("Soft quota exceeded for %s: %s", user, detail)
            self._reserved[user] += size

    def release(self, user: str, size: int) -> None:
        with self._lock:
            self._reserved[user] = max(0, self._reserved[user] - size)

    def commit(self, user: str, size: int) -> None:
        """Turn a reservation into committed usage."""
        with self._lock:
            self._reserved[user] = max(0, self._reserved[user] - size)
            self._committed[user] += size

    def add_committed(self, user: str, size: int) -> None:
        """Count usage recovered from the ledger at startup."""
        with self._lock:
            self._committed[user] += size

    def usage(self, user: str) -> Dict[str, int]:
        with self._lock:
            return {
                "reserved": self._reserved[user],
                "committed": self._committed[user],
                "limit": self.policy.per_user_limit,
            }

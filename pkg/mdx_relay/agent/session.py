"""
Bearer token lifecycle on the agent side.
"""

import logging
import threading
import time
from typing import Callable, Optional, TypeVar

from mdx_relay.agent.client import StorageClient
from mdx_relay.core.errors import AuthenticationRejected, RateLimited, TokenExpired
from mdx_relay.core.models import DeviceCredential, SessionToken

logger = logging.getLogger(__name__)

T = TypeVar("T")

REFRESH_FRACTION = 0.8
REJECTED_BACKOFF = 60.0


class TokenManager:
    """
    Holds the current token and renews it at 80 % of its lifetime.

    After a rejected authentication no new attempt is made until the
    back-off has elapsed; callers get ``AuthenticationRejected`` meanwhile.
    """

    def __init__(
        self,
        client: StorageClient,
        credential: DeviceCredential,
        refresh_fraction: float = REFRESH_FRACTION,
        rejected_backoff: float = REJECTED_BACKOFF,
        clock: Callable[[], float] = time.time,
    ):
        self.client = client
        self.credential = credential
        self.refresh_fraction = refresh_fraction
        self.rejected_backoff = rejected_backoff
        self.clock = clock
        self._token: Optional[SessionToken] = None
        self._blocked_until = 0.0
        self._lock = threading.Lock()

    def current(self) -> SessionToken:
        """
        Return a token that is not due for refresh, authenticating if needed.

        Raises:
            AuthenticationRejected: credentials rejected (now or within the back-off)
            RateLimited: the service is refusing attempts from this device
            TransientNetworkError: the service is unreachable
        """
        with self._lock:
            now = self.clock()
            token = self._token
            if token is not None and not token.refresh_due(self.refresh_fraction, now=now):
                return token
            if now < self._blocked_until:
                raise AuthenticationRejected(
                    f"authentication backing off for {self._blocked_until - now:.0f}s after rejection"
                )
            try:
                token = self.client.issue_token(self.credential)
            except (AuthenticationRejected, RateLimited):
                self._blocked_until = now + self.rejected_backoff
                self._token = None
                logger.error(
                    "Device %s was refused by the service; next attempt in %.0fs",
                    self.credential.device_id,
                    self.rejected_backoff,
                )
                raise
            self._token = token
            logger.info("Authenticated device %s", self.credential.device_id)
            return token

    def invalidate(self, token: Optional[SessionToken] = None) -> None:
        """Forget the current token (only if it is still ``token`` when one is given)."""
        with self._lock:
            if token is None or self._token is token:
                self._token = None

    def call(self, func: Callable[[SessionToken], T]) -> T:
        """
        Run ``func`` with a valid token, re-authenticating once if the service
        reports the token expired.
        """
        token = self.current()
        try:
            return func(token)
        except TokenExpired:
            logger.info("Token rejected as expired; re-authenticating")
            self.invalidate(token)
            return func(self.current())

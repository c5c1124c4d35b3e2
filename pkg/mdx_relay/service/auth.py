"""
Device authentication for the storage service.

Devices are listed in a static registry. A device exchanges its secret for a
bearer token bound to the device and its registered users. Unknown devices
and wrong secrets get the same rejection; repeated failures are rate limited.
"""

import hmac
import json
import logging
import secrets
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Deque, Dict, FrozenSet, List, Optional, Union

from pydantic import BaseModel, SecretStr, ValidationError

from mdx_relay.core.errors import AuthenticationRejected, ConfigError, RateLimited, TokenExpired
from mdx_relay.core.models import DeviceCredential, SessionToken

logger = logging.getLogger(__name__)

DEFAULT_TOKEN_TTL = 3600.0
MAX_FAILURES = 5
FAILURE_WINDOW = 60.0


class Organization(BaseModel):
    org: str
    sector: Optional[str] = None


class RegistryFile(BaseModel):
    devices: List[DeviceCredential] = []
    organizations: Dict[str, Organization] = {}


@dataclass(frozen=True)
class TokenGrant:
    """What a valid bearer token authorizes."""

    device_id: str
    users: FrozenSet[str]
    expires_at: float

    def may_act_for(self, owner: str) -> bool:
        return owner in self.users


class DeviceRegistry:
    """Static server-side registry of devices and the user-to-organization map."""

    def __init__(
        self,
        devices: Optional[List[DeviceCredential]] = None,
        organizations: Optional[Dict[str, Organization]] = None,
    ):
        self.devices: Dict[str, DeviceCredential] = {d.device_id: d for d in devices or []}
        self.organizations: Dict[str, Organization] = dict(organizations or {})

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DeviceRegistry":
        """
        Load a registry file.

        Args:
            path: JSON file ``{devices: [...], organizations: {...}}``

        Raises:
            ConfigError: if the file cannot be parsed
        """
        path = Path(path)
        try:
            parsed = RegistryFile.model_validate(json.loads(path.read_text(encoding="utf-8")))
        except (OSError, ValueError, ValidationError) as exc:
            raise ConfigError(f"cannot load device registry {path}: {exc}") from exc
        logger.info("Loaded %d devices from %s", len(parsed.devices), path)
        return cls(parsed.devices, parsed.organizations)

    def add(self, credential: DeviceCredential) -> None:
        self.devices[credential.device_id] = credential

    def lookup(self, device_id: str) -> Optional[DeviceCredential]:
        return self.devices.get(device_id)


class TokenAuthority:
    """
    Issues and validates bearer tokens.

    Tokens live in memory; a service restart requires devices to
    authenticate again, which the agent does on the first rejection.
    """

    def __init__(
        self,
        registry: DeviceRegistry,
        ttl: float = DEFAULT_TOKEN_TTL,
        clock: Callable[[], float] = time.time,
        max_failures: int = MAX_FAILURES,
        failure_window: float = FAILURE_WINDOW,
    ):
        self.registry = registry
        self.ttl = ttl
        self.clock = clock
        self.max_failures = max_failures
        self.failure_window = failure_window
        self._grants: Dict[str, TokenGrant] = {}
        self._failures: Dict[str, Deque[float]] = defaultdict(deque)
        self._lock = threading.Lock()

    def issue_token(self, device_id: str, device_secret: Union[str, SecretStr]) -> SessionToken:
        """
        Exchange device credentials for a bearer token.

        Args:
            device_id: Registered device identifier
            device_secret: The device's shared secret

        Returns:
            Token valid for the configured TTL

        Raises:
            RateLimited: after too many recent failures for this device id
            AuthenticationRejected: for unknown devices and wrong secrets alike
        """
        secret = device_secret.get_secret_value() if isinstance(device_secret, SecretStr) else device_secret
        now = self.clock()
        with self._lock:
            failures = self._failures[device_id]
            while failures and failures[0] <= now - self.failure_window:
                failures.popleft()
            if len(failures) >= self.max_failures:
                raise RateLimited("too many failed attempts, try again later")

            known = self.registry.lookup(device_id)
            expected = known.device_secret.get_secret_value() if known else secrets.token_hex(32)
            if not hmac.compare_digest(expected.encode(), str(secret).encode()) or known is None:
                failures.append(now)
                logger.warning("Rejected authentication attempt for device %s", device_id)
                raise AuthenticationRejected("invalid device credentials")

            failures.clear()
            token = secrets.token_urlsafe(32)
            grant = TokenGrant(device_id, frozenset(known.registered_users), now + self.ttl)
            self._grants[token] = grant
            self._prune(now)

        logger.info("Issued token for device %s (ttl %.0fs)", device_id, self.ttl)
        return SessionToken(token=token, expires_at=grant.expires_at, device_id=device_id, issued_at=now)

    def validate(self, token: Optional[str]) -> TokenGrant:
        """
        Resolve a bearer token.

        Raises:
            TokenExpired: if the token is unknown or past its expiry
        """
        if not token:
            raise TokenExpired("missing bearer token")
        with self._lock:
            grant = self._grants.get(token)
            if grant is None:
                raise TokenExpired("unknown bearer token")
            if self.clock() >= grant.expires_at:
                del self._grants[token]
                raise TokenExpired("bearer token expired")
            return grant

    def _prune(self, now: float) -> None:
        for stale in [t for t, g in self._grants.items() if g.expires_at <= now]:
            del self._grants[stale]


def load_organizations(path: Union[str, Path]) -> Dict[str, Organization]:
    """
    Load a user to organization map ``{user: {org, sector}}``.

    Raises:
        ConfigError: if the file cannot be parsed
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
        return {user: Organization.model_validate(entry) for user, entry in dict(raw).items()}
    except (OSError, ValueError, TypeError, ValidationError) as exc:
        raise ConfigError(f"cannot load organization map {path}: {exc}") from exc

"""
Ephemeral storage service for benches and integration tests.

The service runs under uvicorn in a background thread, on a loopback socket
with an ephemeral port, over a temporary data root that is removed on stop.
"""

import logging
import secrets
import shutil
import tempfile
import threading
import time
from pathlib import Path
from typing import Iterable, Optional, Tuple

from mdx_relay.api.app import bind_socket, build_server, create_app
from mdx_relay.core.models import DeviceCredential
from mdx_relay.service.auth import DEFAULT_TOKEN_TTL, DeviceRegistry, TokenAuthority
from mdx_relay.service.quota import QuotaPolicy
from mdx_relay.service.store import ObjectStore

logger = logging.getLogger(__name__)

STARTUP_TIMEOUT = 10.0


def ephemeral_device(users: Iterable[str] = ("bench",), device_id: str = "bench-device") -> DeviceCredential:
    """A throwaway device credential with a fresh random secret."""
    return DeviceCredential(device_id=device_id, device_secret=secrets.token_hex(32), registered_users=list(users))


class ServiceHarness:
    """
    Storage service hosted in-process for the duration of a ``with`` block.

    Args:
        devices: Devices to register; one ``bench`` device when omitted
        quota: Quota policy of the store
        token_ttl: Bearer token lifetime
        data_root: Use this data root instead of a temporary one (kept on stop)
    """

    def __init__(
        self,
        devices: Optional[Iterable[DeviceCredential]] = None,
        quota: QuotaPolicy = QuotaPolicy(),
        token_ttl: float = DEFAULT_TOKEN_TTL,
        data_root: Optional[Path] = None,
    ):
        self.devices = list(devices) if devices is not None else [ephemeral_device()]
        self.quota = quota
        self.token_ttl = token_ttl
        self._owned_root = data_root is None
        self.data_root = data_root
        self.store: Optional[ObjectStore] = None
        self._server = None
        self._thread: Optional[threading.Thread] = None
        self._sock = None

    @property
    def credential(self) -> DeviceCredential:
        return self.devices[0]

    @property
    def address(self) -> Tuple[str, int]:
        host, port = self._sock.getsockname()[:2]
        return host, port

    @property
    def url(self) -> str:
        return "http://%s:%d" % self.address

    def start(self) -> "ServiceHarness":
        if self._owned_root:
            self.data_root = Path(tempfile.mkdtemp(prefix="mdx-relay-service-"))
        self.store = ObjectStore(self.data_root, quota=self.quota)
        authority = TokenAuthority(DeviceRegistry(self.devices), ttl=self.token_ttl)
        app = create_app(self.store, authority)

        self._sock = bind_socket("127.0.0.1", 0)
        self._server = build_server(app, log_level="warning")
        self._thread = threading.Thread(
            target=self._server.run, kwargs={"sockets": [self._sock]}, name="service-harness", daemon=True
        )
        self._thread.start()
        deadline = time.monotonic() + STARTUP_TIMEOUT
        while not self._server.started:
            if not self._thread.is_alive() or time.monotonic() > deadline:
                self.stop()
                raise RuntimeError("storage service harness did not start")
            time.sleep(0.01)
        logger.debug("Service harness on %s (data root %s)", self.url, self.data_root)
        return self

    def stop(self) -> None:
        if self._server is not None:
            self._server.should_exit = True
        if self._thread is not None:
            self._thread.join(timeout=STARTUP_TIMEOUT)
        if self._sock is not None:
            self._sock.close()
        if self._owned_root and self.data_root is not None:
            shutil.rmtree(self.data_root, ignore_errors=True)

    def __enter__(self) -> "ServiceHarness":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

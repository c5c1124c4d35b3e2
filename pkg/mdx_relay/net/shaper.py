"""
In-process shaping proxy.

``ShapingProxy`` accepts TCP connections on loopback and relays each one to
an upstream endpoint. Every direction of every connection gets a reader
thread and a writer thread joined by a delivery queue: the reader stamps
each block with ``now + effective_rtt / 2`` and the writer holds it until
then. A profile's bandwidth cap is enforced by one ``TokenBucket`` shared by
all connections of the proxy, like a single shared link.
"""

import logging
import queue
import socket
import threading
import time
from typing import Callable, List, Optional, Tuple

from mdx_relay.core.errors import ShaperStartupError
from mdx_relay.net.profiles import NetworkProfile

logger = logging.getLogger(__name__)

Address = Tuple[str, int]

RECV_SIZE = 64 * 1024
BUCKET_WINDOW = 0.1
_EOF = object()


class TokenBucket:
    """
    Thread-safe token bucket in bytes.

    The bucket starts empty and may go into debt: a consumer always takes
    what it asked for and is told how long to wait before passing it on, so
    blocks larger than the depth still flow at the configured rate.

    Args:
        rate: Refill rate in bytes per second
        depth: Maximum accumulated tokens in bytes
        clock: Monotonic clock
    """

    def __init__(self, rate: float, depth: float, clock: Callable[[], float] = time.monotonic):
        if rate <= 0:
            raise ValueError("rate must be positive")
        if depth <= 0:
            raise ValueError("depth must be positive")
        self.rate = rate
        self.depth = depth
        self.clock = clock
        self.tokens = 0.0
        self.last_update = clock()
        self.total_bytes = 0
        self._lock = threading.Lock()

    @classmethod
    def for_profile(cls, profile: NetworkProfile) -> Optional["TokenBucket"]:
        """Bucket of depth ``2 x cap x 100 ms`` for a capped profile, else None."""
        rate = profile.rate_bytes_per_s
        if rate is None:
            return None
        return cls(rate, 2 * rate * BUCKET_WINDOW)

    def consume(self, num_bytes: int) -> float:
        """
        Take ``num_bytes`` tokens.

        Returns:
            Seconds the caller must wait before the bytes may pass
        """
        if num_bytes < 0:
            raise ValueError("num_bytes cannot be negative")
        with self._lock:
            now = self.clock()
            self.tokens = min(self.depth, self.tokens + (now - self.last_update) * self.rate)
            self.last_update = now
            self.tokens -= num_bytes
            self.total_bytes += num_bytes
            return 0.0 if self.tokens >= 0 else -self.tokens / self.rate

    def throttle(self, num_bytes: int, sleep: Callable[[float], None] = time.sleep) -> None:
        wait = self.consume(num_bytes)
        if wait > 0:
            sleep(wait)


class _Pipe:
    """One direction of a relayed connection."""

    def __init__(self, source: socket.socket, sink: socket.socket, delay: float, bucket: Optional[TokenBucket]):
        self.source = source
        self.sink = sink
        self.delay = delay
        self.bucket = bucket
        self.backlog: "queue.Queue" = queue.Queue()
        self.done = threading.Event()

    def start(self, name: str) -> None:
        threading.Thread(target=self._read, name=f"{name}-read", daemon=True).start()
        threading.Thread(target=self._write, name=f"{name}-write", daemon=True).start()

    def _read(self) -> None:
        try:
            while True:
                data = self.source.recv(RECV_SIZE)
                if not data:
                    break
                if self.bucket is not None:
                    self.bucket.throttle(len(data))
                self.backlog.put((time.monotonic() + self.delay, data))
        except OSError:
            pass
        self.backlog.put((time.monotonic() + self.delay, _EOF))

    def _write(self) -> None:
        try:
            while True:
                deliver_at, data = self.backlog.get()
                wait = deliver_at - time.monotonic()
                if wait > 0:
                    time.sleep(wait)
                if data is _EOF:
                    self.sink.shutdown(socket.SHUT_WR)
                    break
                self.sink.sendall(data)
        except OSError:
            # sink is gone; stop the reader too
            _shutdown(self.source)
        finally:
            self.done.set()


def _tune(sock: socket.socket) -> None:
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)


def _shutdown(sock: socket.socket) -> None:
    try:
        sock.shutdown(socket.SHUT_RDWR)
    except OSError:
        pass


class ShapingProxy:
    """
    Loopback relay that applies one profile to everything passing through it.

    Args:
        profile: Conditions to emulate
        upstream: ``(host, port)`` to relay to
        listen_host: Address to bind
        listen_port: Port to bind, 0 for an ephemeral one
    """

    def __init__(
        self,
        profile: NetworkProfile,
        upstream: Address,
        listen_host: str = "127.0.0.1",
        listen_port: int = 0,
    ):
        self.profile = profile
        self.upstream = upstream
        self.listen_host = listen_host
        self.listen_port = listen_port
        self.bucket = TokenBucket.for_profile(profile)
        self._sock: Optional[socket.socket] = None
        self._connections: List[socket.socket] = []
        self._lock = threading.Lock()
        self._closed = threading.Event()

    @property
    def address(self) -> Address:
        if self._sock is None:
            raise RuntimeError("shaper is not running")
        host, port = self._sock.getsockname()[:2]
        return host, port

    @property
    def url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}"

    def start(self) -> "ShapingProxy":
        """
        Bind and start accepting.

        Raises:
            ShaperStartupError: the listening address is unavailable
        """
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind((self.listen_host, self.listen_port))
            sock.listen(64)
        except OSError as exc:
            sock.close()
            raise ShaperStartupError(
                f"cannot listen on {self.listen_host}:{self.listen_port}: {exc}",
                detail={"profile": self.profile.name},
            ) from exc
        self._sock = sock
        threading.Thread(target=self._accept, name=f"shaper-{self.profile.name}", daemon=True).start()
        logger.debug(
            "Shaper %s on %s:%d -> %s:%d (rtt %.2f ms, cap %s MB/s)",
            self.profile.name,
            *self.address,
            *self.upstream,
            self.profile.effective_rtt_ms,
            self.profile.bandwidth_cap_MBps,
        )
        return self

    def _accept(self) -> None:
        while not self._closed.is_set():
            try:
                client, _ = self._sock.accept()
            except OSError:
                break
            try:
                upstream = socket.create_connection(self.upstream, timeout=5.0)
                upstream.settimeout(None)
            except OSError as exc:
                logger.warning("Shaper %s cannot reach upstream: %s", self.profile.name, exc)
                client.close()
                continue
            _tune(client)
            _tune(upstream)
            with self._lock:
                self._connections.extend((client, upstream))
            delay = self.profile.one_way_delay
            outbound = _Pipe(client, upstream, delay, self.bucket)
            inbound = _Pipe(upstream, client, delay, self.bucket)
            outbound.start("shape-out")
            inbound.start("shape-in")
            threading.Thread(
                target=self._reap, args=(client, upstream, outbound, inbound), daemon=True
            ).start()

    def _reap(self, client: socket.socket, upstream: socket.socket, *pipes: _Pipe) -> None:
        for pipe in pipes:
            pipe.done.wait()
        for sock in (client, upstream):
            sock.close()
        with self._lock:
            for sock in (client, upstream):
                if sock in self._connections:
                    self._connections.remove(sock)

    def stop(self) -> None:
        self._closed.set()
        if self._sock is not None:
            _shutdown(self._sock)
            self._sock.close()
        with self._lock:
            connections, self._connections = self._connections, []
        for sock in connections:
            _shutdown(sock)
            sock.close()

    def __enter__(self) -> "ShapingProxy":
        return self.start() if self._sock is None else self

    def __exit__(self, *exc) -> None:
        self.stop()


def start_shaper(
    profile: NetworkProfile,
    upstream: Address,
    listen_host: str = "127.0.0.1",
    listen_port: int = 0,
) -> ShapingProxy:
    """Start a shaping proxy for ``profile`` in front of ``upstream``."""
    return ShapingProxy(profile, upstream, listen_host, listen_port).start()


class EchoServer:
    """Loopback TCP echo server used as the latency upstream."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self.host = host
        self.port = port
        self._sock: Optional[socket.socket] = None

    @property
    def address(self) -> Address:
        host, port = self._sock.getsockname()[:2]
        return host, port

    def start(self) -> "EchoServer":
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((self.host, self.port))
        sock.listen(16)
        self._sock = sock
        threading.Thread(target=self._accept, name="echo", daemon=True).start()
        return self

    def _accept(self) -> None:
        while True:
            try:
                conn, _ = self._sock.accept()
            except OSError:
                break
            _tune(conn)
            threading.Thread(target=self._echo, args=(conn,), daemon=True).start()

    @staticmethod
    def _echo(conn: socket.socket) -> None:
        with conn:
            try:
                for data in iter(lambda: conn.recv(RECV_SIZE), b""):
                    conn.sendall(data)
            except OSError:
                pass

    def stop(self) -> None:
        if self._sock is not None:
            _shutdown(self._sock)
            self._sock.close()

    def __enter__(self) -> "EchoServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()

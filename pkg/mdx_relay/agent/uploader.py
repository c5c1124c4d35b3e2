"""
Parallel, resumable upload of one file.

The uploader drives a ``TrackedTransfer`` through the lifecycle state
machine, journaling every transition. Chunks are sent by a pool of at most
``parallelism`` workers; each chunk is read from the source and checked
against its manifest record right before it is sent.
"""

import logging
import threading
import time
from concurrent.futures import FIRST_EXCEPTION, ThreadPoolExecutor, wait
from contextlib import contextmanager
from typing import Callable, List, Optional, Tuple

from mdx_relay.agent.client import StorageClient
from mdx_relay.agent.journal import Journal, TrackedTransfer
from mdx_relay.agent.session import TokenManager
from mdx_relay.core.errors import (
    AuthorizationError,
    ChunkDigestMismatch,
    IntegrityFailure,
    ManifestValidationError,
    QuotaExceeded,
    RateLimited,
    RelayError,
    SourceMissing,
    StateMachineViolation,
    TransientNetworkError,
    UploadIncomplete,
    UploadSessionError,
)
from mdx_relay.core.manifest import read_chunk, verify_chunk
from mdx_relay.core.models import CommitReceipt, UploadStatus
from mdx_relay.core.retry import DEFAULT_RETRY, RetryPolicy
from mdx_relay.core.state import (
    AllChunksAcked,
    ChunkAcked,
    CommitConfirmed,
    Error,
    TransferEvent,
    TransferPhase,
    UploadStarted,
    advance_state,
    plan_resume,
)

logger = logging.getLogger(__name__)

DEFAULT_PARALLELISM = 4

# failures that another attempt cannot fix
TERMINAL_ERRORS = (QuotaExceeded, AuthorizationError, ManifestValidationError, IntegrityFailure, SourceMissing)
RETRY_ON = (TransientNetworkError, ChunkDigestMismatch, RateLimited)


class UploadInterrupted(Exception):
    """The agent is shutting down; the transfer stays resumable from the journal."""


class TransferProbe:
    """
    Chunk-level instrumentation shared by the uploads of one agent.

    Args:
        on_ack: Called with ``(file_id, index)`` after an ack is journaled
    """

    def __init__(self, on_ack: Optional[Callable[[str, int], None]] = None):
        self.on_ack = on_ack
        self.in_flight = 0
        self.max_in_flight = 0
        self.sent: List[Tuple[str, int]] = []
        self._lock = threading.Lock()

    @contextmanager
    def sending(self, file_id: str, index: int):
        with self._lock:
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)
            self.sent.append((file_id, index))
        try:
            yield
        finally:
            with self._lock:
                self.in_flight -= 1

    def sent_indices(self, file_id: str) -> List[int]:
        with self._lock:
            return [index for fid, index in self.sent if fid == file_id]


class FileUploader:
    """
    Uploads journaled transfers through the storage service.

    Args:
        client: Service client
        tokens: Token manager for the device
        journal: Journal receiving every transition
        parallelism: Maximum chunk transfers in flight for one file
        retry: Backoff policy for retryable failures
        probe: Optional instrumentation
        sleep: Sleep function used between retries
        stop_event: Once set, no further chunks are started
    """

    def __init__(
        self,
        client: StorageClient,
        tokens: TokenManager,
        journal: Journal,
        parallelism: int = DEFAULT_PARALLELISM,
        retry: RetryPolicy = DEFAULT_RETRY,
        probe: Optional[TransferProbe] = None,
        sleep: Callable[[float], None] = time.sleep,
        stop_event: Optional[threading.Event] = None,
    ):
        if parallelism < 1:
            raise ValueError("parallelism must be at least 1")
        self.client = client
        self.tokens = tokens
        self.journal = journal
        self.parallelism = parallelism
        self.retry = retry
        self.probe = probe or TransferProbe()
        self.sleep = sleep
        self.stop_event = stop_event or threading.Event()
        self._lock = threading.Lock()

    # -- state ----------------------------------------------------------

    def _advance(self, transfer: TrackedTransfer, event: TransferEvent) -> None:
        with self._lock:
            transfer.state = advance_state(transfer.state, event)
            transfer.updated_at = time.time()
            if isinstance(event, ChunkAcked):
                self.journal.record_ack(transfer.file_id, event.index)
            else:
                self.journal.record(transfer)

    def _ack(self, transfer: TrackedTransfer, index: int) -> None:
        with self._lock:
            known = index in transfer.state.acked_chunks
        if not known:
            self._advance(transfer, ChunkAcked(index))
            if self.probe.on_ack is not None:
                self.probe.on_ack(transfer.file_id, index)

    def _service(self, describe: str, func):
        return self.retry.call(lambda: self.tokens.call(func), retry_on=RETRY_ON, describe=describe, sleep=self.sleep)

    # -- driving --------------------------------------------------------

    def upload(self, transfer: TrackedTransfer) -> CommitReceipt:
        """
        Bring a transfer to Committed.

        Accepts transfers in Manifested, Uploading, Verifying, retryable
        Failed and Committed phases, which is every phase a journal replay
        can produce for an unfinished file.

        Returns:
            The commit receipt

        Raises:
            RelayError: the transfer is left Failed (``retryable`` tells whether
                a later attempt may succeed)
        """
        if transfer.state.phase is TransferPhase.COMMITTED and transfer.receipt is not None:
            return transfer.receipt
        if transfer.state.phase is TransferPhase.FAILED and not transfer.state.retryable:
            raise StateMachineViolation(transfer.state.phase, "UploadStarted", "transfer failed terminally")
        try:
            return self._drive(transfer)
        except RelayError as exc:
            self._fail(transfer, exc, retryable=not isinstance(exc, TERMINAL_ERRORS))
            raise

    def _fail(self, transfer: TrackedTransfer, exc: RelayError, retryable: bool) -> None:
        if transfer.state.phase in (TransferPhase.MANIFESTED, TransferPhase.UPLOADING, TransferPhase.VERIFYING):
            self._advance(transfer, Error(f"{exc.code}: {exc.message}", retryable=retryable))
        logger.error(
            "Upload of %s/%s failed (%s): %s",
            transfer.manifest.owner,
            transfer.manifest.relative_path,
            "will retry" if retryable else "terminal",
            exc.message,
        )

    def _drive(self, transfer: TrackedTransfer) -> CommitReceipt:
        manifest = transfer.manifest
        for attempt in range(2):
            phase = transfer.state.phase
            if phase in (TransferPhase.MANIFESTED, TransferPhase.FAILED):
                self._open(transfer)
            elif phase is TransferPhase.UPLOADING:
                self._rejoin(transfer)

            if transfer.state.phase is TransferPhase.UPLOADING:
                self._send_pending(transfer)
                self._advance(transfer, AllChunksAcked())

            try:
                receipt = self._service(
                    f"complete {manifest.relative_path}",
                    lambda token: self.client.complete_upload(token, transfer.state.upload_id),
                )
            except (UploadIncomplete, UploadSessionError) as exc:
                if attempt:
                    raise
                # service lost chunks or the session; resynchronize once
                logger.warning("Resynchronizing %s with the service: %s", manifest.relative_path, exc.message)
                self._advance(transfer, Error(exc.message, retryable=True))
                continue

            if receipt.whole_digest != manifest.whole_digest:
                raise IntegrityFailure("commit receipt digest differs from the manifest")
            transfer.receipt = receipt
            self._advance(transfer, CommitConfirmed())
            logger.info(
                "Committed %s/%s as %s",
                manifest.owner,
                manifest.relative_path,
                receipt.object_id,
            )
            return receipt
        raise AssertionError("unreachable")

    def _status(self, upload_id: Optional[str]) -> Optional[UploadStatus]:
        if not upload_id:
            return None
        try:
            return self._service(
                f"status {upload_id}", lambda token: self.client.upload_status(token, upload_id)
            )
        except UploadSessionError:
            return None

    def _open(self, transfer: TrackedTransfer) -> None:
        """Start or restart the service session (Manifested or Failed)."""
        status = self._status(transfer.state.upload_id) if transfer.state.phase is TransferPhase.FAILED else None
        if status is not None:
            self._advance(transfer, UploadStarted(status.upload_id, reset_acks=True))
            for index in status.acked:
                self._ack(transfer, index)
            return
        upload_id = self._service(
            f"init {transfer.manifest.relative_path}",
            lambda token: self.client.init_upload(token, transfer.manifest),
        )
        self._advance(transfer, UploadStarted(upload_id, reset_acks=True))

    def _rejoin(self, transfer: TrackedTransfer) -> None:
        """Continue an Uploading transfer found in the journal."""
        status = self._status(transfer.state.upload_id)
        if status is not None and set(status.acked) >= transfer.state.acked_chunks:
            for index in sorted(set(status.acked) - transfer.state.acked_chunks):
                self._ack(transfer, index)
            return
        self._advance(transfer, Error("service session lost or behind the journal", retryable=True))
        self._open(transfer)

    def _send_pending(self, transfer: TrackedTransfer) -> None:
        pending = plan_resume(transfer.manifest, transfer.state.acked_chunks)
        if not pending:
            return
        logger.info(
            "Sending %d of %d chunks of %s/%s",
            len(pending),
            transfer.manifest.chunk_count,
            transfer.manifest.owner,
            transfer.manifest.relative_path,
        )
        executor = ThreadPoolExecutor(max_workers=self.parallelism, thread_name_prefix="chunk")
        try:
            futures = [executor.submit(self._send_chunk, transfer, index) for index in pending]
            wait(futures, return_when=FIRST_EXCEPTION)
            for future in futures:
                if future.done() and future.exception() is not None:
                    raise future.exception()
        finally:
            executor.shutdown(wait=True, cancel_futures=True)

    def _send_chunk(self, transfer: TrackedTransfer, index: int) -> None:
        if self.stop_event.is_set():
            raise UploadInterrupted(transfer.file_id)
        record = transfer.manifest.chunks[index]
        upload_id = transfer.state.upload_id

        def attempt(token):
            try:
                payload = read_chunk(transfer.source_path, record)
            except FileNotFoundError:
                raise SourceMissing(f"source {transfer.source_path} disappeared")
            if not verify_chunk(payload, record):
                raise IntegrityFailure(f"{transfer.source_path} changed after its manifest was built (chunk {index})")
            with self.probe.sending(transfer.file_id, index):
                return self.client.put_chunk(token, upload_id, index, payload, record.digest.value)

        self._service(f"chunk {index} of {transfer.manifest.relative_path}", attempt)
        self._ack(transfer, index)

"""
The relay agent: staging volume to per-user storage.

``reconcile`` runs once at startup and turns the journal back into work.
Each cycle then scans the staging root, manifests newly stable files and
uploads queued transfers, at most ``max_active_files`` at a time.
Committed sources are moved to ``<staging>/.archived/<owner>/...``.
"""

import logging
import os
import shutil
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Set, Tuple

from mdx_relay.agent.client import StorageClient
from mdx_relay.agent.journal import Journal, TrackedTransfer
from mdx_relay.agent.scanner import StagedFile, StagingScanner
from mdx_relay.agent.session import TokenManager
from mdx_relay.agent.uploader import FileUploader, TransferProbe, UploadInterrupted
from mdx_relay.config import AgentSettings
from mdx_relay.core.errors import ConsistencyError, RelayError
from mdx_relay.core.manifest import build_manifest
from mdx_relay.core.models import DeviceCredential
from mdx_relay.core.retry import DEFAULT_RETRY, RetryPolicy
from mdx_relay.core.state import (
    Error,
    ManifestBuilt,
    StabilityConfirmed,
    TransferPhase,
    advance_state,
    initial_state,
)

logger = logging.getLogger(__name__)


@dataclass
class ReconcileResult:
    resumed: List[str] = field(default_factory=list)
    archived: List[str] = field(default_factory=list)
    failed: List[str] = field(default_factory=list)


@dataclass
class CycleResult:
    discovered: List[str] = field(default_factory=list)
    committed: List[str] = field(default_factory=list)
    failed: List[str] = field(default_factory=list)


class RelayAgent:
    """
    Data-transfer device emulation.

    Args:
        settings: Agent tunables
        credential: Device identity
        client: Storage service client
        probe: Optional chunk instrumentation
        retry: Backoff policy for service calls
        clock: Wall clock for the stability window
    """

    def __init__(
        self,
        settings: AgentSettings,
        credential: DeviceCredential,
        client: StorageClient,
        probe: Optional[TransferProbe] = None,
        retry: RetryPolicy = DEFAULT_RETRY,
        clock: Callable[[], float] = time.time,
    ):
        self.settings = settings
        self.credential = credential
        self.client = client
        self.stop_event = threading.Event()
        self.journal = Journal(settings.journal)
        self.tokens = TokenManager(client, credential)
        self.uploader = FileUploader(
            client,
            self.tokens,
            self.journal,
            parallelism=settings.parallelism,
            retry=retry,
            probe=probe,
            stop_event=self.stop_event,
        )
        self.scanner = StagingScanner(settings.staging_root, settings.stability_window, clock)
        self.transfers: Dict[str, TrackedTransfer] = {}
        self._reconciled = False
        self._skipped_owners: Set[str] = set()

    @property
    def probe(self) -> TransferProbe:
        return self.uploader.probe

    # -- startup --------------------------------------------------------

    def reconcile(self) -> ReconcileResult:
        """
        Rebuild in-flight work from the journal.

        Every unfinished transfer is queued for resumption when its source is
        still present (or no longer needed), otherwise marked Failed with
        source-missing and its service session cancelled. Committed sources
        still in staging are archived. The journal is compacted afterwards.

        Raises:
            JournalCorruptError: the journal is damaged before its final line
        """
        result = ReconcileResult()
        self.transfers = self.journal.replay()
        for transfer in self.transfers.values():
            phase = transfer.state.phase
            label = f"{transfer.manifest.owner}/{transfer.manifest.relative_path}"
            if phase is TransferPhase.COMMITTED:
                if not transfer.archived:
                    self._archive(transfer)
                    result.archived.append(label)
                continue
            if phase is TransferPhase.FAILED and not transfer.state.retryable:
                continue
            needs_source = phase is not TransferPhase.VERIFYING
            if needs_source and not Path(transfer.source_path).is_file():
                self._mark_source_missing(transfer)
                result.failed.append(label)
                continue
            result.resumed.append(label)

        self.journal.compact(self.transfers)
        self._reconciled = True
        logger.info(
            "Reconciled journal: %d resumed, %d archived, %d failed",
            len(result.resumed),
            len(result.archived),
            len(result.failed),
        )
        return result

    def _mark_source_missing(self, transfer: TrackedTransfer) -> None:
        message = f"SOURCE_MISSING: {transfer.source_path} is gone"
        if transfer.state.phase is TransferPhase.FAILED:
            transfer.state = transfer.state.model_copy(update={"last_error": message, "retryable": False})
        else:
            transfer.state = advance_state(transfer.state, Error(message, retryable=False))
        transfer.updated_at = time.time()
        self.journal.record(transfer)
        logger.warning("Source of %s disappeared; transfer failed", transfer.manifest.relative_path)

        upload_id = transfer.state.upload_id
        if upload_id:
            try:
                self.tokens.call(lambda token: self.client.cancel_upload(token, upload_id))
            except RelayError as exc:
                logger.warning("Could not cancel upload session %s: %s", upload_id, exc.message)

    # -- archive --------------------------------------------------------

    def _archive(self, transfer: TrackedTransfer) -> None:
        source = Path(transfer.source_path)
        if source.is_file():
            target = self.settings.archive_root.joinpath(
                transfer.manifest.owner, *transfer.manifest.relative_path.split("/")
            )
            if target.exists():
                suffix = transfer.receipt.object_id[:8] if transfer.receipt else transfer.file_id[:8]
                target = target.with_name(f"{target.name}.{suffix}")
            target.parent.mkdir(parents=True, exist_ok=True)
            shutil.move(str(source), str(target))
            logger.info("Archived %s to %s", source, target)
        transfer.archived = True
        transfer.updated_at = time.time()
        self.journal.record(transfer)

    # -- cycle ----------------------------------------------------------

    def _tracked_keys(self) -> Set[Tuple[str, str]]:
        return {t.key for t in self.transfers.values() if not t.archived}

    def discover(self) -> List[TrackedTransfer]:
        """Scan staging and manifest every newly stable file."""
        found: List[TrackedTransfer] = []
        for staged in self.scanner.scan(exclude=self._tracked_keys()).stable:
            if staged.owner not in self.credential.registered_users:
                if staged.owner not in self._skipped_owners:
                    logger.warning(
                        "Routing: %s is not registered on device %s; skipping its files",
                        staged.owner,
                        self.credential.device_id,
                    )
                    self._skipped_owners.add(staged.owner)
                continue
            transfer = self._manifest(staged)
            if transfer is not None:
                found.append(transfer)
        return found

    def _manifest(self, staged: StagedFile) -> Optional[TrackedTransfer]:
        try:
            manifest = build_manifest(
                staged.path,
                staged.owner,
                category=staged.category,
                chunk_size=self.settings.chunk_size,
                relative_path=staged.relative_path,
            )
        except FileNotFoundError:
            return None
        except ConsistencyError as exc:
            logger.info("Not yet stable: %s", exc.message)
            return None

        state = initial_state()
        state = advance_state(state, StabilityConfirmed())
        state = advance_state(state, ManifestBuilt(manifest.chunk_count))
        now = time.time()
        transfer = TrackedTransfer(
            file_id=manifest.file_id,
            manifest=manifest,
            source_path=os.fspath(staged.path),
            state=state,
            created_at=now,
            updated_at=now,
        )
        self.journal.record(transfer)
        self.transfers[transfer.file_id] = transfer
        logger.info(
            "Manifested %s/%s (%d bytes, %d chunks)",
            manifest.owner,
            manifest.relative_path,
            manifest.total_size,
            manifest.chunk_count,
        )
        return transfer

    def _queue(self) -> List[TrackedTransfer]:
        queue = []
        for transfer in self.transfers.values():
            state = transfer.state
            if state.phase in (TransferPhase.MANIFESTED, TransferPhase.UPLOADING, TransferPhase.VERIFYING):
                queue.append(transfer)
            elif (
                state.phase is TransferPhase.FAILED
                and state.retryable
                and state.attempt_count < self.settings.max_transfer_attempts
            ):
                queue.append(transfer)
        return sorted(queue, key=lambda t: t.created_at)

    def _upload(self, transfer: TrackedTransfer) -> bool:
        try:
            self.uploader.upload(transfer)
        except UploadInterrupted:
            logger.info("Upload of %s interrupted by shutdown", transfer.manifest.relative_path)
            return False
        except RelayError:
            return False
        self._archive(transfer)
        return True

    def run_once(self) -> CycleResult:
        """
        One scan-and-upload cycle.

        Returns:
            What was discovered, committed and failed in this cycle
        """
        if not self._reconciled:
            self.reconcile()
        result = CycleResult()
        result.discovered = [t.manifest.relative_path for t in self.discover()]
        queue = self._queue()
        if not queue or self.stop_event.is_set():
            return result

        with ThreadPoolExecutor(max_workers=self.settings.max_active_files, thread_name_prefix="file") as pool:
            outcomes = list(pool.map(self._upload, queue))
        for transfer, ok in zip(queue, outcomes):
            label = f"{transfer.manifest.owner}/{transfer.manifest.relative_path}"
            (result.committed if ok else result.failed).append(label)
        return result

    def run_forever(self) -> None:
        """Run cycles until ``stop()``; service outages are retried each cycle."""
        logger.info(
            "Agent %s watching %s (parallelism %d, window %.1fs)",
            self.credential.device_id,
            self.settings.staging_root,
            self.settings.parallelism,
            self.settings.stability_window,
        )
        if not self._reconciled:
            self.reconcile()
        while not self.stop_event.is_set():
            try:
                self.run_once()
            except RelayError as exc:
                logger.warning("Cycle failed, retrying in %.1fs: %s", self.settings.poll_interval, exc.message)
            except OSError as exc:
                logger.error("Cannot scan %s: %s", self.settings.staging_root, exc)
            self.stop_event.wait(self.settings.poll_interval)
        logger.info("Agent stopped; journal at %s", self.journal.path)

    def stop(self) -> None:
        self.stop_event.set()

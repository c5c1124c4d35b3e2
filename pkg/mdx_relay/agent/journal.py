"""
Append-only transfer journal.

Each line is one JSON ``JournalEntry``. A ``state`` entry is a full snapshot
of one transfer (manifest inline); an ``ack`` entry adds one acknowledged
chunk. Replaying the lines in order rebuilds every transfer. State entries are
fsynced; ack entries are flushed.

Only the final line may be damaged (an interrupted append). Replay drops it and
truncates the file back to the last good entry; damage anywhere earlier stops
the agent with ``JournalCorruptError``.
"""

import logging
import os
import threading
import time
from pathlib import Path
from typing import Dict, List, Literal, Optional, Union

from pydantic import BaseModel, Field, ValidationError

from mdx_relay.core.errors import JournalCorruptError
from mdx_relay.core.manifest import FileManifest
from mdx_relay.core.models import CommitReceipt
from mdx_relay.core.state import TransferPhase, TransferState

logger = logging.getLogger(__name__)


class JournalEntry(BaseModel):
    """One journal line."""

    kind: Literal["state", "ack"] = "state"
    file_id: str
    manifest: Optional[FileManifest] = None
    source_path: Optional[str] = None
    phase: Optional[TransferPhase] = None
    acked_chunks: List[int] = []
    upload_id: Optional[str] = None
    attempt_count: int = 0
    last_error: Optional[str] = None
    retryable: bool = True
    receipt: Optional[CommitReceipt] = None
    archived: bool = False
    created_at: Optional[float] = None
    updated_at: float = Field(default_factory=time.time)


class TrackedTransfer(BaseModel):
    """A transfer as rebuilt from the journal."""

    file_id: str
    manifest: FileManifest
    source_path: str
    state: TransferState
    receipt: Optional[CommitReceipt] = None
    archived: bool = False
    created_at: float
    updated_at: float

    @property
    def key(self):
        return (self.manifest.owner, self.manifest.relative_path)

    def snapshot(self) -> JournalEntry:
        return JournalEntry(
            kind="state",
            file_id=self.file_id,
            manifest=self.manifest,
            source_path=self.source_path,
            phase=self.state.phase,
            acked_chunks=sorted(self.state.acked_chunks),
            upload_id=self.state.upload_id,
            attempt_count=self.state.attempt_count,
            last_error=self.state.last_error,
            retryable=self.state.retryable,
            receipt=self.receipt,
            archived=self.archived,
            created_at=self.created_at,
            updated_at=self.updated_at,
        )


def _apply(transfers: Dict[str, TrackedTransfer], entry: JournalEntry) -> None:
    if entry.kind == "ack":
        current = transfers.get(entry.file_id)
        if current is None:
            raise ValueError(f"ack for unknown file {entry.file_id}")
        acked = current.state.acked_chunks | frozenset(entry.acked_chunks)
        transfers[entry.file_id] = current.model_copy(
            update={"state": current.state.model_copy(update={"acked_chunks": acked}), "updated_at": entry.updated_at}
        )
        return

    previous = transfers.get(entry.file_id)
    manifest = entry.manifest or (previous.manifest if previous else None)
    source = entry.source_path or (previous.source_path if previous else None)
    if manifest is None or source is None or entry.phase is None:
        raise ValueError(f"incomplete state entry for file {entry.file_id}")
    state = TransferState(
        phase=entry.phase,
        chunk_count=manifest.chunk_count,
        acked_chunks=frozenset(entry.acked_chunks),
        attempt_count=entry.attempt_count,
        last_error=entry.last_error,
        retryable=entry.retryable,
        upload_id=entry.upload_id,
    )
    transfers[entry.file_id] = TrackedTransfer(
        file_id=entry.file_id,
        manifest=manifest,
        source_path=source,
        state=state,
        receipt=entry.receipt,
        archived=entry.archived,
        created_at=entry.created_at or (previous.created_at if previous else entry.updated_at),
        updated_at=entry.updated_at,
    )


class Journal:
    """Single-writer journal file shared by every transfer of one agent."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self._lock = threading.Lock()

    def append(self, entry: JournalEntry, sync: Optional[bool] = None) -> None:
        """
        Append one entry.

        Args:
            entry: Entry to write
            sync: fsync after writing; defaults to True for state entries
        """
        if sync is None:
            sync = entry.kind == "state"
        line = (entry.model_dump_json(exclude_defaults=entry.kind == "ack") + "\n").encode("utf-8")
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("ab") as fh:
                fh.write(line)
                fh.flush()
                if sync:
                    os.fsync(fh.fileno())

    def record(self, transfer: TrackedTransfer) -> None:
        """Write a full snapshot of ``transfer``."""
        self.append(transfer.snapshot())

    def record_ack(self, file_id: str, index: int) -> None:
        self.append(JournalEntry(kind="ack", file_id=file_id, acked_chunks=[index]))

    def replay(self) -> Dict[str, TrackedTransfer]:
        """
        Rebuild every transfer from the journal.

        Returns:
            Transfers keyed by file id, empty when the journal does not exist

        Raises:
            JournalCorruptError: on a damaged entry before the final line
        """
        with self._lock:
            if not self.path.exists():
                return {}
            data = self.path.read_bytes()

            transfers: Dict[str, TrackedTransfer] = {}
            lines = data.split(b"\n")
            if lines and lines[-1] == b"":
                lines.pop()
            good_end = 0
            for number, raw in enumerate(lines, start=1):
                if raw.strip():
                    try:
                        _apply(transfers, JournalEntry.model_validate_json(raw))
                    except (ValidationError, ValueError) as exc:
                        if number < len(lines):
                            raise JournalCorruptError(
                                f"{self.path}:{number}: damaged journal entry; manual intervention needed",
                                detail={"line": number},
                            ) from exc
                        logger.warning("Discarding torn final journal line in %s (%d bytes)", self.path, len(raw))
                        break
                good_end += len(raw) + 1

            if good_end != len(data):
                # drop the torn tail, or terminate a complete final entry
                with self.path.open("r+b") as fh:
                    fh.truncate(min(good_end, len(data)))
                    if good_end > len(data):
                        fh.seek(0, os.SEEK_END)
                        fh.write(b"\n")
                    fh.flush()
                    os.fsync(fh.fileno())
            return transfers

    def compact(self, transfers: Dict[str, TrackedTransfer]) -> None:
        """
        Rewrite the journal as one snapshot per retained transfer.

        Committed transfers whose source has been archived are dropped.
        """
        keep = [t for t in transfers.values() if not (t.state.phase is TransferPhase.COMMITTED and t.archived)]
        payload = b"".join((t.snapshot().model_dump_json() + "\n").encode("utf-8") for t in keep)
        tmp = self.path.with_name(self.path.name + ".compact")
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with tmp.open("wb") as fh:
                fh.write(payload)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, self.path)
        logger.info("Compacted journal %s to %d entries", self.path, len(keep))

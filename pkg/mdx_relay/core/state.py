"""
Transfer lifecycle: resume planning and the per-file state machine.

Allowed edges::

    Discovered -> Stable -> Manifested -> Uploading -> {Verifying, Failed}
    Manifested -> Failed               (source gone before a session opened)
    Verifying  -> {Committed, Failed}
    Failed     -> Uploading            (retry, only when the failure is retryable)

Committed has no outgoing edges.
"""

from dataclasses import dataclass
from enum import Enum
from typing import AbstractSet, FrozenSet, List, Optional, Union

from pydantic import BaseModel, ConfigDict, Field

from mdx_relay.core.errors import ConsistencyError, StateMachineViolation
from mdx_relay.core.manifest import FileManifest


class TransferPhase(str, Enum):
    DISCOVERED = "Discovered"
    STABLE = "Stable"
    MANIFESTED = "Manifested"
    UPLOADING = "Uploading"
    VERIFYING = "Verifying"
    COMMITTED = "Committed"
    FAILED = "Failed"

    @property
    def rank(self) -> int:
        return _RANK[self]


_RANK = {phase: position for position, phase in enumerate(TransferPhase)}


class TransferState(BaseModel):
    """Lifecycle state of one file transfer."""

    model_config = ConfigDict(frozen=True)

    phase: TransferPhase = TransferPhase.DISCOVERED
    chunk_count: int = Field(default=0, ge=0)
    acked_chunks: FrozenSet[int] = frozenset()
    attempt_count: int = Field(default=0, ge=0)
    last_error: Optional[str] = None
    retryable: bool = True
    upload_id: Optional[str] = None

    @property
    def complete(self) -> bool:
        return len(self.acked_chunks) == self.chunk_count


@dataclass(frozen=True)
class StabilityConfirmed:
    pass


@dataclass(frozen=True)
class ManifestBuilt:
    chunk_count: int


@dataclass(frozen=True)
class UploadStarted:
    """A service upload session is open (first attempt or retry)."""

    upload_id: str
    reset_acks: bool = False


@dataclass(frozen=True)
class ChunkAcked:
    index: int


@dataclass(frozen=True)
class AllChunksAcked:
    pass


@dataclass(frozen=True)
class CommitConfirmed:
    pass


@dataclass(frozen=True)
class Error:
    message: str
    retryable: bool = True


TransferEvent = Union[
    StabilityConfirmed, ManifestBuilt, UploadStarted, ChunkAcked, AllChunksAcked, CommitConfirmed, Error
]


def plan_resume(manifest: FileManifest, acked: AbstractSet[int]) -> List[int]:
    """
    Return the chunk indices still to send, ascending.

    Args:
        manifest: Manifest of the file being transferred
        acked: Indices the service has confirmed

    Returns:
        The complement of ``acked`` within the manifest's indices

    Raises:
        ConsistencyError: if ``acked`` holds an index outside the manifest
    """
    out_of_range = sorted(i for i in acked if not 0 <= i < manifest.chunk_count)
    if out_of_range:
        raise ConsistencyError(
            f"acknowledged indices outside 0..{manifest.chunk_count - 1}: {out_of_range}",
            detail={"out_of_range": out_of_range},
        )
    return [i for i in range(manifest.chunk_count) if i not in acked]


def initial_state() -> TransferState:
    return TransferState()


def advance_state(state: TransferState, event: TransferEvent) -> TransferState:
    """
    Apply one event to a transfer state.

    Returns:
        The successor state

    Raises:
        StateMachineViolation: if the event is not allowed in the current phase
        ConsistencyError: if a chunk index is outside the manifest
    """
    phase = state.phase

    if isinstance(event, StabilityConfirmed) and phase is TransferPhase.DISCOVERED:
        return state.model_copy(update={"phase": TransferPhase.STABLE})

    if isinstance(event, ManifestBuilt) and phase is TransferPhase.STABLE:
        return state.model_copy(update={"phase": TransferPhase.MANIFESTED, "chunk_count": event.chunk_count})

    if isinstance(event, UploadStarted):
        if phase is TransferPhase.MANIFESTED:
            return state.model_copy(
                update={"phase": TransferPhase.UPLOADING, "upload_id": event.upload_id, "attempt_count": 1}
            )
        if phase is TransferPhase.FAILED and state.retryable:
            acked = frozenset() if event.reset_acks else state.acked_chunks
            return state.model_copy(
                update={
                    "phase": TransferPhase.UPLOADING,
                    "upload_id": event.upload_id,
                    "acked_chunks": acked,
                    "attempt_count": state.attempt_count + 1,
                    "last_error": None,
                }
            )

    if isinstance(event, ChunkAcked) and phase is TransferPhase.UPLOADING:
        if not 0 <= event.index < state.chunk_count:
            raise ConsistencyError(f"chunk index {event.index} outside 0..{state.chunk_count - 1}")
        return state.model_copy(update={"acked_chunks": state.acked_chunks | {event.index}})

    if isinstance(event, AllChunksAcked) and phase is TransferPhase.UPLOADING:
        if not state.complete:
            raise StateMachineViolation(
                phase,
                event,
                f"{state.chunk_count - len(state.acked_chunks)} chunks still pending",
            )
        return state.model_copy(update={"phase": TransferPhase.VERIFYING})

    if isinstance(event, CommitConfirmed) and phase is TransferPhase.VERIFYING:
        return state.model_copy(update={"phase": TransferPhase.COMMITTED})

    if isinstance(event, Error) and phase in (
        TransferPhase.MANIFESTED,
        TransferPhase.UPLOADING,
        TransferPhase.VERIFYING,
    ):
        return state.model_copy(
            update={"phase": TransferPhase.FAILED, "last_error": event.message, "retryable": event.retryable}
        )

    raise StateMachineViolation(phase, event)

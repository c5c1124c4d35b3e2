"""
Unit tests for the transfer state machine and resume planning.
"""

import random

import pytest

from mdx_relay.core.errors import ConsistencyError, StateMachineViolation
from mdx_relay.core.manifest import build_manifest
from mdx_relay.core.state import (
    AllChunksAcked,
    ChunkAcked,
    CommitConfirmed,
    Error,
    ManifestBuilt,
    StabilityConfirmed,
    TransferPhase,
    UploadStarted,
    advance_state,
    initial_state,
    plan_resume,
)

pytestmark = pytest.mark.unit


@pytest.fixture
def manifest(tmp_path):
    path = tmp_path / "ten-chunks.bin"
    path.write_bytes(b"q" * 100)
    return build_manifest(path, "alice", chunk_size=10)


def manifested(chunk_count: int = 10):
    state = advance_state(initial_state(), StabilityConfirmed())
    return advance_state(state, ManifestBuilt(chunk_count))


def test_plan_resume_is_complement(manifest):
    """Test that pending indices are exactly the unacknowledged ones, ascending."""
    assert plan_resume(manifest, {0, 1, 2, 5}) == [3, 4, 6, 7, 8, 9]
    assert plan_resume(manifest, set()) == list(range(10))
    assert plan_resume(manifest, set(range(10))) == []


def test_plan_resume_random_subsets(manifest):
    """Test the complement property over random acknowledged sets."""
    rng = random.Random(11)
    for _ in range(100):
        acked = {i for i in range(10) if rng.random() < 0.5}
        pending = plan_resume(manifest, acked)
        assert set(pending) | acked == set(range(10))
        assert not set(pending) & acked
        assert pending == sorted(pending)


def test_plan_resume_rejects_out_of_range(manifest):
    """Test that an index outside the manifest is an inconsistency."""
    with pytest.raises(ConsistencyError):
        plan_resume(manifest, {10})


def test_happy_path():
    """Test the full Discovered to Committed walk."""
    state = manifested(3)
    state = advance_state(state, UploadStarted("u1"))
    for index in (2, 0, 1):
        state = advance_state(state, ChunkAcked(index))
    state = advance_state(state, AllChunksAcked())
    state = advance_state(state, CommitConfirmed())

    assert state.phase is TransferPhase.COMMITTED
    assert state.acked_chunks == {0, 1, 2}
    assert state.upload_id == "u1"
    assert state.attempt_count == 1


def test_duplicate_ack_is_idempotent():
    """Test that acknowledging a chunk twice leaves one entry."""
    state = advance_state(manifested(3), UploadStarted("u1"))
    state = advance_state(state, ChunkAcked(1))
    again = advance_state(state, ChunkAcked(1))
    assert again.acked_chunks == state.acked_chunks == {1}


def test_all_chunks_acked_requires_every_chunk():
    """Test that Verifying cannot be entered with chunks pending."""
    state = advance_state(manifested(2), UploadStarted("u1"))
    state = advance_state(state, ChunkAcked(0))
    with pytest.raises(StateMachineViolation):
        advance_state(state, AllChunksAcked())


def test_committed_is_terminal():
    """Test that no event leaves Committed."""
    state = advance_state(manifested(0), UploadStarted("u1"))
    state = advance_state(advance_state(state, AllChunksAcked()), CommitConfirmed())
    for event in (Error("late"), UploadStarted("u2"), ChunkAcked(0), CommitConfirmed()):
        with pytest.raises(StateMachineViolation):
            advance_state(state, event)


def test_retryable_failure_can_restart():
    """Test the Failed to Uploading retry edge and its bookkeeping."""
    state = advance_state(manifested(4), UploadStarted("u1"))
    state = advance_state(state, ChunkAcked(0))
    failed = advance_state(state, Error("network down"))
    assert failed.phase is TransferPhase.FAILED
    assert failed.last_error == "network down"

    kept = advance_state(failed, UploadStarted("u1"))
    assert kept.acked_chunks == {0}
    assert kept.attempt_count == 2
    assert kept.last_error is None

    reset = advance_state(failed, UploadStarted("u2", reset_acks=True))
    assert reset.acked_chunks == frozenset()
    assert reset.upload_id == "u2"


def test_terminal_failure_refuses_retry():
    """Test that a non-retryable failure stays Failed."""
    failed = advance_state(manifested(1), Error("quota", retryable=False))
    with pytest.raises(StateMachineViolation):
        advance_state(failed, UploadStarted("u1"))


def test_ack_outside_manifest():
    """Test that an out-of-range ack is an inconsistency, not a state change."""
    state = advance_state(manifested(2), UploadStarted("u1"))
    with pytest.raises(ConsistencyError):
        advance_state(state, ChunkAcked(2))


def test_out_of_order_events_are_violations():
    """Test that skipping phases is refused."""
    with pytest.raises(StateMachineViolation):
        advance_state(initial_state(), ManifestBuilt(1))
    with pytest.raises(StateMachineViolation):
        advance_state(initial_state(), UploadStarted("u1"))
    with pytest.raises(StateMachineViolation):
        advance_state(manifested(1), CommitConfirmed())


def test_random_event_sequences_only_follow_allowed_edges():
    """Test that random event streams never produce a disallowed edge."""
    allowed = {
        (TransferPhase.DISCOVERED, TransferPhase.STABLE),
        (TransferPhase.STABLE, TransferPhase.MANIFESTED),
        (TransferPhase.MANIFESTED, TransferPhase.UPLOADING),
        (TransferPhase.MANIFESTED, TransferPhase.FAILED),
        (TransferPhase.UPLOADING, TransferPhase.VERIFYING),
        (TransferPhase.UPLOADING, TransferPhase.FAILED),
        (TransferPhase.VERIFYING, TransferPhase.COMMITTED),
        (TransferPhase.VERIFYING, TransferPhase.FAILED),
        (TransferPhase.FAILED, TransferPhase.UPLOADING),
    }
    rng = random.Random(7)
    events = [
        lambda: StabilityConfirmed(),
        lambda: ManifestBuilt(3),
        lambda: UploadStarted("u", reset_acks=rng.random() < 0.5),
        lambda: ChunkAcked(rng.randrange(3)),
        lambda: AllChunksAcked(),
        lambda: CommitConfirmed(),
        lambda: Error("e", retryable=rng.random() < 0.8),
    ]
    for _ in range(300):
        state = initial_state()
        for _ in range(20):
            try:
                successor = advance_state(state, rng.choice(events)())
            except StateMachineViolation:
                continue
            if successor.phase is not state.phase:
                assert (state.phase, successor.phase) in allowed
            state = successor

"""
Unit tests for the object store: sessions, chunk verification, commits,
versions, recovery and quotas.
"""

import random

import pytest

from mdx_relay.core.errors import (
    AuthorizationError,
    ChunkConflict,
    ChunkDigestMismatch,
    IntegrityFailure,
    ManifestValidationError,
    ObjectCorrupted,
    ObjectNotFound,
    ParameterError,
    QuotaExceeded,
    ServiceLocked,
    UploadIncomplete,
    UploadSessionError,
)
from mdx_relay.core.manifest import build_manifest, iter_chunks
from mdx_relay.service.quota import QuotaPolicy
from mdx_relay.service.store import DataRootLock, ObjectStore

pytestmark = pytest.mark.unit


@pytest.fixture
def source(tmp_path, make_file):
    path = tmp_path / "src" / "run.dat"
    data = make_file(path, 2500, seed=3)
    return path, data


def manifest_for(path, owner="alice", relative_path="exp/run.dat", chunk_size=1000):
    return build_manifest(path, owner, chunk_size=chunk_size, relative_path=relative_path)


def upload_all(store, grant, path, manifest):
    upload_id = store.init_upload(grant, manifest)
    for record, payload in iter_chunks(path, manifest):
        store.put_chunk(grant, upload_id, record.index, payload, record.digest.value)
    return upload_id


def read_object(store, grant, owner, relative_path):
    obj, fh = store.get_object(grant, owner, relative_path)
    with fh:
        return obj, fh.read()


def test_upload_and_read_back(store, grant, source):
    """Test that a complete upload commits and reads back byte-identical."""
    path, data = source
    manifest = manifest_for(path)
    upload_id = upload_all(store, grant, path, manifest)

    receipt = store.complete_upload(grant, upload_id)
    obj, body = read_object(store, grant, "alice", "exp/run.dat")

    assert receipt.whole_digest == manifest.whole_digest
    assert body == data
    assert obj.object_id == receipt.object_id
    assert (store.root / "alice" / "exp" / "run.dat").read_bytes() == data


def test_chunk_verification(store, grant, source):
    """Test that bad payloads are rejected and never acknowledged."""
    path, _ = source
    manifest = manifest_for(path)
    upload_id = store.init_upload(grant, manifest)
    chunks = list(iter_chunks(path, manifest))
    record, payload = chunks[0]

    with pytest.raises(ChunkDigestMismatch):
        store.put_chunk(grant, upload_id, 0, b"\xff" + payload[1:])
    with pytest.raises(ChunkDigestMismatch):
        store.put_chunk(grant, upload_id, 0, payload, "0" * 64)
    with pytest.raises(ParameterError):
        store.put_chunk(grant, upload_id, 99, payload)
    assert store.upload_status(grant, upload_id).acked == []

    store.put_chunk(grant, upload_id, 0, payload)
    # same bytes again: idempotent
    assert store.put_chunk(grant, upload_id, 0, payload).index == 0
    assert store.upload_status(grant, upload_id).acked == [0]
    assert store.upload_status(grant, upload_id).pending == [1, 2]


def test_conflicting_reput_is_refused(store, grant, tmp_path, make_file):
    """Test that an acked index cannot be replaced with different bytes."""
    path = tmp_path / "same.dat"
    make_file(path, 20, seed=1)
    manifest = manifest_for(path, chunk_size=10)
    upload_id = store.init_upload(grant, manifest)
    first, second = (payload for _, payload in iter_chunks(path, manifest))
    store.put_chunk(grant, upload_id, 0, first)

    # a different payload that happens to be the right length
    with pytest.raises(ChunkConflict):
        store.put_chunk(grant, upload_id, 0, second)


def test_complete_with_pending_chunks(store, grant, source):
    """Test that completion lists the missing chunks."""
    path, _ = source
    manifest = manifest_for(path)
    upload_id = store.init_upload(grant, manifest)
    record, payload = next(iter_chunks(path, manifest))
    store.put_chunk(grant, upload_id, record.index, payload)

    with pytest.raises(UploadIncomplete) as excinfo:
        store.complete_upload(grant, upload_id)
    assert excinfo.value.detail == {"pending": [1, 2]}
    assert store.lookup("alice", "exp/run.dat") is None


def test_complete_is_idempotent(store, grant, source):
    """Test that a repeated completion returns the same receipt and one ledger entry."""
    path, _ = source
    manifest = manifest_for(path)
    upload_id = upload_all(store, grant, path, manifest)

    first = store.complete_upload(grant, upload_id)
    second = store.complete_upload(grant, upload_id)

    assert first == second
    assert len(store.ledger.read()) == 1


def test_reinit_returns_open_session(store, grant, source):
    """Test that init_upload is idempotent per file_id."""
    path, _ = source
    manifest = manifest_for(path)
    assert store.init_upload(grant, manifest) == store.init_upload(grant, manifest)


def test_whole_digest_mismatch_voids_session(store, grant, tmp_path, make_file):
    """Test that a manifest whose whole digest lies fails integrity and releases quota."""
    path = tmp_path / "f.dat"
    make_file(path, 30, seed=2)
    manifest = manifest_for(path, chunk_size=10)
    other = tmp_path / "g.dat"
    make_file(other, 30, seed=9)
    lying = manifest.model_copy(update={"whole_digest": manifest_for(other, chunk_size=10).whole_digest})
    upload_id = upload_all(store, grant, path, lying)

    with pytest.raises(IntegrityFailure):
        store.complete_upload(grant, upload_id)

    assert store.lookup("alice", "exp/run.dat") is None
    assert store.quota.usage("alice")["reserved"] == 0
    with pytest.raises(UploadSessionError):
        store.upload_status(grant, upload_id)


def test_owner_must_be_registered(store, grant, source):
    """Test that a device cannot upload for users it does not serve."""
    path, _ = source
    with pytest.raises(AuthorizationError):
        store.init_upload(grant, manifest_for(path, owner="carol"))


def test_invalid_manifest(store, grant, source):
    """Test that invariant violations are reported by name."""
    path, _ = source
    manifest = manifest_for(path)
    broken = manifest.model_copy(update={"total_size": manifest.total_size + 1})

    with pytest.raises(ManifestValidationError) as excinfo:
        store.init_upload(grant, broken)
    assert "chunk_sum" in {v["invariant"] for v in excinfo.value.detail}


def test_zero_byte_file(store, grant, tmp_path):
    """Test that an empty file commits without any chunk upload."""
    path = tmp_path / "empty"
    path.write_bytes(b"")
    manifest = manifest_for(path, relative_path="empty")
    upload_id = store.init_upload(grant, manifest)

    receipt = store.complete_upload(grant, upload_id)
    _, body = read_object(store, grant, "alice", "empty")

    assert body == b""
    assert receipt.whole_digest.value == manifest.whole_digest.value


def test_new_version_supersedes(store, grant, tmp_path, make_file):
    """Test that a second commit at the same path keeps the previous version."""
    path = tmp_path / "v.dat"
    make_file(path, 100, seed=1)
    first = store.complete_upload(grant, upload_all(store, grant, path, manifest_for(path)))
    make_file(path, 120, seed=2)
    second = store.complete_upload(grant, upload_all(store, grant, path, manifest_for(path)))

    assert first.object_id != second.object_id
    assert (store.versions / "alice" / "exp" / "run.dat" / first.object_id).exists()
    assert store.lookup("alice", "exp/run.dat").object_id == second.object_id


def test_cross_user_read_is_not_found(store, authority, grant, other_credential, source):
    """Test that another user's object is indistinguishable from a missing one."""
    path, _ = source
    store.complete_upload(grant, upload_all(store, grant, path, manifest_for(path)))
    token = authority.issue_token(other_credential.device_id, other_credential.device_secret)
    carol = authority.validate(token.token.get_secret_value())

    with pytest.raises(ObjectNotFound) as cross:
        store.get_object(carol, "alice", "exp/run.dat")
    with pytest.raises(ObjectNotFound) as missing:
        store.get_object(grant, "alice", "exp/nothing.dat")
    assert type(cross.value) is type(missing.value)


def test_corrupted_object_is_detected(store, grant, source):
    """Test that reads re-verify the stored bytes."""
    path, _ = source
    store.complete_upload(grant, upload_all(store, grant, path, manifest_for(path)))
    (store.root / "alice" / "exp" / "run.dat").write_bytes(b"bitrot")

    with pytest.raises(ObjectCorrupted):
        store.get_object(grant, "alice", "exp/run.dat")


def test_restart_recovers_sessions_and_objects(data_root, grant, source):
    """Test that objects and half-done sessions survive a service restart."""
    path, data = source
    store = ObjectStore(data_root)
    committed = manifest_for(path, relative_path="done.dat")
    store.complete_upload(grant, upload_all(store, grant, path, committed))
    partial = manifest_for(path, relative_path="half.dat")
    upload_id = store.init_upload(grant, partial)
    record, payload = next(iter_chunks(path, partial))
    store.put_chunk(grant, upload_id, 0, payload)
    # a torn chunk write left behind
    (store.spool / upload_id / "chunks" / "00000001.tmp").write_bytes(b"junk")

    restarted = ObjectStore(data_root)

    assert read_object(restarted, grant, "alice", "done.dat")[1] == data
    assert restarted.upload_status(grant, upload_id).acked == [0]
    usage = restarted.quota.usage("alice")
    assert (usage["reserved"], usage["committed"]) == (len(data), len(data))


def test_hard_quota(data_root, grant, source):
    """Test that reservations beyond the hard limit are refused and released on cancel."""
    path, data = source
    store = ObjectStore(data_root, quota=QuotaPolicy(per_user_limit=len(data) + 10))
    upload_id = store.init_upload(grant, manifest_for(path, relative_path="a.dat"))

    with pytest.raises(QuotaExceeded):
        store.init_upload(grant, manifest_for(path, relative_path="b.dat"))

    store.cancel_upload(grant, upload_id)
    assert store.init_upload(grant, manifest_for(path, relative_path="b.dat"))


def test_soft_quota_only_warns(data_root, grant, source, caplog):
    """Test that a soft quota admits the upload and logs a warning."""
    path, _ = source
    store = ObjectStore(data_root, quota=QuotaPolicy(per_user_limit=10, hard=False))

    assert store.init_upload(grant, manifest_for(path))
    assert "Soft quota exceeded" in caplog.text


def test_concurrent_reservations_respect_hard_quota(data_root, grant, tmp_path, make_file):
    """Test that racing sessions never reserve past the limit."""
    from concurrent.futures import ThreadPoolExecutor

    size = 100
    rng = random.Random(5)
    for trial in range(5):
        limit = rng.randint(1, 10) * size + rng.randint(0, size - 1)
        store = ObjectStore(data_root / str(trial), quota=QuotaPolicy(per_user_limit=limit))
        manifests = []
        for n in range(12):
            path = tmp_path / f"t{trial}-{n}.dat"
            make_file(path, size, seed=n)
            manifests.append(manifest_for(path, relative_path=f"q/{n}.dat"))

        def attempt(manifest):
            try:
                store.init_upload(grant, manifest)
                return True
            except QuotaExceeded:
                return False

        with ThreadPoolExecutor(max_workers=8) as pool:
            admitted = sum(pool.map(attempt, manifests))

        assert admitted == min(12, limit // size)
        assert store.quota.usage("alice")["reserved"] <= limit


def test_data_root_lock(data_root):
    """Test that a second instance cannot own the same data root."""
    with DataRootLock(data_root):
        with pytest.raises(ServiceLocked):
            DataRootLock(data_root).acquire()
    DataRootLock(data_root).acquire().release()


class ProcessKilled(BaseException):
    """Stands in for the service dying mid-call."""


def test_commit_interrupted_before_ledger_entry(data_root, grant, source, mocker):
    """Test that a commit killed after placing the bytes is redone on retry."""
    path, data = source
    store = ObjectStore(data_root)
    upload_id = upload_all(store, grant, path, manifest_for(path))
    mocker.patch.object(store.ledger, "append", side_effect=ProcessKilled())

    with pytest.raises(ProcessKilled):
        store.complete_upload(grant, upload_id)

    restarted = ObjectStore(data_root)
    assert restarted.lookup("alice", "exp/run.dat") is None
    receipt = restarted.complete_upload(grant, upload_id)
    obj, body = read_object(restarted, grant, "alice", "exp/run.dat")
    assert body == data
    assert obj.object_id == receipt.object_id
    assert len(restarted.ledger.read()) == 1


def test_failed_placement_is_retried_after_restart(data_root, grant, source, mocker):
    """Test that a commit whose file move failed leaves a readable object after a retry."""
    path, data = source
    store = ObjectStore(data_root)
    upload_id = upload_all(store, grant, path, manifest_for(path))
    mocker.patch("mdx_relay.service.store.os.replace", side_effect=OSError("device busy"))

    with pytest.raises(OSError):
        store.complete_upload(grant, upload_id)
    mocker.stopall()

    restarted = ObjectStore(data_root)
    receipt = restarted.complete_upload(grant, upload_id)
    assert read_object(restarted, grant, "alice", "exp/run.dat")[1] == data
    assert receipt.whole_digest == manifest_for(path).whole_digest


def test_interrupted_supersede_restores_previous_version(data_root, grant, tmp_path, make_file, mocker):
    """Test that a new version killed before its ledger entry leaves the old version live."""
    path = tmp_path / "v.dat"
    old = make_file(path, 100, seed=1)
    store = ObjectStore(data_root)
    first = store.complete_upload(grant, upload_all(store, grant, path, manifest_for(path)))
    new = make_file(path, 120, seed=2)
    upload_id = upload_all(store, grant, path, manifest_for(path))
    mocker.patch.object(store.ledger, "append", side_effect=ProcessKilled())

    with pytest.raises(ProcessKilled):
        store.complete_upload(grant, upload_id)

    restarted = ObjectStore(data_root)
    obj, body = read_object(restarted, grant, "alice", "exp/run.dat")
    assert (obj.object_id, body) == (first.object_id, old)
    assert not (restarted.versions / "alice" / "exp" / "run.dat" / first.object_id).exists()

    second = restarted.complete_upload(grant, upload_id)
    assert read_object(restarted, grant, "alice", "exp/run.dat")[1] == new
    assert (restarted.versions / "alice" / "exp" / "run.dat" / first.object_id).read_bytes() == old
    assert second.object_id != first.object_id


def test_ledger_failure_rolls_back_placement(store, grant, tmp_path, make_file, mocker):
    """Test that a failed ledger write keeps the previous version readable."""
    path = tmp_path / "v.dat"
    old = make_file(path, 100, seed=1)
    first = store.complete_upload(grant, upload_all(store, grant, path, manifest_for(path)))
    make_file(path, 120, seed=2)
    upload_id = upload_all(store, grant, path, manifest_for(path))
    mocker.patch.object(store.ledger, "append", side_effect=OSError("disk full"))

    with pytest.raises(OSError):
        store.complete_upload(grant, upload_id)

    obj, body = read_object(store, grant, "alice", "exp/run.dat")
    assert (obj.object_id, body) == (first.object_id, old)


def test_restart_after_torn_ledger_tail(data_root, grant, tmp_path, make_file):
    """Test that a torn ledger line does not stop later commits or restarts."""
    store = ObjectStore(data_root)
    one = tmp_path / "one.dat"
    make_file(one, 300, seed=1)
    store.complete_upload(grant, upload_all(store, grant, one, manifest_for(one, relative_path="one.dat")))
    with store.ledger.path.open("ab") as fh:
        fh.write(b'{"object_id": "torn')

    restarted = ObjectStore(data_root)
    two = tmp_path / "two.dat"
    make_file(two, 300, seed=2)
    restarted.complete_upload(grant, upload_all(restarted, grant, two, manifest_for(two, relative_path="two.dat")))

    again = ObjectStore(data_root)
    assert [e.relative_path for e in again.ledger.read()] == ["one.dat", "two.dat"]
    assert again.quota.usage("alice")["committed"] == 600


def test_chunk_bit_flips_are_rejected(store, grant, tmp_path, make_file):
    """Test that a single flipped bit anywhere in a chunk is refused."""
    path = tmp_path / "bits.dat"
    make_file(path, 4096, seed=11)
    manifest = manifest_for(path, chunk_size=1024)
    upload_id = store.init_upload(grant, manifest)
    rng = random.Random(4242)

    for record, payload in iter_chunks(path, manifest):
        for _ in range(25):
            position = rng.randrange(len(payload))
            damaged = bytearray(payload)
            damaged[position] ^= 1 << rng.randrange(8)
            with pytest.raises(ChunkDigestMismatch):
                store.put_chunk(grant, upload_id, record.index, bytes(damaged))

    assert store.upload_status(grant, upload_id).acked == []

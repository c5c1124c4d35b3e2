"""
Per-user object store with chunked, verified uploads.

Layout under the data root::

    <owner>/<relative_path>                      current version of each object
    .versions/<owner>/<relative_path>/<id>       superseded versions
    .spool/<upload_id>/manifest.json             open or completed sessions
    .spool/<upload_id>/session.json
    .spool/<upload_id>/chunks/<index>
    .spool/<upload_id>/receipt.json              present once committed
    .ledger                                      append-only commit log
    .lock                                        single-writer lock

The object index and committed usage are rebuilt from the ledger at startup;
open sessions are rebuilt from the spool.
"""

import fcntl
import hashlib
import json
import logging
import os
import secrets
import shutil
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Callable, Dict, Optional, Tuple, Union

from pydantic import BaseModel, Field

from mdx_relay.core.digest import ContentDigest
from mdx_relay.core.errors import (
    AuthorizationError,
    ChunkConflict,
    ChunkDigestMismatch,
    IntegrityFailure,
    ManifestValidationError,
    ObjectCorrupted,
    ObjectNotFound,
    ParameterError,
    ServiceLocked,
    UploadIncomplete,
    UploadSessionError,
)
from mdx_relay.core.manifest import Category, FileManifest, manifest_violations, safe_relative_parts, verify_chunk
from mdx_relay.core.models import ChunkAck, CommitReceipt, UploadStatus
from mdx_relay.core.state import plan_resume
from mdx_relay.service.auth import TokenGrant
from mdx_relay.service.ledger import CommitEvent, UsageLedger
from mdx_relay.service.quota import QuotaLedger, QuotaPolicy

logger = logging.getLogger(__name__)

_COPY_BLOCK = 1024 * 1024


class StoredObject(BaseModel):
    """A committed, verified object version."""

    object_id: str
    owner: str
    relative_path: str
    category: Category = Category.UNCATEGORIZED
    total_size: int = Field(ge=0)
    whole_digest: ContentDigest
    committed_at: float


@dataclass
class UploadSession:
    upload_id: str
    manifest: FileManifest
    device_id: str
    directory: Path
    acked: Dict[int, str] = field(default_factory=dict)
    receipt: Optional[CommitReceipt] = None
    lock: threading.Lock = field(default_factory=threading.Lock)

    @property
    def chunk_dir(self) -> Path:
        return self.directory / "chunks"

    def chunk_path(self, index: int) -> Path:
        return self.chunk_dir / f"{index:08d}"


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(f".{path.name}.{secrets.token_hex(4)}.tmp")
    with tmp.open("wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


class DataRootLock:
    """Exclusive advisory lock so only one service instance owns a data root."""

    def __init__(self, data_root: Union[str, Path]):
        self.path = Path(data_root) / ".lock"
        self._fh: Optional[IO] = None

    def acquire(self) -> "DataRootLock":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fh = self.path.open("a+")
        try:
            fcntl.flock(fh.fileno(), fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError as exc:
            fh.close()
            raise ServiceLocked(f"data root {self.path.parent} is in use by another instance") from exc
        fh.seek(0)
        fh.truncate()
        fh.write(str(os.getpid()))
        fh.flush()
        self._fh = fh
        return self

    def release(self) -> None:
        if self._fh is not None:
            fcntl.flock(self._fh.fileno(), fcntl.LOCK_UN)
            self._fh.close()
            self._fh = None

    def __enter__(self) -> "DataRootLock":
        return self.acquire()

    def __exit__(self, *exc) -> None:
        self.release()


class ObjectStore:
    """
    Storage service core: sessions, chunks, commits, reads and quotas.

    All methods are safe to call from concurrent request threads. Session
    state is serialized per session, quota through the reservation counter,
    and commits per (owner, relative_path).
    """

    def __init__(
        self,
        data_root: Union[str, Path],
        quota: QuotaPolicy = QuotaPolicy(),
        clock: Callable[[], float] = time.time,
    ):
        self.root = Path(data_root)
        self.spool = self.root / ".spool"
        self.versions = self.root / ".versions"
        self.ledger = UsageLedger(self.root / ".ledger")
        self.quota = QuotaLedger(quota)
        self.clock = clock

        self._objects: Dict[Tuple[str, str], StoredObject] = {}
        self._sessions: Dict[str, UploadSession] = {}
        self._sessions_by_file: Dict[str, str] = {}
        self._path_locks: Dict[Tuple[str, str], threading.Lock] = {}
        self._lock = threading.RLock()

        self.spool.mkdir(parents=True, exist_ok=True)
        self._recover()

    # -- recovery -------------------------------------------------------

    def _recover(self) -> None:
        for event in self.ledger.read(repair=True):
            self._objects[(event.owner, event.relative_path)] = StoredObject(
                object_id=event.object_id,
                owner=event.owner,
                relative_path=event.relative_path,
                category=event.category,
                total_size=event.size,
                whole_digest=event.whole_digest,
                committed_at=event.committed_at,
            )
            self.quota.add_committed(event.owner, event.size)

        # a live object with an archived copy was being superseded when the process died
        for obj in self._objects.values():
            archived = self._version_path(obj)
            if archived.is_file():
                logger.warning("Restoring %s/%s from an interrupted commit", obj.owner, obj.relative_path)
                target = self.object_path(obj.owner, obj.relative_path)
                target.parent.mkdir(parents=True, exist_ok=True)
                os.replace(archived, target)

        reopened = 0
        for directory in sorted(p for p in self.spool.iterdir() if p.is_dir()):
            try:
                session = self._load_session(directory)
            except (OSError, ValueError) as exc:
                logger.warning("Discarding unreadable spool entry %s: %s", directory.name, exc)
                shutil.rmtree(directory, ignore_errors=True)
                continue
            self._sessions[session.upload_id] = session
            self._sessions_by_file[session.manifest.file_id] = session.upload_id
            if session.receipt is None:
                # reopened sessions keep their reservation even past a lowered limit
                self.quota.reserve(session.manifest.owner, session.manifest.total_size, force=True)
                reopened += 1
        logger.info("Recovered %d objects and %d open upload sessions", len(self._objects), reopened)

    def _load_session(self, directory: Path) -> UploadSession:
        manifest = FileManifest.from_canonical_json((directory / "manifest.json").read_bytes())
        info = json.loads((directory / "session.json").read_text(encoding="utf-8"))
        session = UploadSession(
            upload_id=directory.name,
            manifest=manifest,
            device_id=info["device_id"],
            directory=directory,
        )
        receipt_path = directory / "receipt.json"
        if receipt_path.exists():
            session.receipt = CommitReceipt.model_validate_json(receipt_path.read_bytes())
            session.acked = {c.index: c.digest.value for c in manifest.chunks}
            return session
        for tmp in directory.rglob("*.tmp"):
            tmp.unlink(missing_ok=True)
        for record in manifest.chunks:
            path = session.chunk_path(record.index)
            if path.exists() and verify_chunk(path.read_bytes(), record):
                session.acked[record.index] = record.digest.value
        return session

    # -- sessions -------------------------------------------------------

    def _session_for(self, grant: TokenGrant, upload_id: str) -> UploadSession:
        with self._lock:
            session = self._sessions.get(upload_id)
        if session is None or session.device_id != grant.device_id:
            raise UploadSessionError(f"unknown upload session {upload_id}")
        return session

    def init_upload(self, grant: TokenGrant, manifest: FileManifest) -> str:
        """
        Open an upload session and reserve quota for the file.

        Re-initializing the same file (same file_id and manifest) from the
        same device returns the session that is already open.

        Args:
            grant: Resolved bearer token
            manifest: Manifest of the file to upload

        Returns:
            The upload id

        Raises:
            AuthorizationError: if the device may not route for the owner
            ManifestValidationError: if the manifest violates an invariant
            QuotaExceeded: if the reservation would exceed a hard quota
        """
        if not grant.may_act_for(manifest.owner):
            raise AuthorizationError(f"device {grant.device_id} is not registered for user {manifest.owner}")
        violations = manifest_violations(manifest)
        if violations:
            raise ManifestValidationError(violations)

        with self._lock:
            existing_id = self._sessions_by_file.get(manifest.file_id)
            if existing_id is not None:
                existing = self._sessions[existing_id]
                if existing.device_id == grant.device_id and existing.manifest == manifest:
                    return existing_id
                raise ParameterError(f"file_id {manifest.file_id} is already used by another upload")

            self.quota.reserve(manifest.owner, manifest.total_size)
            upload_id = secrets.token_hex(16)
            directory = self.spool / upload_id
            try:
                (directory / "chunks").mkdir(parents=True)
                _atomic_write(directory / "manifest.json", manifest.to_canonical_json().encode("utf-8"))
                _atomic_write(
                    directory / "session.json",
                    json.dumps({"device_id": grant.device_id, "created_at": self.clock()}).encode("utf-8"),
                )
            except OSError:
                self.quota.release(manifest.owner, manifest.total_size)
                shutil.rmtree(directory, ignore_errors=True)
                raise
            session = UploadSession(upload_id, manifest, grant.device_id, directory)
            self._sessions[upload_id] = session
            self._sessions_by_file[manifest.file_id] = upload_id

        logger.info(
            "Opened upload %s for %s/%s (%d bytes, %d chunks)",
            upload_id,
            manifest.owner,
            manifest.relative_path,
            manifest.total_size,
            manifest.chunk_count,
        )
        return upload_id

    def put_chunk(
        self,
        grant: TokenGrant,
        upload_id: str,
        index: int,
        payload: bytes,
        claimed_digest: Optional[str] = None,
    ) -> ChunkAck:
        """
        Store one chunk after verifying it against the manifest.

        Returns:
            Acknowledgment with index and digest; repeated puts of the same
            bytes are acknowledged again without rewriting

        Raises:
            UploadSessionError: unknown session
            ParameterError: index outside the manifest
            ChunkConflict: index already acknowledged with other content
            ChunkDigestMismatch: payload does not match the chunk record
        """
        session = self._session_for(grant, upload_id)
        manifest = session.manifest
        if not 0 <= index < manifest.chunk_count:
            raise ParameterError(f"chunk index {index} outside 0..{manifest.chunk_count - 1}")
        record = manifest.chunks[index]
        digest = hashlib.sha256(payload).hexdigest()

        with session.lock:
            acked = session.acked.get(index)
            completed = session.receipt is not None
        if acked is not None:
            if acked != digest:
                raise ChunkConflict(f"chunk {index} was already acknowledged with different content")
            return ChunkAck(index=index, digest=digest)
        if completed:
            raise UploadSessionError(f"upload {upload_id} is already committed")

        if claimed_digest is not None and claimed_digest.lower() != digest:
            raise ChunkDigestMismatch(
                f"chunk {index} payload does not match its declared digest",
                detail={"index": index, "declared": claimed_digest, "actual": digest},
            )
        if not verify_chunk(payload, record):
            raise ChunkDigestMismatch(
                f"chunk {index} does not match the manifest",
                detail={"index": index, "expected": record.digest.value, "actual": digest, "length": len(payload)},
            )

        _atomic_write(session.chunk_path(index), payload)
        with session.lock:
            session.acked[index] = digest
        return ChunkAck(index=index, digest=digest)

    def upload_status(self, grant: TokenGrant, upload_id: str) -> UploadStatus:
        session = self._session_for(grant, upload_id)
        with session.lock:
            acked = set(session.acked)
        return UploadStatus(
            upload_id=upload_id,
            file_id=session.manifest.file_id,
            owner=session.manifest.owner,
            relative_path=session.manifest.relative_path,
            acked=sorted(acked),
            pending=plan_resume(session.manifest, acked),
            completed=session.receipt is not None,
        )

    def cancel_upload(self, grant: TokenGrant, upload_id: str) -> None:
        """Drop an open session and release its reservation; committed sessions are kept."""
        session = self._session_for(grant, upload_id)
        if session.receipt is not None:
            return
        self._void(session)
        logger.info("Cancelled upload %s", upload_id)

    def _void(self, session: UploadSession) -> None:
        with self._lock:
            if self._sessions.pop(session.upload_id, None) is None:
                return
            self._sessions_by_file.pop(session.manifest.file_id, None)
        self.quota.release(session.manifest.owner, session.manifest.total_size)
        shutil.rmtree(session.directory, ignore_errors=True)

    def _path_lock(self, key: Tuple[str, str]) -> threading.Lock:
        with self._lock:
            return self._path_locks.setdefault(key, threading.Lock())

    # -- commit ---------------------------------------------------------

    def complete_upload(self, grant: TokenGrant, upload_id: str) -> CommitReceipt:
        """
        Reassemble, verify and atomically publish an upload.

        Returns:
            Commit receipt; repeated calls return the same receipt

        Raises:
            UploadIncomplete: chunks still pending (listed in ``detail``)
            IntegrityFailure: reassembled bytes do not match the whole digest;
                the session is voided and its reservation released
        """
        session = self._session_for(grant, upload_id)
        manifest = session.manifest
        key = (manifest.owner, manifest.relative_path)

        with self._path_lock(key):
            if session.receipt is not None:
                return session.receipt
            with session.lock:
                pending = plan_resume(manifest, set(session.acked))
            if pending:
                raise UploadIncomplete(
                    f"{len(pending)} chunks pending for upload {upload_id}",
                    detail={"pending": pending},
                )

            assembled = session.directory / "assembled.tmp"
            whole = hashlib.sha256()
            with assembled.open("wb") as out:
                for record in manifest.chunks:
                    with session.chunk_path(record.index).open("rb") as chunk:
                        for block in iter(lambda: chunk.read(_COPY_BLOCK), b""):
                            whole.update(block)
                            out.write(block)
                out.flush()
                os.fsync(out.fileno())

            if whole.hexdigest() != manifest.whole_digest.value:
                self._void(session)
                logger.error("Integrity failure on upload %s (%s/%s)", upload_id, *key)
                raise IntegrityFailure(
                    "reassembled file does not match the manifest whole digest",
                    detail={"expected": manifest.whole_digest.value, "actual": whole.hexdigest()},
                )

            receipt = self._publish(session, assembled)
            _atomic_write(session.directory / "receipt.json", receipt.model_dump_json().encode("utf-8"))
            shutil.rmtree(session.chunk_dir, ignore_errors=True)
            assembled.unlink(missing_ok=True)
            session.receipt = receipt
        return receipt

    def _publish(self, session: UploadSession, assembled: Path) -> CommitReceipt:
        manifest = session.manifest
        key = (manifest.owner, manifest.relative_path)
        target = self.object_path(*key)

        with self._lock:
            current = self._objects.get(key)
        if current is not None and current.whole_digest == manifest.whole_digest:
            self.quota.release(manifest.owner, manifest.total_size)
            logger.info("Upload %s matches committed object %s; no new version", session.upload_id, current.object_id)
            return self._receipt(current)

        obj = StoredObject(
            object_id=secrets.token_hex(16),
            owner=manifest.owner,
            relative_path=manifest.relative_path,
            category=manifest.category,
            total_size=manifest.total_size,
            whole_digest=manifest.whole_digest,
            committed_at=self.clock(),
        )
        # bytes are in place before the ledger names them; the ledger line is the commit point
        target.parent.mkdir(parents=True, exist_ok=True)
        archived: Optional[Path] = None
        with self._lock:
            if current is not None and target.exists():
                archived = self._version_path(current)
                archived.parent.mkdir(parents=True, exist_ok=True)
                os.replace(target, archived)
            os.replace(assembled, target)
            try:
                self.ledger.append(
                    CommitEvent(
                        object_id=obj.object_id,
                        owner=obj.owner,
                        relative_path=obj.relative_path,
                        category=obj.category,
                        size=obj.total_size,
                        whole_digest=obj.whole_digest,
                        committed_at=obj.committed_at,
                    )
                )
            except Exception:
                if archived is not None:
                    os.replace(archived, target)
                else:
                    target.unlink(missing_ok=True)
                raise
            self._objects[key] = obj
        self.quota.commit(manifest.owner, manifest.total_size)
        logger.info(
            "Committed %s/%s as %s (%d bytes)", obj.owner, obj.relative_path, obj.object_id, obj.total_size
        )
        return self._receipt(obj)

    @staticmethod
    def _receipt(obj: StoredObject) -> CommitReceipt:
        return CommitReceipt(
            object_id=obj.object_id,
            whole_digest=obj.whole_digest,
            owner=obj.owner,
            relative_path=obj.relative_path,
            committed_at=obj.committed_at,
        )

    # -- reads ----------------------------------------------------------

    def object_path(self, owner: str, relative_path: str) -> Path:
        return self.root.joinpath(owner, *safe_relative_parts(relative_path))

    def _version_path(self, obj: StoredObject) -> Path:
        return self.versions.joinpath(obj.owner, *safe_relative_parts(obj.relative_path), obj.object_id)

    def get_object(self, grant: TokenGrant, owner: str, relative_path: str) -> Tuple[StoredObject, IO[bytes]]:
        """
        Open a committed object for reading, after re-verifying its digest.

        Cross-user requests get the same not-found answer as missing paths.

        Returns:
            The object record and a binary file handle positioned at 0;
            the caller closes the handle

        Raises:
            ObjectNotFound: unknown path, uncommitted path, or another user's namespace
            ObjectCorrupted: stored bytes no longer match the digest
        """
        if not grant.may_act_for(owner):
            raise ObjectNotFound(f"no object at {owner}/{relative_path}")
        try:
            path = self.object_path(owner, relative_path)
        except ParameterError:
            raise ObjectNotFound(f"no object at {owner}/{relative_path}")

        with self._lock:
            obj = self._objects.get((owner, relative_path))
            if obj is None:
                raise ObjectNotFound(f"no object at {owner}/{relative_path}")
            try:
                fh = path.open("rb")
            except FileNotFoundError:
                raise ObjectCorrupted(f"object {obj.object_id} is missing from disk")

        hasher = hashlib.sha256()
        for block in iter(lambda: fh.read(_COPY_BLOCK), b""):
            hasher.update(block)
        if hasher.hexdigest() != obj.whole_digest.value:
            fh.close()
            logger.error("Object %s failed digest re-verification", obj.object_id)
            raise ObjectCorrupted(f"object {obj.object_id} failed digest verification")
        fh.seek(0)
        return obj, fh

    def lookup(self, owner: str, relative_path: str) -> Optional[StoredObject]:
        with self._lock:
            return self._objects.get((owner, relative_path))

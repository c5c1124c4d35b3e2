"""
File manifests: the unit of automatic transfer.

A manifest splits a file into fixed-size chunks, each with its own digest,
plus a digest of the whole file. Its canonical JSON serialization is the wire
format between agent and service and the journal format on the agent.
"""

import hashlib
import math
import os
import re
import secrets
from enum import Enum
from pathlib import Path, PurePosixPath
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field

from mdx_relay.core.digest import ContentDigest
from mdx_relay.core.errors import ConsistencyError, ParameterError

MiB = 1024 * 1024
DEFAULT_CHUNK_SIZE = 8 * MiB

_OWNER_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._@-]{0,127}$")
_FILE_ID_RE = re.compile(r"^[0-9a-f]{32}$")


class Category(str, Enum):
    """Data category, the experimental / theoretical split of usage reports."""

    EXPERIMENTAL = "experimental"
    THEORETICAL = "theoretical"
    UNCATEGORIZED = "uncategorized"

    @classmethod
    def fold(cls, value: Any) -> "Category":
        """Map any value onto a category, unknown ones to ``uncategorized``."""
        try:
            return cls(value)
        except ValueError:
            return cls.UNCATEGORIZED


class ChunkRecord(BaseModel):
    """One chunk of a file: position, length and digest."""

    model_config = ConfigDict(frozen=True)

    index: int = Field(ge=0)
    offset: int = Field(ge=0)
    length: int = Field(ge=0)
    digest: ContentDigest


class FileManifest(BaseModel):
    """Canonical description of one transferable file."""

    model_config = ConfigDict(frozen=True)

    file_id: str
    owner: str
    relative_path: str
    category: Category = Category.UNCATEGORIZED
    total_size: int = Field(ge=0)
    chunk_size: int = Field(ge=1)
    chunks: Tuple[ChunkRecord, ...] = ()
    whole_digest: ContentDigest

    @property
    def chunk_count(self) -> int:
        return len(self.chunks)

    def to_canonical_json(self) -> str:
        """Serialize with the field order of the type definition and hex digests."""
        return self.model_dump_json()

    @classmethod
    def from_canonical_json(cls, data: Union[str, bytes]) -> "FileManifest":
        return cls.model_validate_json(data)


def new_file_id() -> str:
    """Return a 128-bit random identifier as 32 hex characters."""
    return secrets.token_hex(16)


def is_valid_owner(owner: str) -> bool:
    return bool(_OWNER_RE.match(owner or ""))


def safe_relative_parts(relative_path: str) -> Tuple[str, ...]:
    """
    Split a manifest path into safe POSIX components.

    Raises:
        ParameterError: if the path is empty, absolute or escapes its namespace
    """
    if not relative_path or "\\" in relative_path or "\x00" in relative_path:
        raise ParameterError(f"invalid relative path {relative_path!r}")
    posix = PurePosixPath(relative_path)
    if posix.is_absolute():
        raise ParameterError(f"relative path must not be absolute: {relative_path!r}")
    if any(part in {"", ".", ".."} for part in relative_path.split("/")):
        raise ParameterError(f"relative path is not safe: {relative_path!r}")
    if posix.parts[0].startswith("."):
        raise ParameterError(f"relative path must not start with a dot component: {relative_path!r}")
    return posix.parts


def build_manifest(
    path: Union[str, Path],
    owner: str,
    category: Union[Category, str] = Category.UNCATEGORIZED,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    relative_path: Optional[str] = None,
) -> FileManifest:
    """
    Build the manifest of a file.

    Args:
        path: Readable regular file
        owner: User id owning the file
        category: Data category
        chunk_size: Bytes per chunk, at least 1
        relative_path: Path within the owner's namespace (defaults to the file name)

    Returns:
        A manifest satisfying every FileManifest invariant

    Raises:
        ParameterError: if chunk_size is below 1
        OSError: if the file cannot be read
        ConsistencyError: if the file changed while it was being read
    """
    if chunk_size < 1:
        raise ParameterError("chunk_size must be at least 1 byte")

    path = Path(path)
    before = os.stat(path)
    whole = hashlib.sha256()
    chunks: List[ChunkRecord] = []
    offset = 0
    with path.open("rb") as fh:
        while True:
            payload = fh.read(chunk_size)
            if not payload:
                break
            whole.update(payload)
            chunks.append(
                ChunkRecord(
                    index=len(chunks),
                    offset=offset,
                    length=len(payload),
                    digest=ContentDigest.of_bytes(payload),
                )
            )
            offset += len(payload)
    after = os.stat(path)
    if offset != after.st_size or (before.st_size, before.st_mtime_ns) != (after.st_size, after.st_mtime_ns):
        raise ConsistencyError(f"{path} changed while its manifest was being built")

    return FileManifest(
        file_id=new_file_id(),
        owner=owner,
        relative_path=relative_path or path.name,
        category=Category(category),
        total_size=offset,
        chunk_size=chunk_size,
        chunks=tuple(chunks),
        whole_digest=ContentDigest(value=whole.hexdigest()),
    )


def verify_chunk(payload: bytes, record: ChunkRecord) -> bool:
    """Return True iff the payload has the record's length and digest."""
    if len(payload) != record.length:
        return False
    return hashlib.sha256(payload).hexdigest() == record.digest.value


def read_chunk(path: Union[str, Path], record: ChunkRecord) -> bytes:
    """Read the bytes of one chunk from the source file."""
    with Path(path).open("rb") as fh:
        fh.seek(record.offset)
        return fh.read(record.length)


def iter_chunks(path: Union[str, Path], manifest: FileManifest) -> Iterator[Tuple[ChunkRecord, bytes]]:
    """Yield every chunk record with its payload, in index order."""
    with Path(path).open("rb") as fh:
        for record in manifest.chunks:
            fh.seek(record.offset)
            yield record, fh.read(record.length)


def manifest_violations(manifest: FileManifest) -> List[Dict[str, str]]:
    """
    List the invariants a manifest violates.

    The whole-digest check against payloads needs the bytes and happens at
    commit time; everything checkable from the manifest alone is checked here.

    Returns:
        One ``{"invariant", "message"}`` entry per violation, empty when valid
    """
    violations: List[Dict[str, str]] = []

    def violated(invariant: str, message: str) -> None:
        violations.append({"invariant": invariant, "message": message})

    if not is_valid_owner(manifest.owner):
        violated("owner", f"owner {manifest.owner!r} is not a valid user id")
    try:
        safe_relative_parts(manifest.relative_path)
    except ParameterError as exc:
        violated("path", exc.message)
    if not _FILE_ID_RE.match(manifest.file_id):
        violated("file_id", "file_id must be 32 lowercase hex characters")

    expected_count = math.ceil(manifest.total_size / manifest.chunk_size)
    if manifest.chunk_count != expected_count:
        violated(
            "chunk_count",
            f"expected {expected_count} chunks for {manifest.total_size} bytes, got {manifest.chunk_count}",
        )

    total = sum(c.length for c in manifest.chunks)
    if total != manifest.total_size:
        violated("chunk_sum", f"chunk lengths sum to {total}, total_size is {manifest.total_size}")

    bad_offsets = [
        c.index
        for position, c in enumerate(manifest.chunks)
        if c.index != position or c.offset != position * manifest.chunk_size
    ]
    if bad_offsets:
        violated("chunk_offsets", f"chunks out of order or misplaced: {bad_offsets}")

    last = manifest.chunk_count - 1
    bad_lengths = [
        c.index
        for position, c in enumerate(manifest.chunks)
        if not (1 <= c.length <= manifest.chunk_size) or (position != last and c.length != manifest.chunk_size)
    ]
    if bad_lengths:
        violated("chunk_lengths", f"chunks with invalid length: {bad_lengths}")

    return violations

"""
Content digests.

SHA-256 only for now; the ``algorithm`` field exists so the wire format can
grow other algorithms later. On the wire a digest is its lowercase hex value.
"""

import hashlib
import re
from pathlib import Path
from typing import Any, Union

from pydantic import BaseModel, ConfigDict, field_validator, model_serializer, model_validator

SHA256 = "sha256"
_HEX64 = re.compile(r"^[0-9a-f]{64}$")
_READ_SIZE = 1024 * 1024

EMPTY_SHA256 = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"


class ContentDigest(BaseModel):
    """A SHA-256 digest rendered as 64 lowercase hex characters."""

    model_config = ConfigDict(frozen=True)

    algorithm: str = SHA256
    value: str

    @model_validator(mode="before")
    @classmethod
    def _from_hex(cls, data: Any) -> Any:
        if isinstance(data, str):
            return {"algorithm": SHA256, "value": data}
        return data

    @field_validator("algorithm")
    @classmethod
    def _known_algorithm(cls, value: str) -> str:
        if value != SHA256:
            raise ValueError(f"unsupported digest algorithm {value!r}")
        return value

    @field_validator("value")
    @classmethod
    def _hex64(cls, value: str) -> str:
        if not _HEX64.match(value):
            raise ValueError("digest must be 64 lowercase hex characters")
        return value

    @model_serializer(mode="plain")
    def _to_hex(self) -> str:
        return self.value

    @classmethod
    def of_bytes(cls, data: bytes) -> "ContentDigest":
        """Digest a byte string."""
        return cls(value=hashlib.sha256(data).hexdigest())

    def __str__(self) -> str:
        return self.value


def is_hex_digest(value: str) -> bool:
    """Return True if ``value`` is a well-formed lowercase SHA-256 hex digest."""
    return bool(_HEX64.match(value or ""))


def digest_file(path: Union[str, Path], read_size: int = _READ_SIZE) -> ContentDigest:
    """
    Digest a whole file in one streaming pass.

    Args:
        path: File to read
        read_size: Bytes per read call

    Returns:
        Digest of the file's bytes
    """
    hasher = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for block in iter(lambda: fh.read(read_size), b""):
            hasher.update(block)
    return ContentDigest(value=hasher.hexdigest())

"""
Wire models shared by the relay agent and the storage service.
"""

import json
import time
from pathlib import Path
from typing import List, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, SecretStr, ValidationError

from mdx_relay.core.digest import ContentDigest
from mdx_relay.core.errors import ConfigError


class DeviceCredential(BaseModel):
    """Identity of a data-transfer device and the users it may route for."""

    model_config = ConfigDict(frozen=True)

    device_id: str = Field(min_length=1)
    device_secret: SecretStr
    registered_users: List[str] = []

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DeviceCredential":
        """
        Load a credential file ``{device_id, device_secret, registered_users}``.

        Raises:
            FileNotFoundError: if the file does not exist
            ConfigError: if the file is not a valid credential
        """
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        try:
            return cls.model_validate(json.loads(text))
        except (ValueError, ValidationError) as exc:
            raise ConfigError(f"invalid credential file {path}: {exc}") from exc


class SessionToken(BaseModel):
    """Bearer token issued to a device."""

    model_config = ConfigDict(frozen=True)

    token: SecretStr
    expires_at: float
    device_id: str = ""
    issued_at: float = Field(default_factory=time.time)

    def expired(self, now: Optional[float] = None) -> bool:
        return (now if now is not None else time.time()) >= self.expires_at

    def refresh_due(self, fraction: float = 0.8, now: Optional[float] = None) -> bool:
        """True once ``fraction`` of the token lifetime has elapsed."""
        now = now if now is not None else time.time()
        lifetime = self.expires_at - self.issued_at
        return now >= self.issued_at + fraction * lifetime


class ChunkAck(BaseModel):
    index: int
    digest: ContentDigest


class CommitReceipt(BaseModel):
    """Proof that a file was reassembled, verified and made visible."""

    object_id: str
    whole_digest: ContentDigest
    owner: str = ""
    relative_path: str = ""
    committed_at: float = 0.0


class UploadStatus(BaseModel):
    upload_id: str
    file_id: str
    owner: str
    relative_path: str
    acked: List[int]
    pending: List[int]
    completed: bool = False

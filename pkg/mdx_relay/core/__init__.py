"""
Shared model of mdx-relay: digests, manifests and the transfer state machine.
"""

from mdx_relay.core.digest import ContentDigest
from mdx_relay.core.errors import RelayError
from mdx_relay.core.manifest import Category, ChunkRecord, FileManifest, build_manifest
from mdx_relay.core.state import TransferPhase, TransferState, advance_state, plan_resume

__all__ = [
    "Category",
    "ChunkRecord",
    "ContentDigest",
    "FileManifest",
    "RelayError",
    "TransferPhase",
    "TransferState",
    "advance_state",
    "build_manifest",
    "plan_resume",
]

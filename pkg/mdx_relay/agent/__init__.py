"""
Relay agent: staging scanner, transfer journal and resumable uploader.
"""

from mdx_relay.agent.client import StorageClient
from mdx_relay.agent.daemon import RelayAgent
from mdx_relay.agent.journal import Journal, TrackedTransfer
from mdx_relay.agent.uploader import FileUploader

__all__ = [
    "FileUploader",
    "Journal",
    "RelayAgent",
    "StorageClient",
    "TrackedTransfer",
]

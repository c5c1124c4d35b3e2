"""
mdx-relay: facility data relay with per-user authenticated storage.

Data-transfer devices watch a staging volume, split stable files into
digested chunks and upload them in parallel, resumably, to a storage
service that verifies every chunk and the reassembled whole before the
object becomes visible. A network harness emulates the paths between
facilities and storage to measure latency and throughput.
"""

__version__ = "0.1.0"

from mdx_relay.agent.daemon import RelayAgent
from mdx_relay.api.app import create_app, run_app
from mdx_relay.core.manifest import FileManifest, build_manifest
from mdx_relay.core.state import TransferPhase, TransferState, advance_state, plan_resume
from mdx_relay.service.store import ObjectStore

__all__ = [
    "FileManifest",
    "ObjectStore",
    "RelayAgent",
    "TransferPhase",
    "TransferState",
    "advance_state",
    "build_manifest",
    "create_app",
    "plan_resume",
    "run_app",
]

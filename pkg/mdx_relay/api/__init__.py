"""
HTTP API of the storage service.
"""

from mdx_relay.api.app import create_app, run_app

__all__ = [
    "create_app",
    "run_app",
]

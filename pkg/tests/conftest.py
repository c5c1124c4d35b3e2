"""
Pytest configuration file for mdx-relay tests.

This module provides fixtures shared by the unit and integration tests: a
device credential, an object store on a temporary data root, a token
authority on a controllable clock, and the API wired to both.
"""

import os
import random
import time
from pathlib import Path
from typing import Optional

import pytest
from fastapi.testclient import TestClient

from mdx_relay.agent.client import StorageClient
from mdx_relay.api.app import create_app
from mdx_relay.config import AgentSettings
from mdx_relay.core.models import DeviceCredential
from mdx_relay.service.auth import DeviceRegistry, TokenAuthority
from mdx_relay.service.store import ObjectStore


class FakeClock:
    """Manually advanced clock, callable like ``time.time``."""

    def __init__(self, now: Optional[float] = None):
        # starts at real time so agent-side token clocks agree with the service
        self.now = time.time() if now is None else now

    def __call__(self) -> float:
        return self.now

    def advance(self, seconds: float) -> None:
        self.now += seconds


@pytest.fixture
def clock():
    return FakeClock()


@pytest.fixture
def credential():
    """Device registered for alice and bob."""
    return DeviceCredential(
        device_id="dtd-01",
        device_secret="a3f1c0ffee5ecret",
        registered_users=["alice", "bob"],
    )


@pytest.fixture
def other_credential():
    """Device registered for carol only."""
    return DeviceCredential(device_id="dtd-02", device_secret="b7e2ba5eba11", registered_users=["carol"])


@pytest.fixture
def registry(credential, other_credential):
    return DeviceRegistry([credential, other_credential])


@pytest.fixture
def authority(registry, clock):
    return TokenAuthority(registry, ttl=3600, clock=clock)


@pytest.fixture
def data_root(tmp_path):
    return tmp_path / "data"


@pytest.fixture
def store(data_root):
    return ObjectStore(data_root)


@pytest.fixture
def grant(authority, credential):
    """Resolved token grant for the alice/bob device."""
    token = authority.issue_token(credential.device_id, credential.device_secret)
    return authority.validate(token.token.get_secret_value())


@pytest.fixture
def app(store, authority, registry):
    return create_app(store, authority, registry)


@pytest.fixture
def test_client(app):
    """Fixture for a FastAPI test client."""
    return TestClient(app)


@pytest.fixture
def storage_client(test_client):
    """Agent-side client talking to the in-process API."""
    return StorageClient(http=test_client)


@pytest.fixture
def staging(tmp_path):
    root = tmp_path / "staging"
    root.mkdir()
    return root


@pytest.fixture
def agent_settings(staging):
    """Small chunks and no stability wait so tests run quickly."""
    return AgentSettings(
        staging_root=staging,
        chunk_size=1024,
        parallelism=2,
        stability_window=0,
        poll_interval=0.05,
    )


@pytest.fixture
def make_file():
    """Write random (seeded) bytes to a path and return them."""

    def _make(path: Path, size: int, seed: int = 0) -> bytes:
        data = random.Random(seed).randbytes(size) if size else b""
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        # backdate so the file is stable immediately
        stamp = path.stat().st_mtime - 60
        os.utime(path, (stamp, stamp))
        return data

    return _make

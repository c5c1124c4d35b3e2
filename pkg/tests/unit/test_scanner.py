"""
Unit tests for the staging scanner.
"""

import os

import pytest

from mdx_relay.agent.scanner import StagingScanner, scan_staging
from mdx_relay.core.manifest import Category

pytestmark = pytest.mark.unit


def touch(path, data=b"data", mtime=None):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    if mtime is not None:
        os.utime(path, (mtime, mtime))


def test_file_becomes_stable_after_window(staging, clock):
    """Test that a file is reported only once it has been quiet for the window."""
    touch(staging / "alice" / "run1.dat", mtime=clock.now)
    scanner = StagingScanner(staging, stability_window=5.0, clock=clock)

    assert scanner.scan().stable == []
    clock.advance(4.9)
    assert scanner.scan().stable == []
    clock.advance(0.2)
    stable = scanner.scan().stable

    assert [(f.owner, f.relative_path) for f in stable] == [("alice", "run1.dat")]


def test_growing_file_restarts_window(staging, clock):
    """Test that a change in size restarts the stability window."""
    path = staging / "alice" / "growing.dat"
    touch(path, b"a", mtime=clock.now - 100)
    scanner = StagingScanner(staging, stability_window=5.0, clock=clock)
    assert len(scanner.scan().stable) == 1

    # the copy is still being written: same mtime, bigger size
    touch(path, b"ab", mtime=clock.now - 100)
    assert scanner.scan().stable == []
    clock.advance(5.0)
    assert len(scanner.scan().stable) == 1


def test_nested_paths_and_categories(staging, clock):
    """Test relative paths below the user directory and category routing."""
    touch(staging / "bob" / "experimental" / "xrd" / "scan.h5", mtime=clock.now - 60)
    touch(staging / "bob" / "theoretical" / "dft.out", mtime=clock.now - 60)
    touch(staging / "bob" / "notes.txt", mtime=clock.now - 60)

    found = {f.relative_path: f for f in StagingScanner(staging, 5.0, clock).scan().stable}

    assert set(found) == {"experimental/xrd/scan.h5", "theoretical/dft.out", "notes.txt"}
    assert found["experimental/xrd/scan.h5"].category is Category.EXPERIMENTAL
    assert found["theoretical/dft.out"].category is Category.THEORETICAL
    assert found["notes.txt"].category is Category.UNCATEGORIZED


def test_hidden_and_root_level_entries(staging, clock, caplog):
    """Test that dot entries are skipped and root-level files produce one routing warning."""
    touch(staging / "stray.dat", mtime=clock.now - 60)
    touch(staging / ".relay" / "journal.jsonl", mtime=clock.now - 60)
    touch(staging / "alice" / ".partial", mtime=clock.now - 60)
    touch(staging / "not a user" / "x", mtime=clock.now - 60)
    scanner = StagingScanner(staging, 5.0, clock)

    first = scanner.scan()
    second = scanner.scan()

    assert first.stable == []
    assert len(first.routing_warnings) == 2
    assert second.routing_warnings == first.routing_warnings
    # logged once, not once per scan
    assert sum("stray.dat" in r.getMessage() for r in caplog.records) == 1


def test_symlinks_are_ignored(staging, clock, tmp_path):
    """Test that symlinks inside a user directory are not followed."""
    target = tmp_path / "outside.dat"
    touch(target, mtime=clock.now - 60)
    (staging / "alice").mkdir()
    (staging / "alice" / "link.dat").symlink_to(target)

    assert StagingScanner(staging, 5.0, clock).scan().stable == []


@pytest.mark.skipif(not hasattr(os, "mkfifo"), reason="needs named pipes")
def test_special_files_are_ignored(staging, clock):
    """Test that a named pipe in a user directory is skipped without being opened."""
    touch(staging / "alice" / "run.dat", mtime=clock.now - 60)
    os.mkfifo(staging / "alice" / "pipe")
    clock.advance(60)

    stable = StagingScanner(staging, 5.0, clock).scan().stable

    assert [f.relative_path for f in stable] == ["run.dat"]


def test_exclude_tracked_keys(staging, clock):
    """Test that files already in the journal are not reported again."""
    touch(staging / "alice" / "a.dat", mtime=clock.now - 60)
    touch(staging / "alice" / "b.dat", mtime=clock.now - 60)

    stable = StagingScanner(staging, 5.0, clock).scan(exclude={("alice", "a.dat")}).stable

    assert [f.relative_path for f in stable] == ["b.dat"]


def test_scan_staging_one_shot(staging, clock):
    """Test the one-shot helper, which judges stability by mtime alone."""
    touch(staging / "alice" / "old.dat", mtime=clock.now - 60)
    touch(staging / "alice" / "new.dat", mtime=clock.now)

    found = scan_staging(staging, 5.0, clock=clock)

    assert found == [("alice", staging / "alice" / "old.dat")]

"""
Staging volume scanner.

The staging root holds one directory per user; files copied below a user
directory are routed to that user's namespace. A file is picked up once its
size and modification time have been quiet for the stability window. The
root is polled; there is no filesystem event watching.
"""

import logging
import os
import stat
import time
from dataclasses import dataclass
from pathlib import Path
from typing import AbstractSet, Callable, Dict, List, Optional, Tuple, Union

from mdx_relay.core.manifest import Category, is_valid_owner

logger = logging.getLogger(__name__)

DEFAULT_STABILITY_WINDOW = 5.0

Signature = Tuple[int, int]


@dataclass(frozen=True)
class StagedFile:
    owner: str
    path: Path
    relative_path: str
    size: int
    mtime: float

    @property
    def key(self) -> Tuple[str, str]:
        return (self.owner, self.relative_path)

    @property
    def category(self) -> Category:
        """``<user>/experimental/...`` and ``<user>/theoretical/...`` carry their category."""
        return Category.fold(self.relative_path.split("/", 1)[0])


@dataclass
class ScanResult:
    stable: List[StagedFile]
    routing_warnings: List[str]


class StagingScanner:
    """
    Polling scanner that remembers when it first saw each file signature.

    Args:
        root: Staging root
        stability_window: Seconds a file must stay unchanged
        clock: Wall clock (injectable for tests)
    """

    def __init__(
        self,
        root: Union[str, Path],
        stability_window: float = DEFAULT_STABILITY_WINDOW,
        clock: Callable[[], float] = time.time,
    ):
        self.root = Path(root)
        self.stability_window = stability_window
        self.clock = clock
        self._seen: Dict[Path, Tuple[Signature, float]] = {}  # path -> (signature, quiet since)
        self._warned: set = set()

    def scan(self, exclude: AbstractSet[Tuple[str, str]] = frozenset()) -> ScanResult:
        """
        Walk the staging root once.

        Args:
            exclude: ``(owner, relative_path)`` keys the journal already tracks

        Returns:
            Stable files not excluded, and routing warnings for files outside
            any user directory

        Raises:
            OSError: if the root cannot be listed
        """
        now = self.clock()
        stable: List[StagedFile] = []
        warnings: List[str] = []
        present = set()

        for entry in sorted(os.scandir(self.root), key=lambda e: e.name):
            if entry.name.startswith("."):
                continue
            if entry.is_file(follow_symlinks=False):
                warnings.append(f"{entry.name}: file at staging root belongs to no user directory")
                continue
            if not entry.is_dir(follow_symlinks=False):
                continue
            owner = entry.name
            if not is_valid_owner(owner):
                warnings.append(f"{owner}: directory name is not a valid user id")
                continue
            for path in self._walk(Path(entry.path)):
                try:
                    st = path.lstat()
                except FileNotFoundError:
                    continue
                # regular files only; links and special files are never opened
                if not stat.S_ISREG(st.st_mode):
                    continue
                present.add(path)
                relative = path.relative_to(entry.path).as_posix()
                signature = (st.st_size, st.st_mtime_ns)
                previous = self._seen.get(path)
                if previous is None:
                    quiet_since = st.st_mtime
                elif previous[0] != signature:
                    quiet_since = now
                else:
                    quiet_since = previous[1]
                self._seen[path] = (signature, quiet_since)
                if (owner, relative) in exclude:
                    continue
                if now - max(st.st_mtime, quiet_since) < self.stability_window:
                    continue
                stable.append(StagedFile(owner, path, relative, st.st_size, st.st_mtime))

        for gone in set(self._seen) - present:
            del self._seen[gone]
        for warning in warnings:
            if warning not in self._warned:
                logger.warning("Routing: %s", warning)
                self._warned.add(warning)
        return ScanResult(stable, warnings)

    @staticmethod
    def _walk(user_dir: Path):
        for dirpath, dirnames, filenames in os.walk(user_dir):
            dirnames[:] = sorted(d for d in dirnames if not d.startswith("."))
            for name in sorted(filenames):
                if name.startswith("."):
                    continue
                yield Path(dirpath) / name


def scan_staging(
    root: Union[str, Path],
    stability_window: float = DEFAULT_STABILITY_WINDOW,
    exclude: AbstractSet[Tuple[str, str]] = frozenset(),
    clock: Optional[Callable[[], float]] = None,
) -> List[Tuple[str, Path]]:
    """
    One-shot scan: ``(owner, path)`` of every stable file under ``root``.

    Without earlier observations, stability is judged by modification time alone.
    """
    scanner = StagingScanner(root, stability_window, clock or time.time)
    return [(f.owner, f.path) for f in scanner.scan(exclude).stable]

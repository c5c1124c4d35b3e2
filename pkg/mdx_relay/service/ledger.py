"""
Append-only usage ledger and the reports derived from it.

Each commit appends one JSON line. Reports are never stored; they are folded
from the ledger on demand so they can be recomputed and audited.
"""

import json
import logging
import os
import threading
from collections import defaultdict
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple, Union

from pydantic import BaseModel, Field, ValidationError, field_validator

from mdx_relay.core.digest import ContentDigest
from mdx_relay.core.manifest import Category
from mdx_relay.service.auth import Organization

logger = logging.getLogger(__name__)


class CommitEvent(BaseModel):
    """One committed object version."""

    object_id: str
    owner: str
    relative_path: str
    category: Category = Category.UNCATEGORIZED
    size: int = Field(ge=0)
    whole_digest: ContentDigest
    committed_at: float

    @field_validator("category", mode="before")
    @classmethod
    def _fold_category(cls, value):
        return Category.fold(value)


class Period(BaseModel):
    start: Optional[float] = None
    end: Optional[float] = None

    def contains(self, ts: float) -> bool:
        return (self.start is None or ts >= self.start) and (self.end is None or ts < self.end)


def _zero_by_category() -> Dict[str, int]:
    return {c.value: 0 for c in Category}


class UsageReport(BaseModel):
    """Aggregated counts and volumes, in the shape of the annual usage table."""

    period: Period = Period()
    user_count: int = 0
    org_count: Optional[int] = None
    users_by_sector: Optional[Dict[str, int]] = None
    total_volume: int = 0
    volume_by_category: Dict[str, int] = Field(default_factory=_zero_by_category)
    volume_by_user: Dict[str, int] = {}
    file_count_total: int = 0
    file_count_by_category: Dict[str, int] = Field(default_factory=_zero_by_category)


class UsageLedger:
    """Line-delimited JSON log of commit events."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self._lock = threading.Lock()

    def append(self, event: CommitEvent) -> None:
        """Append one event and fsync it."""
        line = event.model_dump_json() + "\n"
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("ab") as fh:
                fh.write(line.encode("utf-8"))
                fh.flush()
                os.fsync(fh.fileno())

    def read(self, missing_ok: bool = True, repair: bool = False) -> List[CommitEvent]:
        """
        Read every event.

        A torn final line (interrupted append) is skipped with a warning;
        damage anywhere else is an error. With ``repair`` the file is also
        cut back to its last complete entry, so later appends start on a
        clean line. Only the process that owns the ledger may repair it.

        Raises:
            OSError: if the file cannot be read
            ValueError: on a malformed line before the last one
        """
        if missing_ok and not self.path.exists():
            return []
        with self._lock:
            data = self.path.read_bytes()
            lines = data.split(b"\n")
            if lines and lines[-1] == b"":
                lines.pop()
            events: List[CommitEvent] = []
            good_end = 0
            for number, raw in enumerate(lines, start=1):
                if raw.strip():
                    try:
                        events.append(CommitEvent.model_validate_json(raw))
                    except ValidationError as exc:
                        if number < len(lines):
                            raise ValueError(f"{self.path}:{number}: malformed ledger entry") from exc
                        logger.warning("Skipping torn final ledger line in %s (%d bytes)", self.path, len(raw))
                        break
                good_end += len(raw) + 1

            if repair and good_end != len(data):
                with self.path.open("r+b") as fh:
                    fh.truncate(min(good_end, len(data)))
                    if good_end > len(data):
                        fh.seek(0, os.SEEK_END)
                        fh.write(b"\n")
                    fh.flush()
                    os.fsync(fh.fileno())
        return events


def aggregate_stats(
    events: Iterable[CommitEvent],
    period: Optional[Period] = None,
    organizations: Optional[Mapping[str, Organization]] = None,
) -> UsageReport:
    """
    Fold commit events into a usage report.

    Args:
        events: Ledger events, in any order
        period: Half-open time window ``[start, end)``; unbounded when omitted
        organizations: Optional user to organization map

    Returns:
        Report whose per-category and per-user figures add up to its totals
    """
    period = period or Period()
    report = UsageReport(period=period)
    users = set()
    for event in events:
        if not period.contains(event.committed_at):
            continue
        category = Category.fold(event.category).value
        users.add(event.owner)
        report.total_volume += event.size
        report.volume_by_category[category] += event.size
        report.volume_by_user[event.owner] = report.volume_by_user.get(event.owner, 0) + event.size
        report.file_count_total += 1
        report.file_count_by_category[category] += 1

    report.user_count = len(users)
    if organizations:
        known = [organizations[u] for u in users if u in organizations]
        report.org_count = len({o.org for o in known})
        if any(o.sector for o in known):
            sectors: Dict[str, int] = defaultdict(int)
            for o in known:
                sectors[o.sector or "unknown"] += 1
            report.users_by_sector = dict(sorted(sectors.items()))
    return report


def _month_start(ts: float) -> datetime:
    moment = datetime.fromtimestamp(ts, tz=timezone.utc)
    return moment.replace(day=1, hour=0, minute=0, second=0, microsecond=0)


def _next_month(moment: datetime) -> datetime:
    if moment.month == 12:
        return moment.replace(year=moment.year + 1, month=1)
    return moment.replace(month=moment.month + 1)


def cumulative_series(
    events: Iterable[CommitEvent],
    by: str = "month",
    organizations: Optional[Mapping[str, Organization]] = None,
) -> List[Tuple[str, UsageReport]]:
    """
    Cumulative reports at the end of each month, from the first commit to the last.

    Every figure in the series is nondecreasing.

    Args:
        events: Ledger events
        by: Bucket size; only ``"month"`` is supported
        organizations: Optional user to organization map

    Returns:
        ``(YYYY-MM, report)`` pairs in chronological order
    """
    if by != "month":
        raise ValueError(f"unsupported bucket {by!r}; only 'month' is supported")
    events = sorted(events, key=lambda e: e.committed_at)
    if not events:
        return []

    series: List[Tuple[str, UsageReport]] = []
    month = _month_start(events[0].committed_at)
    last = _month_start(events[-1].committed_at)
    while month <= last:
        end = _next_month(month)
        report = aggregate_stats(events, Period(end=end.timestamp()), organizations)
        series.append((month.strftime("%Y-%m"), report))
        month = end
    return series

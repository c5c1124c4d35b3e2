"""Size and duration parsing for command-line flags."""

import re
from datetime import datetime, timezone
from typing import Union

from mdx_relay.core.errors import ParameterError

_SIZE_UNITS = {
    "": 1,
    "b": 1,
    "kib": 1024,
    "mib": 1024**2,
    "gib": 1024**3,
    "tib": 1024**4,
    "kb": 1000,
    "mb": 1000**2,
    "gb": 1000**3,
    "tb": 1000**4,
}
_DURATION_UNITS = {"": 1.0, "s": 1.0, "ms": 0.001, "m": 60.0, "min": 60.0}

_NUMBER_UNIT = re.compile(r"^\s*([0-9]+(?:\.[0-9]+)?)\s*([A-Za-z]*)\s*$")


def parse_size(text: Union[str, int]) -> int:
    """
    Parse a byte size such as ``8MiB``, ``10GiB`` or ``4096``.

    Raises:
        ParameterError: on an unknown unit or malformed value
    """
    if isinstance(text, int):
        return text
    match = _NUMBER_UNIT.match(str(text))
    if not match or match.group(2).lower() not in _SIZE_UNITS:
        raise ParameterError(f"invalid size {text!r} (use e.g. 4096, 512KiB, 8MiB, 10GiB)")
    return int(float(match.group(1)) * _SIZE_UNITS[match.group(2).lower()])


def parse_duration(text: Union[str, float, int]) -> float:
    """
    Parse a duration such as ``5s``, ``500ms`` or ``2.5``, in seconds.

    Raises:
        ParameterError: on an unknown unit or malformed value
    """
    if isinstance(text, (int, float)):
        return float(text)
    match = _NUMBER_UNIT.match(str(text))
    if not match or match.group(2).lower() not in _DURATION_UNITS:
        raise ParameterError(f"invalid duration {text!r} (use e.g. 5s, 500ms)")
    return float(match.group(1)) * _DURATION_UNITS[match.group(2).lower()]


def format_size(num_bytes: int) -> str:
    """Render a byte count with the largest IEC unit that keeps it >= 1."""
    value = float(num_bytes)
    for unit in ("B", "KiB", "MiB", "GiB", "TiB"):
        if value < 1024 or unit == "TiB":
            return f"{value:.0f} {unit}" if unit == "B" else f"{value:.2f} {unit}"
        value /= 1024
    return f"{num_bytes} B"


def parse_timestamp(text: Union[str, float, int]) -> float:
    """
    Parse epoch seconds or an ISO-8601 date/time (UTC when no offset is given).

    Raises:
        ParameterError: if the value is neither
    """
    if isinstance(text, (int, float)):
        return float(text)
    try:
        return float(text)
    except ValueError:
        pass
    try:
        moment = datetime.fromisoformat(str(text).strip())
    except ValueError:
        raise ParameterError(f"invalid time {text!r} (use epoch seconds or e.g. 2023-04-01)") from None
    if moment.tzinfo is None:
        moment = moment.replace(tzinfo=timezone.utc)
    return moment.timestamp()

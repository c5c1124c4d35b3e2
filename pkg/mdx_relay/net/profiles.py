"""
Network condition profiles.

A profile describes one path between a facility and its storage: round-trip
latency, an optional bandwidth cap and whether traffic crosses the external
gateway. Bandwidth is in MB/s, 10^6 bytes per second.

The builtin catalog holds the six measured paths: the cloud-internal direct
connection, the gateway-routed campus path, two backbone-connected
supercomputer centres and two public-cloud regions.
"""

import json
from enum import Enum
from pathlib import Path
from typing import Iterable, List, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, ValidationError, field_validator

from mdx_relay.core.errors import ParameterError

DIRECT_PROFILE = "arim-jupyter-direct"
MB = 1_000_000


class Route(str, Enum):
    DIRECT = "Direct"
    GATEWAY = "Gateway"


class NetworkProfile(BaseModel):
    """One emulated network path."""

    model_config = ConfigDict(frozen=True)

    name: str = Field(min_length=1)
    base_rtt_ms: float = Field(ge=0)
    bandwidth_cap_MBps: Optional[float] = Field(default=None, gt=0)
    route: Route = Route.DIRECT
    gateway_penalty_ms: float = Field(default=0.0, ge=0)
    # reserved; packet loss and reordering are not emulated
    loss_rate: float = 0.0
    reorder_rate: float = 0.0

    @field_validator("loss_rate", "reorder_rate")
    @classmethod
    def _not_emulated(cls, value: float) -> float:
        if value != 0:
            raise ValueError("loss and reorder emulation are not supported; must be 0")
        return value

    @property
    def effective_rtt_ms(self) -> float:
        return self.base_rtt_ms + (self.gateway_penalty_ms if self.route is Route.GATEWAY else 0.0)

    @property
    def one_way_delay(self) -> float:
        """Seconds injected in each direction."""
        return self.effective_rtt_ms / 2000.0

    @property
    def rate_bytes_per_s(self) -> Optional[float]:
        return None if self.bandwidth_cap_MBps is None else self.bandwidth_cap_MBps * MB

    def scaled(self, factor: float) -> "NetworkProfile":
        """Same path with its bandwidth cap multiplied by ``factor``."""
        if factor <= 0:
            raise ParameterError("scale factor must be positive")
        if self.bandwidth_cap_MBps is None:
            return self
        return self.model_copy(update={"bandwidth_cap_MBps": self.bandwidth_cap_MBps * factor})


BUILTIN_PROFILES = (
    NetworkProfile(name=DIRECT_PROFILE, base_rtt_ms=0.87, bandwidth_cap_MBps=598.8, route=Route.DIRECT),
    NetworkProfile(
        name="campus-gateway",
        base_rtt_ms=0.87,
        gateway_penalty_ms=3.37,
        bandwidth_cap_MBps=51.65,
        route=Route.GATEWAY,
    ),
    NetworkProfile(name="wisteria-east", base_rtt_ms=4.13, bandwidth_cap_MBps=425.5),
    NetworkProfile(name="fugaku-west", base_rtt_ms=11.9, bandwidth_cap_MBps=512.8),
    NetworkProfile(name="azure-east", base_rtt_ms=4.85, bandwidth_cap_MBps=128.3),
    NetworkProfile(name="azure-west", base_rtt_ms=12.03, bandwidth_cap_MBps=128.0),
)

_CATALOG = TypeAdapter(List[NetworkProfile])


def load_profile_catalog(path: Optional[Union[str, Path]] = None) -> List[NetworkProfile]:
    """
    Load a profile catalog.

    Args:
        path: JSON array of profiles; the builtin catalog when omitted

    Returns:
        Profiles in catalog order

    Raises:
        ParameterError: if the file is malformed, naming the offending field
    """
    if path is None:
        return list(BUILTIN_PROFILES)
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ParameterError(f"cannot read profile catalog {path}: {exc}") from exc
    try:
        profiles = _CATALOG.validate_python(raw)
    except ValidationError as exc:
        first = exc.errors()[0]
        field = ".".join(str(p) for p in first["loc"])
        raise ParameterError(
            f"invalid profile catalog {path}: field {field}: {first['msg']}",
            detail=[{"field": ".".join(map(str, e["loc"])), "message": e["msg"]} for e in exc.errors()],
        ) from exc
    names = [p.name for p in profiles]
    duplicates = sorted({n for n in names if names.count(n) > 1})
    if duplicates:
        raise ParameterError(f"duplicate profile names in {path}: {duplicates}")
    return profiles


def find_profile(catalog: Iterable[NetworkProfile], name: str) -> NetworkProfile:
    for profile in catalog:
        if profile.name == name:
            return profile
    raise ParameterError(f"unknown profile {name!r}")


def scale_profiles(catalog: Iterable[NetworkProfile], factor: float) -> List[NetworkProfile]:
    """Scale every bandwidth cap by ``factor``; latencies are unchanged."""
    return [profile.scaled(factor) for profile in catalog]


def dump_profiles(catalog: Iterable[NetworkProfile]) -> str:
    """Catalog as an indented JSON array, loadable by ``load_profile_catalog``."""
    return json.dumps([p.model_dump(mode="json") for p in catalog], indent=2)

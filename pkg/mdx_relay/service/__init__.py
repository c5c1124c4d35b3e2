"""
Storage service: device tokens, chunked uploads, verified objects, quotas and usage.
"""

from mdx_relay.service.auth import DeviceRegistry, TokenAuthority
from mdx_relay.service.ledger import UsageLedger, aggregate_stats, cumulative_series
from mdx_relay.service.quota import QuotaPolicy
from mdx_relay.service.store import ObjectStore

__all__ = [
    "DeviceRegistry",
    "ObjectStore",
    "QuotaPolicy",
    "TokenAuthority",
    "UsageLedger",
    "aggregate_stats",
    "cumulative_series",
]

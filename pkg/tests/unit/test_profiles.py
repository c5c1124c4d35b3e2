"""
Unit tests for network profiles, the token bucket and route comparisons.
"""

import json

import pytest

from mdx_relay.core.errors import ParameterError, RouteOrderingError
from mdx_relay.net.bench import BenchReport, check_throughput_ordering, compare_routes, relative_spread, write_csv
from mdx_relay.net.profiles import (
    BUILTIN_PROFILES,
    DIRECT_PROFILE,
    NetworkProfile,
    Route,
    dump_profiles,
    find_profile,
    load_profile_catalog,
    scale_profiles,
)
from mdx_relay.net.shaper import TokenBucket

pytestmark = pytest.mark.unit


def test_builtin_catalog():
    """Test the measured paths and the gateway penalty."""
    catalog = load_profile_catalog()
    gateway = find_profile(catalog, "campus-gateway")
    direct = find_profile(catalog, DIRECT_PROFILE)

    assert len(catalog) == 6
    assert gateway.route is Route.GATEWAY
    assert gateway.effective_rtt_ms == pytest.approx(4.24)
    assert direct.effective_rtt_ms == pytest.approx(0.87)
    assert 4.3 <= gateway.effective_rtt_ms / direct.effective_rtt_ms <= 5.4
    assert direct.rate_bytes_per_s == pytest.approx(598.8e6)


def test_penalty_ignored_on_direct_route():
    """Test that only gateway routes pay the penalty."""
    profile = NetworkProfile(name="p", base_rtt_ms=2.0, gateway_penalty_ms=3.0)
    assert profile.effective_rtt_ms == 2.0
    assert profile.one_way_delay == pytest.approx(0.001)


def test_dump_and_reload(tmp_path):
    """Test that the dumped catalog loads back unchanged."""
    path = tmp_path / "catalog.json"
    path.write_text(dump_profiles(BUILTIN_PROFILES), encoding="utf-8")
    assert load_profile_catalog(path) == list(BUILTIN_PROFILES)


@pytest.mark.parametrize(
    "entry, field",
    [
        ({"name": "x", "base_rtt_ms": -1}, "base_rtt_ms"),
        ({"name": "x", "base_rtt_ms": 1, "bandwidth_cap_MBps": 0}, "bandwidth_cap_MBps"),
        ({"name": "x", "base_rtt_ms": 1, "loss_rate": 0.01}, "loss_rate"),
        ({"base_rtt_ms": 1}, "name"),
    ],
)
def test_malformed_catalog_names_field(tmp_path, entry, field):
    """Test that catalog errors name the offending field."""
    path = tmp_path / "catalog.json"
    path.write_text(json.dumps([entry]), encoding="utf-8")

    with pytest.raises(ParameterError) as excinfo:
        load_profile_catalog(path)
    assert field in excinfo.value.message


def test_duplicate_profile_names(tmp_path):
    """Test that a catalog cannot define a name twice."""
    path = tmp_path / "catalog.json"
    path.write_text(json.dumps([{"name": "a", "base_rtt_ms": 1}, {"name": "a", "base_rtt_ms": 2}]))
    with pytest.raises(ParameterError):
        load_profile_catalog(path)


def test_scaling_keeps_latency():
    """Test that scaling changes caps only."""
    scaled = scale_profiles(BUILTIN_PROFILES, 0.25)
    for original, profile in zip(BUILTIN_PROFILES, scaled):
        assert profile.base_rtt_ms == original.base_rtt_ms
        assert profile.bandwidth_cap_MBps == pytest.approx(original.bandwidth_cap_MBps * 0.25)
    with pytest.raises(ParameterError):
        scale_profiles(BUILTIN_PROFILES, 0)


def test_unknown_profile():
    """Test lookup of a name that is not in the catalog."""
    with pytest.raises(ParameterError):
        find_profile(BUILTIN_PROFILES, "moon-base")


class SteppingClock:
    def __init__(self):
        self.now = 0.0

    def __call__(self):
        return self.now


def test_token_bucket_never_exceeds_rate():
    """Test that a continuous consumer is held to the configured rate."""
    clock = SteppingClock()
    bucket = TokenBucket(rate=1000.0, depth=200.0, clock=clock)
    sent = 0
    for _ in range(500):
        wait = bucket.consume(64)
        sent += 64
        clock.now += wait
        # bytes released so far never exceed rate x elapsed
        assert sent <= 1000.0 * clock.now + 1e-6


def test_token_bucket_refills_up_to_depth():
    """Test that idle time refills at most the depth."""
    clock = SteppingClock()
    bucket = TokenBucket(rate=1000.0, depth=200.0, clock=clock)
    clock.now = 100.0
    assert bucket.consume(200) == 0.0
    assert bucket.consume(100) == pytest.approx(0.1)


def test_token_bucket_for_profile():
    """Test bucket sizing from a profile and the uncapped case."""
    capped = TokenBucket.for_profile(NetworkProfile(name="c", base_rtt_ms=1, bandwidth_cap_MBps=10))
    assert capped.rate == 10e6
    assert capped.depth == pytest.approx(2e6)
    assert TokenBucket.for_profile(NetworkProfile(name="u", base_rtt_ms=1)) is None


def report(name, latency, throughput=None, baseline=0.0):
    return BenchReport(
        profile=name,
        effective_rtt_ms=latency,
        median_latency_ms=latency,
        baseline_latency_ms=baseline,
        median_throughput_MBps=throughput,
    )


def test_compare_routes_ratios():
    """Test latency and throughput ratios relative to the direct path."""
    rows = {
        r.profile: r
        for r in compare_routes(
            [report(DIRECT_PROFILE, 1.0, 100.0, baseline=0.1), report("campus-gateway", 4.4, 10.0, baseline=0.1)]
        )
    }

    assert rows[DIRECT_PROFILE].latency_ratio == 1.0
    assert rows["campus-gateway"].latency_ratio == pytest.approx(4.3 / 0.9)
    assert rows["campus-gateway"].throughput_ratio == pytest.approx(10.0)


def test_compare_routes_requires_direct():
    """Test that comparisons need the direct report."""
    with pytest.raises(ParameterError):
        compare_routes([report("azure-east", 4.85)])


def test_compare_routes_strict_ordering():
    """Test that a route faster than direct is an ordering error when strict."""
    reports = [report(DIRECT_PROFILE, 1.0), report("magic", 0.5)]
    with pytest.raises(RouteOrderingError):
        compare_routes(reports)
    assert compare_routes(reports, strict=False)[1].latency_ratio == 0.5


def test_throughput_ordering():
    """Test the expected ordering, including the tolerance between the two cloud regions."""
    good = [
        report(DIRECT_PROFILE, 0.87, 150),
        report("fugaku-west", 11.9, 128),
        report("wisteria-east", 4.13, 106),
        report("azure-east", 4.85, 31.5),
        report("azure-west", 12.03, 32.0),
        report("campus-gateway", 4.24, 12.9),
    ]
    check_throughput_ordering(good)

    bad = [r.model_copy(update={"median_throughput_MBps": 5.0}) if r.profile == "wisteria-east" else r for r in good]
    with pytest.raises(RouteOrderingError) as excinfo:
        check_throughput_ordering(bad)
    assert "wisteria-east" in excinfo.value.message


def test_relative_spread():
    """Test the largest deviation from the median."""
    assert relative_spread([10, 10.2, 9.9, 10.1, 10]) == pytest.approx(0.02)
    assert relative_spread([]) == 0.0


def test_csv_output(tmp_path):
    """Test one CSV row per run."""
    from mdx_relay.net.bench import BenchRun

    entry = report(DIRECT_PROFILE, 0.9, 100.0).model_copy(
        update={"run_samples": [BenchRun(run=1, latency_ms=0.9, throughput_MBps=99.5, seconds=1.0)]}
    )
    path = tmp_path / "bench.csv"

    write_csv([entry], path)

    assert path.read_text().splitlines() == ["profile,run,latency_ms,throughput_MBps", f"{DIRECT_PROFILE},1,0.9000,99.5000"]

"""
Integration tests for latency and throughput measurements through the
shaping proxy. The full throughput ordering run is marked ``bench``.
"""

import random

import pytest

from mdx_relay.agent.uploader import FileUploader
from mdx_relay.core.digest import ContentDigest
from mdx_relay.core.errors import BenchRunError
from mdx_relay.core.models import CommitReceipt
from mdx_relay.net.bench import (
    BenchSpec,
    check_throughput_ordering,
    compare_routes,
    latency_report,
    measure_baseline_latency,
    run_throughput_bench,
)
from mdx_relay.net.profiles import BUILTIN_PROFILES, DIRECT_PROFILE, NetworkProfile, find_profile, scale_profiles

pytestmark = pytest.mark.integration

KiB = 1024
MiB = 1024 * KiB


@pytest.fixture(scope="module")
def baseline():
    return measure_baseline_latency(samples=9)


@pytest.mark.parametrize("profile", BUILTIN_PROFILES, ids=lambda p: p.name)
def test_latency_tracks_profile(profile, baseline):
    """Test that measured latency is within 15 % of the profile RTT (0.5 ms on the direct path)."""
    report = latency_report(profile, samples=9, baseline_latency_ms=baseline)

    tolerance = max(0.15 * profile.effective_rtt_ms, 0.5)
    assert report.adjusted_latency_ms == pytest.approx(profile.effective_rtt_ms, abs=tolerance)


def test_gateway_to_direct_latency_ratio(baseline):
    """Test that the gateway route is 4.3 to 5.4 times slower than the direct connection."""
    reports = [
        latency_report(find_profile(BUILTIN_PROFILES, name), samples=9, baseline_latency_ms=baseline)
        for name in (DIRECT_PROFILE, "campus-gateway")
    ]

    rows = {row.profile: row for row in compare_routes(reports)}

    assert 4.3 <= rows["campus-gateway"].latency_ratio <= 5.4


def test_parallel_streams_beat_serial(baseline):
    """Test that 4 chunk streams finish a 64-chunk file at least twice as fast as 1 on a 40 ms path."""
    profile = NetworkProfile(name="long-haul", base_rtt_ms=40.0)
    common = dict(
        profile=profile,
        file_count=1,
        file_size_bytes=64 * 64 * KiB,
        chunk_size=64 * KiB,
        parallelism=1,
        repetitions=1,
        latency_samples=1,
    )

    serial = run_throughput_bench(BenchSpec(streams_per_file=1, **common), baseline_latency_ms=baseline)
    parallel = run_throughput_bench(BenchSpec(streams_per_file=4, **common), baseline_latency_ms=baseline)

    assert parallel.median_throughput_MBps >= 2 * serial.median_throughput_MBps


def test_repetitions_are_stable(baseline, tmp_path):
    """Test that the throughput of repeated runs on a capped path stays within 5 % of the median."""
    spec = BenchSpec(
        profile=NetworkProfile(name="steady", base_rtt_ms=2.0, bandwidth_cap_MBps=8.0),
        file_count=2,
        file_size_bytes=2 * MiB,
        chunk_size=256 * KiB,
        parallelism=2,
        repetitions=5,
        latency_samples=3,
    )

    report = run_throughput_bench(spec, baseline_latency_ms=baseline, workdir=tmp_path)

    assert len(report.run_samples) == 5
    assert report.total_bytes == 4 * MiB
    assert report.relative_spread < 0.05
    assert report.median_throughput_MBps <= 8.0 * 1.05


# catalog caps at desk scale; the fastest path runs near 30 MB/s
DESK_SCALE = 0.05


def bench_catalog(factor, baseline, workdir, names=None):
    """Median throughput per catalog profile with caps scaled by ``factor``."""
    measured = {}
    for profile in scale_profiles(BUILTIN_PROFILES, factor):
        if names is not None and profile.name not in names:
            continue
        spec = BenchSpec(
            profile=profile,
            file_count=4,
            file_size_bytes=4 * MiB,
            chunk_size=1 * MiB,
            parallelism=4,
            repetitions=3,
        )
        measured[profile.name] = run_throughput_bench(spec, baseline_latency_ms=baseline, workdir=workdir)
    return measured


@pytest.mark.bench
def test_throughput_ordering_across_catalog(baseline, tmp_path):
    """Test the throughput ordering of every profile at desk scale."""
    reports = list(bench_catalog(DESK_SCALE, baseline, tmp_path).values())

    check_throughput_ordering(reports)
    compare_routes(reports, strict=True)
    measured = {r.profile: r.median_throughput_MBps for r in reports}
    assert measured["fugaku-west"] / measured["azure-west"] == pytest.approx(4.0, rel=0.2)
    assert measured[DIRECT_PROFILE] / measured["azure-east"] == pytest.approx(4.67, rel=0.2)


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_cap_ordering_preserved(seed, baseline):
    """Test that of two profiles with equal RTT the higher cap measures faster."""
    rng = random.Random(seed)
    low = rng.uniform(2.0, 6.0)
    high = low * rng.uniform(1.5, 3.0)
    measured = []
    for cap in (high, low):
        spec = BenchSpec(
            profile=NetworkProfile(name=f"cap-{cap:.1f}", base_rtt_ms=2.0, bandwidth_cap_MBps=cap),
            file_count=2,
            file_size_bytes=1 * MiB,
            chunk_size=256 * KiB,
            parallelism=2,
            repetitions=1,
            latency_samples=1,
        )
        measured.append(run_throughput_bench(spec, baseline_latency_ms=baseline).median_throughput_MBps)

    assert measured[0] > measured[1]


def test_wrong_digest_fails_the_run(baseline, mocker):
    """Test that a commit with the wrong digest is reported as a bench error."""

    def wrong_receipt(transfer):
        return CommitReceipt(
            object_id="0" * 32,
            whole_digest=ContentDigest.of_bytes(b"something else"),
            owner=transfer.manifest.owner,
            relative_path=transfer.manifest.relative_path,
        )

    mocker.patch.object(FileUploader, "upload", side_effect=wrong_receipt)
    spec = BenchSpec(
        profile=NetworkProfile(name="quick", base_rtt_ms=1.0),
        file_count=1,
        file_size_bytes=64 * KiB,
        chunk_size=16 * KiB,
        parallelism=1,
        repetitions=1,
        latency_samples=1,
    )

    with pytest.raises(BenchRunError) as excinfo:
        run_throughput_bench(spec, baseline_latency_ms=baseline)
    assert excinfo.value.code == "BENCH_RUN_FAILED"


@pytest.mark.bench
def test_catalog_ratios_survive_rescaling(baseline, tmp_path):
    """Test that catalog throughput ratios hold with caps halved and quartered."""
    pairs = (("fugaku-west", "azure-west"), (DIRECT_PROFILE, "azure-east"))
    names = {name for pair in pairs for name in pair}
    ratios = {}
    for divisor in (1, 2, 4):
        reports = bench_catalog(DESK_SCALE / divisor, baseline, tmp_path, names)
        ratios[divisor] = [
            reports[fast].median_throughput_MBps / reports[slow].median_throughput_MBps for fast, slow in pairs
        ]

    for divisor in (2, 4):
        assert ratios[divisor] == pytest.approx(ratios[1], rel=0.2)


def test_cap_ratio_is_scale_invariant(baseline):
    """Test that the throughput ratio of two capped paths stays put as both caps shrink."""
    ratios = []
    for factor in (1.0, 0.5, 0.25):
        measured = []
        for cap in (8.0, 2.0):
            profile = NetworkProfile(name=f"cap-{cap:.0f}", base_rtt_ms=1.0, bandwidth_cap_MBps=cap).scaled(factor)
            spec = BenchSpec(
                profile=profile,
                file_count=1,
                file_size_bytes=2 * MiB,
                chunk_size=128 * KiB,
                parallelism=1,
                streams_per_file=4,
                repetitions=1,
                latency_samples=1,
            )
            measured.append(run_throughput_bench(spec, baseline_latency_ms=baseline).median_throughput_MBps)
        ratios.append(measured[0] / measured[1])

    for ratio in ratios:
        assert ratio == pytest.approx(4.0, rel=0.2)

"""
Latency and throughput measurement under emulated network conditions.

Latency is the median application-level echo round trip of a 64-byte
payload through a shaping proxy. The loopback baseline (same path through a
zero-delay, uncapped proxy) is measured separately and subtracted when
profiles are compared.

Throughput runs push ``file_count`` random files through the agent upload
path into a fresh ephemeral service behind the shaper, ``parallelism`` files
at a time, and report total bytes over wall time in MB/s (10^6 bytes/s).
"""

import csv
import logging
import os
import socket
import statistics
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

from pydantic import BaseModel, Field, field_validator

from mdx_relay.agent.client import StorageClient
from mdx_relay.agent.journal import Journal, TrackedTransfer
from mdx_relay.agent.session import TokenManager
from mdx_relay.agent.uploader import FileUploader
from mdx_relay.core.errors import BenchRunError, ParameterError, RouteOrderingError, UnreachableError
from mdx_relay.core.manifest import DEFAULT_CHUNK_SIZE, MiB, Category, build_manifest
from mdx_relay.core.state import ManifestBuilt, StabilityConfirmed, advance_state, initial_state
from mdx_relay.net.harness import ServiceHarness
from mdx_relay.net.profiles import DIRECT_PROFILE, MB, NetworkProfile
from mdx_relay.net.shaper import Address, EchoServer, start_shaper

logger = logging.getLogger(__name__)

ECHO_PAYLOAD = 64
ECHO_TIMEOUT = 5.0
SPREAD_BOUND = 0.05
BASELINE_PROFILE = NetworkProfile(name="loopback-baseline", base_rtt_ms=0.0)

# measured throughput order of the builtin catalog, fastest first
THROUGHPUT_ORDER = (
    DIRECT_PROFILE,
    "fugaku-west",
    "wisteria-east",
    "azure-east",
    "azure-west",
    "campus-gateway",
)
# pairs whose caps are within a rounding of each other compare with a tolerance
TIED_PAIRS = {("azure-east", "azure-west"): 0.05}


class BenchSpec(BaseModel):
    """One bench configuration."""

    profile: NetworkProfile
    file_count: int = Field(default=10, ge=1)
    file_size_bytes: int = Field(default=16 * MiB, ge=0)
    parallelism: int = Field(default=4, ge=1)
    repetitions: int = Field(default=5, ge=1)
    streams_per_file: int = Field(default=1, ge=1)
    chunk_size: int = Field(default=DEFAULT_CHUNK_SIZE, ge=1)
    latency_samples: int = Field(default=5, ge=1)

    @field_validator("repetitions")
    @classmethod
    def _odd(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError("repetitions must be odd so the median is a sample")
        return value


class BenchRun(BaseModel):
    run: int
    latency_ms: float
    throughput_MBps: float
    seconds: float


class BenchReport(BaseModel):
    """Median results of one profile."""

    profile: str
    effective_rtt_ms: float
    bandwidth_cap_MBps: Optional[float] = None
    median_latency_ms: float
    baseline_latency_ms: float = 0.0
    median_throughput_MBps: Optional[float] = None
    run_samples: List[BenchRun] = []
    relative_spread: float = 0.0
    total_bytes: int = 0

    @property
    def adjusted_latency_ms(self) -> float:
        """Median latency with the loopback baseline removed."""
        return max(self.median_latency_ms - self.baseline_latency_ms, 0.0)


def relative_spread(values: Sequence[float]) -> float:
    """Largest deviation from the median, as a fraction of the median."""
    if not values:
        return 0.0
    median = statistics.median(values)
    if median == 0:
        return 0.0
    return max(abs(v - median) for v in values) / median


# -- latency --------------------------------------------------------------


def collect_latency_samples(
    address: Address,
    samples: int = 5,
    timeout: float = ECHO_TIMEOUT,
    payload_size: int = ECHO_PAYLOAD,
) -> List[float]:
    """
    Time ``samples`` echo round trips over one connection, in milliseconds.

    One unrecorded round trip warms the path first.

    Raises:
        UnreachableError: connection refused or a round trip exceeded ``timeout``
    """
    payload = os.urandom(payload_size)
    try:
        with socket.create_connection(address, timeout=timeout) as sock:
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sock.settimeout(timeout)
            timings: List[float] = []
            for n in range(samples + 1):
                started = time.perf_counter()
                sock.sendall(payload)
                received = 0
                while received < payload_size:
                    block = sock.recv(payload_size - received)
                    if not block:
                        raise UnreachableError(f"echo endpoint {address[0]}:{address[1]} closed the connection")
                    received += len(block)
                if n:
                    timings.append((time.perf_counter() - started) * 1000.0)
            return timings
    except (socket.timeout, OSError) as exc:
        raise UnreachableError(
            f"no echo from {address[0]}:{address[1]} within {timeout:.1f}s: {exc}",
            detail={"address": list(address)},
        ) from exc


def measure_latency(address: Address, samples: int = 5, timeout: float = ECHO_TIMEOUT) -> float:
    """Median echo round trip in milliseconds."""
    return statistics.median(collect_latency_samples(address, samples, timeout))


def profile_latency_samples(profile: NetworkProfile, samples: int = 5) -> List[float]:
    """Echo round trips through a fresh shaper running ``profile``."""
    with EchoServer() as echo, start_shaper(profile, echo.address) as shaper:
        return collect_latency_samples(shaper.address, samples)


def measure_baseline_latency(samples: int = 5) -> float:
    """Median round trip through a zero-delay, uncapped shaper."""
    return statistics.median(profile_latency_samples(BASELINE_PROFILE, samples))


# -- throughput -----------------------------------------------------------


def _generate_files(directory: Path, count: int, size: int) -> List[Path]:
    paths = []
    for n in range(count):
        path = directory / f"bench-{n:03d}.bin"
        with path.open("wb") as fh:
            remaining = size
            while remaining:
                block = min(remaining, 4 * MiB)
                fh.write(os.urandom(block))
                remaining -= block
        paths.append(path)
    return paths


def _transfers(spec: BenchSpec, paths: List[Path], owner: str) -> List[TrackedTransfer]:
    transfers = []
    for path in paths:
        manifest = build_manifest(
            path, owner, Category.EXPERIMENTAL, spec.chunk_size, relative_path=f"bench/{path.name}"
        )
        state = advance_state(advance_state(initial_state(), StabilityConfirmed()), ManifestBuilt(manifest.chunk_count))
        now = time.time()
        transfers.append(
            TrackedTransfer(
                file_id=manifest.file_id,
                manifest=manifest,
                source_path=str(path),
                state=state,
                created_at=now,
                updated_at=now,
            )
        )
    return transfers


def _timed_run(spec: BenchSpec, transfers: List[TrackedTransfer], workdir: Path, run: int) -> float:
    """Upload every transfer into a fresh service behind the shaper; returns seconds."""
    with ServiceHarness() as service, start_shaper(spec.profile, service.address) as shaper:
        with StorageClient(shaper.url) as client:
            tokens = TokenManager(client, service.credential)
            tokens.current()
            journal = Journal(workdir / f"journal-{run}.jsonl")
            uploader = FileUploader(
                client,
                tokens,
                journal,
                parallelism=spec.streams_per_file,
            )
            fresh = [t.model_copy(deep=True) for t in transfers]
            started = time.perf_counter()
            with ThreadPoolExecutor(max_workers=spec.parallelism, thread_name_prefix="bench") as pool:
                receipts = list(pool.map(uploader.upload, fresh))
            elapsed = time.perf_counter() - started
    for transfer, receipt in zip(fresh, receipts):
        if receipt.whole_digest != transfer.manifest.whole_digest:
            raise BenchRunError(
                f"bench commit of {transfer.manifest.relative_path} has the wrong digest",
                detail={"expected": transfer.manifest.whole_digest.value, "actual": receipt.whole_digest.value},
            )
    return elapsed


def run_throughput_bench(
    spec: BenchSpec,
    baseline_latency_ms: Optional[float] = None,
    workdir: Optional[Union[str, Path]] = None,
) -> BenchReport:
    """
    Run ``spec.repetitions`` transfer runs and report medians.

    Each run measures echo latency through the profile, then uploads all files
    into a fresh ephemeral service. Manifests are built once, before timing.

    Args:
        spec: Bench configuration
        baseline_latency_ms: Loopback baseline; measured when omitted
        workdir: Scratch directory for files and journals (temporary when omitted)

    Returns:
        Report with per-run samples and medians

    Raises:
        RelayError: any run failed, including integrity failures
    """
    if baseline_latency_ms is None:
        baseline_latency_ms = measure_baseline_latency(spec.latency_samples)

    with tempfile.TemporaryDirectory(prefix="mdx-relay-bench-", dir=workdir) as scratch:
        scratch = Path(scratch)
        paths = _generate_files(scratch, spec.file_count, spec.file_size_bytes)
        transfers = _transfers(spec, paths, owner="bench")
        total_bytes = spec.file_count * spec.file_size_bytes

        runs: List[BenchRun] = []
        for run in range(1, spec.repetitions + 1):
            latency = statistics.median(profile_latency_samples(spec.profile, spec.latency_samples))
            seconds = _timed_run(spec, transfers, scratch, run)
            throughput = total_bytes / seconds / MB if seconds > 0 else float("inf")
            runs.append(BenchRun(run=run, latency_ms=latency, throughput_MBps=throughput, seconds=seconds))
            logger.info(
                "%s run %d/%d: %.3f ms, %.2f MB/s", spec.profile.name, run, spec.repetitions, latency, throughput
            )

    throughputs = [r.throughput_MBps for r in runs]
    report = BenchReport(
        profile=spec.profile.name,
        effective_rtt_ms=spec.profile.effective_rtt_ms,
        bandwidth_cap_MBps=spec.profile.bandwidth_cap_MBps,
        median_latency_ms=statistics.median(r.latency_ms for r in runs),
        baseline_latency_ms=baseline_latency_ms,
        median_throughput_MBps=statistics.median(throughputs),
        run_samples=runs,
        relative_spread=relative_spread(throughputs),
        total_bytes=total_bytes,
    )
    if report.relative_spread > SPREAD_BOUND:
        logger.warning(
            "%s: throughput spread %.1f%% exceeds %.0f%%", report.profile, report.relative_spread * 100, SPREAD_BOUND * 100
        )
    return report


def latency_report(profile: NetworkProfile, samples: int = 5, baseline_latency_ms: float = 0.0) -> BenchReport:
    """Latency-only report (no service, no transfer)."""
    timings = profile_latency_samples(profile, samples)
    return BenchReport(
        profile=profile.name,
        effective_rtt_ms=profile.effective_rtt_ms,
        bandwidth_cap_MBps=profile.bandwidth_cap_MBps,
        median_latency_ms=statistics.median(timings),
        baseline_latency_ms=baseline_latency_ms,
        relative_spread=relative_spread(timings),
    )


# -- comparisons ----------------------------------------------------------


class RouteComparison(BaseModel):
    profile: str
    latency_ms: float
    throughput_MBps: Optional[float] = None
    latency_ratio: float
    throughput_ratio: Optional[float] = None


def compare_routes(reports: Iterable[BenchReport], strict: bool = True) -> List[RouteComparison]:
    """
    Ratios of every profile against the direct connection.

    ``latency_ratio`` is profile latency over direct latency (baseline
    removed); ``throughput_ratio`` is direct throughput over profile
    throughput. Both are 1.0 for the direct profile itself.

    Raises:
        ParameterError: no report for the direct profile
        RouteOrderingError: with ``strict``, some profile beats direct on either axis
    """
    by_name: Dict[str, BenchReport] = {r.profile: r for r in reports}
    direct = by_name.get(DIRECT_PROFILE)
    if direct is None:
        raise ParameterError(f"comparison needs a report for {DIRECT_PROFILE!r}")

    rows: List[RouteComparison] = []
    violations: List[str] = []
    for name, report in by_name.items():
        if name == DIRECT_PROFILE:
            latency_ratio = 1.0
            throughput_ratio = 1.0 if report.median_throughput_MBps is not None else None
        else:
            latency_ratio = (
                report.adjusted_latency_ms / direct.adjusted_latency_ms if direct.adjusted_latency_ms > 0 else float("inf")
            )
            throughput_ratio = None
            if direct.median_throughput_MBps is not None and report.median_throughput_MBps:
                throughput_ratio = direct.median_throughput_MBps / report.median_throughput_MBps
            if latency_ratio < 1.0:
                violations.append(f"{name} has lower latency than {DIRECT_PROFILE}")
            if throughput_ratio is not None and throughput_ratio < 1.0:
                violations.append(f"{name} has higher throughput than {DIRECT_PROFILE}")
        rows.append(
            RouteComparison(
                profile=name,
                latency_ms=report.adjusted_latency_ms,
                throughput_MBps=report.median_throughput_MBps,
                latency_ratio=latency_ratio,
                throughput_ratio=throughput_ratio,
            )
        )
    if strict and violations:
        raise RouteOrderingError("; ".join(violations), detail=violations)
    return rows


def check_throughput_ordering(reports: Iterable[BenchReport], order: Sequence[str] = THROUGHPUT_ORDER) -> None:
    """
    Check that measured throughput follows ``order`` (fastest first).

    Profiles missing from ``reports`` are skipped; tied pairs may be within
    their tolerance in either direction.

    Raises:
        RouteOrderingError: listing every adjacent pair out of order
    """
    measured = {r.profile: r.median_throughput_MBps for r in reports if r.median_throughput_MBps is not None}
    present = [name for name in order if name in measured]
    violations = []
    for faster, slower in zip(present, present[1:]):
        tolerance = TIED_PAIRS.get((faster, slower), 0.0)
        if measured[faster] * (1.0 + tolerance) <= measured[slower]:
            violations.append(
                f"{faster} ({measured[faster]:.2f} MB/s) is not faster than {slower} ({measured[slower]:.2f} MB/s)"
            )
    if violations:
        raise RouteOrderingError("throughput ordering violated: " + "; ".join(violations), detail=violations)


def write_csv(reports: Iterable[BenchReport], path: Union[str, Path]) -> None:
    """One row per run: ``profile,run,latency_ms,throughput_MBps``."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["profile", "run", "latency_ms", "throughput_MBps"])
        for report in reports:
            for sample in report.run_samples:
                writer.writerow(
                    [report.profile, sample.run, f"{sample.latency_ms:.4f}", f"{sample.throughput_MBps:.4f}"]
                )

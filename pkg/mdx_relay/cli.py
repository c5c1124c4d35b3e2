"""
Command-line interface for mdx-relay.

``relayctl`` hosts every role of the system in one binary: the relay agent
(``agent run``), the storage service (``serve``), the network bench
(``bench``), usage statistics (``stats``) and ``config show``.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 assertion failure.
"""

import argparse
import json
import logging
import signal
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from mdx_relay import __version__
from mdx_relay.config import (
    LOG_LEVELS,
    AgentSettings,
    GlobalConfig,
    ServiceSettings,
    build_settings,
    load_config,
)
from mdx_relay.core.errors import ConfigError, ParameterError, RelayError, RouteOrderingError, TransientNetworkError
from mdx_relay.core.models import DeviceCredential
from mdx_relay.core.retry import RetryPolicy, retry_with_backoff
from mdx_relay.core.units import format_size, parse_duration, parse_size, parse_timestamp
from mdx_relay.log import setup_logging

logger = logging.getLogger("mdx_relay.cli")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_ASSERTION = 3


class UsageError(Exception):
    """A flag is missing or malformed; exits 2."""


def _emit(payload: Any) -> None:
    print(json.dumps(payload, indent=2, default=str))


def _parse_listen(value: str) -> Tuple[str, int]:
    host, sep, port = value.rpartition(":")
    if not sep or not port.isdigit():
        raise UsageError(f"--listen expects host:port, got {value!r}")
    return host or "127.0.0.1", int(port)


def _load_credential(config: GlobalConfig) -> DeviceCredential:
    if config.credential_path is None:
        raise UsageError("a device credential is required (--credential or RELAY_CREDENTIAL_FILE)")
    try:
        return DeviceCredential.load(config.credential_path)
    except FileNotFoundError:
        raise UsageError(f"credential file {config.credential_path} does not exist") from None
    except ConfigError as exc:
        raise UsageError(exc.message) from None


def _require_server(config: GlobalConfig) -> str:
    if not config.server_url:
        raise UsageError("a server URL is required (--server or RELAY_SERVER_URL)")
    return config.server_url


# -- agent ----------------------------------------------------------------


def cmd_agent_run(args: argparse.Namespace, config: GlobalConfig) -> int:
    """Run the relay agent until SIGTERM/SIGINT (or one cycle with ``--once``)."""
    from mdx_relay.agent.client import StorageClient
    from mdx_relay.agent.daemon import RelayAgent

    credential = _load_credential(config)
    server_url = _require_server(config)
    settings = build_settings(
        AgentSettings,
        staging_root=args.staging,
        journal_path=args.journal,
        chunk_size=parse_size(args.chunk_size) if args.chunk_size else None,
        parallelism=args.parallelism,
        stability_window=parse_duration(args.stability_window) if args.stability_window else None,
        poll_interval=parse_duration(args.poll_interval) if args.poll_interval else None,
        max_active_files=args.max_active_files,
    )
    if not settings.staging_root.is_dir():
        raise UsageError(f"staging directory {settings.staging_root} does not exist")

    with StorageClient(server_url) as client:
        agent = RelayAgent(settings, credential, client)
        if args.once:
            result = agent.run_once()
            _emit({"discovered": result.discovered, "committed": result.committed, "failed": result.failed})
            return EXIT_FAILURE if result.failed else EXIT_OK

        def handle_signal(signum, frame):
            logger.info("Received signal %d, finishing in-flight chunks", signum)
            agent.stop()

        signal.signal(signal.SIGTERM, handle_signal)
        signal.signal(signal.SIGINT, handle_signal)
        agent.run_forever()
    return EXIT_OK


# -- serve ----------------------------------------------------------------


def cmd_serve(args: argparse.Namespace, config: GlobalConfig) -> int:
    """Serve the /v1 API until signaled."""
    from mdx_relay.api.app import bind_socket, create_app, run_app
    from mdx_relay.service.auth import DeviceRegistry, TokenAuthority, load_organizations
    from mdx_relay.service.quota import QuotaPolicy
    from mdx_relay.service.store import DataRootLock, ObjectStore

    if config.data_root is None:
        raise UsageError("a data root is required (--data-root or RELAY_DATA_ROOT)")
    host, port = _parse_listen(args.listen)
    settings = build_settings(
        ServiceSettings,
        data_root=config.data_root,
        host=host,
        port=port,
        registry_path=args.registry,
        org_map_path=args.org_map,
        quota_bytes=parse_size(args.quota) if args.quota else None,
        soft_quota=args.soft_quota,
        token_ttl=parse_duration(args.token_ttl) if args.token_ttl else None,
    )

    registry = DeviceRegistry.load(settings.registry_path) if settings.registry_path else DeviceRegistry()
    if not registry.devices:
        logger.warning("No devices registered; every authentication will be rejected")
    if settings.org_map_path:
        registry.organizations.update(load_organizations(settings.org_map_path))

    with DataRootLock(settings.data_root):
        try:
            sock = bind_socket(settings.host, settings.port)
        except OSError as exc:
            logger.error("Cannot listen on %s:%d: %s", settings.host, settings.port, exc)
            return EXIT_FAILURE
        store = ObjectStore(
            settings.data_root,
            quota=QuotaPolicy(per_user_limit=settings.quota_bytes, hard=not settings.soft_quota),
        )
        authority = TokenAuthority(registry, ttl=settings.token_ttl)
        app = create_app(store, authority, registry)
        run_app(app, log_level=config.log_level, sock=sock)
    return EXIT_OK


# -- bench ----------------------------------------------------------------


def _bench_table(reports, comparison) -> str:
    ratios = {row.profile: row for row in comparison}
    lines = [f"{'profile':<22} {'rtt ms':>8} {'latency ms':>11} {'MB/s':>10} {'spread':>7} {'lat x':>6} {'tp x':>6}"]
    for report in reports:
        row = ratios.get(report.profile)
        throughput = "-" if report.median_throughput_MBps is None else f"{report.median_throughput_MBps:.2f}"
        lat_ratio = "-" if row is None else f"{row.latency_ratio:.2f}"
        tp_ratio = "-" if row is None or row.throughput_ratio is None else f"{row.throughput_ratio:.2f}"
        lines.append(
            f"{report.profile:<22} {report.effective_rtt_ms:>8.2f} {report.adjusted_latency_ms:>11.3f} "
            f"{throughput:>10} {report.relative_spread * 100:>6.1f}% {lat_ratio:>6} {tp_ratio:>6}"
        )
    return "\n".join(lines)


def cmd_bench(args: argparse.Namespace, config: GlobalConfig) -> int:
    """Measure latency and throughput per profile and print the reports."""
    from mdx_relay.net.bench import (
        BenchSpec,
        check_throughput_ordering,
        compare_routes,
        measure_baseline_latency,
        run_throughput_bench,
        write_csv,
    )
    from mdx_relay.net.profiles import DIRECT_PROFILE, dump_profiles, find_profile, load_profile_catalog, scale_profiles

    catalog = load_profile_catalog(args.catalog)
    if args.scale is not None:
        catalog = scale_profiles(catalog, args.scale)
    if args.dump_profiles:
        print(dump_profiles(catalog))
        return EXIT_OK

    if args.all_profiles:
        profiles = catalog
    elif args.profile:
        profiles = [find_profile(catalog, name) for name in args.profile]
    else:
        raise UsageError("choose --profile NAME, --all-profiles or --dump-profiles")

    baseline = measure_baseline_latency()
    logger.info("Loopback baseline latency %.3f ms", baseline)
    reports = []
    for profile in profiles:
        spec = build_settings(
            BenchSpec,
            profile=profile,
            file_count=args.files,
            file_size_bytes=parse_size(args.size) if args.size else None,
            parallelism=args.parallelism,
            repetitions=args.reps,
            chunk_size=parse_size(args.chunk_size) if args.chunk_size else None,
        )
        reports.append(run_throughput_bench(spec, baseline_latency_ms=baseline))

    has_direct = any(r.profile == DIRECT_PROFILE for r in reports)
    comparison = compare_routes(reports, strict=False) if has_direct else []
    if args.csv:
        write_csv(reports, args.csv)

    if args.human:
        print(_bench_table(reports, comparison))
    else:
        _emit(
            {
                "baseline_latency_ms": baseline,
                "reports": [r.model_dump(mode="json") for r in reports],
                "comparison": [c.model_dump(mode="json") for c in comparison],
            }
        )

    if args.assert_ordering:
        check_throughput_ordering(reports)
        if has_direct:
            compare_routes(reports, strict=True)
    return EXIT_OK


# -- stats ----------------------------------------------------------------


def _remote_stats(config: GlobalConfig, args: argparse.Namespace, start, end):
    from mdx_relay.agent.client import StorageClient
    from mdx_relay.agent.session import TokenManager

    credential = _load_credential(config)
    with StorageClient(_require_server(config)) as client:
        tokens = TokenManager(client, credential)

        @retry_with_backoff(RetryPolicy(max_attempts=3), retry_on=(TransientNetworkError,))
        def fetch():
            if args.cumulative_by:
                return tokens.call(lambda token: client.stats_cumulative(token, by=args.cumulative_by))
            return tokens.call(lambda token: client.stats(token, start, end))

        return fetch()


def _local_stats(args: argparse.Namespace, start, end):
    from mdx_relay.service.auth import load_organizations
    from mdx_relay.service.ledger import Period, UsageLedger, aggregate_stats, cumulative_series

    organizations = load_organizations(args.org_map) if args.org_map else None
    try:
        events = UsageLedger(args.ledger).read(missing_ok=False)
    except (OSError, ValueError) as exc:
        raise RelayError(f"cannot read ledger {args.ledger}: {exc}") from exc
    if args.cumulative_by:
        series = cumulative_series(events, by=args.cumulative_by, organizations=organizations)
        return [{"period": label, "report": report.model_dump(mode="json")} for label, report in series]
    return aggregate_stats(events, Period(start=start, end=end), organizations).model_dump(mode="json")


def _report_lines(report: Dict[str, Any]) -> List[str]:
    lines = [
        f"users            {report['user_count']}",
        f"organizations    {'-' if report.get('org_count') is None else report['org_count']}",
        f"files            {report['file_count_total']}",
        f"volume           {format_size(report['total_volume'])}",
    ]
    for category, volume in report["volume_by_category"].items():
        files = report["file_count_by_category"].get(category, 0)
        lines.append(f"  {category:<14} {format_size(volume):>12}  {files} files")
    if report.get("users_by_sector"):
        for sector, count in report["users_by_sector"].items():
            lines.append(f"  {sector:<14} {count} users")
    return lines


def cmd_stats(args: argparse.Namespace, config: GlobalConfig) -> int:
    """Print a usage report from a ledger file or a running service."""
    start = parse_timestamp(args.start) if args.start else None
    end = parse_timestamp(args.end) if args.end else None
    result = _local_stats(args, start, end) if args.ledger else _remote_stats(config, args, start, end)

    if not args.human:
        _emit(result)
    elif isinstance(result, list):
        print(f"{'month':<8} {'users':>6} {'files':>8} {'volume':>12}")
        for entry in result:
            report = entry["report"]
            print(
                f"{entry['period']:<8} {report['user_count']:>6} {report['file_count_total']:>8} "
                f"{format_size(report['total_volume']):>12}"
            )
    else:
        print("\n".join(_report_lines(result)))
    return EXIT_OK


# -- config ---------------------------------------------------------------


def cmd_config_show(args: argparse.Namespace, config: GlobalConfig) -> int:
    _emit(config.describe())
    return EXIT_OK


# -- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relayctl", description="mdx-relay: facility data relay and storage")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="dotenv-format config file (default $RELAY_CONFIG or ./relayctl.env)")
    parser.add_argument("--log-level", type=str.upper, choices=LOG_LEVELS, help="log level (default INFO)")
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND")

    # agent
    agent_parser = subparsers.add_parser("agent", help="Relay agent commands")
    agent_sub = agent_parser.add_subparsers(dest="agent_command", metavar="ACTION")
    run_parser = agent_sub.add_parser("run", help="Watch a staging directory and upload stable files")
    run_parser.add_argument("--staging", required=True, type=Path, help="staging directory (<staging>/<user>/...)")
    run_parser.add_argument("--server", help="storage service URL")
    run_parser.add_argument("--credential", type=Path, help="device credential JSON file")
    run_parser.add_argument("--chunk-size", help="chunk size, e.g. 8MiB (default 8MiB)")
    run_parser.add_argument("--parallelism", type=int, help="chunks in flight per file (default 4)")
    run_parser.add_argument("--stability-window", help="quiet time before a file is stable, e.g. 5s")
    run_parser.add_argument("--journal", type=Path, help="journal file (default <staging>/.relay/journal.jsonl)")
    run_parser.add_argument("--poll-interval", help="time between staging scans, e.g. 2s")
    run_parser.add_argument("--max-active-files", type=int, help="files uploaded at once (default 2)")
    run_parser.add_argument("--once", action="store_true", help="run one cycle and exit")
    run_parser.set_defaults(handler=cmd_agent_run)

    # serve
    serve_parser = subparsers.add_parser("serve", help="Run the storage service")
    serve_parser.add_argument("--data-root", type=Path, help="object storage directory")
    serve_parser.add_argument("--listen", default="127.0.0.1:8080", help="host:port (default 127.0.0.1:8080)")
    serve_parser.add_argument("--registry", type=Path, help="device registry JSON file")
    serve_parser.add_argument("--org-map", type=Path, help="user to organization JSON map")
    serve_parser.add_argument("--quota", help="per-user quota, e.g. 10GiB (default 1TiB)")
    serve_parser.add_argument("--soft-quota", action="store_true", help="warn instead of rejecting over quota")
    serve_parser.add_argument("--token-ttl", help="bearer token lifetime, e.g. 3600s")
    serve_parser.set_defaults(handler=cmd_serve)

    # bench
    bench_parser = subparsers.add_parser("bench", help="Measure latency and throughput per network profile")
    bench_parser.add_argument("--profile", action="append", help="profile to run (repeatable)")
    bench_parser.add_argument("--all-profiles", action="store_true", help="run every catalog profile")
    bench_parser.add_argument("--catalog", type=Path, help="profile catalog JSON (default builtin)")
    bench_parser.add_argument("--scale", type=float, help="multiply every bandwidth cap by this factor")
    bench_parser.add_argument("--files", type=int, help="files per run (default 10)")
    bench_parser.add_argument("--size", help="size of each file (default 16MiB)")
    bench_parser.add_argument("--chunk-size", help="chunk size (default 8MiB)")
    bench_parser.add_argument("--parallelism", type=int, help="files in flight (default 4)")
    bench_parser.add_argument("--reps", type=int, help="repetitions, odd (default 5)")
    bench_parser.add_argument("--csv", type=Path, help="write per-run samples to this CSV file")
    bench_parser.add_argument("--assert-ordering", action="store_true", help="exit 3 unless route ordering holds")
    bench_parser.add_argument("--dump-profiles", action="store_true", help="print the profile catalog and exit")
    bench_parser.add_argument("--human", action="store_true", help="print a table instead of JSON")
    bench_parser.set_defaults(handler=cmd_bench)

    # stats
    stats_parser = subparsers.add_parser("stats", help="Usage statistics")
    stats_parser.add_argument("--ledger", type=Path, help="read this ledger file instead of a service")
    stats_parser.add_argument("--server", help="storage service URL")
    stats_parser.add_argument("--credential", type=Path, help="device credential JSON file")
    stats_parser.add_argument("--from", dest="start", help="period start (epoch seconds or ISO date)")
    stats_parser.add_argument("--to", dest="end", help="period end, exclusive")
    stats_parser.add_argument("--cumulative-by", choices=("month",), help="emit a cumulative series")
    stats_parser.add_argument("--org-map", type=Path, help="user to organization JSON map (local ledger only)")
    stats_parser.add_argument("--human", action="store_true", help="print a table instead of JSON")
    stats_parser.set_defaults(handler=cmd_stats)

    # config
    config_parser = subparsers.add_parser("config", help="Configuration commands")
    config_sub = config_parser.add_subparsers(dest="config_command", metavar="ACTION")
    show_parser = config_sub.add_parser("show", help="Print the effective configuration and its sources")
    show_parser.add_argument("--server", help="storage service URL")
    show_parser.add_argument("--credential", type=Path, help="device credential JSON file")
    show_parser.add_argument("--data-root", type=Path, help="object storage directory")
    show_parser.set_defaults(handler=cmd_config_show)

    return parser


def _flags(args: argparse.Namespace) -> Dict[str, Any]:
    return {
        "server_url": getattr(args, "server", None),
        "credential_path": getattr(args, "credential", None),
        "log_level": args.log_level,
        "data_root": getattr(args, "data_root", None),
    }


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point for relayctl."""
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = getattr(args, "handler", None)
    if handler is None:
        parser.print_help()
        return EXIT_USAGE

    try:
        config = load_config(_flags(args), config_file=args.config)
    except ConfigError as exc:
        print(f"relayctl: error: {exc.message}", file=sys.stderr)
        return EXIT_USAGE
    setup_logging(config.log_level)

    try:
        return handler(args, config)
    except UsageError as exc:
        print(f"relayctl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParameterError, ConfigError) as exc:
        print(f"relayctl: error: {exc.message}", file=sys.stderr)
        return EXIT_USAGE
    except RouteOrderingError as exc:
        print(f"relayctl: assertion failed: {exc.message}", file=sys.stderr)
        return EXIT_ASSERTION
    except RelayError as exc:
        logger.error("%s: %s", exc.code, exc.message)
        return EXIT_FAILURE
    except OSError as exc:
        logger.error("%s", exc)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry points: shard, serve, bench, latency-lab, analyze-schedule.

Exit codes: 0 ok, 2 configuration error, 3 protocol error, 4 I/O error.
Set TPI_LOG to a logging level name for diagnostics.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

from .cluster import (
    LinkDelayModel,
    loopback_cluster,
    tcp_master_cluster,
    tcp_worker_cluster,
)
from .config import ConfigError, ModelConfig, parse_kv_file
from .latency import latency_sweep_rows
from .runtime import (
    BenchRow,
    bench_cell,
    make_provider,
    run_master,
    run_worker,
    shard_model,
)
from .scheduler import DiskDelayModel
from .sharding import ShardFormatError, load_full_weights, plan_shards, shard_byte_sizes, write_shards
from .steady import (
    TimingProfile,
    check_loose_steady,
    check_retention_steady,
    check_tight_steady,
    min_retention_period,
    simulate_schedule,
)
from .wire import ProtocolError

log = logging.getLogger("starshard")


@dataclass
class RunConfig:
    """Validated per-process serve options."""

    role: str
    rank: int
    devices: int
    master_host: str
    master_port: int
    config_path: Path
    shard_dir: Path
    window: int
    retention: int | None
    max_new_tokens: int
    prompt_ids: list[int] | None
    metrics_path: Path | None

    def __post_init__(self) -> None:
        if self.role not in ("master", "worker"):
            raise ConfigError(f"role must be master or worker, got {self.role!r}")
        if not (0 <= self.rank < self.devices):
            raise ConfigError(f"rank {self.rank} out of range for {self.devices} devices")
        if self.role == "master" and self.rank != 0:
            raise ConfigError("the master must have rank 0")
        if self.role == "worker" and self.rank == 0:
            raise ConfigError("workers must have rank >= 1")
        if self.window < 0:
            raise ConfigError("window must be >= 1, or 0 to disable the scheduler")


def _load_model_config(path, overrides: list[str]) -> ModelConfig:
    """Config file keys with ``--set key=value`` command-line overrides."""
    mapping = parse_kv_file(path)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        mapping[key.strip()] = value.strip()
    return ModelConfig.from_mapping(mapping)


def _parse_proportions(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"bad proportion list: {text!r}") from None


def _parse_ids(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"bad token id list: {text!r}") from None


def _parse_int_list(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part.strip()]


def _parse_float_list(text: str) -> list[float]:
    return [float(part) for part in text.split(",") if part.strip()]


def _prompt_to_ids(args, cfg: ModelConfig) -> list[int]:
    if args.prompt_ids:
        ids = _parse_ids(args.prompt_ids)
    elif args.prompt:
        if cfg.vocab < 256:
            raise ConfigError("byte-level prompts need vocab >= 256; pass --prompt-ids")
        ids = list(args.prompt.encode("utf-8"))
    else:
        raise ConfigError("a non-empty --prompt or --prompt-ids is required")
    if not ids:
        raise ConfigError("prompt must contain at least one token")
    return ids


def _ids_to_text(ids: list[int]) -> str:
    return bytes(i for i in ids if 0 <= i < 256).decode("utf-8", errors="replace")


# ---------------------------------------------------------------------------
# shard
# ---------------------------------------------------------------------------


def cmd_shard(args) -> int:
    cfg = _load_model_config(args.config, args.overrides)
    if args.proportions:
        proportions = _parse_proportions(args.proportions)
    else:
        proportions = [1.0 / args.devices] * args.devices
    out_dir = Path(args.out)
    if args.weights_in:
        plan = plan_shards(cfg, proportions)
        weights = load_full_weights(cfg, Path(args.weights_in))
        manifests = write_shards(weights, cfg, plan, out_dir)
    else:
        plan, manifests = shard_model(cfg, args.seed, proportions, out_dir)
    for manifest in manifests:
        sizes = shard_byte_sizes(cfg, plan, manifest.rank)
        total = sum(sizes.values())
        print(f"rank {manifest.rank}: {len(manifest.entries)} blocks, {total} bytes")
    return 0


# ---------------------------------------------------------------------------
# serve
# ---------------------------------------------------------------------------


def _serve_run_config(args) -> RunConfig:
    host, _, port = args.master.partition(":")
    if not host or not port:
        raise ConfigError(f"--master must be host:port, got {args.master!r}")
    try:
        port_num = int(port)
    except ValueError:
        raise ConfigError(f"bad master port {port!r}") from None
    return RunConfig(
        role=args.role,
        rank=args.rank,
        devices=args.devices,
        master_host=host,
        master_port=port_num,
        config_path=Path(args.config),
        shard_dir=Path(args.shards),
        window=args.window,
        retention=args.retention,
        max_new_tokens=args.max_new_tokens,
        prompt_ids=None,
        metrics_path=Path(args.metrics) if args.metrics else None,
    )


def cmd_serve(args) -> int:
    run_cfg = _serve_run_config(args)
    cfg = _load_model_config(run_cfg.config_path, args.overrides)
    provider = make_provider(
        cfg, run_cfg.shard_dir, run_cfg.rank, run_cfg.window, run_cfg.retention
    )
    try:
        if run_cfg.role == "master":
            prompt_ids = _prompt_to_ids(args, cfg)
            if run_cfg.devices == 1:
                cluster = loopback_cluster(1)[0]
            else:
                cluster = tcp_master_cluster(
                    run_cfg.master_host, run_cfg.master_port, run_cfg.devices, cfg.digest_bytes()
                )
            ids, metrics = run_master(cfg, provider, cluster, prompt_ids, run_cfg.max_new_tokens)
            print("generated ids:", ",".join(str(i) for i in ids))
            print("generated text:", _ids_to_text(ids))
        else:
            cluster = tcp_worker_cluster(
                run_cfg.master_host,
                run_cfg.master_port,
                run_cfg.rank,
                run_cfg.devices,
                cfg.digest_bytes(),
            )
            metrics = run_worker(cfg, provider, cluster)
        cluster.close()
    finally:
        provider.stop()
    if run_cfg.metrics_path:
        run_cfg.metrics_path.write_text(json.dumps(metrics.to_dict(), indent=2) + "\n")
    print(
        f"rank {run_cfg.rank}: ttft {metrics.ttft_ms:.1f} ms, "
        f"mean token {metrics.mean_token_ms:.1f} ms, "
        f"peak weights {metrics.peak_param_bytes} bytes, "
        f"allreduce rounds {metrics.allreduce_rounds}"
    )
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def cmd_bench(args) -> int:
    cfg = _load_model_config(args.config, args.overrides)
    prompt_ids = _prompt_to_ids(args, cfg)
    link_delay = None
    if args.tau_ms or args.bandwidth_mbps:
        link_delay = LinkDelayModel(
            latency_ms=args.tau_ms, bandwidth_mbps=args.bandwidth_mbps or None
        )
    disk_delay = None
    if args.disk_base_ms or args.disk_ms_per_mib:
        disk_delay = DiskDelayModel(base_ms=args.disk_base_ms, ms_per_mib=args.disk_ms_per_mib)
    retentions = [None if r == 0 else r for r in _parse_int_list(args.retentions)]
    rows: list[BenchRow] = []
    with tempfile.TemporaryDirectory(prefix="starshard-bench-") as tmp:
        for devices in _parse_int_list(args.devices_list):
            shard_root = Path(tmp) / f"n{devices}"
            shard_model(cfg, args.seed, [1.0 / devices] * devices, shard_root)
            for window in _parse_int_list(args.windows):
                for retention in retentions:
                    rows.append(
                        bench_cell(
                            cfg,
                            shard_root,
                            devices,
                            window,
                            retention,
                            prompt_ids,
                            args.tokens,
                            link_delay,
                            disk_delay,
                        )
                    )
    out = Path(args.out)
    with out.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["n", "w", "T", "ttft_ms", "tok_ms", "peak_bytes", "stall_ms", "full_bytes", "mem_ratio"]
        )
        for row in rows:
            writer.writerow(
                [
                    row.devices,
                    row.window,
                    row.retention if row.retention is not None else 0,
                    f"{row.ttft_ms:.3f}",
                    f"{row.tok_ms:.3f}",
                    row.peak_bytes,
                    f"{row.stall_ms:.3f}",
                    row.full_bytes,
                    f"{row.mem_ratio:.4f}",
                ]
            )
    print(f"wrote {len(rows)} rows to {out}")
    return 0


# ---------------------------------------------------------------------------
# latency-lab
# ---------------------------------------------------------------------------


def cmd_latency_lab(args) -> int:
    rows = latency_sweep_rows(
        hidden=args.hidden,
        bandwidth_mbps=args.bandwidth_mbps,
        taus_ms=_parse_float_list(args.taus),
        algorithms=[a.strip() for a in args.algos.split(",") if a.strip()],
        devices=args.devices,
    )
    out = Path(args.out) if args.out else None
    lines = [["algo", "n", "tau_ms", "bandwidth_mbps", "hidden", "latency_ms"]]
    lines += [
        [
            row["algo"],
            row["n"],
            row["tau_ms"],
            row["bandwidth_mbps"],
            row["hidden"],
            f"{row['latency_ms']:.6f}",
        ]
        for row in rows
    ]
    if out:
        with out.open("w", newline="") as handle:
            csv.writer(handle).writerows(lines)
        print(f"wrote {len(rows)} rows to {out}")
    else:
        for line in lines:
            print(",".join(str(x) for x in line))
    return 0


# ---------------------------------------------------------------------------
# analyze-schedule
# ---------------------------------------------------------------------------


def cmd_analyze_schedule(args) -> int:
    values = _parse_float_list(args.profile)
    if len(values) != 5:
        raise ConfigError(
            "--profile needs 5 values: attn_ms,ffn_ms,allreduce_ms,attn_load_ms,ffn_load_ms"
        )
    profile = TimingProfile(*values)
    layers = args.layers
    tight = check_tight_steady(profile)
    loose = check_loose_steady(profile, layers)
    print(f"tight: {'yes' if tight else 'no'}")
    print(f"loose: {'yes' if loose else 'no'}")
    period = min_retention_period(profile, layers)
    print(f"min_retention_period: {period if period is not None else 'none'}")
    window = args.window if args.window else 2 * layers
    result = simulate_schedule(profile, layers, window, retention_period=args.retention)
    print(f"simulated_stall_ms: {result.steady_stall_ms:.3f}")
    if args.retention:
        steady = check_retention_steady(profile, layers, args.retention)
        print(f"retention_steady(T={args.retention}): {'yes' if steady else 'no'}")
    elif period is not None and not loose:
        with_retention = simulate_schedule(profile, layers, window, retention_period=period)
        print(f"simulated_stall_ms(T={period}): {with_retention.steady_stall_ms:.3f}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="starshard", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("shard", help="slice toy or reference weights into per-device shard files")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", default=[], dest="overrides",
                   metavar="KEY=VALUE", help="override a config file entry")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--weights-in", default=None, help="single-device shard dir to reshard")
    p.add_argument("--devices", type=int, default=1)
    p.add_argument("--proportions", default=None, help="comma list overriding an even split")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_shard)

    p = sub.add_parser("serve", help="run one rank of a generation")
    p.add_argument("--role", required=True, choices=["master", "worker"])
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--devices", type=int, required=True)
    p.add_argument("--master", default="127.0.0.1:29400", help="host:port of rank 0")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", default=[], dest="overrides",
                   metavar="KEY=VALUE", help="override a config file entry")
    p.add_argument("--shards", required=True)
    p.add_argument("--window", type=int, default=4, help="0 disables the memory scheduler")
    p.add_argument("--retention", type=int, default=None)
    p.add_argument("--max-new-tokens", type=int, default=16)
    p.add_argument("--prompt", default=None)
    p.add_argument("--prompt-ids", default=None)
    p.add_argument("--metrics", default=None)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("bench", help="sweep loopback configurations and emit CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", default=[], dest="overrides",
                   metavar="KEY=VALUE", help="override a config file entry")
    p.add_argument("--out", required=True)
    p.add_argument("--devices-list", default="1,2,4")
    p.add_argument("--windows", default="1,2,4")
    p.add_argument("--retentions", default="0", help="0 means no retention")
    p.add_argument("--tokens", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prompt", default=None)
    p.add_argument("--prompt-ids", default="1,2,3,4")
    p.add_argument("--tau-ms", type=float, default=0.0, help="injected per-frame link latency")
    p.add_argument("--bandwidth-mbps", type=float, default=0.0, help="injected serialization rate")
    p.add_argument("--disk-base-ms", type=float, default=0.0)
    p.add_argument("--disk-ms-per-mib", type=float, default=0.0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("latency-lab", help="closed-form and simulated collective latency sweeps")
    p.add_argument("--hidden", type=int, default=8192)
    p.add_argument("--bandwidth-mbps", type=float, default=300.0)
    p.add_argument("--taus", default="0,1,2,5,10")
    p.add_argument("--algos", default="star,tree,ring")
    p.add_argument("--devices", type=int, default=3)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_latency_lab)

    p = sub.add_parser("analyze-schedule", help="steady-state predicates and stall simulation")
    p.add_argument("--profile", required=True, help="attn,ffn,allreduce,attn_load,ffn_load (ms)")
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--window", type=int, default=0, help="0 means 2*layers")
    p.add_argument("--retention", type=int, default=None)
    p.set_defaults(func=cmd_analyze_schedule)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("TPI_LOG", "WARNING").upper())
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ProtocolError as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return 3
    except (ShardFormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry points: server, client, and the experiment runner."""

import argparse
import ctypes
import logging
import sys
from pathlib import Path

import numpy as np

from . import transport
from .config import ConfigError, RunConfig, parse_config
from .fedcore import ClientRunner, ClientTrainer, FederationServer, LocalDataset
from .harness import (
    export_report,
    fer_data_bundle,
    load_fer_csv,
    run_centralized,
    run_federated,
    run_individual,
)
from .harness.experiments import default_augmenter

log = logging.getLogger(__name__)


def _parse_addr(text: str) -> tuple[str, int]:
    host, sep, port_s = text.rpartition(":")
    if not sep or not host:
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    try:
        port = int(port_s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad port in {text!r}") from None
    if not 0 < port < 65536:
        raise argparse.ArgumentTypeError(f"port {port} out of range")
    return host, port


def _load_config(path: str | None) -> RunConfig:
    return parse_config(path) if path else RunConfig()


_M_MMAP_THRESHOLD = -3  # glibc mallopt parameter id


def _pin_malloc_mmap(threshold_bytes: int) -> bool:
    """Route big allocations through mmap so freed model-sized blocks go
    back to the OS at once. Left to itself, glibc adapts the threshold
    upward and pools ~20 MB tensor blocks in the heap, which inflates a
    client's peak RSS well past what is actually live. No-op off glibc."""
    try:
        libc = ctypes.CDLL(None, use_errno=True)
        return bool(libc.mallopt(_M_MMAP_THRESHOLD, threshold_bytes))
    except (AttributeError, OSError, TypeError):
        return False


def cmd_server(args) -> int:
    cfg = _load_config(args.config)
    host, port = args.listen
    fed = cfg.federation()
    end = transport.TcpServerEnd(host, port, fed.n_clients, accept_timeout=fed.straggler_timeout)
    log.info("listening on %s:%d for %d clients", host, end.port, fed.n_clients)
    history = FederationServer(fed, end).run()
    last = history.records[-1] if history.records else None
    if last is not None:
        log.info(
            "finished %d rounds: val loss %.4f, val acc %.4f",
            history.rounds_run, last.loss, last.accuracy,
        )
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "global_weights.bin").write_bytes(
            transport.serialize_weights(history.final_weights)
        )
        with (out / "rounds.csv").open("w") as fh:
            fh.write("round,loss,accuracy,wall_s,peak_rss_mb\n")
            for r in history.records:
                fh.write(f"{r.round},{r.loss:.6f},{r.accuracy:.6f},{r.wall_s:.3f},{r.peak_rss_mb:.1f}\n")
        log.info("wrote %s", out / "global_weights.bin")
    return 0


def cmd_client(args) -> int:
    # above the largest activation block, below a full weight set: only
    # parameter-sized buffers pay the mmap round trip
    _pin_malloc_mmap(16 * 1024 * 1024)
    cfg = _load_config(args.config)
    host, port = args.server
    npz_path = Path(args.data) / "data.npz"
    with np.load(npz_path) as npz:
        data = LocalDataset(x=npz["x"], y=npz["y"])
    trainer = ClientTrainer(
        args.client_id,
        data,
        cfg.federation(),
        adam_config=cfg.adam(),
        augment_fn=default_augmenter() if args.augment else None,
    )
    end = transport.TcpClientEnd(host, port, args.client_id, connect_timeout=cfg.timeout_s)
    log.info("client %d: %d samples, server %s:%d", args.client_id, len(data), host, port)
    ClientRunner(end, trainer).run(timeout=cfg.timeout_s * 4)
    log.info("client %d: done", args.client_id)
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args.config)
    bundle = None
    if args.fer_csv:
        records = load_fer_csv(args.fer_csv)
        bundle = fer_data_bundle(records, cfg, full=args.full_fer)
    elif args.full_fer:
        raise SystemExit("--full-fer needs --fer-csv")

    if args.mode == "individual":
        report = run_individual(cfg, data=bundle)
    elif args.mode == "centralized":
        report = run_centralized(cfg, data=bundle)
    else:
        report = run_federated(cfg, transport=args.transport, data=bundle)

    out = Path(args.out)
    paths = export_report(report, out)
    for p in paths:
        log.info("wrote %s", p)
    print((out / "summary.txt").read_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedfuse",
        description="Federated multimodal emotion recognition at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("server", help="coordinate a federation over TCP")
    p.add_argument("--config", help="run configuration file")
    p.add_argument(
        "--listen",
        type=_parse_addr,
        default=("127.0.0.1", transport.DEFAULT_PORT),
        help=f"address to bind (default 127.0.0.1:{transport.DEFAULT_PORT})",
    )
    p.add_argument("--out", help="directory for final weights and round metrics")
    p.set_defaults(fn=cmd_server)

    p = sub.add_parser("client", help="join a federation as one client")
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--server", type=_parse_addr, required=True, help="server host:port")
    p.add_argument("--client-id", type=int, required=True)
    p.add_argument("--data", required=True, help="directory containing data.npz (x, y)")
    p.add_argument(
        "--augment",
        action="store_true",
        help="apply flip/rotation augmentation while training (photographic data)",
    )
    p.set_defaults(fn=cmd_client)

    p = sub.add_parser("run", help="run one experiment mode end to end")
    p.add_argument("--mode", choices=("individual", "centralized", "federated"), required=True)
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--out", required=True, help="report output directory")
    p.add_argument("--fer-csv", help="facial-expression CSV; omit to use synthetic images")
    p.add_argument("--full-fer", action="store_true", help="use every CSV row, not the subset")
    p.add_argument(
        "--transport",
        choices=("socket", "loopback"),
        default="socket",
        help="federated mode only: subprocess clients over TCP, or in-process threads",
    )
    p.set_defaults(fn=cmd_run)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO,
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

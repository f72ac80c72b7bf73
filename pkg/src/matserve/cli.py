"""Operator entry points: serve, datagen, and the three benches.

Bench subcommands exit 0 only when their assertions (trend checks) pass;
pass --no-check-trends to record timings without asserting on them.
"""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading

from . import bench, datagen
from .server import Server


def _int_list(text):
    return tuple(int(x) for x in text.split(",") if x)


def _add_common_bench_args(p):
    p.add_argument("--workers", type=int, default=2, help="workers per session")
    p.add_argument("--address", default=None, help="use a running server (host:port) instead of self-hosting")
    p.add_argument("--batch-rows", type=int, default=128, help="rows per transfer batch")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument(
        "--no-check-trends",
        dest="check_trends",
        action="store_false",
        help="report timings without asserting scaling trends",
    )


def build_parser():
    parser = argparse.ArgumentParser(
        prog="matserve",
        description="numerical offload server, dataset generator, and benches",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="INFO-level logs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run the offload server")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=24960)
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--max-matrix-bytes", type=int, default=None)

    p = sub.add_parser("datagen", help="write a synthetic matrix file")
    p.add_argument("kind", choices=["gaussian", "lowrank", "speech-like"])
    p.add_argument("--rows", type=int, default=None)
    p.add_argument("--cols", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rank", type=int, default=20, help="lowrank: target rank")
    p.add_argument("--noise", type=float, default=1e-6, help="lowrank: noise level")
    p.add_argument("--labels", type=int, default=datagen.SPEECH_CLASSES,
                   help="speech-like: number of classes")
    p.add_argument("--labels-out", default=None, help="speech-like: labels file path")
    p.add_argument("--out", required=True)

    p = sub.add_parser("bench-cg", help="CG solve cost across feature counts")
    p.add_argument("--features", type=_int_list, default=(1000, 2000, 3000),
                   help="comma-separated feature-count sweep")
    p.add_argument("--lambda", dest="lam", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=200)
    p.add_argument("--sigma", type=float, default=10.0)
    p.add_argument("--rows", type=int, default=100_000)
    p.add_argument("--cols", type=int, default=datagen.SPEECH_COLS)
    p.add_argument("--labels", type=int, default=datagen.SPEECH_CLASSES)
    p.add_argument("--clients", type=int, default=1)
    _add_common_bench_args(p)

    p = sub.add_parser("bench-svd", help="SVD offload use cases")
    p.add_argument("--data", required=True, help="matrix file from datagen")
    p.add_argument("--mode", choices=["client-load", "server-load", "replicate"],
                   required=True)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--replicas", type=_int_list, default=(1, 2),
                   help="replicate mode: comma-separated tiling factors")
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--max-subspace", type=int, default=0)
    _add_common_bench_args(p)

    p = sub.add_parser("bench-transfer", help="upload timing grid")
    p.add_argument("--rows", type=int, default=20_000)
    p.add_argument("--cols", type=int, default=200)
    p.add_argument("--client-procs", type=_int_list, default=(1, 2))
    p.add_argument("--worker-counts", type=_int_list, default=(1, 2))
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--address", default=None)
    p.add_argument("--batch-rows", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)

    return parser


def cmd_serve(args):
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return 2
    server = Server(
        host=args.host,
        port=args.port,
        workers=args.workers,
        max_matrix_bytes=args.max_matrix_bytes,
    )
    try:
        server.start()
    except OSError as exc:
        print(f"error: cannot listen on {args.host}:{args.port}: {exc}", file=sys.stderr)
        return 1
    print(f"listening on {server.address} with {args.workers} workers", flush=True)
    for wid, addr in enumerate(server.worker_addrs):
        print(f"worker {wid} at {addr}", flush=True)
    stop = threading.Event()

    def handle_signal(signum, frame):
        stop.set()

    signal.signal(signal.SIGINT, handle_signal)
    signal.signal(signal.SIGTERM, handle_signal)
    stop.wait()
    server.stop()
    print("shut down cleanly")
    return 0


def cmd_datagen(args):
    defaults = {
        "gaussian": (1000, 50),
        "lowrank": (1000, 100),
        "speech-like": (datagen.SPEECH_ROWS, datagen.SPEECH_COLS),
    }
    rows = args.rows if args.rows is not None else defaults[args.kind][0]
    cols = args.cols if args.cols is not None else defaults[args.kind][1]
    try:
        info = datagen.write_dataset(
            args.kind,
            args.out,
            rows,
            cols,
            args.seed,
            rank=args.rank,
            noise=args.noise,
            labels=args.labels,
            labels_out=args.labels_out,
        )
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for key, value in info.items():
        print(f"{key}={value}")
    return 0


def cmd_bench_cg(args):
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return 2
    reports, _ = bench.bench_cg(
        features=args.features,
        rows=args.rows,
        cols=args.cols,
        labels=args.labels,
        lam=args.lam,
        tol=args.tol,
        max_iter=args.max_iter,
        sigma=args.sigma,
        seed=args.seed,
        workers=args.workers,
        clients=args.clients,
        address=args.address,
        batch_rows=args.batch_rows,
    )
    for report in reports:
        bench.emit(report)
    status = 0
    if args.check_trends:
        for cid in range(args.clients):
            ok, detail = bench.cg_trend_from_reports(reports, client=cid)
            print(f"trend client={cid}: {'PASS' if ok else 'FAIL'} ({detail})")
            status |= 0 if ok else 1
    return status


def cmd_bench_svd(args):
    reports = bench.bench_svd(
        args.data,
        args.mode,
        k=args.k,
        replicas=args.replicas,
        workers=args.workers,
        reps=args.reps,
        seed=args.seed,
        address=args.address,
        batch_rows=args.batch_rows,
        max_subspace=args.max_subspace,
    )
    for report in reports:
        bench.emit(report)
    status = 0
    if args.mode == "replicate" and args.check_trends and len(reports) > 1:
        ok, detail = bench.check_weak_scaling(
            [r.extras["compute_min"] for r in reports]
        )
        print(f"weak-scaling: {'PASS' if ok else 'FAIL'} ({detail})")
        status |= 0 if ok else 1
    return status


def cmd_bench_transfer(args):
    reports = bench.bench_transfer(
        rows=args.rows,
        cols=args.cols,
        client_procs=args.client_procs,
        workers=args.worker_counts,
        reps=args.reps,
        batch_rows=args.batch_rows,
        seed=args.seed,
        address=args.address,
    )
    for report in reports:
        bench.emit(report)
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
    )
    handlers = {
        "serve": cmd_serve,
        "datagen": cmd_datagen,
        "bench-cg": cmd_bench_cg,
        "bench-svd": cmd_bench_svd,
        "bench-transfer": cmd_bench_transfer,
    }
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())

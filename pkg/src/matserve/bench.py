"""Benchmark drivers shaped after the offload service's three cost stories:
iterative solve cost vs. feature count, SVD offload with and without client
transfer, and raw matrix-transfer throughput over a (clients x workers)
grid.

Absolute times depend on the desk running them; the checks assert only
orderings and scaling trends, with loose tolerances. Every bench emits a
human-readable table plus machine-readable ``RECORD key=value`` lines, one
record per phase.
"""

from __future__ import annotations

import contextlib
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import binfile, datagen
from .client import connect
from .server import Server


@dataclass
class BenchReport:
    bench: str
    config: dict
    phases: dict  # name -> seconds; "load" is excluded from total
    extras: dict = field(default_factory=dict)

    @property
    def total(self):
        return sum(v for k, v in self.phases.items() if k != "load")

    def records(self):
        tag = " ".join(f"{k}={v}" for k, v in self.config.items())
        lines = [
            f"RECORD bench={self.bench} {tag} phase={name} seconds={secs:.6f}"
            for name, secs in self.phases.items()
        ]
        lines.append(f"RECORD bench={self.bench} {tag} phase=total seconds={self.total:.6f}")
        for key, value in self.extras.items():
            if isinstance(value, float):
                lines.append(f"RECORD bench={self.bench} {tag} {key}={value:.6g}")
            elif isinstance(value, (int, str, bool)):
                lines.append(f"RECORD bench={self.bench} {tag} {key}={value}")
        return lines

    def table(self):
        rows = [("phase", "seconds")]
        rows += [(k, f"{v:.4f}") for k, v in self.phases.items()]
        rows.append(("total (load excluded)", f"{self.total:.4f}"))
        width = max(len(r[0]) for r in rows) + 2
        header = " / ".join(f"{k}={v}" for k, v in self.config.items())
        out = [f"[{self.bench}] {header}"]
        out += [f"  {name:<{width}}{val}" for name, val in rows]
        return "\n".join(out)


def emit(report, out=print):
    out(report.table())
    for line in report.records():
        out(line)


@contextlib.contextmanager
def server_at(address, workers):
    """Yield a server address: the given one, or a self-hosted pool."""
    if address is not None:
        yield address
        return
    server = Server(workers=workers).start()
    try:
        yield server.address
    finally:
        server.stop()


# ---------------------------------------------------------------------------
# trend checks (pure, unit-testable)


def check_cg_trend(features, per_iter_seconds, slack=0.25):
    """Per-iteration cost should grow at most linearly in the feature count.

    Checks that cost/feature never exceeds the first sweep point's ratio by
    more than ``slack``, and that cost is monotone nondecreasing up to 5%.
    """
    if len(features) < 2:
        return True, "single point, nothing to check"
    norm = [t / d for t, d in zip(per_iter_seconds, features)]
    for i in range(1, len(features)):
        if per_iter_seconds[i] < per_iter_seconds[i - 1] * 0.95:
            return False, (
                f"per-iteration cost dropped from {per_iter_seconds[i-1]:.4g}s "
                f"at D={features[i-1]} to {per_iter_seconds[i]:.4g}s at D={features[i]}"
            )
        if norm[i] > norm[0] * (1.0 + slack):
            return False, (
                f"cost/feature at D={features[i]} is {norm[i]/norm[0]:.2f}x the "
                f"D={features[0]} ratio (> {1 + slack:.2f}x)"
            )
    return True, "per-iteration cost near-linear in feature count"


def check_weak_scaling(compute_seconds, low=0.5, high=1.5):
    """Consecutive compute times should stay within [low, high] of each other
    when size and workers double together."""
    for i in range(1, len(compute_seconds)):
        ratio = compute_seconds[i] / compute_seconds[i - 1]
        if not low <= ratio <= high:
            return False, f"step {i} compute ratio {ratio:.2f} outside [{low}, {high}]"
    return True, "compute time consistent across scaled sizes"


# ---------------------------------------------------------------------------
# bench: CG cost vs. feature count


def bench_cg(
    features=(1000, 2000, 3000),
    rows=100_000,
    cols=datagen.SPEECH_COLS,
    labels=datagen.SPEECH_CLASSES,
    lam=1e-5,
    tol=1e-8,
    max_iter=200,
    sigma=10.0,
    seed=0,
    workers=2,
    clients=1,
    address=None,
    batch_rows=128,
):
    """Upload raw features once per client, then expand + solve for each
    feature count. Returns (reports, per-client results dict)."""
    X, Y = datagen.speech_like(rows, cols, labels, seed)
    reports = []
    results = {}

    with server_at(address, workers) as addr:

        def one_client(cid):
            with connect(addr, workers, batch_rows=batch_rows) as session:
                lib = session.builtin
                t0 = time.perf_counter()
                hx = session.send_matrix(X)
                hy = session.send_matrix(Y)
                transfer_in = time.perf_counter() - t0
                for D in features:
                    t1 = time.perf_counter()
                    hz = lib.random_features(hx, D, sigma=sigma, seed=seed)
                    expand_s = time.perf_counter() - t1
                    t2 = time.perf_counter()
                    w, report = lib.cg(hz, hy, lam=lam, tol=tol, max_iter=max_iter)
                    solve_s = time.perf_counter() - t2
                    t3 = time.perf_counter()
                    w_local = session.fetch_matrix(w)
                    transfer_out = time.perf_counter() - t3
                    reports.append(
                        BenchReport(
                            "cg",
                            {"client": cid, "features": D, "workers": workers},
                            {
                                "transfer_in": transfer_in if D == features[0] else 0.0,
                                "expand": expand_s,
                                "compute": solve_s,
                                "transfer_out": transfer_out,
                            },
                            {
                                "iter_seconds_mean": report.iter_seconds_mean,
                                "iter_seconds_std": report.iter_seconds_std,
                                "iterations": int(report.iterations.max()),
                                "converged": bool(report.converged.all()),
                            },
                        )
                    )
                    results[(cid, D)] = w_local.to_dense()
                    session.release(w)
                    session.release(hz)

        threads = [
            threading.Thread(target=one_client, args=(cid,)) for cid in range(clients)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()

    reports.sort(key=lambda r: (r.config["client"], r.config["features"]))
    return reports, results


def cg_trend_from_reports(reports, client=0):
    mine = [r for r in reports if r.config["client"] == client]
    mine.sort(key=lambda r: r.config["features"])
    features = [r.config["features"] for r in mine]
    periter = [r.extras["iter_seconds_mean"] for r in mine]
    return check_cg_trend(features, periter)


# ---------------------------------------------------------------------------
# bench: truncated SVD offload


def _fetch_all(session, handles):
    t0 = time.perf_counter()
    fetched = [session.fetch_matrix(h) for h in handles]
    return fetched, time.perf_counter() - t0


def bench_svd(
    data_path,
    mode,
    k=20,
    replicas=(1,),
    workers=2,
    reps=1,
    seed=0,
    address=None,
    batch_rows=128,
    max_subspace=0,
):
    """Run one SVD use case and report per-phase times.

    Modes:
      client-load: client reads the file, uploads it, offloads the SVD.
      server-load: the pool reads the file directly; no inbound transfer.
      replicate: the pool loads then tiles the matrix column-wise by each
        factor in ``replicas``, with workers scaled by the same factor.
    """
    if mode not in ("client-load", "server-load", "replicate"):
        raise ValueError(f"unknown bench-svd mode {mode!r}")
    replicas = tuple(replicas)
    pool = workers * (max(replicas) if mode == "replicate" else 1)
    reports = []

    with server_at(address, pool) as addr:
        if mode == "replicate":
            sweeps = [(rep, workers * rep) for rep in replicas]
        else:
            sweeps = [(1, workers)]
        for rep, nworkers in sweeps:
            phases = {"load": 0.0, "transfer_in": 0.0, "compute": 0.0, "transfer_out": 0.0}
            compute_runs = []
            with connect(addr, nworkers, batch_rows=batch_rows) as session:
                lib = session.builtin
                if mode == "client-load":
                    t0 = time.perf_counter()
                    local = binfile.read_matrix(data_path)
                    phases["load"] = time.perf_counter() - t0
                    t0 = time.perf_counter()
                    handle = session.send_matrix(local)
                    phases["transfer_in"] = time.perf_counter() - t0
                else:
                    t0 = time.perf_counter()
                    handle = lib.load_file(data_path)
                    if rep > 1:
                        tiled = lib.replicate_columns(handle, rep)
                        session.release(handle)
                        handle = tiled
                    phases["load"] = time.perf_counter() - t0
                result = None
                for _ in range(max(1, reps)):  # repeated solves reuse the handle
                    if result is not None:
                        session.release(result.U)
                        session.release(result.V)
                    t0 = time.perf_counter()
                    result = lib.svd(handle, k, seed=seed, max_subspace=max_subspace)
                    compute_runs.append(time.perf_counter() - t0)
                phases["compute"] = float(np.mean(compute_runs))
                _, phases["transfer_out"] = _fetch_all(session, [result.U, result.V])
                sigmas = result.S
            reports.append(
                BenchReport(
                    "svd",
                    {"mode": mode, "k": k, "workers": nworkers, "replicas": rep, "reps": reps},
                    phases,
                    {
                        "sigma_max": float(sigmas[0]),
                        "sigma_min": float(sigmas[-1]),
                        "sigmas": sigmas,
                        "compute_runs": [round(t, 6) for t in compute_runs],
                        "compute_min": float(np.min(compute_runs)),
                    },
                )
            )
    return reports


# ---------------------------------------------------------------------------
# bench: transfer throughput grid


def bench_transfer(
    rows=20_000,
    cols=200,
    client_procs=(1, 2),
    workers=(1, 2),
    reps=3,
    batch_rows=128,
    seed=0,
    address=None,
):
    """Upload-timing grid over (client concurrency x worker count)."""
    matrix = datagen.gaussian(rows, cols, seed)
    nbytes = matrix.nbytes
    pool = max(workers)
    reports = []

    with server_at(address, pool) as addr:
        for w in workers:
            for nclients in client_procs:
                times = []
                for _ in range(reps):
                    barrier = threading.Barrier(nclients)
                    durations = [0.0] * nclients

                    def upload(idx):
                        with connect(addr, w, batch_rows=batch_rows) as session:
                            barrier.wait()
                            t0 = time.perf_counter()
                            handle = session.send_matrix(matrix)
                            durations[idx] = time.perf_counter() - t0
                            session.release(handle)

                    threads = [
                        threading.Thread(target=upload, args=(i,))
                        for i in range(nclients)
                    ]
                    t_wall = time.perf_counter()
                    for t in threads:
                        t.start()
                    for t in threads:
                        t.join()
                    times.append(time.perf_counter() - t_wall)
                mean_s = float(np.mean(times))
                reports.append(
                    BenchReport(
                        "transfer",
                        {"clients": nclients, "workers": w, "reps": reps},
                        {"transfer_in": mean_s},
                        {
                            "bytes": nbytes * nclients,
                            "mb_per_s": (nbytes * nclients / 1e6) / mean_s,
                            "runs": [round(t, 6) for t in times],
                        },
                    )
                )
    return reports

"""Built-in distributed linear-algebra routines.

Every routine runs as ``p`` symmetric participants over block-row shards,
using only its own shard plus the collective primitives (all-reduce sum,
broadcast, barrier). Small replicated state (d- or n-sized vectors) is
recomputed identically on every participant, which keeps results
bit-reproducible for a fixed worker count and seed.

The normal-equations operator is applied matrix-free as
``v -> X^T (X v) + n*lambda*v``: forming ``X^T X`` once costs O(n d^2) and
d x d memory, while the matrix-free product costs O(n d) per iteration and
only ever materializes d-vectors.

Parameter schemas below are the wire contract clients encode into RUN_TASK
ParamMaps.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import binfile, wire
from .engine import EngineError, OutputShard, RoutineError

_EPS = float(np.finfo(np.float64).eps)


@dataclass(frozen=True)
class ParamSpec:
    name: str
    kind: str  # "f64" | "i64" | "str" | "bool"
    default: object = None  # None means required
    doc: str = ""


@dataclass(frozen=True)
class RoutineDef:
    name: str
    fn: object
    n_inputs: int
    n_outputs: int
    params: tuple
    doc: str = ""


def _schema_error(message):
    return EngineError(wire.ERR_SCHEMA_VIOLATION, message)


def validate_params(routine, raw_params):
    """Normalize a ParamMap against a routine's schema (ERROR 6 on violation)."""
    known = {p.name: p for p in routine.params}
    for key in raw_params:
        if key not in known:
            raise _schema_error(f"{routine.name}: unknown parameter {key!r}")
    out = {}
    for spec in routine.params:
        if spec.name in raw_params:
            value = raw_params[spec.name]
            if spec.kind == "f64":
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise _schema_error(f"{routine.name}: {spec.name} must be numeric")
                value = float(value)
            elif spec.kind == "i64":
                if isinstance(value, bool) or not isinstance(value, int):
                    raise _schema_error(f"{routine.name}: {spec.name} must be an integer")
            elif spec.kind == "str":
                if not isinstance(value, str):
                    raise _schema_error(f"{routine.name}: {spec.name} must be a string")
            elif spec.kind == "bool":
                if not isinstance(value, bool):
                    raise _schema_error(f"{routine.name}: {spec.name} must be a bool")
            out[spec.name] = value
        elif spec.default is None:
            raise _schema_error(f"{routine.name}: missing required parameter {spec.name!r}")
        else:
            out[spec.name] = spec.default
    return out


# ---------------------------------------------------------------------------
# conjugate gradient on the regularized normal equations


def _check_finite(ctx, shards, what):
    bad = sum(float(np.isnan(arr).sum()) for arr in shards)
    total = float(ctx.allreduce_sum(np.array([bad]))[0])
    if total:
        raise RoutineError(f"{what}: input contains NaN ({int(total)} entries)")


def cg_solve(ctx, input_ids, params):
    """Solve (X^T X + n*lambda*I) W = X^T Y for all right-hand-side columns.

    Each column runs its own CG recurrence; the matrix-vector products for
    all still-active columns share one blocked local product plus one
    all-reduce per iteration. Converged columns are frozen. Before
    returning, the true residual is recomputed from W; columns whose
    recurrence drifted restart from the recomputed residual until the
    iteration budget runs out.
    """
    x_id, y_id = input_ids
    X = ctx.shard(x_id)
    Y = ctx.shard(y_id)
    n = ctx.layout(x_id).rows
    d = ctx.layout(x_id).cols
    c = ctx.layout(y_id).cols
    lam = params["lambda"]
    tol = params["tol"]
    max_iter = params["max_iter"]
    nlam = n * lam

    _check_finite(ctx, (X, Y), "cg_solve")

    def apply_op(V):
        local = X.T @ (X @ V)
        total = ctx.allreduce_sum(local.ravel()).reshape(local.shape)
        return total + nlam * V

    B = ctx.allreduce_sum((X.T @ Y).ravel()).reshape(d, c)
    bnorm = np.linalg.norm(B, axis=0)

    W = np.zeros((d, c))
    R = B.copy()
    P = B.copy()
    rs = np.einsum("ij,ij->j", R, R)
    iterations = np.zeros(c, dtype=np.int64)
    active = [j for j in range(c) if bnorm[j] > 0.0]
    iter_seconds = []
    total_iter = 0

    while True:
        while active and total_iter < max_iter:
            t0 = time.perf_counter()
            act = np.array(active)
            Pa = P[:, act]
            APa = apply_op(Pa)
            pAp = np.einsum("ij,ij->j", Pa, APa)
            if np.any(pAp <= 0.0) or not np.all(np.isfinite(pAp)):
                raise RoutineError(
                    "cg_solve: p^T A p <= 0; operator is SPD so this signals "
                    "overflow or NaN"
                )
            alpha = rs[act] / pAp
            W[:, act] += alpha * Pa
            R[:, act] -= alpha * APa
            rs_new = np.einsum("ij,ij->j", R[:, act], R[:, act])
            total_iter += 1
            iterations[act] = total_iter
            done = np.sqrt(rs_new) <= tol * bnorm[act]
            beta = rs_new / rs[act]
            P[:, act] = R[:, act] + beta * P[:, act]
            rs[act] = rs_new
            active = [int(j) for j, fin in zip(act, done) if not fin]
            iter_seconds.append(time.perf_counter() - t0)

        # verify against the true residual, restart drifted columns
        residual = B - apply_op(W)
        res_norm = np.linalg.norm(residual, axis=0)
        rel = np.where(bnorm > 0.0, res_norm / np.where(bnorm > 0.0, bnorm, 1.0), 0.0)
        retry = [j for j in range(c) if bnorm[j] > 0.0 and rel[j] > tol]
        if not retry or total_iter >= max_iter:
            break
        active = retry
        R[:, active] = residual[:, active]
        P[:, active] = residual[:, active]
        rs[active] = np.einsum("ij,ij->j", residual[:, active], residual[:, active])

    converged = rel <= tol
    start, end = ctx.out_range(d)
    scalars = {
        "columns": c,
        "iterations_total": int(total_iter),
        "iter_seconds_mean": float(np.mean(iter_seconds)) if iter_seconds else 0.0,
        "iter_seconds_std": (
            float(np.std(iter_seconds, ddof=1)) if len(iter_seconds) > 1 else 0.0
        ),
    }
    for j in range(c):
        scalars[f"iterations.{j}"] = int(iterations[j])
        scalars[f"residual.{j}"] = float(rel[j])
        scalars[f"converged.{j}"] = bool(converged[j])
    return [OutputShard(d, c, W[start:end])], scalars


# ---------------------------------------------------------------------------
# random Fourier features


def random_features(ctx, input_ids, params):
    """Map each row x to sqrt(2/D) * cos(x @ Omega + b).

    Omega is d x D with i.i.d. N(0, 1/sigma^2) entries and b is uniform on
    [0, 2*pi); both are drawn identically on every worker from the seed
    (Omega first, then b), so no communication is needed: each worker
    expands only its own row block.
    """
    x_id = input_ids[0]
    X = ctx.shard(x_id)
    lay = ctx.layout(x_id)
    D = params["num_features"]
    sigma = params["sigma"]
    seed = params["seed"]

    ctx.check_alloc(lay.cols * D * 8)
    ctx.check_alloc(lay.rows * D * 8)

    rng = np.random.default_rng(seed)
    omega = rng.normal(0.0, 1.0 / sigma, size=(lay.cols, D))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=D)
    Z = np.sqrt(2.0 / D) * np.cos(X @ omega + phase)
    return [OutputShard(lay.rows, D, Z)], {"num_features": D, "sigma": sigma, "seed": seed}


def rff_basis(d, D, sigma, seed):
    """Regenerate the (Omega, b) pair a worker derives from a seed."""
    rng = np.random.default_rng(seed)
    omega = rng.normal(0.0, 1.0 / sigma, size=(d, D))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=D)
    return omega, phase


# ---------------------------------------------------------------------------
# truncated SVD via Lanczos on the Gram matrix


def truncated_svd(ctx, input_ids, params):
    """Top-k singular triplets of a tall matrix A.

    Lanczos iteration on v -> A^T (A v) with full reorthogonalization (two
    passes). The basis grows until the top-k Ritz pairs have residual
    estimates below tol * theta_max or the subspace cap is reached. On
    breakdown (invariant subspace found early) a fresh random vector,
    orthogonalized against the basis, restarts the recurrence; the
    accumulated projected matrix stays block-tridiagonal and is
    diagonalized densely.

    Right singular vectors come from the Ritz vectors, columns sign-fixed
    so the largest-magnitude entry is positive; left vectors are
    U_j = A v_j / sigma_j, computed on each worker's own rows.
    """
    a_id = input_ids[0]
    A = ctx.shard(a_id)
    lay = ctx.layout(a_id)
    m, n = lay.rows, lay.cols
    k = params["k"]
    tol = params["tol"]
    seed = params["seed"]
    cap = min(params["max_subspace"], n)

    def gram(v):
        return ctx.allreduce_sum(A.T @ (A @ v))

    rng = np.random.default_rng(seed)
    V = np.zeros((cap, n))
    alphas = np.zeros(cap)
    betas = np.zeros(cap)  # betas[j] couples v_j and v_{j+1}; 0 at restart seams

    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    v_prev = np.zeros(n)
    beta_prev = 0.0
    s = 0
    theta = None
    ritz_y = None
    resid = None
    theta_max = 0.0
    converged = False

    while s < cap:
        V[s] = v
        u = gram(v)
        alpha = float(v @ u)
        w = u - alpha * v - beta_prev * v_prev
        for _ in range(2):  # full reorthogonalization, twice
            w -= V[: s + 1].T @ (V[: s + 1] @ w)
        alphas[s] = alpha
        beta = float(np.linalg.norm(w))
        s += 1

        if s >= k:
            T = np.diag(alphas[:s])
            off = betas[: s - 1]
            T += np.diag(off, 1) + np.diag(off, -1)
            evals, evecs = np.linalg.eigh(T)
            order = np.argsort(evals)[::-1][:k]
            theta = evals[order]
            ritz_y = evecs[:, order]
            theta_max = max(float(evals[-1]), 0.0)
            resid = beta * np.abs(ritz_y[s - 1, :])
            if np.all(resid <= tol * theta_max) or s == n:
                converged = True
                break
        if s == cap:
            break

        scale = np.abs(alphas[:s]).max() + betas[:s].max()
        if beta <= max(scale, 1.0) * 1e-14 or not np.isfinite(beta):
            # invariant subspace: restart with a fresh direction
            fresh = rng.standard_normal(n)
            fresh -= V[:s].T @ (V[:s] @ fresh)
            fresh -= V[:s].T @ (V[:s] @ fresh)
            norm = np.linalg.norm(fresh)
            if norm <= 1e-12:
                break  # whole space exhausted
            v_prev = np.zeros(n)
            beta_prev = 0.0
            v = fresh / norm
        else:
            betas[s - 1] = beta
            v_prev = V[s - 1]
            beta_prev = beta
            v = w / beta

    if theta is None:
        raise RoutineError(f"truncated_svd: basis exhausted before reaching k={k}")
    if not converged:
        worst = float(np.max(resid))
        raise RoutineError(
            f"truncated_svd: not converged within subspace {cap}: worst Ritz "
            f"residual {worst:.3e} > tol*theta_max = {tol * theta_max:.3e}"
        )

    theta = np.maximum(theta, 0.0)
    sigmas = np.sqrt(theta)
    Vr = V[:s].T @ ritz_y  # n x k
    for j in range(k):
        i = int(np.argmax(np.abs(Vr[:, j])))
        if Vr[i, j] < 0.0:
            Vr[:, j] = -Vr[:, j]

    cutoff = np.sqrt(_EPS) * (sigmas[0] if sigmas[0] > 0.0 else 1.0)
    unreliable = sigmas < cutoff
    U_block = (A @ Vr) / np.where(sigmas > 0.0, sigmas, 1.0)

    vstart, vend = ctx.out_range(n)
    scalars = {"k": k, "basis": int(s)}
    for j in range(k):
        scalars[f"sigma.{j}"] = float(sigmas[j])
        scalars[f"unreliable.{j}"] = bool(unreliable[j])
        scalars[f"ritz_residual.{j}"] = float(resid[j])
    outputs = [
        OutputShard(m, k, U_block),
        OutputShard(n, k, Vr[vstart:vend]),
    ]
    return outputs, scalars


# ---------------------------------------------------------------------------
# tall-skinny QR


def _qr_reduced(a):
    if a.shape[0] == 0:
        return np.zeros((0, 0)), np.zeros((0, a.shape[1]))
    return np.linalg.qr(a, mode="reduced")


def tsqr(ctx, input_ids, params):
    """A = Q R for tall A: local Householder QR per shard, binary-tree
    reduction of the stacked R factors, Q recovered by pushing each leaf's
    transform back down its path in the tree.

    The R gather is the only communication; the (tiny) tree itself is
    replayed identically on every worker. Signs are fixed so R has a
    nonnegative diagonal.
    """
    a_id = input_ids[0]
    A = ctx.shard(a_id)
    lay = ctx.layout(a_id)
    m, n = lay.rows, lay.cols
    p = ctx.nranks

    Q_local, R_local = _qr_reduced(A)
    fro2 = float(ctx.allreduce_sum(np.array([np.sum(A * A)]))[0])
    anorm = np.sqrt(fro2)

    leaf_rows = [min(end - start, n) for _, start, end in lay.assignment]
    padded = np.zeros((p, n, n))
    padded[ctx.rank, : R_local.shape[0]] = R_local
    gathered = ctx.allreduce_sum(padded.ravel()).reshape(p, n, n)
    nodes = [gathered[i, : leaf_rows[i]] for i in range(p)]

    # replicated binary reduction tree; each level records (q, left_rows)
    levels = []
    while len(nodes) > 1:
        level = []
        merged = []
        for i in range(0, len(nodes) - 1, 2):
            stacked = np.vstack([nodes[i], nodes[i + 1]])
            qn, rn = _qr_reduced(stacked)
            level.append((qn, nodes[i].shape[0]))
            merged.append(rn)
        if len(nodes) % 2:
            level.append(None)  # odd node passes through untouched
            merged.append(nodes[-1])
        levels.append(level)
        nodes = merged
    R_final = np.triu(nodes[0])

    small = np.abs(np.diag(R_final)) <= 1e-12 * anorm
    if small.any():
        raise RoutineError(
            f"tsqr: rank-deficient input (R diagonal entry "
            f"{int(np.nonzero(small)[0][0])} below 1e-12 * ||A||_F)"
        )

    # back-substitution: walk my leaf's path from the root down
    transform = np.eye(n)
    for depth in reversed(range(len(levels))):
        node_index = ctx.rank >> depth
        entry = levels[depth][node_index // 2]
        if entry is None:
            continue
        qn, left_rows = entry
        if node_index % 2 == 0:
            transform = qn[:left_rows] @ transform
        else:
            transform = qn[left_rows:] @ transform
    Q_block = Q_local @ transform if A.shape[0] else np.zeros((0, n))

    signs = np.where(np.diag(R_final) < 0.0, -1.0, 1.0)
    R_final = R_final * signs[:, None]
    Q_block = Q_block * signs[None, :]

    rstart, rend = ctx.out_range(n)
    outputs = [
        OutputShard(m, n, Q_block),
        OutputShard(n, n, R_final[rstart:rend]),
    ]
    return outputs, {"frobenius_norm": anorm}


# ---------------------------------------------------------------------------
# server-side data plumbing


def load_file(ctx, input_ids, params):
    """Materialize a matrix file as a distributed matrix; each worker reads
    only its own row block."""
    path = params["path"]
    try:
        with open(path, "rb") as f:
            rows, cols = binfile.read_header(f)
            start, end = ctx.out_range(rows)
            block = binfile.read_rows(f, rows, cols, start, end - start)
    except OSError as exc:
        raise EngineError(wire.ERR_IO, f"load_file: {exc}") from exc
    except binfile.BinMatrixError as exc:
        raise EngineError(wire.ERR_IO, f"load_file: {exc}") from exc
    ctx.check_alloc(rows * cols * 8)
    return [OutputShard(rows, cols, block)], {"rows": rows, "cols": cols}


def replicate_columns(ctx, input_ids, params):
    """Tile a matrix column-wise ``times`` times (weak-scaling workloads)."""
    a_id = input_ids[0]
    A = ctx.shard(a_id)
    lay = ctx.layout(a_id)
    times = params["times"]
    ctx.check_alloc(lay.rows * lay.cols * times * 8)
    tiled = np.tile(A, (1, times))
    return [OutputShard(lay.rows, lay.cols * times, tiled)], {
        "rows": lay.rows,
        "cols": lay.cols * times,
    }


# ---------------------------------------------------------------------------
# registry and request validation


def _validate_cg(metas, params):
    x, y = metas
    if x.rows != y.rows:
        raise _schema_error(
            f"cg_solve: X has {x.rows} rows but Y has {y.rows}"
        )
    if params["lambda"] < 0.0:
        raise _schema_error("cg_solve: lambda must be >= 0")
    if params["tol"] <= 0.0:
        raise _schema_error("cg_solve: tol must be > 0")
    if params["max_iter"] < 1:
        raise _schema_error("cg_solve: max_iter must be >= 1")


def _validate_rff(metas, params):
    if params["num_features"] < 1:
        raise _schema_error("random_features: num_features must be >= 1")
    if params["sigma"] <= 0.0:
        raise _schema_error("random_features: sigma must be > 0")


def _validate_svd(metas, params):
    (a,) = metas
    k = params["k"]
    shortest = min(a.rows, a.cols)
    if not 1 <= k <= shortest:
        raise _schema_error(
            f"truncated_svd: k={k} outside [1, min(rows, cols)={shortest}]"
        )
    if params["tol"] <= 0.0:
        raise _schema_error("truncated_svd: tol must be > 0")
    if params["max_subspace"] == 0:
        params["max_subspace"] = min(a.cols, max(2 * k, k + 10))
    # the 2k floor is capped by the column count: a basis can never exceed n,
    # and k <= n already
    if params["max_subspace"] < min(a.cols, 2 * k):
        raise _schema_error(
            f"truncated_svd: max_subspace must be >= min(cols, 2k) = "
            f"{min(a.cols, 2 * k)}"
        )


def _validate_tsqr(metas, params):
    (a,) = metas
    if a.rows < a.cols:
        raise _schema_error(f"tsqr: need rows >= cols, got {a.rows} x {a.cols}")


def _validate_replicate(metas, params):
    if params["times"] < 1:
        raise _schema_error("replicate_columns: times must be >= 1")


_BUILTIN = [
    RoutineDef(
        "cg_solve",
        cg_solve,
        n_inputs=2,
        n_outputs=1,
        params=(
            ParamSpec("lambda", "f64", 1e-5, "ridge regularization weight"),
            ParamSpec("tol", "f64", 1e-12, "relative-residual stop threshold"),
            ParamSpec("max_iter", "i64", 1000, "iteration cap"),
        ),
        doc="solve (X^T X + n*lambda*I) W = X^T Y by multi-RHS CG",
    ),
    RoutineDef(
        "random_features",
        random_features,
        n_inputs=1,
        n_outputs=1,
        params=(
            ParamSpec("num_features", "i64", None, "output feature count D"),
            ParamSpec("sigma", "f64", 10.0, "Gaussian kernel bandwidth"),
            ParamSpec("seed", "i64", 0, "basis RNG seed"),
        ),
        doc="expand rows with a random cosine feature map",
    ),
    RoutineDef(
        "truncated_svd",
        truncated_svd,
        n_inputs=1,
        n_outputs=2,
        params=(
            ParamSpec("k", "i64", None, "requested rank"),
            ParamSpec("tol", "f64", 1e-10, "Ritz residual threshold"),
            ParamSpec("max_subspace", "i64", 0, "basis cap; 0 picks the default"),
            ParamSpec("seed", "i64", 0, "start-vector seed"),
        ),
        doc="top-k singular triplets via Lanczos on the Gram matrix",
    ),
    RoutineDef(
        "tsqr",
        tsqr,
        n_inputs=1,
        n_outputs=2,
        params=(),
        doc="tall-skinny QR with tree-reduced R factors",
    ),
    RoutineDef(
        "load_file",
        load_file,
        n_inputs=0,
        n_outputs=1,
        params=(ParamSpec("path", "str", None, "matrix file path"),),
        doc="load a matrix file straight into worker shards",
    ),
    RoutineDef(
        "replicate_columns",
        replicate_columns,
        n_inputs=1,
        n_outputs=1,
        params=(ParamSpec("times", "i64", None, "tiling factor"),),
        doc="tile a matrix column-wise",
    ),
]

_VALIDATORS = {
    "cg_solve": _validate_cg,
    "random_features": _validate_rff,
    "truncated_svd": _validate_svd,
    "tsqr": _validate_tsqr,
    "replicate_columns": _validate_replicate,
}

LIBRARIES = {"builtin": {r.name: r for r in _BUILTIN}}


def validate_request(routine, input_metas, raw_params):
    """Check arity, parameter schema, and dimension preconditions."""
    if len(input_metas) != routine.n_inputs:
        raise _schema_error(
            f"{routine.name}: expects {routine.n_inputs} input matrices, "
            f"got {len(input_metas)}"
        )
    params = validate_params(routine, raw_params)
    validator = _VALIDATORS.get(routine.name)
    if validator is not None:
        validator(input_metas, params)
    return params

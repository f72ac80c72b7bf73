#!/usr/bin/env python3
"""Write cross-client reference fixtures for the live TypeScript tests.

Generates a seeded ridge system, saves it in the matrix-file format, then
solves it through the reference client against a running server and saves
the result. The TypeScript client must reproduce that solution (within
1e-8) from the identical input bytes.
"""

import argparse
import json
import os
import sys

import numpy as np

from matserve import binfile, connect


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--address", required=True)
    parser.add_argument("--workers", type=int, default=2)
    parser.add_argument("--out", required=True)
    args = parser.parse_args()

    os.makedirs(args.out, exist_ok=True)
    rng = np.random.default_rng(424242)
    X = rng.standard_normal((200, 30))
    Y = rng.standard_normal((200, 5))
    binfile.write_matrix(os.path.join(args.out, "X.alch"), X)
    binfile.write_matrix(os.path.join(args.out, "Y.alch"), Y)

    params = {"lambda": 1e-5, "tol": 1e-12, "max_iter": 500}
    with connect(args.address, args.workers) as session:
        hx = session.send_matrix(X)
        hy = session.send_matrix(Y)
        w, report = session.builtin.cg(
            hx, hy, lam=params["lambda"], tol=params["tol"], max_iter=params["max_iter"]
        )
        W = session.fetch_matrix(w).to_dense()
    binfile.write_matrix(os.path.join(args.out, "W_ref.alch"), W)
    with open(os.path.join(args.out, "meta.json"), "w") as f:
        json.dump({**params, "workers": args.workers, "iterations": int(report.iterations.max())}, f)
    print(f"fixtures written to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Synthetic dataset generators with benchmark-friendly shapes.

All generators are deterministic for a given seed. The lowrank generator
writes a JSON sidecar next to the matrix file recording the noiseless
spectrum and the noise level, so verification code can compare against a
known answer.
"""

from __future__ import annotations

import json

import numpy as np

from . import binfile

SPEECH_ROWS = 100_000
SPEECH_COLS = 440
SPEECH_CLASSES = 147


def gaussian(rows, cols, seed):
    if rows < 1 or cols < 1:
        raise ValueError(f"invalid dimensions {rows} x {cols}")
    rng = np.random.default_rng(seed)
    return rng.standard_normal((rows, cols))


def lowrank(rows, cols, rank, seed, noise=1e-6):
    """A = B @ C.T + noise, with the noiseless spectrum returned alongside.

    B and C have orthonormal columns scaled by a decaying profile, so the
    noiseless singular values are exactly the profile entries.
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"invalid dimensions {rows} x {cols}")
    if not 1 <= rank <= min(rows, cols):
        raise ValueError(f"rank {rank} outside [1, min(rows, cols)]")
    rng = np.random.default_rng(seed)
    qb, _ = np.linalg.qr(rng.standard_normal((rows, rank)))
    qc, _ = np.linalg.qr(rng.standard_normal((cols, rank)))
    spectrum = 10.0 * np.power(0.7, np.arange(rank))
    a = (qb * spectrum) @ qc.T
    if noise > 0.0:
        a = a + noise * rng.standard_normal((rows, cols))
    return a, spectrum


def speech_like(rows=SPEECH_ROWS, cols=SPEECH_COLS, classes=SPEECH_CLASSES, seed=0):
    """Class-structured features plus one-hot labels, shaped like a
    phone-classification training set."""
    if rows < 1 or cols < 1 or classes < 1:
        raise ValueError("invalid dimensions")
    rng = np.random.default_rng(seed)
    centroids = rng.standard_normal((classes, cols))
    labels = rng.integers(0, classes, size=rows)
    features = centroids[labels] + 0.5 * rng.standard_normal((rows, cols))
    onehot = np.zeros((rows, classes))
    onehot[np.arange(rows), labels] = 1.0
    return features, onehot


def write_dataset(kind, out, rows, cols, seed, rank=20, noise=1e-6, labels=SPEECH_CLASSES,
                  labels_out=None):
    """Generate and write one dataset; returns a dict describing the files."""
    out = str(out)
    if kind == "gaussian":
        binfile.write_matrix(out, gaussian(rows, cols, seed))
        return {"path": out, "rows": rows, "cols": cols}
    if kind == "lowrank":
        a, spectrum = lowrank(rows, cols, rank, seed, noise)
        binfile.write_matrix(out, a)
        sidecar = out + ".spectrum.json"
        with open(sidecar, "w") as f:
            json.dump(
                {"singular_values": spectrum.tolist(), "noise": noise, "rank": rank}, f
            )
        return {"path": out, "rows": rows, "cols": cols, "spectrum": sidecar}
    if kind == "speech-like":
        features, onehot = speech_like(rows, cols, labels, seed)
        binfile.write_matrix(out, features)
        if labels_out is None:
            stem, dot, ext = out.rpartition(".")
            labels_out = f"{stem}.labels.{ext}" if dot else f"{out}.labels"
        binfile.write_matrix(labels_out, onehot)
        return {
            "path": out,
            "rows": rows,
            "cols": cols,
            "labels_path": str(labels_out),
            "labels": labels,
        }
    raise ValueError(f"unknown dataset kind {kind!r}")

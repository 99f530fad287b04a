"""Per-slice run-length encoding, the mask wire format of the HTTP service.

A slice is flattened row-major; ``counts`` alternate background/foreground run
lengths starting with background, so an all-background slice is ``[Y * X]``.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatchError


def encode_slice(mask: np.ndarray) -> dict:
    """Encode one binary slice ``(Y, X)`` to an RLE dict."""
    if mask.ndim != 2:
        raise ShapeMismatchError(f"expected a 2D slice, got shape {mask.shape}")
    flat = np.asarray(mask, dtype=np.uint8).reshape(-1)
    flat = (flat > 0).astype(np.uint8)
    if flat.size == 0:
        return {"size": list(mask.shape), "counts": []}
    boundaries = np.flatnonzero(np.diff(flat)) + 1
    runs = np.diff(np.concatenate([[0], boundaries, [flat.size]]))
    counts = runs.tolist()
    if flat[0] == 1:  # always start with a (possibly zero) background run
        counts = [0] + counts
    return {"size": [int(mask.shape[0]), int(mask.shape[1])], "counts": counts}


def decode_slice(rle: dict) -> np.ndarray:
    """Decode an RLE dict back to a uint8 slice of zeros and ones."""
    h, w = (int(v) for v in rle["size"])
    counts = rle["counts"]
    total = sum(counts)
    if total != h * w:
        raise ShapeMismatchError(f"RLE counts sum to {total}, expected {h * w}")
    flat = np.zeros(h * w, dtype=np.uint8)
    pos = 0
    value = 0
    for run in counts:
        if value:
            flat[pos : pos + run] = 1
        pos += run
        value ^= 1
    return flat.reshape(h, w)


def encode_mask(labels: np.ndarray) -> list[dict]:
    """Encode a binary volume ``(Z, Y, X)`` to a list of per-slice RLEs."""
    return [dict(encode_slice(labels[z]), z=z) for z in range(labels.shape[0])]


def decode_mask(slices: list[dict], shape: tuple[int, int, int]) -> np.ndarray:
    zdim, ydim, xdim = shape
    out = np.zeros(shape, dtype=np.uint8)
    for item in slices:
        z = int(item["z"])
        if not 0 <= z < zdim:
            raise ShapeMismatchError(f"slice index {z} outside volume depth {zdim}")
        decoded = decode_slice(item)
        if decoded.shape != (ydim, xdim):
            raise ShapeMismatchError(
                f"slice {z} decodes to {decoded.shape}, expected {(ydim, xdim)}"
            )
        out[z] = decoded
    return out

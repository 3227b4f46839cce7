"""Depth metrics (SIDE, MAD) and structure-recovery scores."""

from __future__ import annotations

import numpy as np


def _positive_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"depth maps differ in shape: {pred.shape} vs {gt.shape}")
    if np.any(pred <= 0) or np.any(gt <= 0):
        raise ValueError("depth maps must be strictly positive")
    return pred, gt


def side(pred, gt) -> float:
    """Scale-invariant depth error: population std of ``log pred - log gt``.

    A leading batch axis is allowed; the result is then averaged over maps.
    """
    pred, gt = _positive_pair(pred, gt)
    diff = np.log(pred) - np.log(gt)
    if diff.ndim > 2:
        return float(diff.reshape(diff.shape[0], -1).std(axis=1).mean())
    return float(diff.std())


def depth_normals(depth: np.ndarray, spacing: float = 1.0) -> np.ndarray:
    """Unit normals (..., G, G, 3) from central differences, reflective border."""
    depth = np.asarray(depth, dtype=np.float64)
    pad = [(0, 0)] * (depth.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(depth, pad, mode="reflect")
    gx = (p[..., 1:-1, 2:] - p[..., 1:-1, :-2]) / (2.0 * spacing)
    gy = (p[..., 2:, 1:-1] - p[..., :-2, 1:-1]) / (2.0 * spacing)
    n = np.stack([-gx, -gy, np.ones_like(gx)], axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def mad(pred, gt, spacing: float = 1.0) -> float:
    """Mean angle (degrees) between the normals of two height fields, interior pixels only."""
    pred, gt = _positive_pair(pred, gt)
    if pred.shape[-1] < 3 or pred.shape[-2] < 3:
        raise ValueError("MAD needs grids of at least 3x3")
    n1 = depth_normals(pred, spacing)[..., 1:-1, 1:-1, :]
    n2 = depth_normals(gt, spacing)[..., 1:-1, 1:-1, :]
    cos = np.clip((n1 * n2).sum(axis=-1), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)).mean())


def structure_recovery(learned, gt) -> dict:
    """SHD plus directed-edge precision and recall of binary adjacency matrices.

    SHD counts, per unordered pair, one unit for any mismatch (missing,
    extra or reversed edge). Precision is 1 when nothing is predicted and
    recall is 1 when the ground truth has no edges.
    """
    B = np.asarray(learned) != 0
    G = np.asarray(gt) != 0
    if B.shape != G.shape:
        raise ValueError("adjacency matrices differ in size")
    n = B.shape[0]
    shd = 0
    for i in range(n):
        for j in range(i + 1, n):
            if (B[i, j], B[j, i]) != (G[i, j], G[j, i]):
                shd += 1
    tp = int((B & G).sum())
    n_pred, n_true = int(B.sum()), int(G.sum())
    precision = tp / n_pred if n_pred else 1.0
    recall = tp / n_true if n_true else 1.0
    return {"shd": shd, "precision": precision, "recall": recall}

"""Adjacency matrices over latent factors, dense orderings and the acyclicity penalty.

Convention: ``M[j, k]`` is the weight of the directed edge ``j -> k``. Factors are
indexed in the order ``V, D, L, A`` unless another label tuple is passed.
"""

from __future__ import annotations

import heapq
import itertools
import json
from typing import Sequence

import numpy as np

from .autodiff import Tensor, as_tensor

FACTORS = ("V", "D", "L", "A")
BINARIZE_THRESHOLD = 0.01


def parse_ordering(ordering, labels: Sequence[str] = FACTORS) -> tuple[int, ...]:
    """Turn ``"DVAL"`` (or a sequence of labels / indices) into a tuple of factor indices."""
    if isinstance(ordering, str):
        try:
            perm = tuple(labels.index(ch) for ch in ordering)
        except ValueError:
            raise ValueError(f"ordering {ordering!r} uses labels outside {''.join(labels)}") from None
    else:
        perm = tuple(labels.index(x) if isinstance(x, str) else int(x) for x in ordering)
    if sorted(perm) != list(range(len(labels))):
        raise ValueError(f"{ordering!r} is not a permutation of {''.join(labels)}")
    return perm


def ordering_label(perm: Sequence[int], labels: Sequence[str] = FACTORS) -> str:
    return "".join(labels[i] for i in perm)


def all_orderings(n: int = 4) -> list[tuple[int, ...]]:
    return list(itertools.permutations(range(n)))


def ordering_to_mask(perm) -> np.ndarray:
    """Binary mask with an edge from every earlier factor to every later one."""
    perm = parse_ordering(perm) if isinstance(perm, str) else tuple(int(p) for p in perm)
    n = len(perm)
    pos = np.empty(n, dtype=int)
    pos[list(perm)] = np.arange(n)
    return (pos[:, None] < pos[None, :]).astype(np.float64)


def acyclicity_penalty(M, c: float = 1.0):
    """``tr((I + (c/n) M∘M)^n) - n``; zero exactly when ``M`` is a DAG.

    Accepts a :class:`Tensor` (result stays on the tape) or a plain array
    (returns a float).
    """
    if c <= 0:
        raise ValueError("c must be positive")
    on_tape = isinstance(M, Tensor)
    M = as_tensor(M)
    n = M.shape[-1]
    E = (M * M) * (c / n) + np.eye(n)
    P = E
    for _ in range(n - 1):
        P = P @ E
    h = (P * np.eye(n)).sum() - n
    return h if on_tape else h.item()


def acyclicity_penalty_grad(M: np.ndarray, c: float = 1.0) -> np.ndarray:
    """Closed form gradient ``2 (c/n) * n * ((I + (c/n) M∘M)^{n-1})^T ∘ M``."""
    M = np.asarray(M, dtype=np.float64)
    n = M.shape[0]
    E = np.eye(n) + (c / n) * M * M
    return 2.0 * c * np.linalg.matrix_power(E, n - 1).T * M


def is_dag(M, threshold: float = 0.0) -> tuple[bool, list[int] | None]:
    """Kahn topological sort over entries ``> threshold``.

    Returns ``(True, order)`` for a DAG (ties broken by smallest index) and
    ``(False, None)`` otherwise. Self-loops count as cycles.
    """
    A = np.asarray(M.data if isinstance(M, Tensor) else M) > threshold
    n = A.shape[0]
    indeg = A.sum(axis=0).astype(int)
    heap = [i for i in range(n) if indeg[i] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        j = heapq.heappop(heap)
        order.append(j)
        for k in np.flatnonzero(A[j]):
            indeg[k] -= 1
            if indeg[k] == 0:
                heapq.heappush(heap, int(k))
    if len(order) == n:
        return True, order
    return False, None


def binarize(M, tau: float = BINARIZE_THRESHOLD) -> np.ndarray:
    A = (np.asarray(M.data if isinstance(M, Tensor) else M) > tau).astype(np.float64)
    np.fill_diagonal(A, 0.0)
    return A


def repair_to_dag(M, tau: float = BINARIZE_THRESHOLD) -> tuple[np.ndarray, list[tuple[int, int, float]]]:
    """Binarize, then drop the weakest surviving edges one at a time until acyclic.

    Returns the binary DAG and the dropped edges as ``(j, k, weight)``.
    """
    W = np.asarray(M, dtype=np.float64)
    B = binarize(W, tau)
    dropped = []
    while not is_dag(B)[0]:
        js, ks = np.nonzero(B)
        i = np.lexsort((ks, js, W[js, ks]))[0]
        j, k = int(js[i]), int(ks[i])
        B[j, k] = 0.0
        dropped.append((j, k, float(W[j, k])))
    return B, dropped


def clamp_unit(M: np.ndarray) -> np.ndarray:
    """Clamp continuous edge weights to [0, 1] with a zero diagonal."""
    out = np.clip(M, 0.0, 1.0)
    np.fill_diagonal(out, 0.0)
    return out


def edges(M, threshold: float = 0.0, labels: Sequence[str] = FACTORS) -> list[str]:
    A = np.asarray(M) > threshold
    return [f"{labels[j]}->{labels[k]}" for j, k in zip(*np.nonzero(A))]


def adjacency_to_dict(M, labels: Sequence[str] = FACTORS) -> dict:
    M = np.asarray(M, dtype=np.float64)
    return {"n": int(M.shape[0]), "labels": list(labels[: M.shape[0]]), "entries": [float(x) for x in M.ravel()]}


def adjacency_from_dict(doc: dict) -> np.ndarray:
    n = int(doc["n"])
    return np.array(doc["entries"], dtype=np.float64).reshape(n, n)


def dumps_adjacency(M, labels: Sequence[str] = FACTORS) -> str:
    return json.dumps(adjacency_to_dict(M, labels))


def loads_adjacency(text: str) -> np.ndarray:
    return adjacency_from_dict(json.loads(text))

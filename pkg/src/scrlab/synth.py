"""Synthetic ground-truth structural causal model over (V, D, L, A) and images.

This benchmark is our own construction (no public dataset is used). Each factor
is driven by one scalar

    theta_k = noise_scale_k * eps_k + sum_{j in pa(k)} (c1_jk * s_j + c2_jk * s_j^2)

with ``eps_k ~ U[-1, 1]`` and ``s_j`` the parent's scalar summary. Factors are
sampled in topological order of ``gt_dag`` and rendered with the pipeline's
toy renderer.

Also home to the polynomial targets used by the composition experiment
(lighting ``L = f_L(I) + h_L(f_V(I))``).
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam, Mlp, MlpSpec, ParamStore, Tensor, backward
from .dag import FACTORS, adjacency_to_dict, is_dag
from .pipeline import FactorSet, render

DEFAULT_EDGES = (("D", "L"), ("V", "L"), ("D", "A"))
V, D, L, A = range(4)


def edges_to_matrix(edge_list, labels=FACTORS) -> np.ndarray:
    M = np.zeros((len(labels), len(labels)))
    for j, k in edge_list:
        M[labels.index(j), labels.index(k)] = 1.0
    return M


@dataclass
class GroundTruthScm:
    """Causal generator for scenes; ``coeffs[(j, k)] = (c1, c2)`` per edge ``j -> k``."""

    gt_dag: np.ndarray
    coeffs: dict
    noise_scale: tuple = (1.0, 1.0, 1.0, 1.0)
    symmetry: float = 1.0
    grid: int = 16
    seed: int = 0

    def __post_init__(self):
        self.gt_dag = np.asarray(self.gt_dag, dtype=np.float64)
        ok, _ = is_dag(self.gt_dag)
        if not ok:
            raise ValueError("gt_dag must be acyclic")
        if not 0.0 <= self.symmetry <= 1.0:
            raise ValueError("symmetry must lie in [0, 1]")
        for j, k in zip(*np.nonzero(self.gt_dag)):
            self.coeffs.setdefault((int(j), int(k)), (0.0, 0.0))

    @property
    def spacing(self) -> float:
        return 2.0 / (self.grid - 1)

    def parents(self, k: int) -> list[int]:
        return [int(j) for j in np.flatnonzero(self.gt_dag[:, k])]

    def descendants(self, k: int) -> set[int]:
        out, frontier = set(), [k]
        while frontier:
            j = frontier.pop()
            for c in np.flatnonzero(self.gt_dag[j]):
                if int(c) not in out:
                    out.add(int(c))
                    frontier.append(int(c))
        return out

    def header(self) -> dict:
        return {
            "gt_dag": adjacency_to_dict(self.gt_dag),
            "coeffs": {f"{FACTORS[j]}->{FACTORS[k]}": list(c) for (j, k), c in sorted(self.coeffs.items())},
            "noise_scale": list(self.noise_scale),
            "symmetry": self.symmetry,
            "grid": self.grid,
            "scm_seed": self.seed,
            "generator": "scrlab synthetic SCM (not a public dataset)",
        }


def make_scm(edge_list=DEFAULT_EDGES, seed: int = 0, grid: int = 16, symmetry: float = 1.0,
             coeff_range: float = 0.5, noise_scale=(1.0, 1.0, 1.0, 1.0), coeffs: dict | None = None) -> GroundTruthScm:
    """Build an SCM; order-2 coupling coefficients are drawn from U[-r, r] unless given."""
    dag = edges_to_matrix(edge_list)
    rng = np.random.default_rng(seed)
    drawn = {}
    for j, k in zip(*np.nonzero(dag)):
        drawn[(int(j), int(k))] = tuple(float(x) for x in rng.uniform(-coeff_range, coeff_range, size=2))
    if coeffs:
        for (j, k), c in coeffs.items():
            key = (FACTORS.index(j) if isinstance(j, str) else j, FACTORS.index(k) if isinstance(k, str) else k)
            drawn[key] = tuple(float(x) for x in c)
    return GroundTruthScm(dag, drawn, tuple(noise_scale), symmetry, grid, seed)


def default_scm(seed: int = 0, grid: int = 16) -> GroundTruthScm:
    return make_scm(DEFAULT_EDGES, seed=seed, grid=grid)


@dataclass
class Corpus:
    """A batch of scenes: latents, images and the generating DAG."""

    V: np.ndarray
    D: np.ndarray
    L: np.ndarray
    A: np.ndarray
    I: np.ndarray
    theta: np.ndarray
    gt_dag: np.ndarray
    header: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.I)

    def subset(self, idx) -> "Corpus":
        idx = np.asarray(idx)
        return Corpus(self.V[idx], self.D[idx], self.L[idx], self.A[idx], self.I[idx], self.theta[idx],
                      self.gt_dag, dict(self.header))

    def factors(self) -> FactorSet:
        return FactorSet(Tensor(self.V), Tensor(self.D), Tensor(self.L), Tensor(self.A))

    def summaries(self) -> np.ndarray:
        """One scalar per factor: (shift x, mean depth, light x, mean albedo)."""
        return np.stack([self.V[:, 0], self.D.mean(axis=(1, 2)), self.L[:, 0], self.A.mean(axis=(1, 2))], axis=1)


def _grid(G: int):
    # integer numerators keep the grid exactly mirror-symmetric
    c = (2.0 * np.arange(G) - (G - 1)) / (G - 1)
    return np.meshgrid(c, c)  # x varies along columns


def sample_corpus(scm: GroundTruthScm, n: int, seed: int, interventions: dict | None = None) -> Corpus:
    """Ancestrally sample ``n`` scenes.

    ``interventions`` maps a factor label to a fixed driving scalar ``theta``,
    cutting its incoming edges.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    G = scm.grid
    x, y = _grid(G)
    # noise is drawn up front, in a fixed layout, so interventions don't shift other streams
    eps = rng.uniform(-1.0, 1.0, size=(n, 4))
    aux = rng.uniform(-1.0, 1.0, size=(n, 5))
    interventions = {FACTORS.index(k) if isinstance(k, str) else k: v for k, v in (interventions or {}).items()}

    theta = np.zeros((n, 4))
    summary = np.zeros((n, 4))
    ok, order = is_dag(scm.gt_dag)
    for k in order:
        if k in interventions:
            theta[:, k] = interventions[k]
        else:
            t = scm.noise_scale[k] * eps[:, k]
            for j in scm.parents(k):
                c1, c2 = scm.coeffs[(j, k)]
                s = summary[:, j]
                t = t + c1 * s + c2 * s * s
            theta[:, k] = t
        summary[:, k] = np.tanh(theta[:, k]) if k in (D, A) else np.clip(theta[:, k], -1.5, 1.5)

    asym = 1.0 - scm.symmetry
    Vv = np.stack([summary[:, 0], 0.5 * aux[:, 0]], axis=1)
    amp = 0.35 + 0.2 * summary[:, 1]
    cx = asym * 0.3 * aux[:, 1]
    bump = np.exp(-(((x[None] - cx[:, None, None]) ** 2 + y[None] ** 2) / (2 * 0.35**2)))
    Dv = 1.0 + amp[:, None, None] * bump
    Lv = np.stack([summary[:, 2], 0.5 * aux[:, 2], 0.3 + 0.1 * aux[:, 3]], axis=1)
    r = np.sqrt(x**2 + y**2) / math.sqrt(2.0)
    Av = 0.6 + 0.3 * summary[:, 3, None, None] * np.cos(math.pi * r)[None]
    Av = np.clip(Av + asym * 0.15 * aux[:, 4, None, None] * x[None], 0.0, 1.0)

    f = FactorSet(Tensor(Vv), Tensor(Dv), Tensor(Lv), Tensor(Av))
    I = render(f, scm.spacing).data
    return Corpus(Vv, Dv, Lv, Av, I, theta, scm.gt_dag.copy(), scm.header() | {"n": n, "sample_seed": seed})


def sample_scene(scm: GroundTruthScm, seed: int) -> Corpus:
    """A single scene (a corpus of length one)."""
    return sample_corpus(scm, 1, seed)


def make_splits(n: int, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Disjoint, seed-deterministic train/val/test index arrays."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if len(ratios) != 3 or np.any(ratios < 0) or not math.isclose(ratios.sum(), 1.0, abs_tol=1e-9):
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios.tolist()}")
    n_train = int(math.floor(ratios[0] * n + 1e-9))
    n_val = int(math.floor(ratios[1] * n + 1e-9))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) <= 0:
        raise ValueError(f"split of {n} samples with ratios {ratios.tolist()} leaves an empty part")
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:n_train + n_val]), np.sort(perm[n_train + n_val:])


# ---------------------------------------------------------------------------
# dataset file
# ---------------------------------------------------------------------------

MAGIC = b"SCRLAB-CORPUS 1\n"


def save_corpus(corpus: Corpus, path, splits=None) -> None:
    """Binary corpus file.

    Layout: the magic line, one line of JSON header, then ``n`` records of
    little-endian float64 ``[V(2), D(G*G), L(3), A(G*G), I(G*G), theta(4)]``.
    """
    G = corpus.I.shape[-1]
    header = dict(corpus.header)
    header.update({"n": len(corpus), "grid": G, "record": ["V:2", f"D:{G*G}", "L:3", f"A:{G*G}", f"I:{G*G}", "theta:4"],
                   "gt_dag": adjacency_to_dict(corpus.gt_dag)})
    if splits is not None:
        header["splits"] = {name: [int(i) for i in idx] for name, idx in zip(("train", "val", "test"), splits)}
    n = len(corpus)
    rec = np.concatenate([corpus.V.reshape(n, -1), corpus.D.reshape(n, -1), corpus.L.reshape(n, -1),
                          corpus.A.reshape(n, -1), corpus.I.reshape(n, -1), corpus.theta.reshape(n, -1)], axis=1)
    payload = MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" + rec.astype("<f8").tobytes()
    _atomic_write_bytes(path, payload)


def load_corpus(path) -> tuple[Corpus, tuple | None]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise ValueError(f"{path}: not a corpus file")
    nl = blob.index(b"\n", len(MAGIC))
    header = json.loads(blob[len(MAGIC):nl])
    n, G = header["n"], header["grid"]
    width = 2 + 3 * G * G + 3 + 4
    rec = np.frombuffer(blob[nl + 1:], dtype="<f8").reshape(n, width).astype(np.float64)
    cuts = np.cumsum([2, G * G, 3, G * G, G * G])
    Vv, Dv, Lv, Av, Iv, th = np.split(rec, cuts, axis=1)
    dag = np.array(header["gt_dag"]["entries"]).reshape(4, 4)
    corpus = Corpus(Vv, Dv.reshape(n, G, G), Lv, Av.reshape(n, G, G), Iv.reshape(n, G, G), th, dag, header)
    splits = None
    if "splits" in header:
        splits = tuple(np.asarray(header["splits"][k], dtype=np.int64) for k in ("train", "val", "test"))
    return corpus, splits


def _atomic_write_bytes(path, payload: bytes) -> None:
    import os
    import tempfile

    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


# ---------------------------------------------------------------------------
# composition experiment: L = f_L(I) vs L = f_L(I) + h_L(f_V(I))
# ---------------------------------------------------------------------------


def _monomials(dim: int, order: int) -> list[tuple[int, ...]]:
    return [k for k in itertools.product(range(order + 1), repeat=dim) if sum(k) <= order]


@dataclass
class PolyTarget:
    """Lighting ``g(I) = f_L(I) + coupling * h_L(f_V(I))`` with order-p polynomial parts."""

    dim: int
    order: int
    f_V: dict
    f_L: dict
    h_L: dict
    coupling: float = 1.0

    @staticmethod
    def random(dim: int = 2, order: int = 2, coupling: float = 1.0, seed: int = 0, scale: float = 1.0) -> "PolyTarget":
        rng = np.random.default_rng(seed)
        mons = _monomials(dim, order)

        def draw(ms):
            coeffs = rng.uniform(-1.0, 1.0, size=len(ms))
            coeffs *= scale / np.abs(coeffs).sum()
            return {m: float(c) for m, c in zip(ms, coeffs)}

        return PolyTarget(dim, order, draw(mons), draw(mons), draw(_monomials(1, order)), coupling)

    @staticmethod
    def _eval(coeffs: dict, X: np.ndarray) -> np.ndarray:
        out = np.zeros(len(X))
        for k, a in coeffs.items():
            out += a * np.prod(X ** np.asarray(k), axis=1)
        return out

    def viewpoint(self, X: np.ndarray) -> np.ndarray:
        return self._eval(self.f_V, X)

    def lighting(self, X: np.ndarray) -> np.ndarray:
        v = self.viewpoint(X)
        return self._eval(self.f_L, X) + self.coupling * self._eval(self.h_L, v[:, None])

    def total_order(self) -> int:
        return 2 * self.order if self.coupling else self.order


@dataclass
class ApproxConfig:
    depth: int = 3          # hidden layers per network
    width: int | None = None  # defaults to dim + 4
    steps: int = 3000
    lr: float = 3e-3
    n_train: int = 256
    n_test: int = 1024
    supervise_viewpoint: bool = True


def _relu_net(dim_in: int, depth: int, width: int, params: ParamStore, prefix: str, rng) -> Mlp:
    widths = (dim_in,) + (width,) * depth + (1,)
    return Mlp(MlpSpec(widths, ("relu",) * depth + ("identity",)), params, prefix, rng)


def approx_experiment(target: PolyTarget, config: ApproxConfig = ApproxConfig(), seed: int = 0) -> dict:
    """Train the independent and composed lighting structures on the same data and seed.

    Both structures contain a viewpoint network ``f_V`` (trained on V when
    ``supervise_viewpoint``); only the composed one feeds it to ``h_L``.
    Returns test MSEs on L.
    """
    width = config.width or target.dim + 4
    data_rng = np.random.default_rng(seed)
    Xtr = data_rng.uniform(-1, 1, size=(config.n_train, target.dim))
    Xte = data_rng.uniform(-1, 1, size=(config.n_test, target.dim))
    Vtr, Ltr = target.viewpoint(Xtr)[:, None], target.lighting(Xtr)[:, None]
    Lte = target.lighting(Xte)[:, None]

    results = {}
    for structure in ("independent", "composed"):
        rng = np.random.default_rng([seed, 1])
        params = ParamStore()
        f_L = _relu_net(target.dim, config.depth, width, params, "f_L", rng)
        f_V = _relu_net(target.dim, config.depth, width, params, "f_V", rng)
        h_L = _relu_net(1, config.depth, width, params, "h_L", rng)
        opt = Adam(lr=config.lr)

        def predict(X):
            X = Tensor(X)
            v = f_V(X)
            l = f_L(X)
            if structure == "composed":
                l = l + h_L(v)
            return v, l

        for _ in range(config.steps):
            v, l = predict(Xtr)
            loss = ((l - Ltr) ** 2).mean()
            if config.supervise_viewpoint:
                loss = loss + ((v - Vtr) ** 2).mean()
            opt.step(params, backward(loss, params))
        _, l = predict(Xte)
        results[f"mse_{structure}"] = float(((l.data - Lte) ** 2).mean())
    return results

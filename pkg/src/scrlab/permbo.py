"""Gaussian-process Bayesian optimization over orderings of a few factors.

The surrogate uses the position permutation kernel

    K(p, q) = exp(-lam * sum_i |p[i] - q[i]|)

where ``p[i]`` is the factor sitting at position ``i``. Candidates are scored by
expected improvement (minimization) and the acquisition is maximized by
enumerating every unevaluated permutation, which is exact for n <= 6 or so.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import norm

from .autodiff import adam_step
from .dag import FACTORS, ordering_label, parse_ordering

log = logging.getLogger(__name__)

DEFAULT_INITIAL = ("VDLA", "DAVL")


class SingularGramError(np.linalg.LinAlgError):
    pass


class BoEvaluationError(RuntimeError):
    """Raised when the objective fails; ``ordering`` names the offending permutation."""

    def __init__(self, ordering: str, cause: BaseException):
        super().__init__(f"evaluator failed on ordering {ordering}: {cause!r}")
        self.ordering = ordering


def perm_distance(p1: Sequence[int], p2: Sequence[int]) -> float:
    """Total displacement of each factor's position between two orderings."""
    return float(np.abs(np.argsort(p1) - np.argsort(p2)).sum())


def kernel_eval(p1, p2, lam: float) -> float:
    if lam <= 0:
        raise ValueError("length-scale must be positive")
    p1 = parse_ordering(p1) if isinstance(p1, str) else tuple(p1)
    p2 = parse_ordering(p2) if isinstance(p2, str) else tuple(p2)
    if len(p1) != len(p2):
        raise ValueError("orderings must have the same length")
    return math.exp(-lam * perm_distance(p1, p2))


def distance_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise position displacements between rows of two permutation arrays."""
    A, B = np.argsort(A, axis=-1), np.argsort(B, axis=-1)
    return np.abs(A[:, None, :] - B[None, :, :]).sum(axis=-1).astype(np.float64)


def gram(perms: Sequence[Sequence[int]], lam: float) -> np.ndarray:
    P = np.asarray(perms, dtype=np.int64)
    return np.exp(-lam * distance_matrix(P, P))


class GpSurrogate:
    """Zero-mean, unit-variance GP over permutations.

    Scores are standardized before fitting when ``standardize`` is set, and
    predictions are mapped back to the original units. ``noise`` is the
    observation noise variance in standardized units.
    """

    def __init__(self, lam: float = 1.0, noise: float = 1e-4, jitter: float = 1e-8, standardize: bool = True):
        self.lam = float(lam)
        self.noise = float(noise)
        self.jitter = float(jitter)
        self.standardize = standardize
        self.perms: list[tuple[int, ...]] = []
        self.scores: list[float] = []
        self._chol = None
        self._alpha = None

    def add(self, perm, score: float) -> None:
        perm = parse_ordering(perm) if isinstance(perm, str) else tuple(int(p) for p in perm)
        self.perms.append(perm)
        self.scores.append(float(score))
        self._chol = None

    def __len__(self) -> int:
        return len(self.perms)

    # -- target standardization ---------------------------------------------
    def _moments(self) -> tuple[float, float]:
        if not self.standardize or not self.scores:
            return 0.0, 1.0
        y = np.asarray(self.scores)
        std = float(y.std())
        return float(y.mean()), (std if std > 0 else 1.0)

    def _targets(self) -> np.ndarray:
        mean, std = self._moments()
        return (np.asarray(self.scores) - mean) / std

    # -- likelihood -----------------------------------------------------------
    def _factor(self, lam: float):
        K = gram(self.perms, lam)
        jitter = self.jitter
        for _ in range(6):
            try:
                return cho_factor(K + (self.noise + jitter) * np.eye(len(K)), lower=True), K
            except np.linalg.LinAlgError:
                jitter *= 100.0
        raise SingularGramError(f"Gram matrix singular even with jitter {jitter:g}")

    def log_likelihood(self, lam: float | None = None) -> float:
        lam = self.lam if lam is None else lam
        y = self._targets()
        (c, low), _ = self._factor(lam)
        alpha = cho_solve((c, low), y)
        return float(-0.5 * y @ alpha - np.log(np.diag(c)).sum() - 0.5 * len(y) * math.log(2 * math.pi))

    def _ll_and_grad(self, lam: float) -> tuple[float, float]:
        y = self._targets()
        (c, low), K = self._factor(lam)
        alpha = cho_solve((c, low), y)
        Kinv = cho_solve((c, low), np.eye(len(y)))
        ll = float(-0.5 * y @ alpha - np.log(np.diag(c)).sum() - 0.5 * len(y) * math.log(2 * math.pi))
        dK = -distance_matrix(np.asarray(self.perms), np.asarray(self.perms)) * K
        dll = 0.5 * float(np.sum((np.outer(alpha, alpha) - Kinv) * dK))
        return ll, dll

    def fit_lambda(self, lr: float = 0.1, max_steps: int = 2000, tol: float = 1e-8) -> float:
        """Maximize the marginal likelihood over log(lam) with Adam.

        Starts from the current ``lam`` and keeps the best value visited, so
        refitting never lowers the likelihood.
        """
        if len(self.perms) < 2:
            raise ValueError("need at least two observations to fit the length-scale")
        theta = np.array([math.log(self.lam)])
        m = np.zeros(1)
        v = np.zeros(1)
        t = 0
        best_ll, best_theta = -math.inf, theta.copy()
        prev = None
        for _ in range(max_steps):
            lam = float(np.exp(theta[0]))
            ll, dll = self._ll_and_grad(lam)
            if ll > best_ll:
                best_ll, best_theta = ll, theta.copy()
            if prev is not None and abs(ll - prev) < tol:
                break
            prev = ll
            # ascend: Adam minimizes, so feed the negated gradient in log-space
            theta, m, v, t = adam_step(theta, np.array([-dll * lam]), m, v, t, lr)
            theta = np.clip(theta, -12.0, 6.0)
        self.lam = float(np.exp(best_theta[0]))
        self._chol = None
        return self.lam

    # -- prediction -----------------------------------------------------------
    def factorize(self) -> None:
        if not self.perms:
            self._chol = ()
            return
        (c, low), _ = self._factor(self.lam)
        self._chol = (c, low)
        self._alpha = cho_solve(self._chol, self._targets())

    def posterior(self, perm) -> tuple[float, float]:
        """Posterior mean and variance of the score at ``perm`` (original units)."""
        if self._chol is None:
            raise RuntimeError("surrogate not factorized; call factorize() after adding data")
        mean, std = self._moments()
        if not self.perms:
            return mean, std * std
        perm = parse_ordering(perm) if isinstance(perm, str) else tuple(perm)
        k = np.exp(-self.lam * distance_matrix(np.asarray([perm]), np.asarray(self.perms)))[0]
        mu = float(k @ self._alpha)
        var = 1.0 - float(k @ cho_solve(self._chol, k))
        return mean + std * mu, max(var, 0.0) * std * std


def expected_improvement(mu: float, sigma: float, best: float) -> float:
    """EI for minimization; ``sigma`` is a standard deviation."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    gap = best - mu
    if sigma == 0:
        return max(gap, 0.0)
    z = gap / sigma
    return max(gap * norm.cdf(z) + sigma * norm.pdf(z), 0.0)


@dataclass
class BoTrace:
    records: list[dict] = field(default_factory=list)

    @property
    def best(self) -> dict:
        finite = [r for r in self.records if math.isfinite(r["score"])]
        pool = finite or self.records
        return min(pool, key=lambda r: r["score"])

    def orderings(self) -> list[str]:
        return [r["ordering"] for r in self.records]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


def bo_search(
    evaluator: Callable[[tuple[int, ...]], float],
    iterations: int = 10,
    n: int = 4,
    initial: Sequence = DEFAULT_INITIAL,
    labels: Sequence[str] = FACTORS,
    seed: int = 0,
    lam0: float = 1.0,
    noise: float = 1e-4,
) -> tuple[tuple[int, ...], BoTrace]:
    """Minimize ``evaluator`` over permutations of ``n`` items.

    ``iterations`` is the total evaluation budget, initial design included.
    Returns the best evaluated permutation and the full trace.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    rng = np.random.default_rng(seed)
    labels = tuple(labels[:n])
    candidates = list(itertools.permutations(range(n)))
    gp = GpSurrogate(lam=lam0, noise=noise)
    trace = BoTrace()
    seen: set[tuple[int, ...]] = set()
    raw_scores: list[float] = []

    def evaluate(perm, it, lam, ei):
        label = ordering_label(perm, labels)
        try:
            score = float(evaluator(perm))
        except Exception as exc:
            raise BoEvaluationError(label, exc) from exc
        if not math.isfinite(score):
            log.warning("ordering %s produced a non-finite score; recorded as +inf", label)
            score = math.inf
        seen.add(perm)
        raw_scores.append(score)
        trace.records.append({"iteration": it, "ordering": label, "score": score, "lambda": lam, "ei": ei})

    init = [parse_ordering(p, labels) if isinstance(p, str) else tuple(p) for p in initial]
    for perm in init:
        if len(trace.records) >= iterations or perm in seen:
            continue
        evaluate(perm, len(trace.records), None, None)

    while len(trace.records) < iterations:
        remaining = [p for p in candidates if p not in seen]
        if not remaining:
            break
        # non-finite scores enter the GP as the worst finite score plus one spread
        finite = [s for s in raw_scores if math.isfinite(s)]
        fill = (max(finite) + (np.std(finite) if len(finite) > 1 else 1.0)) if finite else 0.0
        gp.perms, gp.scores = [], []
        for perm, s in zip([parse_ordering(r["ordering"], labels) for r in trace.records], raw_scores):
            gp.add(perm, s if math.isfinite(s) else fill)
        lam = gp.fit_lambda() if len(gp) >= 2 else gp.lam
        gp.factorize()
        best = min(gp.scores)
        eis = np.array([expected_improvement(*_mu_sd(gp, p), best) for p in remaining])
        top = np.flatnonzero(eis >= eis.max() - 1e-12 * max(1.0, abs(eis.max())))
        pick = remaining[int(rng.choice(top))]
        evaluate(pick, len(trace.records), lam, float(eis.max()))

    best_label = trace.best["ordering"]
    return parse_ordering(best_label, labels), trace


def _mu_sd(gp: GpSurrogate, perm) -> tuple[float, float]:
    mu, var = gp.posterior(perm)
    return mu, math.sqrt(var)


def kendall_tau_distance(p1: Sequence[int], p2: Sequence[int]) -> int:
    """Number of discordant pairs between two permutations."""
    pos1 = np.argsort(p1)
    pos2 = np.argsort(p2)
    n = len(p1)
    return sum(
        1
        for i in range(n)
        for j in range(i + 1, n)
        if (pos1[i] - pos1[j]) * (pos2[i] - pos2[j]) < 0
    )

"""Structure learners: dense orderings by BO, generic DAGs by unrolled
bilevel optimization (penalized or dense-masked), dynamic masked attention,
and retraining with a fixed structure.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Adam, ParamStore, Tensor, backward
from .dag import (BINARIZE_THRESHOLD, FACTORS, acyclicity_penalty, clamp_unit, is_dag, ordering_label,
                  ordering_to_mask, repair_to_dag)
from .metrics import mad, side
from .permbo import BoTrace, bo_search
from .pipeline import PipelineConfig, ScrModel
from .synth import Corpus

log = logging.getLogger(__name__)

VARIANTS = ("independent", "dense", "generic-reg", "generic-masked", "dynamic-sigmoid", "dynamic-cosine")


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; ``state`` holds the last finite parameter values."""

    def __init__(self, step: int, state: dict, history: dict | None = None):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.state = state
        self.history = history or {}


@dataclass(frozen=True)
class Structure:
    """What the decoders condition on: a fixed adjacency, or masked attention."""

    variant: str = "independent"
    M: np.ndarray | None = None
    mask: np.ndarray | None = None
    dynamic: str | None = None

    @staticmethod
    def independent() -> "Structure":
        return Structure("independent", np.zeros((4, 4)))

    @staticmethod
    def dense(ordering) -> "Structure":
        return Structure("dense", ordering_to_mask(ordering))

    @staticmethod
    def fixed(M, variant: str = "generic") -> "Structure":
        return Structure(variant, np.asarray(M, dtype=np.float64))

    @staticmethod
    def attention(ordering, mode: str) -> "Structure":
        mask = ordering_to_mask(ordering)
        return Structure(f"dynamic-{mode}", None, mask, mode)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 3e-3
    eval_every: int = 100
    seed: int = 0
    check_dag: bool = True
    lr_schedule: str = "cosine"
    pipeline: PipelineConfig = PipelineConfig()

    def lr_at(self, step: int) -> float:
        """Learning rate for 1-based ``step``; ``cosine`` anneals to zero at ``steps``."""
        if self.lr_schedule == "constant":
            return self.lr
        if self.lr_schedule == "cosine":
            return 0.5 * self.lr * (1.0 + math.cos(math.pi * (step - 1) / max(self.steps, 1)))
        raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")


@dataclass
class TrainResult:
    model: ScrModel
    structure: Structure
    steps: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_side: list = field(default_factory=list)
    val_mad: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    @property
    def final_val(self) -> float:
        return self.val_loss[-1]

    def steps_to_reach(self, target: float) -> int | None:
        """First logged step whose validation loss is <= ``target``."""
        for s, v in zip(self.steps, self.val_loss):
            if v <= target:
                return s
        return None

    def curves(self) -> list[dict]:
        keys = ("step", "train_loss", "val_loss", "val_side", "val_mad")
        rows = zip(self.steps, self.train_loss, self.val_loss, self.val_side, self.val_mad)
        return [dict(zip(keys, r)) for r in rows]


def _streams(seed: int) -> dict[str, np.random.Generator]:
    init, shuffle, val = np.random.SeedSequence(seed).spawn(3)
    return {"init": int(init.generate_state(1)[0]), "shuffle": np.random.default_rng(shuffle),
            "val": np.random.default_rng(val)}


class _Batches:
    """Epoch-wise shuffled minibatches."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.bs, self.rng = n, min(batch_size, n), rng
        self._order = np.empty(0, dtype=int)

    def next(self) -> np.ndarray:
        if len(self._order) < self.bs:
            self._order = np.concatenate([self._order, self.rng.permutation(self.n)])
        idx, self._order = self._order[: self.bs], self._order[self.bs:]
        return idx


def _check_emitted(M, mask) -> None:
    data = M.data if isinstance(M, Tensor) else np.asarray(M)
    mats = data.reshape(-1, data.shape[-2], data.shape[-1])
    if mask is not None and np.any(mats[:, np.asarray(mask) == 0] != 0):
        raise AssertionError("adjacency has weight outside the dense mask")
    for m in mats:
        if not is_dag(np.abs(m))[0]:
            raise AssertionError("emitted adjacency is not a DAG")


def model_forward(model: ScrModel, I, structure: Structure, M_override=None) -> dict:
    if structure.dynamic is not None:
        return model.forward(I, dynamic=structure.dynamic, mask=structure.mask)
    M = structure.M if M_override is None else M_override
    return model.forward(I, M)


def evaluate(model: ScrModel, data: Corpus, structure: Structure, chunk: int = 128) -> dict:
    """Loss and depth metrics on a whole split (no gradients kept)."""
    losses, sides, mads, weights = [], [], [], []
    spacing = model.config.spacing
    for start in range(0, len(data), chunk):
        sl = slice(start, start + chunk)
        out = model_forward(model, data.I[sl], structure)
        D_pred = out["factors"].D.data
        losses.append(out["loss"].item())
        sides.append(side(D_pred, data.D[sl]))
        mads.append(np.mean([mad(p, g, spacing) for p, g in zip(D_pred, data.D[sl])]))
        weights.append(len(D_pred))
    w = np.asarray(weights, dtype=np.float64)
    return {"loss": float(np.average(losses, weights=w)), "side": float(np.average(sides, weights=w)),
            "mad": float(np.average(mads, weights=w))}


def train_fixed(train: Corpus, val: Corpus, structure: Structure, config: TrainConfig = TrainConfig(),
                test: Corpus | None = None) -> TrainResult:
    """Train a fresh model with the structure held fixed.

    Validation loss is logged every ``eval_every`` steps and at the end.
    Raises :class:`TrainingDiverged` on a non-finite training loss.
    """
    rng = _streams(config.seed)
    model = ScrModel(config.pipeline, seed=rng["init"])
    opt = Adam(lr=config.lr)
    batches = _Batches(len(train), config.batch_size, rng["shuffle"])
    result = TrainResult(model, structure)
    running, count = 0.0, 0
    check = config.check_dag and (structure.dynamic is not None or structure.variant == "generic-masked")
    last_good = model.params.values()
    for step in range(1, config.steps + 1):
        idx = batches.next()
        out = model_forward(model, train.I[idx], structure)
        loss = out["loss"]
        if not math.isfinite(loss.item()):
            model.params.assign(last_good)
            raise TrainingDiverged(step, last_good, {"curves": result.curves()})
        if check:
            _check_emitted(out["M"], structure.mask)
        grads = backward(loss, model.params)
        opt.lr = config.lr_at(step)
        opt.step(model.params, grads)
        if step % config.eval_every == 0:
            last_good = model.params.values()
        running += loss.item()
        count += 1
        if step % config.eval_every == 0 or step == config.steps:
            result.steps.append(step)
            result.train_loss.append(running / count)
            val_metrics = evaluate(model, val, structure)
            result.val_loss.append(val_metrics["loss"])
            result.val_side.append(val_metrics["side"])
            result.val_mad.append(val_metrics["mad"])
            running, count = 0.0, 0
    if not math.isfinite(result.final_val):
        raise TrainingDiverged(config.steps, model.params.values(), {"curves": result.curves()})
    result.metrics = {"val_loss": val_metrics["loss"], "val_side": val_metrics["side"], "val_mad": val_metrics["mad"]}
    if test is not None:
        test_metrics = evaluate(model, test, structure)
        result.metrics.update({f"test_{k}": v for k, v in test_metrics.items()})
    return result


retrain_fixed = train_fixed


# ---------------------------------------------------------------------------
# dense SCR via BO
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoConfig:
    budget: int = 10
    inner: TrainConfig = TrainConfig(steps=5000)
    supervised_val: bool = False
    seed: int = 0
    initial: tuple = ("VDLA", "DAVL")


def learn_dense_bo(train: Corpus, val: Corpus, config: BoConfig = BoConfig(),
                   on_eval: Callable[[str, float], None] | None = None) -> tuple[tuple[int, ...], BoTrace]:
    """Search dense orderings; each evaluation trains a fresh model for ``inner.steps``."""

    def evaluator(perm):
        label = ordering_label(perm)
        try:
            r = train_fixed(train, val, Structure.dense(perm), config.inner)
        except TrainingDiverged:
            log.warning("ordering %s diverged during BO evaluation; scored +inf", label)
            return math.inf
        score = r.final_val
        if config.supervised_val:
            # normal-angle error in radians on top of the unsupervised loss
            score += math.radians(r.metrics["val_mad"])
        if on_eval is not None:
            on_eval(label, score)
        return score

    return bo_search(evaluator, config.budget, initial=config.initial, seed=config.seed)


# ---------------------------------------------------------------------------
# generic SCR via unrolling
# ---------------------------------------------------------------------------


def unrolled_hypergradient(train_loss: Callable[[Tensor], Tensor], val_loss: Callable[[Tensor], Tensor],
                           params: ParamStore, M: np.ndarray, eta: float, mode: str = "first-order",
                           unroll_steps: int = 1, fd_eps: float = 0.01) -> tuple[np.ndarray, float, dict]:
    """Gradient wrt ``M`` of ``L_val(W - eta * grad_W L_train(W, M), M)``.

    ``first-order`` keeps only the direct dependence of ``L_val`` on ``M``.
    ``finite-difference`` adds the mixed second-order term via a central
    difference of ``grad_M L_train`` along ``grad_W' L_val`` (single-step
    unroll only). Parameters are restored before returning.

    Returns ``(grad_M, train loss at W, grad_W of the train loss at W)``.
    """
    if mode not in ("first-order", "finite-difference"):
        raise ValueError(f"unknown hypergradient mode {mode!r}")
    if mode == "finite-difference" and unroll_steps != 1:
        raise ValueError("finite-difference mode supports a single unrolled step")
    W0 = params.values()
    lt = train_loss(Tensor(M, requires_grad=True))
    g_train = backward(lt, params)
    g = g_train
    for i in range(unroll_steps):
        if i:
            g = backward(train_loss(Tensor(M, requires_grad=True)), params)
        params.assign({k: params[k].data - eta * g[k] for k in g})
    Mv = Tensor(M, requires_grad=True)
    gv = backward(val_loss(Mv), params)
    g_M = np.zeros_like(M) if Mv.grad is None else Mv.grad.copy()
    if mode == "finite-difference":
        norm = math.sqrt(sum(float((x * x).sum()) for x in gv.values()))
        if norm > 0:
            eps = fd_eps / norm
            mixed = []
            for sign in (1.0, -1.0):
                params.assign({k: W0[k] + sign * eps * gv[k] for k in W0})
                Mp = Tensor(M, requires_grad=True)
                backward(train_loss(Mp), params)
                mixed.append(np.zeros_like(M) if Mp.grad is None else Mp.grad)
            g_M = g_M - eta * (mixed[0] - mixed[1]) / (2 * eps)
    params.assign(W0)
    return g_M, lt.item(), g_train


@dataclass(frozen=True)
class UnrollConfig:
    eta: float = 1e-3
    unroll_steps: int = 1
    lambda_dag: float = 10.0
    lambda_mult: float = 10.0
    period: int = 2500
    dag_lr: float = 1e-3
    dag_lr_decay: float = 0.5
    hypergrad: str = "first-order"
    c: float = 1.0
    init: float = 0.5
    outer_every: int = 1
    threshold: float = BINARIZE_THRESHOLD

    def __post_init__(self):
        if self.eta <= 0 or self.period <= 0 or self.unroll_steps < 1:
            raise ValueError("eta and period must be positive, unroll_steps >= 1")

    def schedule(self, step: int) -> tuple[float, float]:
        """``(lambda_dag, dag_lr)`` in force at ``step`` (0-based)."""
        k = step // self.period
        return self.lambda_dag * self.lambda_mult**k, self.dag_lr * self.dag_lr_decay**k


@dataclass
class GenericResult:
    M: np.ndarray
    M_binary: np.ndarray
    dropped: list
    schedule: list
    history: dict
    variant: str
    is_dag: bool


def dag_outer_step(M: np.ndarray, grad_val: np.ndarray, lam: float, opt: Adam, lr: float, c: float = 1.0,
                   mask: np.ndarray | None = None) -> np.ndarray:
    """One Adam step on ``M`` for ``L_val + lam * H(M)`` (or the masked objective), then clamp."""
    g = np.array(grad_val, dtype=np.float64)
    if mask is None and lam:
        Mt = Tensor(M, requires_grad=True)
        (acyclicity_penalty(Mt, c) * lam).backward()
        g = g + Mt.grad
    if mask is not None:
        g = g * mask
    store = ParamStore()
    store.add("M", M)
    opt.lr = lr
    opt.step(store, {"M": g})
    out = clamp_unit(store["M"].data)
    return out * mask if mask is not None else out


def _learn_generic(train: Corpus, val: Corpus, config: UnrollConfig, train_config: TrainConfig,
                   mask: np.ndarray | None, M0: np.ndarray | None, use_val: bool) -> GenericResult:
    rng = _streams(train_config.seed)
    model = ScrModel(train_config.pipeline, seed=rng["init"])
    w_opt = Adam(lr=train_config.lr)
    m_opt = Adam(lr=config.dag_lr)
    if M0 is None:
        M0 = np.full((4, 4), config.init)
    M = clamp_unit(np.asarray(M0, dtype=np.float64))
    if mask is not None:
        M = M * mask
    tr_batches = _Batches(len(train), train_config.batch_size, rng["shuffle"])
    va_batches = _Batches(len(val), train_config.batch_size, rng["val"])
    variant = "generic-masked" if mask is not None else "generic-reg"
    eff = (lambda Mt: Mt * mask) if mask is not None else (lambda Mt: Mt)
    schedule, hist = [], {"step": [], "train_loss": [], "H": [], "M": []}
    last_good = (model.params.values(), M.copy())

    for step in range(train_config.steps):
        lam, lr = config.schedule(step)
        I_tr = train.I[tr_batches.next()]
        if step % config.outer_every == 0 and use_val:
            I_va = val.I[va_batches.next()]
            g_M, lt, g_W = unrolled_hypergradient(
                lambda Mt: model.loss(I_tr, eff(Mt)), lambda Mt: model.loss(I_va, eff(Mt)),
                model.params, M, config.eta, config.hypergrad, config.unroll_steps)
        else:
            lt_t = model.loss(I_tr, eff(Tensor(M)))
            g_W, lt = backward(lt_t, model.params), lt_t.item()
            g_M = np.zeros_like(M)
        if not math.isfinite(lt) or not np.all(np.isfinite(g_M)):
            model.params.assign(last_good[0])
            raise TrainingDiverged(step, {"params": last_good[0], "M": last_good[1]}, hist)
        if step % config.outer_every == 0:
            M = dag_outer_step(M, g_M, 0.0 if mask is not None else lam, m_opt, lr, config.c, mask)
        w_opt.lr = train_config.lr_at(step + 1)
        w_opt.step(model.params, g_W)
        if mask is not None and train_config.check_dag:
            _check_emitted(M * mask, mask)
        if step % train_config.eval_every == 0 or step == train_config.steps - 1:
            last_good = (model.params.values(), M.copy())
            schedule.append({"step": step, "lambda_dag": lam, "dag_lr": lr})
            hist["step"].append(step)
            hist["train_loss"].append(lt)
            hist["H"].append(acyclicity_penalty(M, config.c))
            hist["M"].append(M.tolist())

    B, dropped = repair_to_dag(M, config.threshold)
    for j, k, w in dropped:
        log.info("dropped edge %s->%s (weight %.4f) to restore acyclicity", FACTORS[j], FACTORS[k], w)
    if mask is not None:
        B = B * mask
    return GenericResult(M, B, dropped, schedule, hist, variant, is_dag(B)[0])


def learn_generic_unrolled(train: Corpus, val: Corpus, config: UnrollConfig = UnrollConfig(),
                           train_config: TrainConfig = TrainConfig(), M0=None, use_val: bool = True) -> GenericResult:
    """Learn a continuous ``M`` with the acyclicity penalty, then binarize and repair."""
    return _learn_generic(train, val, config, train_config, None, M0, use_val)


def learn_generic_masked(train: Corpus, val: Corpus, dense_mask, config: UnrollConfig = UnrollConfig(),
                         train_config: TrainConfig = TrainConfig(), M0=None) -> GenericResult:
    """Learn edge weights inside a dense-ordering mask; no penalty is needed."""
    mask = np.asarray(dense_mask, dtype=np.float64)
    ok, _ = is_dag(mask)
    if not ok or mask.sum() != mask.shape[0] * (mask.shape[0] - 1) / 2:
        raise ValueError("dense_mask must be the mask of a dense ordering")
    return _learn_generic(train, val, config, train_config, mask, M0, True)

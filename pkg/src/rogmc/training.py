"""Objective, analytic gradients, Adam and the full-batch training loop.

The objective over triplets ``(user, rated item, non-interacted item)`` is

    sum_D [ CE(pos pair) + alpha * softplus(o_neg - o_pos) ] + lambda * IR

with ``o = sum_r z^r`` and IR the level-averaged, node-summed distance
between each level representation and the interest representation.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .dataset import UNKNOWN, Dataset, SplitDataset
from .graph import MODES, DecomposedGraphs
from .model import (AGGREGATIONS, ForwardCache, ModelError, ModelParams, forward,
                    init_params, predict_distribution, predict_pairs, smooth)

logger = logging.getLogger(__name__)

CE_CLAMP = 1e-12
DENSE_SCORE_RATIO = 16


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 0.5
    lam: float = 1.0
    learning_rate: float = 1e-3
    epochs: int = 1000
    patience: int = 50
    seed: int = 0
    num_layers: int = 2
    dim: int = 64
    decomposition_mode: str = "cumulative"
    T: tuple[int, ...] | None = None
    negatives_per_positive: int = 1
    ir_epsilon: float = 1e-12
    aggregation: str = "mean"
    dtype: str = "float64"

    def __post_init__(self):
        if self.T is not None:
            self.T = tuple(int(t) for t in self.T)
        self.validate()

    def validate(self) -> None:
        problems = []
        if self.alpha < 0:
            problems.append(f"alpha must be >= 0 (got {self.alpha})")
        if self.lam < 0:
            problems.append(f"lambda must be >= 0 (got {self.lam})")
        if self.learning_rate <= 0:
            problems.append(f"learning_rate must be > 0 (got {self.learning_rate})")
        if self.epochs < 1:
            problems.append(f"epochs must be >= 1 (got {self.epochs})")
        if self.patience < 0:
            problems.append(f"patience must be >= 0 (got {self.patience})")
        if self.num_layers < 0:
            problems.append(f"num_layers must be >= 0 (got {self.num_layers})")
        if self.dim < 1:
            problems.append(f"dim must be >= 1 (got {self.dim})")
        if self.negatives_per_positive < 1:
            problems.append("negatives_per_positive must be >= 1")
        if self.ir_epsilon < 0:
            problems.append("ir_epsilon must be >= 0")
        if self.decomposition_mode not in MODES:
            problems.append(f"decomposition_mode must be one of {MODES}")
        if self.aggregation not in AGGREGATIONS:
            problems.append(f"aggregation must be one of {AGGREGATIONS}")
        if self.dtype not in ("float32", "float64"):
            problems.append("dtype must be float32 or float64")
        if problems:
            raise ValueError("; ".join(problems))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["T"] = None if self.T is None else list(self.T)
        return d


# -- training set D -----------------------------------------------------------

class TrainingTriplet(NamedTuple):
    user: int
    pos_item: int
    neg_item: int
    rating: int


@dataclass(frozen=True)
class Triplets:
    """Column-wise triplet storage; iterating yields ``TrainingTriplet`` rows."""

    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray
    ratings: np.ndarray

    def __len__(self) -> int:
        return len(self.users)

    def __iter__(self) -> Iterator[TrainingTriplet]:
        for row in zip(self.users.tolist(), self.pos.tolist(), self.neg.tolist(),
                       self.ratings.tolist()):
            yield TrainingTriplet(*row)

    def repeat(self, times: int) -> "Triplets":
        return Triplets(*(np.tile(a, times) for a in (self.users, self.pos, self.neg, self.ratings)))


NO_NEGATIVE = -1


def sample_negatives(train: Dataset, negatives_per_positive: int = 1, seed=None) -> Triplets:
    """Pair each rated interaction with items the user never touched (rated or not).

    Pairs whose user has interacted with every item get ``NO_NEGATIVE`` and
    contribute no pair-wise term.

    ``seed`` may be an int or a ``numpy.random.Generator``; passing the same
    generator across epochs continues its stream.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n_items = train.num_items
    keys = np.unique(train.users * n_items + train.items)
    full = np.bincount(train.users, minlength=train.num_users) >= n_items

    rated = train.known
    users = np.repeat(train.users[rated], negatives_per_positive)
    pos = np.repeat(train.items[rated], negatives_per_positive)
    ratings = np.repeat(train.labels[rated], negatives_per_positive)

    neg = rng.integers(0, n_items, size=len(users))
    # users who touched every item have no negative; they keep their CE term only
    stuck = full[users]
    if stuck.any():
        logger.debug("%d pairs have no available negative item", int(stuck.sum()))
        neg[stuck] = NO_NEGATIVE
    todo = np.flatnonzero(~stuck)
    while len(todo):
        cand = users[todo] * n_items + neg[todo]
        loc = np.minimum(np.searchsorted(keys, cand), len(keys) - 1)
        todo = todo[keys[loc] == cand]
        neg[todo] = rng.integers(0, n_items, size=len(todo))
    return Triplets(users, pos, neg, ratings)


# -- scalar loss terms ----------------------------------------------------------

def loss_ce(p: np.ndarray, true_rating: int, ratings: Sequence[int]) -> float:
    ratings = list(ratings)
    if true_rating not in ratings:
        raise ValueError(f"rating {true_rating} is not in {ratings}")
    return -math.log(max(float(p[ratings.index(true_rating)]), CE_CLAMP))


def loss_bpr(o_pos, o_neg):
    """``-log sigmoid(o_pos - o_neg)`` computed as a softplus."""
    return np.logaddexp(0.0, -(np.asarray(o_pos) - np.asarray(o_neg)))


def loss_ir(h_levels: dict, h_interest: np.ndarray, eps: float = 1e-12) -> float:
    total = 0.0
    for h_t in h_levels.values():
        delta = h_t - h_interest
        total += np.sqrt(np.einsum("nd,nd->n", delta, delta) + eps).sum()
    return float(total / len(h_levels))


# -- objective and gradients ----------------------------------------------------

@dataclass
class LossBreakdown:
    total: float
    ce: float
    bpr: float
    ir: float


@dataclass
class GradientSet:
    base: np.ndarray
    bilinear: np.ndarray


def objective(cache: ForwardCache, triplets: Triplets, params: ModelParams, config: TrainConfig,
              *, grad: bool = True) -> tuple[LossBreakdown, GradientSet | None]:
    """Loss breakdown and, if requested, exact gradients for base embeddings and Q_r.

    A term whose weight is zero is neither evaluated nor differentiated and
    reports 0 in the breakdown.
    """
    H = cache.h
    nu = cache.graphs.interest.num_users
    Q = params.bilinear
    ratings = params.ratings
    alpha, lam = config.alpha, config.lam

    u = triplets.users
    n_pairs = len(u)
    # Projecting the user rows once keeps per-pair work O(d) instead of O(d^2).
    H_users = H[:nu]
    H_items = H[nu:]
    n_items = H_items.shape[0]
    proj = [H_users @ q for q in Q]                 # rows h_u^T Q_r
    # small user x item grids are cheaper to score densely than to gather per pair
    dense = nu * n_items <= DENSE_SCORE_RATIO * n_pairs
    if dense:
        flat = u * n_items + triplets.pos
        Z = np.stack([(pr @ H_items.T).ravel()[flat] for pr in proj], axis=1)
    else:
        hj = H[triplets.pos + nu]
        Z = np.stack([np.einsum("pd,pd->p", pr[u], hj) for pr in proj], axis=1)
    P = predict_distribution(Z)
    true_idx = np.searchsorted(ratings, triplets.ratings)
    p_true = P[np.arange(n_pairs), true_idx]
    unclamped = p_true >= CE_CLAMP
    ce = float(-np.log(np.maximum(p_true, CE_CLAMP)).sum())

    Gpos = P.astype(H.dtype, copy=True)
    Gpos[np.arange(n_pairs), true_idx] -= 1.0
    Gpos *= unclamped[:, None]

    bpr = 0.0
    if alpha > 0:
        Qsum = Q.sum(axis=0)
        proj_sum = H_users @ Qsum
        has_neg = triplets.neg != NO_NEGATIVE
        nu_idx, neg = u[has_neg], triplets.neg[has_neg]
        if dense:
            o_neg = (proj_sum @ H_items.T).ravel()[nu_idx * n_items + neg]
        else:
            o_neg = np.einsum("pd,pd->p", proj_sum[nu_idx], H[neg + nu])
        diff = Z[has_neg].sum(axis=1) - o_neg
        bpr = float(loss_bpr(diff, 0.0).sum())
        dd = -expit(-diff)                          # d softplus(-diff) / d diff
        Gpos[has_neg] += alpha * dd[:, None]
        cneg = (-alpha * dd).astype(H.dtype)        # same coefficient for every rating

    ir = 0.0
    ir_grads = {}
    if lam > 0:
        n_levels = len(cache.levels)
        for t, h_t in cache.levels.items():
            delta = h_t - cache.interest
            s = np.sqrt(np.einsum("nd,nd->n", delta, delta) + config.ir_epsilon)
            ir += s.sum()
            if grad:
                ir_grads[t] = delta / (s * n_levels)[:, None]
        ir /= n_levels

    total = ce + alpha * bpr + lam * ir
    breakdown = LossBreakdown(float(total), ce, bpr, float(ir))
    if not grad:
        return breakdown, None

    # d loss / d z^r as a sparse user x item matrix per rating; negatives carry
    # the same coefficient under every rating because o sums all logits.
    cols = np.concatenate([triplets.pos, neg]) if alpha > 0 else triplets.pos
    rows = np.concatenate([u, nu_idx]) if alpha > 0 else u
    order = np.lexsort((cols, rows))
    indptr = np.zeros(nu + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=nu), out=indptr[1:])
    indices = cols[order]

    dQ = np.empty_like(Q)
    d_users = np.zeros_like(H_users)
    d_items = np.zeros_like(H_items)
    for r, q in enumerate(Q):
        coef = np.concatenate([Gpos[:, r], cneg]) if alpha > 0 else Gpos[:, r]
        W = sp.csr_matrix((coef[order], indices, indptr), shape=(nu, H_items.shape[0]))
        acc = W @ H_items
        dQ[r] = H_users.T @ acc
        d_users += acc @ q.T
        d_items += W.T @ proj[r]
    dH = np.concatenate([d_users, d_items])

    # h = sum_t h_t, each h_x a symmetric linear smoothing of the base
    d_base = np.zeros_like(params.base)
    interest_grad = np.zeros_like(params.base) if lam > 0 else None
    for t, graph in cache.graphs.levels.items():
        g = dH
        if lam > 0:
            g = dH + lam * ir_grads[t]
            interest_grad -= lam * ir_grads[t]
        d_base += smooth(graph, g, cache.num_layers, cache.how)
    if lam > 0:
        d_base += smooth(cache.graphs.interest, interest_grad, cache.num_layers, cache.how)

    if not (np.isfinite(d_base).all() and np.isfinite(dQ).all()):
        raise TrainingDiverged("non-finite gradient")
    return breakdown, GradientSet(d_base, dQ)


def total_loss(cache: ForwardCache, triplets: Triplets, params: ModelParams,
               config: TrainConfig) -> LossBreakdown:
    return objective(cache, triplets, params, config, grad=False)[0]


def backward(cache: ForwardCache, triplets: Triplets, params: ModelParams,
             config: TrainConfig) -> GradientSet:
    return objective(cache, triplets, params, config, grad=True)[1]


# -- Adam -------------------------------------------------------------------------

@dataclass
class AdamState:
    m_base: np.ndarray
    v_base: np.ndarray
    m_bilinear: np.ndarray
    v_bilinear: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls(np.zeros_like(params.base), np.zeros_like(params.base),
                   np.zeros_like(params.bilinear), np.zeros_like(params.bilinear))


BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


def _adam(x, g, m, v, lr, t):
    m = BETA1 * m + (1 - BETA1) * g
    v = BETA2 * v + (1 - BETA2) * (g * g)
    m_hat = m / (1 - BETA1 ** t)
    v_hat = v / (1 - BETA2 ** t)
    return x - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS), m, v


def adam_step(params: ModelParams, grads: GradientSet, state: AdamState,
              learning_rate: float) -> tuple[ModelParams, AdamState]:
    t = state.step + 1
    base, mb, vb = _adam(params.base, grads.base, state.m_base, state.v_base, learning_rate, t)
    bil, mq, vq = _adam(params.bilinear, grads.bilinear, state.m_bilinear, state.v_bilinear,
                        learning_rate, t)
    return ModelParams(base, bil, params.ratings), AdamState(mb, vb, mq, vq, t)


# -- training loop ----------------------------------------------------------------

HISTORY_FIELDS = ("epoch", "ce", "bpr", "ir", "total", "val_rmse", "best_flag")


@dataclass
class TrainResult:
    params: ModelParams
    best_epoch: int
    best_val_rmse: float
    history: list[dict] = field(default_factory=list)


def rmse_from_cache(params: ModelParams, cache: ForwardCache, pairs: Dataset) -> float:
    pred = predict_pairs(params, cache, pairs.users, pairs.items, cache.graphs.interest.num_users)
    return float(np.sqrt(np.mean((pred - pairs.labels) ** 2)))


def train(split: SplitDataset, graphs: DecomposedGraphs, config: TrainConfig,
          progress=None) -> TrainResult:
    """Full-batch training with best-validation checkpointing and early stopping."""
    config.validate()
    train_set = split.train
    if (split.val.labels == UNKNOWN).any():
        raise ValueError("validation pairs must all carry ratings")
    init_seq, sample_seq = np.random.SeedSequence(config.seed).spawn(2)
    sample_rng = np.random.default_rng(sample_seq)
    params = init_params(train_set.num_nodes, config.dim, train_set.rating_set,
                         np.random.default_rng(init_seq), dtype=np.dtype(config.dtype))
    state = AdamState.zeros_like(params)
    fwd = dict(num_layers=config.num_layers, how=config.aggregation)
    cache = forward(graphs, params, **fwd)

    best_params, best_rmse, best_epoch = params.copy(), math.inf, 0
    history = []
    since_best = 0
    for epoch in range(1, config.epochs + 1):
        triplets = sample_negatives(train_set, config.negatives_per_positive, sample_rng)
        # finiteness is checked explicitly below; silence numpy's overflow chatter
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                losses, grads = objective(cache, triplets, params, config)
                if not math.isfinite(losses.total):
                    raise TrainingDiverged(f"non-finite loss {asdict(losses)}")
                params, state = adam_step(params, grads, state, config.learning_rate)
                cache = forward(graphs, params, **fwd)
                val = rmse_from_cache(params, cache, split.val)
            except (ModelError, TrainingDiverged) as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}") from None
        improved = val < best_rmse
        if improved:
            best_params, best_rmse, best_epoch = params.copy(), val, epoch
            since_best = 0
        else:
            since_best += 1
        history.append({"epoch": epoch, "ce": losses.ce, "bpr": losses.bpr, "ir": losses.ir,
                        "total": losses.total, "val_rmse": val, "best_flag": int(improved)})
        if progress is not None:
            progress(history[-1])
        if since_best >= config.patience:
            break
    return TrainResult(best_params, best_epoch, best_rmse, history)


def write_history_csv(history: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})

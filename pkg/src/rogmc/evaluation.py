"""RMSE, the level-representation distance analysis, and the variant/ablation runners."""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .dataset import Dataset, MaskingSpec, SplitDataset, apply_rating_frac
from .graph import DecomposedGraphs, build_decomposed
from .model import ModelParams, forward, predict_pairs
from .training import TrainConfig, TrainResult, train

logger = logging.getLogger(__name__)

DEFAULT_SEEDS = (13, 17, 19)


def rmse_values(predicted, target) -> float:
    predicted = np.asarray(predicted, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if predicted.size == 0:
        raise ValueError("RMSE of an empty pair set")
    return float(np.sqrt(np.mean((predicted - target) ** 2)))


def _as_columns(pairs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(pairs, Dataset):
        return pairs.users, pairs.items, pairs.labels
    arr = np.asarray(list(pairs), dtype=np.int64).reshape(-1, 3)
    return arr[:, 0], arr[:, 1], arr[:, 2]


def rmse(params: ModelParams, graphs: DecomposedGraphs, pairs, num_layers: int = 2,
         how: str = "mean") -> float:
    """RMSE of expected-rating predictions on ``(user, item, rating)`` pairs."""
    users, items, ratings = _as_columns(pairs)
    if len(users) == 0:
        raise ValueError("RMSE of an empty pair set")
    cache = forward(graphs, params, num_layers, how)
    pred = predict_pairs(params, cache, users, items, graphs.interest.num_users)
    return rmse_values(pred, ratings)


@dataclass
class DistanceReport:
    """Pairwise L2 distances between user-averaged level representations."""

    levels: tuple[int, ...]
    matrix: np.ndarray

    def distance(self, a: int, b: int) -> float:
        return float(self.matrix[self.levels.index(a), self.levels.index(b)])

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rating", *self.levels])
            for t, row in zip(self.levels, self.matrix):
                w.writerow([t, *(repr(float(x)) for x in row)])


def distance_matrix(means: np.ndarray) -> np.ndarray:
    diff = means[:, None, :] - means[None, :, :]
    out = np.sqrt(np.einsum("abd,abd->ab", diff, diff))
    np.fill_diagonal(out, 0.0)
    return out


def representation_distance_matrix(params: ModelParams, graphs: DecomposedGraphs,
                                   num_layers: int = 2, how: str = "mean") -> DistanceReport:
    cache = forward(graphs, params, num_layers, how)
    nu = graphs.interest.num_users
    means = np.stack([cache.levels[t][:nu].mean(axis=0) for t in graphs.T])
    return DistanceReport(graphs.T, distance_matrix(means))


# -- variants -----------------------------------------------------------------

@dataclass(frozen=True)
class VariantSpec:
    name: str
    decomposition_mode: str = "cumulative"
    use_ir: bool = True
    use_bpr: bool = True

    def configure(self, config: TrainConfig) -> TrainConfig:
        return replace(config, decomposition_mode=self.decomposition_mode,
                       alpha=config.alpha if self.use_bpr else 0.0,
                       lam=config.lam if self.use_ir else 0.0)


VARIANTS = {v.name: v for v in (
    VariantSpec("full"),
    VariantSpec("no_ir", use_ir=False),
    VariantSpec("no_cp", decomposition_mode="none"),
    VariantSpec("no_cp_no_ir", decomposition_mode="none", use_ir=False, use_bpr=False),
    VariantSpec("exact", decomposition_mode="exact"),
    VariantSpec("reverse_cumulative", decomposition_mode="reverse_cumulative"),
    VariantSpec("no_bpr", use_bpr=False),
)}


def get_variant(name: str) -> VariantSpec:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None


@dataclass
class SeedRun:
    seed: int
    val_rmse: float
    test_rmse: float
    best_epoch: int
    epochs_run: int


@dataclass
class VariantResult:
    name: str
    runs: list[SeedRun] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean([r.test_rmse for r in self.runs]))

    @property
    def std(self) -> float:
        return float(np.std([r.test_rmse for r in self.runs]))


def fit(split: SplitDataset, config: TrainConfig) -> tuple[TrainResult, DecomposedGraphs]:
    graphs = build_decomposed(split.train, config.decomposition_mode, config.T)
    return train(split, graphs, config), graphs


def _run_seed(split: SplitDataset, config: TrainConfig) -> SeedRun:
    result, graphs = fit(split, config)
    test = rmse(result.params, graphs, split.test, config.num_layers, config.aggregation)
    return SeedRun(config.seed, result.best_val_rmse, test, result.best_epoch, len(result.history))


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("ROGMC_THREADS", "1")))
    except ValueError:
        return 1


def run_variant(split: SplitDataset, spec: VariantSpec, config: TrainConfig,
                seeds: Sequence[int] = DEFAULT_SEEDS, workers: int | None = None) -> VariantResult:
    """Train ``spec`` once per seed; summarize test RMSE at the best-validation epoch."""
    if not seeds:
        raise ValueError("at least one seed is required")
    base = spec.configure(config)
    configs = [replace(base, seed=int(s)) for s in seeds]
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(configs))) as pool:
            runs = list(pool.map(_run_seed, [split] * len(configs), configs))
    else:
        runs = [_run_seed(split, c) for c in configs]
    for run in runs:
        logger.info("%s seed=%d val=%.5f test=%.5f (best epoch %d)", spec.name, run.seed,
                    run.val_rmse, run.test_rmse, run.best_epoch)
    return VariantResult(spec.name, runs)


def mask_split(split: SplitDataset, fraction: float, seed: int = 0) -> SplitDataset:
    if fraction == 1.0:
        return split
    return replace(split, train=apply_rating_frac(split.train, MaskingSpec(fraction, seed)))


def rating_frac_sweep(split: SplitDataset, fractions: Iterable[float], config: TrainConfig,
                      seeds: Sequence[int] = DEFAULT_SEEDS,
                      variants: Sequence[str] = ("full", "no_cp_no_ir"),
                      mask_seed: int = 0) -> list[dict]:
    rows = []
    for frac in fractions:
        if not 0.0 < frac <= 1.0:
            raise ValueError(f"fraction must lie in (0, 1], got {frac}")
        masked = mask_split(split, frac, mask_seed)
        for name in variants:
            res = run_variant(masked, get_variant(name), config, seeds)
            rows.append({"fraction": frac, "variant": name, "mean": res.mean, "std": res.std,
                         "result": res})
    return rows


def hyperparameter_sweep(split: SplitDataset, config: TrainConfig,
                         lambdas: Sequence[float] = (0.0, 0.1, 0.5, 1.0, 2.0),
                         alphas: Sequence[float] = (0.0, 0.1, 0.5, 1.0),
                         seeds: Sequence[int] = DEFAULT_SEEDS) -> list[dict]:
    rows = []
    for lam in lambdas:
        for alpha in alphas:
            res = run_variant(split, VARIANTS["full"], replace(config, lam=lam, alpha=alpha), seeds)
            rows.append({"lambda": lam, "alpha": alpha, "mean": res.mean, "std": res.std})
    return rows


RESULT_FIELDS = ("variant", "fraction", "seed", "val_rmse", "test_rmse", "test_rmse_std")


def result_rows(results: Iterable[VariantResult], fraction: float = 1.0) -> list[dict]:
    """One row per (variant, seed) followed by one aggregate row per variant."""
    detail, summary = [], []
    for res in results:
        for run in res.runs:
            detail.append({"variant": res.name, "fraction": fraction, "seed": run.seed,
                           "val_rmse": run.val_rmse, "test_rmse": run.test_rmse,
                           "test_rmse_std": ""})
        if res.runs:
            summary.append({"variant": res.name, "fraction": fraction, "seed": "mean",
                            "val_rmse": float(np.mean([r.val_rmse for r in res.runs])),
                            "test_rmse": res.mean, "test_rmse_std": res.std})
    return detail + summary


def write_rows_csv(rows: list[dict], path, fields: Sequence[str] = RESULT_FIELDS) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})

"""Command-line entry point: ``rogmc {prepare,train,ablate,analyze}``.

Settings come from documented defaults, then an optional JSON config file,
then command-line flags. Each invocation writes into its own run directory
``<out>/<command>-<timestamp>-<config hash>``.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from . import __version__
from .dataset import (DataError, MaskingSpec, SplitDataset, apply_k_core, apply_rating_frac,
                      describe, load_ratings, raw_statistics, read_split, reindex,
                      split_per_user, write_split)
from .evaluation import (DEFAULT_SEEDS, VARIANTS, VariantResult, get_variant, hyperparameter_sweep,
                         representation_distance_matrix, result_rows, rmse, run_variant,
                         worker_count, write_rows_csv)
from .graph import build_decomposed
from .model import ModelError, load_checkpoint, save_checkpoint
from .training import TrainConfig, TrainingDiverged, train, write_history_csv

logger = logging.getLogger("rogmc")


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: str | None = None
    format: str = "tsv"
    k: int = 10
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    keep_fraction: float = 1.0
    data_dir: str | None = None
    out: str = "runs"
    variant: str = "full"
    variants: tuple[str, ...] = tuple(VARIANTS)
    fractions: tuple[float, ...] = (1.0,)
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    deterministic: bool = False
    sweep: bool = False
    sweep_lambdas: tuple[float, ...] = (0.0, 0.1, 0.5, 1.0, 2.0)
    sweep_alphas: tuple[float, ...] = (0.0, 0.1, 0.5, 1.0)

    def validate(self) -> None:
        self.train.validate()
        problems = []
        if self.k < 1:
            problems.append("k must be >= 1")
        if len(self.ratios) != 3 or abs(sum(self.ratios) - 1.0) > 1e-9:
            problems.append("ratios must be three values summing to 1")
        if not 0.0 < self.keep_fraction <= 1.0:
            problems.append("keep_fraction must lie in (0, 1]")
        if any(not 0.0 < f <= 1.0 for f in self.fractions):
            problems.append("fractions must lie in (0, 1]")
        if self.format not in ("tsv", "double_colon"):
            problems.append("format must be tsv or double_colon")
        for name in (self.variant, *self.variants):
            if name not in VARIANTS:
                problems.append(f"unknown variant {name!r}")
        if not self.seeds:
            problems.append("seeds must not be empty")
        if problems:
            raise ValueError("; ".join(problems))

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "train"}
        d = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        d.update(self.train.to_dict())
        return d

    def digest(self) -> str:
        """sha256 of the settings that affect results; the output location is left out."""
        settings = {k: v for k, v in self.to_dict().items() if k != "out"}
        blob = json.dumps(settings, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


_TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}
_RUN_FIELDS = {f.name for f in fields(RunConfig)} - {"train"}
_ALIASES = {"lambda": "lam"}


def build_config(values: dict) -> RunConfig:
    train_kw, run_kw = {}, {}
    for key, value in values.items():
        key = _ALIASES.get(key, key)
        if key in _TRAIN_FIELDS:
            train_kw[key] = value
        elif key in _RUN_FIELDS:
            run_kw[key] = tuple(value) if isinstance(value, list) else value
        else:
            raise ValueError(f"unknown config key {key!r}")
    cfg = RunConfig(train=TrainConfig(**train_kw), **run_kw)
    cfg.validate()
    return cfg


def load_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if args.config:
        path = Path(args.config)
        try:
            values.update(json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc})") from None
    overrides = {
        "seed": args.seed, "keep_fraction": args.frac, "variant": args.variant, "out": args.out,
        "dataset": args.dataset, "data_dir": args.data, "epochs": args.epochs,
        "alpha": args.alpha, "lambda": args.lam,
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    if args.deterministic:
        values["deterministic"] = True
    return build_config(values)


def make_run_dir(cfg: RunConfig, command: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    run_dir = Path(cfg.out) / f"{command}-{stamp}-{cfg.digest()[:10]}"
    suffix = 1
    while run_dir.exists():
        run_dir = Path(cfg.out) / f"{command}-{stamp}-{cfg.digest()[:10]}-{suffix}"
        suffix += 1
    run_dir.mkdir(parents=True)
    return run_dir


def write_manifest(run_dir: Path, cfg: RunConfig, command: str, **extra) -> None:
    manifest = {"command": command, "version": __version__, "config_hash": cfg.digest(),
                "config": cfg.to_dict()}
    manifest.update(extra)
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")


@contextlib.contextmanager
def reproducible(enabled: bool):
    """Pin BLAS to one thread so reductions happen in a fixed order."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


# -- data ---------------------------------------------------------------------

def prepare_split(cfg: RunConfig) -> tuple[SplitDataset, dict]:
    if not cfg.dataset:
        raise ValueError("no raw dataset given (set 'dataset' or pass --dataset)")
    raw = load_ratings(cfg.dataset, cfg.format)
    before = raw_statistics(raw)
    dataset = reindex(apply_k_core(raw, cfg.k))
    split = split_per_user(dataset, cfg.ratios, cfg.train.seed)
    if cfg.keep_fraction < 1.0:
        split = replace(split, train=apply_rating_frac(split.train,
                                                       MaskingSpec(cfg.keep_fraction, cfg.train.seed)))
    meta = {"raw": before, "filtered": describe(dataset), "k": cfg.k, "seed": cfg.train.seed,
            "keep_fraction": cfg.keep_fraction, "ratios": list(cfg.ratios)}
    return split, meta


def obtain_split(cfg: RunConfig) -> SplitDataset:
    """Prepared data if ``data_dir`` is set, otherwise the raw pipeline in memory."""
    if not cfg.data_dir:
        return prepare_split(cfg)[0]
    split, meta = read_split(cfg.data_dir)
    prepared = meta.get("keep_fraction", 1.0)
    if cfg.keep_fraction != prepared:
        if prepared != 1.0:
            raise ValueError(f"{cfg.data_dir} was prepared with keep_fraction={prepared}; "
                             f"cannot re-mask to {cfg.keep_fraction}")
        split = replace(split, train=apply_rating_frac(split.train,
                                                       MaskingSpec(cfg.keep_fraction, cfg.train.seed)))
    return split


# -- commands -----------------------------------------------------------------

def cmd_prepare(cfg: RunConfig) -> Path:
    run_dir = make_run_dir(cfg, "prepare")
    split, meta = prepare_split(cfg)
    meta["config_hash"] = cfg.digest()
    write_split(split, run_dir, meta)
    write_manifest(run_dir, cfg, "prepare", counts={k: len(getattr(split, k)) for k in ("train", "val", "test")})
    raw, filt = meta["raw"], meta["filtered"]
    print(f"raw:      {raw['num_users']} users, {raw['num_items']} items, "
          f"{raw['num_interactions']} ratings, sparsity {raw['sparsity']:.4f}")
    print(f"{cfg.k}-core:  {filt['num_users']} users, {filt['num_items']} items, "
          f"{filt['num_interactions']} ratings, sparsity {filt['sparsity']:.4f}")
    print(f"split:    train {len(split.train)} (unknown {int((~split.train.known).sum())}), "
          f"val {len(split.val)}, test {len(split.test)}")
    print(f"wrote {run_dir}")
    return run_dir


def cmd_train(cfg: RunConfig) -> Path:
    run_dir = make_run_dir(cfg, "train")
    split = obtain_split(cfg)
    tcfg = get_variant(cfg.variant).configure(cfg.train)
    graphs = build_decomposed(split.train, tcfg.decomposition_mode, tcfg.T)
    info = {"variant": cfg.variant, "decomposition_mode": tcfg.decomposition_mode,
            "seed": tcfg.seed, "T": list(graphs.T)}
    try:
        result = train(split, graphs, tcfg, progress=_log_epoch)
    except TrainingDiverged as exc:
        write_manifest(run_dir, cfg, "train", status="diverged", error=str(exc), **info)
        raise
    write_history_csv(result.history, run_dir / "history.csv")
    save_checkpoint(run_dir / "checkpoint.bin", result.params, T=graphs.T,
                    mode=tcfg.decomposition_mode, seed=tcfg.seed,
                    extra={"num_layers": tcfg.num_layers, "aggregation": tcfg.aggregation,
                           "config_hash": cfg.digest()})
    test = rmse(result.params, graphs, split.test, tcfg.num_layers, tcfg.aggregation)
    write_manifest(run_dir, cfg, "train", status="ok", best_epoch=result.best_epoch,
                   epochs_run=len(result.history), val_rmse=result.best_val_rmse,
                   test_rmse=test, **info)
    print(f"best epoch {result.best_epoch}: val RMSE {result.best_val_rmse:.5f}, test RMSE {test:.5f}")
    print(f"wrote {run_dir}")
    return run_dir


def cmd_ablate(cfg: RunConfig) -> Path:
    run_dir = make_run_dir(cfg, "ablate")
    split = obtain_split(cfg)
    rows, failures = [], {}
    for frac in cfg.fractions:
        masked = split if frac == 1.0 else replace(
            split, train=apply_rating_frac(split.train, MaskingSpec(frac, cfg.train.seed)))
        results: list[VariantResult] = []
        for name in cfg.variants:
            try:
                results.append(run_variant(masked, get_variant(name), cfg.train, cfg.seeds,
                                           workers=1 if cfg.deterministic else worker_count()))
            except Exception as exc:  # keep the remaining variants running
                logger.error("variant %s at fraction %s failed: %s", name, frac, exc)
                failures[f"{name}@{frac}"] = str(exc)
        rows.extend(result_rows(results, frac))
        for res in results:
            print(f"frac={frac:<5} {res.name:<20} test RMSE {res.mean:.5f} +- {res.std:.5f}")
    write_rows_csv(rows, run_dir / "ablation.csv")
    write_manifest(run_dir, cfg, "ablate", status="failed" if failures else "ok", failures=failures)
    print(f"wrote {run_dir}")
    if failures:
        raise RuntimeError(f"{len(failures)} variant run(s) failed: {sorted(failures)}")
    return run_dir


def cmd_analyze(cfg: RunConfig, checkpoint: str) -> Path:
    run_dir = make_run_dir(cfg, "analyze")
    split = obtain_split(cfg)
    params, header = load_checkpoint(checkpoint, expect={"N": split.train.num_nodes,
                                                         "ratings": list(split.train.rating_set)})
    if header.get("mode") not in ("cumulative", "exact", "reverse_cumulative", "none"):
        raise ModelError(f"{checkpoint}: header field 'mode' has unsupported value {header.get('mode')!r}")
    graphs = build_decomposed(split.train, header["mode"], header["T"])
    if tuple(header["T"]) != graphs.T:
        raise ModelError(f"{checkpoint}: header field 'T' is {header['T']}, graphs use {list(graphs.T)}")
    report = representation_distance_matrix(params, graphs, header.get("num_layers", 2),
                                            header.get("aggregation", "mean"))
    report.write_csv(run_dir / "distances.csv")
    print("rating " + " ".join(f"{t:>8}" for t in report.levels))
    for t, row in zip(report.levels, report.matrix):
        print(f"{t:>6} " + " ".join(f"{x:8.4f}" for x in row))
    extra = {"checkpoint": str(checkpoint)}
    if cfg.sweep:
        rows = hyperparameter_sweep(split, cfg.train, cfg.sweep_lambdas, cfg.sweep_alphas, cfg.seeds)
        write_rows_csv(rows, run_dir / "sweep.csv", fields=("lambda", "alpha", "mean", "std"))
        extra["sweep_rows"] = len(rows)
    write_manifest(run_dir, cfg, "analyze", status="ok", **extra)
    print(f"wrote {run_dir}")
    return run_dir


def _log_epoch(row: dict) -> None:
    logger.info("epoch %4d  ce %.2f  bpr %.2f  ir %.3f  val %.5f%s", row["epoch"], row["ce"],
                row["bpr"], row["ir"], row["val_rmse"], "  *" if row["best_flag"] else "")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of settings")
    common.add_argument("--seed", type=int)
    common.add_argument("--frac", type=float, help="fraction of training ratings kept")
    common.add_argument("--variant", help=f"one of {', '.join(VARIANTS)}")
    common.add_argument("--out", help="parent directory for run directories")
    common.add_argument("--dataset", help="raw ratings file")
    common.add_argument("--data", help="directory written by `prepare`")
    common.add_argument("--epochs", type=int)
    common.add_argument("--alpha", type=float)
    common.add_argument("--lambda", dest="lam", type=float)
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded BLAS and sequential runs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="rogmc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="filter, split and mask a raw ratings file")
    sub.add_parser("train", parents=[common], help="train one variant")
    sub.add_parser("ablate", parents=[common], help="run the variant grid over seeds")
    p = sub.add_parser("analyze", parents=[common], help="distance matrix (+ optional sweep)")
    p.add_argument("checkpoint")
    p.add_argument("--sweep", action="store_true", help="also run the lambda x alpha grid")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        if getattr(args, "sweep", False):
            cfg.sweep = True
        with reproducible(cfg.deterministic):
            if args.command == "prepare":
                cmd_prepare(cfg)
            elif args.command == "train":
                cmd_train(cfg)
            elif args.command == "ablate":
                cmd_ablate(cfg)
            else:
                cmd_analyze(cfg, args.checkpoint)
    except (DataError, ModelError, ValueError, OSError, TrainingDiverged, RuntimeError) as exc:
        print(f"rogmc {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

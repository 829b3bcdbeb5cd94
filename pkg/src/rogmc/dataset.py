"""Rating-file ingestion, k-core filtering, per-user splits and rating masking.

Labels are stored as integers; ``UNKNOWN`` (0) marks an interaction whose
rating was withheld. Rating sets are required to be >= 1 so the sentinel
never collides with a real rating.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)

UNKNOWN = 0

_DELIMITERS = {"tsv": "\t", "double_colon": "::"}


class DataError(ValueError):
    """Raised for malformed or degenerate rating data."""


class RawInteraction(NamedTuple):
    user: int
    item: int
    rating: int
    timestamp: int


@dataclass(frozen=True)
class Dataset:
    """Reindexed interactions.

    ``users``, ``items`` and ``labels`` are parallel int64 arrays. ``labels``
    holds a rating from ``rating_set`` or ``UNKNOWN``.
    """

    num_users: int
    num_items: int
    rating_set: tuple[int, ...]
    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    user_tokens: np.ndarray = field(default=None, repr=False)
    item_tokens: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        for name in ("users", "items", "labels"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (len(self.users) == len(self.items) == len(self.labels)):
            raise DataError("users, items and labels must have equal length")
        rs = tuple(int(r) for r in self.rating_set)
        if any(b <= a for a, b in zip(rs, rs[1:])):
            raise DataError(f"rating_set must be strictly increasing, got {rs}")
        if rs and rs[0] <= UNKNOWN:
            raise DataError("ratings must be >= 1; 0 is reserved for the unknown label")
        object.__setattr__(self, "rating_set", rs)

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items

    def __len__(self) -> int:
        return len(self.users)

    @property
    def known(self) -> np.ndarray:
        """Boolean mask of interactions carrying a rating."""
        return self.labels != UNKNOWN

    def pairs(self) -> list[tuple[int, int, int]]:
        return list(zip(self.users.tolist(), self.items.tolist(), self.labels.tolist()))

    def subset(self, index: np.ndarray) -> "Dataset":
        return replace(self, users=self.users[index], items=self.items[index],
                       labels=self.labels[index])

    def with_labels(self, labels: np.ndarray) -> "Dataset":
        return replace(self, labels=labels)


@dataclass(frozen=True)
class SplitDataset:
    train: Dataset
    val: Dataset
    test: Dataset


@dataclass(frozen=True)
class MaskingSpec:
    keep_fraction: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.keep_fraction <= 1.0:
            raise DataError(f"keep_fraction must lie in (0, 1], got {self.keep_fraction}")


def load_ratings(path, format: str = "tsv") -> list[RawInteraction]:
    """Parse a user/item/rating/timestamp file (ML-100K ``u.data`` or ML-1M ``ratings.dat``)."""
    try:
        delim = _DELIMITERS[format]
    except KeyError:
        raise DataError(f"unknown format {format!r}; expected one of {sorted(_DELIMITERS)}") from None
    path = Path(path)
    out = []
    with path.open(encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(delim)
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            try:
                out.append(RawInteraction(*(int(p) for p in parts)))
            except ValueError:
                raise DataError(f"{path}:{lineno}: unparseable record {line!r}") from None
    if not out:
        raise DataError(f"{path}: no interactions found")
    return out


def apply_k_core(interactions: Sequence[RawInteraction], k: int) -> list[RawInteraction]:
    """Drop users and items with fewer than ``k`` interactions until nothing changes."""
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    if not interactions:
        raise DataError("k-core of an empty interaction list")
    arr = np.array([(r.user, r.item) for r in interactions], dtype=np.int64)
    _, u = np.unique(arr[:, 0], return_inverse=True)
    _, i = np.unique(arr[:, 1], return_inverse=True)
    alive = np.ones(len(arr), dtype=bool)
    while True:
        udeg = np.bincount(u[alive], minlength=u.max() + 1)
        ideg = np.bincount(i[alive], minlength=i.max() + 1)
        keep = alive & (udeg[u] >= k) & (ideg[i] >= k)
        if np.array_equal(keep, alive):
            break
        alive = keep
    if not alive.any():
        raise DataError(f"{k}-core filtering removed every interaction")
    return [r for r, a in zip(interactions, alive) if a]


def reindex(interactions: Sequence[RawInteraction]) -> Dataset:
    """Map raw tokens to contiguous ids in first-appearance order."""
    if not interactions:
        raise DataError("cannot reindex an empty interaction list")
    user_ids: dict[int, int] = {}
    item_ids: dict[int, int] = {}
    users, items, labels = [], [], []
    seen = set()
    for lineno, r in enumerate(interactions):
        u = user_ids.setdefault(r.user, len(user_ids))
        i = item_ids.setdefault(r.item, len(item_ids))
        if (u, i) in seen:
            raise DataError(f"duplicate (user, item) pair ({r.user}, {r.item}) at record {lineno}")
        seen.add((u, i))
        users.append(u)
        items.append(i)
        labels.append(r.rating)
    labels = np.asarray(labels, dtype=np.int64)
    return Dataset(
        num_users=len(user_ids),
        num_items=len(item_ids),
        rating_set=tuple(np.unique(labels).tolist()),
        users=np.asarray(users),
        items=np.asarray(items),
        labels=labels,
        user_tokens=np.fromiter(user_ids, dtype=np.int64, count=len(user_ids)),
        item_tokens=np.fromiter(item_ids, dtype=np.int64, count=len(item_ids)),
    )


def split_per_user(dataset: Dataset, ratios: Sequence[float] = (0.8, 0.1, 0.1),
                   seed: int = 0) -> SplitDataset:
    """Shuffle each user's interactions and cut them into train/val/test.

    Validation and test each get ``floor(n * ratio)`` interactions, at least
    one; train keeps the remainder.
    """
    if len(ratios) != 3 or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise DataError(f"ratios must be three values summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    order = np.argsort(dataset.users, kind="stable")
    bounds = np.searchsorted(dataset.users[order], np.arange(dataset.num_users + 1))
    parts = {"train": [], "val": [], "test": []}
    for u in range(dataset.num_users):
        idx = order[bounds[u]:bounds[u + 1]]
        n = len(idx)
        if n == 0:
            continue
        if n < 3:
            raise DataError(f"user {u} has {n} interactions; at least 3 are required to split")
        idx = idx[rng.permutation(n)]
        n_val = max(1, math.floor(n * ratios[1] + 1e-9))
        n_test = max(1, math.floor(n * ratios[2] + 1e-9))
        parts["val"].append(idx[:n_val])
        parts["test"].append(idx[n_val:n_val + n_test])
        parts["train"].append(idx[n_val + n_test:])
    out = {k: dataset.subset(np.sort(np.concatenate(v))) for k, v in parts.items()}
    return SplitDataset(**out)


def apply_rating_frac(train: Dataset, spec: MaskingSpec) -> Dataset:
    """Keep ``round(keep_fraction * len(train))`` ratings; relabel the rest as unknown."""
    if not train.known.all():
        raise DataError("training set already contains unknown labels")
    n = len(train)
    n_keep = round(spec.keep_fraction * n)
    if n_keep == n:
        return train
    rng = np.random.default_rng(spec.seed)
    keep = rng.choice(n, size=n_keep, replace=False)
    labels = np.full(n, UNKNOWN, dtype=np.int64)
    labels[keep] = train.labels[keep]
    return train.with_labels(labels)


def describe(dataset: Dataset) -> dict:
    n = len(dataset)
    return {
        "num_users": dataset.num_users,
        "num_items": dataset.num_items,
        "num_interactions": n,
        "num_unknown": int((~dataset.known).sum()),
        "sparsity": 1.0 - n / (dataset.num_users * dataset.num_items),
        "rating_set": list(dataset.rating_set),
    }


def raw_statistics(interactions: Iterable[RawInteraction]) -> dict:
    interactions = list(interactions)
    users = {r.user for r in interactions}
    items = {r.item for r in interactions}
    n = len(interactions)
    return {
        "num_users": len(users),
        "num_items": len(items),
        "num_interactions": n,
        "sparsity": 1.0 - n / (len(users) * len(items)),
        "rating_set": sorted({r.rating for r in interactions}),
    }


# -- canonical on-disk form -------------------------------------------------

_PARTS = ("train", "val", "test")


def write_split(split: SplitDataset, out_dir, metadata: dict | None = None) -> Path:
    """Write ``train.tsv``/``val.tsv``/``test.tsv`` plus ``metadata.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in _PARTS:
        part = getattr(split, name)
        with (out_dir / f"{name}.tsv").open("w", encoding="utf-8", newline="\n") as fh:
            for u, i, lab in zip(part.users.tolist(), part.items.tolist(), part.labels.tolist()):
                fh.write(f"{u}\t{i}\t{lab}\n")
    meta = {
        "num_users": split.train.num_users,
        "num_items": split.train.num_items,
        "rating_set": list(split.train.rating_set),
        "counts": {name: len(getattr(split, name)) for name in _PARTS},
        "num_unknown_train": int((~split.train.known).sum()),
    }
    meta.update(metadata or {})
    (out_dir / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")
    return out_dir


def read_split(data_dir) -> tuple[SplitDataset, dict]:
    data_dir = Path(data_dir)
    meta_path = data_dir / "metadata.json"
    if not meta_path.exists():
        raise DataError(f"{data_dir}: missing metadata.json; run `prepare` first")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    parts = {}
    for name in _PARTS:
        path = data_dir / f"{name}.tsv"
        try:
            arr = np.loadtxt(path, dtype=np.int64, delimiter="\t", ndmin=2)
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from None
        parts[name] = Dataset(meta["num_users"], meta["num_items"], tuple(meta["rating_set"]),
                              arr[:, 0], arr[:, 1], arr[:, 2])
    return SplitDataset(**parts), meta

import os
from pathlib import Path

import numpy as np
import pytest

from rogmc.dataset import UNKNOWN, Dataset

ROOT = Path(__file__).resolve().parents[1]
U = UNKNOWN


def ml100k_path() -> Path | None:
    candidates = [os.environ.get("ROGMC_ML100K"), ROOT / "data" / "ml-100k" / "u.data"]
    for c in candidates:
        if c and Path(c).is_file():
            return Path(c)
    return None


@pytest.fixture(scope="session")
def ml100k():
    path = ml100k_path()
    if path is None:
        pytest.skip("ML-100K u.data not found; run scripts/fetch_ml100k.py or set ROGMC_ML100K")
    return path


def make_dataset(triples, num_users=None, num_items=None, rating_set=(1, 2, 3)) -> Dataset:
    arr = np.array(triples, dtype=np.int64).reshape(-1, 3)
    return Dataset(
        num_users=num_users if num_users is not None else int(arr[:, 0].max()) + 1,
        num_items=num_items if num_items is not None else int(arr[:, 1].max()) + 1,
        rating_set=rating_set,
        users=arr[:, 0], items=arr[:, 1], labels=arr[:, 2],
    )


def random_dataset(rng, num_users, num_items, density=0.5, rating_set=(1, 2, 3),
                   unknown_frac=0.2, ensure_rated=True) -> Dataset:
    triples = []
    for u in range(num_users):
        for i in range(num_items):
            if rng.random() < density:
                lab = U if rng.random() < unknown_frac else int(rng.choice(rating_set))
                triples.append((u, i, lab))
    if not triples:
        triples = [(0, 0, rating_set[0])]
    if ensure_rated and all(t[2] == U for t in triples):
        u, i, _ = triples[0]
        triples[0] = (u, i, rating_set[-1])
    return make_dataset(triples, num_users, num_items, rating_set)


@pytest.fixture
def toy_train():
    # (u0,i0,3), (u0,i1,1), (u1,i1,2), (u1,i2,U)
    return make_dataset([(0, 0, 3), (0, 1, 1), (1, 1, 2), (1, 2, U)])


# criterion number -> (title, status, detail); filled in by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, status, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{status}] {n:2d}. {title}: {detail}")

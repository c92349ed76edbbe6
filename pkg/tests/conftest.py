from __future__ import annotations

import numpy as np
import pytest

from kgdiv.config import TrainConfig
from kgdiv.data import Dataset, DatasetSplit, IdMaps, build_dataset, build_interaction_graph, build_kg
from kgdiv.synthetic import planted_blocks

# 5 users, 8 items, 10 entities (items 0-7, attributes 8-9), 3 relations
TOY_TRAIN = [(0, 0), (0, 1), (0, 5), (1, 1), (1, 2), (2, 2), (2, 3), (2, 7),
             (3, 4), (3, 5), (4, 6), (4, 0), (4, 3)]
TOY_VALID = [(0, 2), (1, 6), (2, 4), (3, 7), (4, 1)]
TOY_TEST = [(0, 3), (1, 0), (2, 5), (3, 6), (4, 7)]
TOY_TRIPLETS = [
    (0, 0, 8), (1, 0, 8), (2, 1, 8), (3, 1, 9), (4, 2, 9), (5, 0, 9),
    (6, 2, 8), (7, 1, 9), (0, 2, 3), (1, 1, 4), (2, 2, 6), (5, 0, 8),
]


def make_toy_dataset(add_inverse: bool = True) -> Dataset:
    sp_ = DatasetSplit(np.array(TOY_TRAIN), np.array(TOY_VALID), np.array(TOY_TEST), 0, (0.8, 0.1, 0.1), 5, 8)
    graph = build_interaction_graph(sp_.train, 5, 8)
    kg = build_kg(np.array(TOY_TRIPLETS), n_items=8, n_entities=10, n_relations=3, add_inverse=add_inverse)
    maps = IdMaps(np.arange(5), np.arange(10), np.arange(3), 8)
    return Dataset(sp_, graph, kg, maps)


def toy_config(**kw) -> TrainConfig:
    base = dict(dim=8, kg_layers=2, lgc_layers=2, lambda_align=0.5, lambda_uniform=0.5, lambda_reg=1e-4,
                precision="float64", batch_size=16)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def toy():
    return make_toy_dataset()


@pytest.fixture(scope="session")
def planted():
    raw, trip = planted_blocks(n_users=40, n_items=60, seed=3)
    return build_dataset(raw, trip, core=10, seed=3)


def random_kg(rng: np.random.Generator, n_items: int, n_entities: int, n_relations: int, n_triplets: int):
    h = rng.integers(0, n_entities, n_triplets)
    # bias heads towards items so coverage / overlap are non-trivial
    if n_items:
        h = np.where(rng.random(n_triplets) < 0.7, rng.integers(0, n_items, n_triplets), h)
    r = rng.integers(0, n_relations, n_triplets)
    t = rng.integers(0, n_entities, n_triplets)
    return np.stack([h, r, t], axis=1)

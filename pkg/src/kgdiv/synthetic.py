"""Small planted-structure datasets for tests, demos and smoke runs."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from kgdiv.data import RawInteractions


def planted_blocks(n_users: int = 20, n_items: int = 40, n_blocks: int = 4, items_per_user: int = 12,
                   in_block: float = 0.85, attrs_per_block: int = 3, shared_attrs: int = 6,
                   n_relations: int = 3, seed: int = 0) -> tuple[RawInteractions, np.ndarray]:
    """Users and items fall into ``n_blocks`` groups; users mostly pick items of their own group.

    Items of one group share that group's attribute entities in the KG and
    each also links to one of a few global attributes. Entity ids follow the
    benchmark convention: items are ``[0, n_items)``, attributes come after.
    """
    rng = np.random.default_rng(seed)
    item_block = np.arange(n_items) % n_blocks
    user_block = np.arange(n_users) % n_blocks
    lists = []
    for u in range(n_users):
        own = np.flatnonzero(item_block == user_block[u])
        other = np.flatnonzero(item_block != user_block[u])
        n_own = min(len(own), int(round(items_per_user * in_block)))
        chosen = list(rng.choice(own, n_own, replace=False))
        chosen += list(rng.choice(other, items_per_user - n_own, replace=False))
        lists.append(sorted(int(x) for x in chosen))
    raw = RawInteractions.from_lists(lists, n_items=n_items)

    trip = []
    block_attr0 = n_items
    shared0 = n_items + n_blocks * attrs_per_block
    for i in range(n_items):
        b = item_block[i]
        for a in rng.choice(attrs_per_block, size=min(2, attrs_per_block), replace=False):
            trip.append((i, int(rng.integers(n_relations)), block_attr0 + b * attrs_per_block + int(a)))
        trip.append((i, int(rng.integers(n_relations)), shared0 + int(rng.integers(shared_attrs))))
    return raw, np.unique(np.asarray(trip, dtype=np.int64), axis=0)


def write_interactions(path, raw: RawInteractions) -> None:
    lines = []
    for u, items in enumerate(raw.items):
        orig_u = int(raw.user_ids[u])
        lines.append(" ".join(str(x) for x in [orig_u, *(int(raw.item_ids[i]) for i in items)]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_triplets(path, triplets: np.ndarray) -> None:
    Path(path).write_text("".join(f"{h} {r} {t}\n" for h, r, t in np.asarray(triplets)), encoding="utf-8")

"""Interaction and knowledge-graph ingestion.

Interaction files hold one user per line (``u i1 i2 ...``); KG files hold one
``h r t`` triplet per line. KG entity ids follow the usual benchmark
convention where an item's id is also its entity id, so after filtering the
items are remapped to the prefix ``[0, n_items)`` of the entity space and the
remaining entities follow in ascending original-id order.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from kgdiv.errors import ConsistencyError, ContractError, EmptyDatasetError, ParseError, SchemaError

log = logging.getLogger(__name__)


@dataclass
class RawInteractions:
    """Per-user item lists with dense ids.

    ``user_ids[u]`` / ``item_ids[i]`` give the original id behind dense id u / i.
    """

    items: list[np.ndarray]
    n_users: int
    n_items: int
    user_ids: np.ndarray
    item_ids: np.ndarray

    @property
    def n_interactions(self) -> int:
        return int(sum(len(x) for x in self.items))

    def edges(self) -> np.ndarray:
        """(u, i) pairs as an ``(E, 2)`` array, users ascending, items in stored order."""
        if self.n_interactions == 0:
            return np.zeros((0, 2), dtype=np.int64)
        us = np.repeat(np.arange(self.n_users), [len(x) for x in self.items])
        its = np.concatenate([np.asarray(x, dtype=np.int64) for x in self.items])
        return np.stack([us, its], axis=1)

    @classmethod
    def from_lists(cls, lists: Sequence[Iterable[int]], n_items: int | None = None) -> "RawInteractions":
        items = [_dedup(np.asarray(list(x), dtype=np.int64)) for x in lists]
        max_item = max((int(x.max()) for x in items if len(x)), default=-1)
        n_items = max_item + 1 if n_items is None else n_items
        n_users = len(items)
        return cls(items, n_users, n_items, np.arange(n_users), np.arange(n_items))


def _dedup(arr: np.ndarray) -> np.ndarray:
    _, first = np.unique(arr, return_index=True)
    return arr[np.sort(first)]


def load_interactions(path) -> RawInteractions:
    """Read a ``u i1 i2 ...`` file. Ids are taken literally; counts are max id + 1."""
    path = Path(path)
    per_user: dict[int, list[int]] = {}
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            toks = line.split()
            if not toks:
                continue
            try:
                ids = [int(t) for t in toks]
            except ValueError as exc:
                raise ParseError(path, line_no, f"non-integer token ({exc})") from None
            if min(ids) < 0:
                raise ParseError(path, line_no, "negative id")
            per_user.setdefault(ids[0], []).extend(ids[1:])
    if not per_user or not any(per_user.values()):
        raise EmptyDatasetError(f"{path}: no interactions")
    n_users = max(per_user) + 1
    lists = [per_user.get(u, []) for u in range(n_users)]
    return RawInteractions.from_lists(lists)


def load_ratings(path) -> RawInteractions:
    """Read ``u i label`` lines (tabs or spaces); rows with a positive label become interactions."""
    path = Path(path)
    per_user: dict[int, list[int]] = {}
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            toks = line.split()
            if not toks:
                continue
            if len(toks) != 3:
                raise ParseError(path, line_no, f"expected 'u i label', got {len(toks)} tokens")
            try:
                u, i, label = int(toks[0]), int(toks[1]), float(toks[2])
            except ValueError as exc:
                raise ParseError(path, line_no, f"bad token ({exc})") from None
            if u < 0 or i < 0:
                raise ParseError(path, line_no, "negative id")
            if label > 0:
                per_user.setdefault(u, []).append(i)
    if not per_user:
        raise EmptyDatasetError(f"{path}: no positive ratings")
    lists = [per_user.get(u, []) for u in range(max(per_user) + 1)]
    return RawInteractions.from_lists(lists)


def apply_k_core(raw: RawInteractions, k: int) -> RawInteractions:
    """Keep users with at least ``k`` items, drop orphaned items, re-densify ids.

    Users only: item degree is not thresholded, so one pass reaches the fixpoint.
    """
    if k < 1:
        raise ContractError("k must be >= 1")
    keep_users = [u for u in range(raw.n_users) if len(raw.items[u]) >= k]
    if not keep_users:
        raise EmptyDatasetError(f"no user has >= {k} interactions")
    kept_lists = [raw.items[u] for u in keep_users]
    used = np.unique(np.concatenate(kept_lists))
    remap = np.full(raw.n_items, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return RawInteractions(
        items=[remap[x] for x in kept_lists],
        n_users=len(keep_users),
        n_items=len(used),
        user_ids=np.asarray(raw.user_ids)[keep_users],
        item_ids=np.asarray(raw.item_ids)[used],
    )


@dataclass
class DatasetSplit:
    train: np.ndarray  # (E, 2) int64 (user, item)
    valid: np.ndarray
    test: np.ndarray
    seed: int
    ratios: tuple[float, float, float]
    n_users: int
    n_items: int

    def user_items(self, which: str) -> list[np.ndarray]:
        edges = getattr(self, which)
        order = np.argsort(edges[:, 0], kind="stable")
        e = edges[order]
        bounds = np.searchsorted(e[:, 0], np.arange(self.n_users + 1))
        return [e[bounds[u]:bounds[u + 1], 1] for u in range(self.n_users)]

    def manifest(self) -> str:
        lines = [
            f"seed={self.seed}",
            "ratios=" + ",".join(f"{r:g}" for r in self.ratios),
            f"users={self.n_users}",
            f"items={self.n_items}",
            f"train={len(self.train)}",
            f"valid={len(self.valid)}",
            f"test={len(self.test)}",
        ]
        return "\n".join(lines) + "\n"


def split(raw: RawInteractions, ratios=(0.8, 0.1, 0.1), seed: int = 2024) -> DatasetSplit:
    """Per-user shuffled split.

    Validation and test sizes are ``floor(n * ratio)``; training gets the
    remainder, so every user keeps at least one training edge.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ContractError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    parts: list[list[np.ndarray]] = [[], [], []]
    for u in range(raw.n_users):
        items = np.asarray(raw.items[u], dtype=np.int64)
        n = len(items)
        n_val = int(np.floor(n * ratios[1] + 1e-9))
        n_test = int(np.floor(n * ratios[2] + 1e-9))
        if n - n_val - n_test < 1:
            raise ContractError(f"user {u} has too few interactions ({n}) to split")
        perm = items[rng.permutation(n)]
        chunks = (perm[n_val + n_test:], perm[:n_val], perm[n_val:n_val + n_test])
        for dst, chunk in zip(parts, chunks):
            dst.append(np.stack([np.full(len(chunk), u, dtype=np.int64), chunk], axis=1))
    train, valid, test = (np.concatenate(p) if p else np.zeros((0, 2), np.int64) for p in parts)
    return DatasetSplit(train, valid, test, seed, tuple(float(r) for r in ratios), raw.n_users, raw.n_items)


@dataclass(frozen=True)
class InteractionGraph:
    """User-item bipartite graph in CSR form, both directions."""

    n_users: int
    n_items: int
    user_indptr: np.ndarray
    user_items: np.ndarray  # items of each user, ascending
    item_indptr: np.ndarray
    item_users: np.ndarray  # users of each item, ascending

    @property
    def user_degree(self) -> np.ndarray:
        return np.diff(self.user_indptr)

    @property
    def item_degree(self) -> np.ndarray:
        return np.diff(self.item_indptr)

    @property
    def n_edges(self) -> int:
        return int(self.user_items.shape[0])

    def items_of(self, u: int) -> np.ndarray:
        return self.user_items[self.user_indptr[u]:self.user_indptr[u + 1]]

    def users_of(self, i: int) -> np.ndarray:
        return self.item_users[self.item_indptr[i]:self.item_indptr[i + 1]]

    def edge_users(self) -> np.ndarray:
        """User id of each entry of ``user_items`` (CSR row expansion)."""
        return np.repeat(np.arange(self.n_users), self.user_degree)

    def to_edges(self) -> np.ndarray:
        return np.stack([self.edge_users(), self.user_items], axis=1)

    def to_raw(self) -> RawInteractions:
        lists = [self.items_of(u) for u in range(self.n_users)]
        return RawInteractions(lists, self.n_users, self.n_items, np.arange(self.n_users), np.arange(self.n_items))


def _csr(rows: np.ndarray, cols: np.ndarray, n_rows: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((cols, rows))
    counts = np.bincount(rows, minlength=n_rows)
    indptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    return indptr, cols[order]


def build_interaction_graph(edges: np.ndarray, n_users: int, n_items: int) -> InteractionGraph:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if len(edges) and (edges.min() < 0 or edges[:, 0].max() >= n_users or edges[:, 1].max() >= n_items):
        raise ContractError("edge ids out of range")
    if len(np.unique(edges[:, 0] * n_items + edges[:, 1])) != len(edges):
        raise ContractError("duplicate (user, item) edges")
    u_ptr, u_items = _csr(edges[:, 0], edges[:, 1], n_users)
    i_ptr, i_users = _csr(edges[:, 1], edges[:, 0], n_items)
    return InteractionGraph(n_users, n_items, u_ptr, u_items, i_ptr, i_users)


@dataclass(frozen=True)
class KnowledgeGraph:
    """Triplets over dense ids; items occupy entity ids ``[0, n_items)``.

    ``head_indptr/neigh_rel/neigh_tail`` is the CSR over heads used for
    propagation (inverse triplets included when enabled). ``triplets`` keeps
    only the original direction. ``item_indptr/item_ents`` lists each item's
    distinct 1-hop tail entities over original triplets, and
    ``ent_indptr/ent_items`` is the inverted entity -> items index.
    """

    n_entities: int
    n_relations: int  # includes inverse relations when enabled
    n_base_relations: int
    n_items: int
    triplets: np.ndarray  # (T, 3) original-direction (h, r, t)
    head_indptr: np.ndarray
    neigh_rel: np.ndarray
    neigh_tail: np.ndarray
    item_indptr: np.ndarray
    item_ents: np.ndarray
    ent_indptr: np.ndarray
    ent_items: np.ndarray

    @property
    def has_inverse(self) -> bool:
        return self.n_relations == 2 * self.n_base_relations

    def neighbors(self, h: int) -> list[tuple[int, int]]:
        s, e = self.head_indptr[h], self.head_indptr[h + 1]
        return list(zip(self.neigh_rel[s:e].tolist(), self.neigh_tail[s:e].tolist()))

    def item_entities(self, i: int) -> np.ndarray:
        return self.item_ents[self.item_indptr[i]:self.item_indptr[i + 1]]

    def entity_items(self, v: int) -> np.ndarray:
        return self.ent_items[self.ent_indptr[v]:self.ent_indptr[v + 1]]

    def item_triplets(self, i: int) -> np.ndarray:
        """Original-direction (r, t) pairs with ``i`` as head, sorted."""
        t = self.triplets
        sel = t[t[:, 0] == i][:, 1:]
        return sel[np.lexsort((sel[:, 1], sel[:, 0]))]


def build_kg(
    triplets: np.ndarray,
    n_items: int,
    n_entities: int | None = None,
    n_relations: int | None = None,
    add_inverse: bool = True,
) -> KnowledgeGraph:
    """Build a :class:`KnowledgeGraph` from dense-id triplets.

    Each (h, r, t) is also stored as (t, r + n_relations, h) when ``add_inverse``.
    """
    trip = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    if trip.size and trip.min() < 0:
        raise SchemaError("negative id in triplets")
    max_ent = int(max(trip[:, 0].max(), trip[:, 2].max())) if len(trip) else -1
    max_rel = int(trip[:, 1].max()) if len(trip) else -1
    if n_entities is None:
        n_entities = max(max_ent + 1, n_items)
    if n_relations is None:
        n_relations = max_rel + 1
    if max_ent >= n_entities:
        raise SchemaError(f"entity id {max_ent} exceeds entity count {n_entities}")
    if max_rel >= n_relations:
        raise SchemaError(f"relation id {max_rel} exceeds relation count {n_relations}")
    if n_items > n_entities:
        raise ConsistencyError(f"{n_items} items but only {n_entities} entities")
    trip = np.unique(trip, axis=0) if len(trip) else trip

    heads, rels, tails = trip[:, 0], trip[:, 1], trip[:, 2]
    if add_inverse:
        heads = np.concatenate([heads, trip[:, 2]])
        rels = np.concatenate([rels, trip[:, 1] + n_relations])
        tails = np.concatenate([tails, trip[:, 0]])
    order = np.lexsort((tails, rels, heads))
    heads, rels, tails = heads[order], rels[order], tails[order]
    head_indptr = np.zeros(n_entities + 1, dtype=np.int64)
    np.cumsum(np.bincount(heads, minlength=n_entities), out=head_indptr[1:])

    item_mask = trip[:, 0] < n_items
    pairs = np.unique(trip[item_mask][:, [0, 2]], axis=0) if item_mask.any() else np.zeros((0, 2), np.int64)
    item_indptr, item_ents = _csr(pairs[:, 0], pairs[:, 1], n_items)
    ent_indptr, ent_items = _csr(pairs[:, 1], pairs[:, 0], n_entities)

    return KnowledgeGraph(
        n_entities=int(n_entities),
        n_relations=int(2 * n_relations if add_inverse else n_relations),
        n_base_relations=int(n_relations),
        n_items=int(n_items),
        triplets=trip,
        head_indptr=head_indptr,
        neigh_rel=rels,
        neigh_tail=tails,
        item_indptr=item_indptr,
        item_ents=item_ents,
        ent_indptr=ent_indptr,
        ent_items=ent_items,
    )


def read_triplets(path) -> np.ndarray:
    path = Path(path)
    rows = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            toks = line.split()
            if not toks:
                continue
            if len(toks) != 3:
                raise ParseError(path, line_no, f"expected 'h r t', got {len(toks)} tokens")
            try:
                rows.append([int(t) for t in toks])
            except ValueError as exc:
                raise ParseError(path, line_no, f"non-integer token ({exc})") from None
    trip = np.asarray(rows, dtype=np.int64).reshape(-1, 3)
    if trip.size and trip.min() < 0:
        raise SchemaError(f"{path}: negative id")
    return trip


@dataclass
class IdMaps:
    """Dense <-> original id maps. ``users[d]`` is the original id of dense user d.

    Items are the first ``n_items`` entries of ``entities``.
    """

    users: np.ndarray
    entities: np.ndarray
    relations: np.ndarray
    n_items: int = 0

    def __post_init__(self):
        self._fwd: dict[str, dict[int, int]] = {}

    def dense(self, kind: str, original: int) -> int:
        """Dense id of an original ``users``/``entities``/``relations`` id (KeyError if absent)."""
        table = self._fwd.get(kind)
        if table is None:
            table = {int(o): d for d, o in enumerate(getattr(self, kind))}
            self._fwd[kind] = table
        return table[int(original)]


def load_kg(path, add_inverse: bool = True, item_ids: np.ndarray | None = None) -> tuple[KnowledgeGraph, IdMaps]:
    """Load a triplet file.

    With ``item_ids`` (original ids of the dense items, e.g. from
    :func:`apply_k_core`), entities are remapped so items come first and the
    rest follow in ascending original order; relations are densified. Without
    it ids are used literally and no entity is treated as an item.
    """
    trip = read_triplets(path)
    return remap_kg(trip, add_inverse=add_inverse, item_ids=item_ids)


def remap_kg(trip: np.ndarray, add_inverse: bool = True, item_ids=None) -> tuple[KnowledgeGraph, IdMaps]:
    trip = np.asarray(trip, dtype=np.int64).reshape(-1, 3)
    if item_ids is None:
        kg = build_kg(trip, n_items=0, add_inverse=add_inverse)
        maps = IdMaps(np.zeros(0, np.int64), np.arange(kg.n_entities), np.arange(kg.n_base_relations))
        return kg, maps

    item_ids = np.asarray(item_ids, dtype=np.int64)
    n_items = len(item_ids)
    kg_entities = np.unique(np.concatenate([trip[:, 0], trip[:, 2]])) if len(trip) else np.zeros(0, np.int64)
    space = int(kg_entities.max()) + 1 if len(kg_entities) else 0
    missing = item_ids[item_ids >= space]
    if len(missing):
        raise ConsistencyError(
            f"{len(missing)} item(s) outside the KG entity id space [0, {space}), e.g. {int(missing[0])}"
        )
    others = np.setdiff1d(kg_entities, item_ids, assume_unique=False)
    ent_orig = np.concatenate([item_ids, others])
    lookup = np.full(max(space, int(item_ids.max()) + 1 if n_items else 0), -1, dtype=np.int64)
    lookup[ent_orig] = np.arange(len(ent_orig))
    rel_orig = np.unique(trip[:, 1]) if len(trip) else np.zeros(0, np.int64)
    rel_lookup = np.full(int(rel_orig.max()) + 1 if len(rel_orig) else 0, -1, dtype=np.int64)
    rel_lookup[rel_orig] = np.arange(len(rel_orig))
    dense = np.stack([lookup[trip[:, 0]], rel_lookup[trip[:, 1]], lookup[trip[:, 2]]], axis=1)
    kg = build_kg(dense, n_items=n_items, n_entities=len(ent_orig), n_relations=len(rel_orig), add_inverse=add_inverse)
    return kg, IdMaps(np.zeros(0, np.int64), ent_orig, rel_orig, n_items)


@dataclass
class Dataset:
    """Everything the trainer and evaluator need, built from one split."""

    split: DatasetSplit
    graph: InteractionGraph
    kg: KnowledgeGraph
    maps: IdMaps

    @property
    def n_users(self) -> int:
        return self.graph.n_users

    @property
    def n_items(self) -> int:
        return self.graph.n_items

    def stats(self) -> dict[str, int]:
        return {
            "users": self.split.n_users,
            "items": self.split.n_items,
            "interactions": int(len(self.split.train) + len(self.split.valid) + len(self.split.test)),
            "entities": self.kg.n_entities,
            "relations": self.kg.n_base_relations,
            "triplets": int(len(self.kg.triplets)),
        }


def build_dataset(raw: RawInteractions, triplets: np.ndarray, *, core: int = 10,
                  ratios=(0.8, 0.1, 0.1), seed: int = 2024, add_inverse: bool = True) -> Dataset:
    filtered = apply_k_core(raw, core)
    sp_ = split(filtered, ratios, seed)
    kg, maps = remap_kg(triplets, add_inverse=add_inverse, item_ids=filtered.item_ids)
    maps.users = np.asarray(filtered.user_ids)
    graph = build_interaction_graph(sp_.train, sp_.n_users, sp_.n_items)
    return Dataset(sp_, graph, kg, maps)


# --- prepared directories ----------------------------------------------------

PREPARED_FILES = ("manifest.txt", "train.txt", "valid.txt", "test.txt", "kg.txt",
                  "user_map.txt", "entity_map.txt", "relation_map.txt", "stats.txt")


def _write_rows(path: Path, rows: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in np.asarray(rows, dtype=np.int64).tolist():
            f.write(" ".join(map(str, row)) + "\n")


def _read_rows(path: Path, width: int) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            toks = line.split()
            if not toks:
                continue
            if len(toks) != width:
                raise ParseError(path, line_no, f"expected {width} integers, got {len(toks)} tokens")
            try:
                rows.append([int(t) for t in toks])
            except ValueError:
                raise ParseError(path, line_no, "non-integer token") from None
    return np.asarray(rows, dtype=np.int64).reshape(-1, width)


def save_prepared(dataset: Dataset, directory, extra: dict | None = None) -> Path:
    """Write a dataset as plain-text files with dense ids; see :func:`load_prepared`."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    sp_, kg, maps = dataset.split, dataset.kg, dataset.maps
    manifest = sp_.manifest() + "".join([
        f"entities={kg.n_entities}\n",
        f"relations={kg.n_base_relations}\n",
        f"add_inverse={'true' if kg.has_inverse else 'false'}\n",
    ])
    manifest += "".join(f"{k}={v}\n" for k, v in (extra or {}).items())
    (d / "manifest.txt").write_text(manifest, encoding="utf-8")
    for name in ("train", "valid", "test"):
        _write_rows(d / f"{name}.txt", getattr(sp_, name))
    _write_rows(d / "kg.txt", kg.triplets)
    for name, ids in (("user", maps.users), ("entity", maps.entities), ("relation", maps.relations)):
        ids = np.asarray(ids, dtype=np.int64)
        _write_rows(d / f"{name}_map.txt", np.stack([np.arange(len(ids)), ids], axis=1))
    (d / "stats.txt").write_text("".join(f"{k}={v}\n" for k, v in dataset.stats().items()), encoding="utf-8")
    return d


def load_prepared(directory) -> Dataset:
    d = Path(directory)
    missing = [f for f in PREPARED_FILES if not (d / f).exists()]
    if missing:
        raise FileNotFoundError(f"{d} is not a prepared dataset directory (missing {', '.join(missing)})")
    meta = {}
    for line in (d / "manifest.txt").read_text(encoding="utf-8").splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            meta[key.strip()] = value.strip()
    n_users, n_items = int(meta["users"]), int(meta["items"])
    ratios = tuple(float(r) for r in meta["ratios"].split(","))
    parts = [_read_rows(d / f"{name}.txt", 2) for name in ("train", "valid", "test")]
    sp_ = DatasetSplit(*parts, int(meta["seed"]), ratios, n_users, n_items)
    kg = build_kg(_read_rows(d / "kg.txt", 3), n_items=n_items, n_entities=int(meta["entities"]),
                  n_relations=int(meta["relations"]), add_inverse=meta.get("add_inverse", "true") == "true")
    maps = IdMaps(*(_read_rows(d / f"{name}_map.txt", 2)[:, 1] for name in ("user", "entity", "relation")),
                  n_items=n_items)
    return Dataset(sp_, build_interaction_graph(sp_.train, n_users, n_items), kg, maps)

"""Top-k retrieval with accuracy (Recall, NDCG) and KG coverage (EC, RC) metrics."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from kgdiv.data import Dataset, KnowledgeGraph
from kgdiv.errors import ContractError

log = logging.getLogger(__name__)

METRICS = ("recall", "ndcg", "ec", "rc")


def _rank(scores: np.ndarray, k: int) -> np.ndarray:
    # stable sort on the negated score gives ties in ascending item id
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


def topk(u: int, k: int, user_emb: np.ndarray, item_emb: np.ndarray, exclude=()) -> np.ndarray:
    """The ``k`` best items for user ``u`` by inner product, excluded items removed.

    Returns fewer than ``k`` items (with a warning) when not enough candidates remain.
    """
    if k < 1:
        raise ContractError("k must be >= 1")
    scores = np.asarray(item_emb) @ np.asarray(user_emb)[u]
    scores = scores.astype(np.float64)
    excl = np.asarray(list(exclude), dtype=np.int64)
    scores[excl] = -np.inf
    n_cand = len(scores) - len(np.unique(excl))
    if n_cand < k:
        log.warning("topk: only %d candidates for user %d (k=%d)", n_cand, u, k)
        k = n_cand
    return _rank(scores, k)


def rank_users(users: np.ndarray, k: int, user_emb: np.ndarray, item_emb: np.ndarray,
               exclude: Sequence[np.ndarray], chunk: int = 512) -> np.ndarray:
    """Batched :func:`topk`; ``exclude[j]`` belongs to ``users[j]``. Returns ``(len(users), k)``."""
    n_items = item_emb.shape[0]
    if k > n_items:
        raise ContractError(f"k={k} exceeds item count {n_items}")
    out = np.empty((len(users), k), dtype=np.int64)
    for s in range(0, len(users), chunk):
        block = users[s:s + chunk]
        scores = (np.asarray(user_emb)[block] @ np.asarray(item_emb).T).astype(np.float64)
        for j, ex in enumerate(exclude[s:s + chunk]):
            scores[j, ex] = -np.inf
        out[s:s + len(block)] = _rank(scores, k)
    return out


def recall_ndcg(ranked, test_items, k: int) -> tuple[float, float]:
    test = set(int(x) for x in test_items)
    if not test:
        raise ContractError("recall_ndcg: empty test set")
    hits = [1.0 if int(i) in test else 0.0 for i in list(ranked)[:k]]
    dcg = sum(h / math.log2(r + 2) for r, h in enumerate(hits))
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(len(test), k)))
    return sum(hits) / len(test), dcg / idcg


class CoverageIndex:
    """Item -> non-item tail entities and item -> relation ids, over original triplets."""

    def __init__(self, kg: KnowledgeGraph):
        t = kg.triplets
        t = t[t[:, 0] < kg.n_items]
        ent = t[t[:, 2] >= kg.n_items]
        self.n_entities = kg.n_entities
        self.n_relations = kg.n_base_relations
        self.item_entity = sp.csr_matrix(
            (np.ones(len(ent), dtype=np.float64), (ent[:, 0], ent[:, 2])),
            shape=(kg.n_items, kg.n_entities),
        )
        self.item_relation = sp.csr_matrix(
            (np.ones(len(t), dtype=np.float64), (t[:, 0], t[:, 1])),
            shape=(kg.n_items, max(kg.n_base_relations, 1)),
        )

    def counts(self, ranked: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """EC and RC per row of a ``(users, k)`` ranking."""
        ranked = np.atleast_2d(ranked)
        n_rows, k = ranked.shape
        sel = sp.csr_matrix(
            (np.ones(ranked.size), (np.repeat(np.arange(n_rows), k), ranked.reshape(-1))),
            shape=(n_rows, self.item_entity.shape[0]),
        )
        ec = np.diff((sel @ self.item_entity).tocsr().indptr)
        rc = np.diff((sel @ self.item_relation).tocsr().indptr)
        return ec.astype(np.int64), rc.astype(np.int64)


def coverage(ranked, kg: KnowledgeGraph, k: int, index: CoverageIndex | None = None) -> tuple[int, int]:
    """Distinct non-item entities and relations 1-hop from the top ``k`` items."""
    index = index or CoverageIndex(kg)
    top = np.asarray(ranked, dtype=np.int64)[:k]
    if top.size == 0:
        return 0, 0
    ec, rc = index.counts(top[None, :])
    return int(ec[0]), int(rc[0])


@dataclass
class MetricReport:
    ks: tuple[int, ...]
    users: np.ndarray
    per_user: dict[str, np.ndarray] = field(repr=False)
    means: dict[str, float] = field(default_factory=dict)
    config: dict | None = None

    @property
    def n_users(self) -> int:
        return int(len(self.users))

    def __getitem__(self, key: str) -> float:
        return self.means[key]

    def to_json(self, per_user: bool = False) -> str:
        obj = {"n_users": self.n_users, "ks": list(self.ks), "means": self.means}
        if self.config is not None:
            obj["config"] = self.config
        if per_user:
            obj["users"] = self.users.tolist()
            obj["per_user"] = {k: v.tolist() for k, v in self.per_user.items()}
        return json.dumps(obj, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        if self.config is not None:
            # config echo as comment lines; csv readers can skip them with comment="#"
            buf.write("".join(f"# {k}={v}\n" for k, v in self.config.items()))
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "k", "value"])
        for m in METRICS:
            for k in self.ks:
                w.writerow([m, k, repr(self.means[f"{m}@{k}"])])
        return buf.getvalue()


def evaluate_embeddings(user_emb: np.ndarray, item_emb: np.ndarray, dataset: Dataset,
                        ks: Sequence[int] = (20, 40), which: str = "test",
                        coverage_index: CoverageIndex | None = None) -> MetricReport:
    """Score every user with a nonempty ``which`` set.

    Training items are always excluded from rankings; on the test set the
    validation items are excluded as well.
    """
    split = dataset.split
    if which not in ("valid", "test"):
        raise ContractError(f"unknown split {which!r}")
    targets = split.user_items(which)
    train = split.user_items("train")
    known = train
    if which == "test":
        valid = split.user_items("valid")
        known = [np.concatenate([a, b]) for a, b in zip(train, valid)]
    users = np.array([u for u in range(split.n_users) if len(targets[u])], dtype=np.int64)
    if len(users) == 0:
        raise ContractError(f"no users with {which} items")
    kmax = max(ks)
    ranked = rank_users(users, kmax, user_emb, item_emb, [known[u] for u in users])
    index = coverage_index or CoverageIndex(dataset.kg)
    per_user: dict[str, np.ndarray] = {}
    for k in ks:
        rec = np.empty(len(users))
        nd = np.empty(len(users))
        for j, u in enumerate(users):
            rec[j], nd[j] = recall_ndcg(ranked[j], targets[u], k)
        ec, rc = index.counts(ranked[:, :k])
        per_user[f"recall@{k}"] = rec
        per_user[f"ndcg@{k}"] = nd
        per_user[f"ec@{k}"] = ec.astype(np.float64)
        per_user[f"rc@{k}"] = rc.astype(np.float64)
    means = {key: float(np.mean(v)) for key, v in per_user.items()}
    return MetricReport(tuple(ks), users, per_user, means)

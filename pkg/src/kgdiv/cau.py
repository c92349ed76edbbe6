"""Conditional alignment and uniformity regularisers.

Items that share KG entities are pulled together after both are projected
by the mean embedding of the shared entities; all item rows are pushed apart
by a Gaussian-potential uniformity term.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from kgdiv import compute as C
from kgdiv.data import KnowledgeGraph

log = logging.getLogger(__name__)


def overlap_entities(i1: int, i2: int, kg: KnowledgeGraph) -> np.ndarray:
    """Sorted entities that are 1-hop tails of both items (original direction only)."""
    return np.intersect1d(kg.item_entities(i1), kg.item_entities(i2))


class PartnerIndex:
    """For each item, the sorted distinct items sharing at least one entity with it."""

    def __init__(self, kg: KnowledgeGraph):
        n = kg.n_items
        counts = np.diff(kg.item_indptr)
        rows = np.repeat(np.arange(n), counts)
        inc = sp.csr_matrix((np.ones(len(rows), dtype=np.int32), (rows, kg.item_ents)),
                            shape=(n, kg.n_entities))
        co = (inc @ inc.T).tocsr()
        co.setdiag(0)
        co.eliminate_zeros()
        co.sort_indices()
        self.indptr = co.indptr.astype(np.int64)
        self.partners = co.indices.astype(np.int64)

    def of(self, i: int) -> np.ndarray:
        return self.partners[self.indptr[i]:self.indptr[i + 1]]

    def degree(self) -> np.ndarray:
        return np.diff(self.indptr)


@dataclass
class OverlapPairBatch:
    first: np.ndarray
    second: np.ndarray
    overlap_indptr: np.ndarray
    overlap: np.ndarray  # concatenated overlap-entity lists

    def __len__(self):
        return len(self.first)

    def entities(self, k: int) -> np.ndarray:
        return self.overlap[self.overlap_indptr[k]:self.overlap_indptr[k + 1]]

    def swapped(self) -> "OverlapPairBatch":
        return OverlapPairBatch(self.second, self.first, self.overlap_indptr, self.overlap)

    @classmethod
    def from_pairs(cls, kg: KnowledgeGraph, first, second) -> "OverlapPairBatch":
        first = np.asarray(first, dtype=np.int64)
        second = np.asarray(second, dtype=np.int64)
        lists = [overlap_entities(a, b, kg) for a, b in zip(first, second)]
        indptr = np.zeros(len(lists) + 1, dtype=np.int64)
        np.cumsum([len(x) for x in lists], out=indptr[1:])
        overlap = np.concatenate(lists) if lists else np.zeros(0, np.int64)
        return cls(first, second, indptr, overlap.astype(np.int64))


def sample_overlap_pairs(kg: KnowledgeGraph, item_batch, count: int, rng: np.random.Generator,
                         partners: PartnerIndex | None = None) -> OverlapPairBatch:
    """Draw ``count`` anchors uniformly from ``item_batch``; give each a uniform co-entity partner.

    Anchors without any partner are skipped, so the batch can be shorter than ``count``.
    """
    partners = partners if partners is not None else PartnerIndex(kg)
    item_batch = np.asarray(item_batch, dtype=np.int64)
    if count <= 0 or item_batch.size == 0:
        return OverlapPairBatch.from_pairs(kg, [], [])
    anchors = item_batch[rng.integers(0, len(item_batch), size=count)]
    deg = partners.degree()[anchors]
    keep = deg > 0
    anchors, deg = anchors[keep], deg[keep]
    pick = (rng.random(len(anchors)) * deg).astype(np.int64)
    pick = np.minimum(pick, deg - 1)
    second = partners.partners[partners.indptr[anchors] + pick]
    return OverlapPairBatch.from_pairs(kg, anchors, second)


def alignment_loss(pairs: OverlapPairBatch, item_emb, entity_emb) -> C.Tensor:
    """Mean over pairs of ``||e_i1 * m - e_i2 * m||^2`` with ``m`` the mean overlap-entity row."""
    if len(pairs) == 0:
        log.warning("alignment_loss: empty pair batch, contributing 0")
        return C.Tensor(np.zeros((), dtype=C.as_tensor(item_emb).dtype))
    seg = np.repeat(np.arange(len(pairs)), np.diff(pairs.overlap_indptr))
    ctx = C.mean_rows(C.gather_rows(entity_emb, pairs.overlap), seg, len(pairs))
    c1 = C.elementwise_product(C.gather_rows(item_emb, pairs.first), ctx)
    c2 = C.elementwise_product(C.gather_rows(item_emb, pairs.second), ctx)
    return C.mean_all(C.squared_norm(C.sub(c1, c2), axis=1))


def uniformity_loss(item_rows, normalize: bool = False) -> C.Tensor:
    """``log`` of the mean over distinct row pairs of ``exp(-2 ||x - y||^2)``."""
    item_rows = C.as_tensor(item_rows)
    if item_rows.shape[0] < 2:
        log.warning("uniformity_loss: fewer than two rows, contributing 0")
        return C.Tensor(np.zeros((), dtype=item_rows.dtype))
    rows = C.normalize_rows(item_rows) if normalize else item_rows
    return C.scalar_exp_mean_log(C.scale(C.pairwise_sq_dists(rows), -2.0))

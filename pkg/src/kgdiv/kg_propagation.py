"""Relational message passing over the knowledge graph.

Each layer replaces an entity's row by the mean of ``e_r * e_v`` over its
(relation, tail) neighbours; entities without neighbours keep their row.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from kgdiv import compute as C
from kgdiv.data import KnowledgeGraph


@dataclass
class LayerStack:
    layers: list[C.Tensor]  # layers[0] is the learned entity table
    relations: C.Tensor | None

    @property
    def n_layers(self) -> int:
        return len(self.layers) - 1


class _KGIndex:

    def __init__(self, kg: KnowledgeGraph):
        deg = np.diff(kg.head_indptr)
        self.heads = np.repeat(np.arange(kg.n_entities), deg)
        self.rels = kg.neigh_rel
        self.tails = kg.neigh_tail
        self.n_entities = kg.n_entities
        self.inv_deg = (1.0 / deg[self.heads]) if len(self.heads) else np.zeros(0)
        self.isolated = (deg == 0).astype(np.float64)


def propagate_layer(kg: KnowledgeGraph, prev, relations=None) -> C.Tensor:
    """One propagation step. ``relations=None`` drops relation encoding (plain neighbour mean)."""
    idx = _KGIndex(kg)
    prev = C.as_tensor(prev)
    if prev.shape[0] != kg.n_entities:
        raise C.ContractError(f"expected {kg.n_entities} entity rows, got {prev.shape[0]}")
    msgs = C.gather_rows(prev, idx.tails)
    if relations is not None:
        msgs = C.elementwise_product(C.gather_rows(relations, idx.rels), msgs)
    dtype = prev.dtype
    agg = C.scatter_add_rows(msgs, idx.heads, kg.n_entities, idx.inv_deg.astype(dtype))
    if not idx.isolated.any():
        return agg
    return C.add(agg, C.scale_rows(prev, idx.isolated.astype(dtype)))


def propagate_all(kg: KnowledgeGraph, entity, relations, n_layers: int,
                  no_relation_encoding: bool = False) -> LayerStack:
    if n_layers < 0:
        raise C.ContractError("n_layers must be >= 0")
    rel = None if no_relation_encoding else relations
    layers = [C.as_tensor(entity)]
    for _ in range(n_layers):
        layers.append(propagate_layer(kg, layers[-1], rel))
    return LayerStack(layers, C.as_tensor(relations) if relations is not None else None)


def item_rows(layer, n_items: int) -> C.Tensor:
    """The item slice ``[0, n_items)`` of an entity layer."""
    return C.gather_rows(layer, np.arange(n_items))

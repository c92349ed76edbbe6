"""Parameter tables and the full forward pass.

KG propagation -> diversified user layers -> layer sum -> light graph
convolution over the training interactions -> layer mean.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from kgdiv import compute as C
from kgdiv.config import TrainConfig
from kgdiv.data import Dataset, InteractionGraph
from kgdiv.diversify import readout_sum, user_layer
from kgdiv.errors import ContractError
from kgdiv.kg_propagation import item_rows, propagate_all

TABLES = ("user", "entity", "relation")


@dataclass
class ParameterStore:
    user: np.ndarray
    entity: np.ndarray
    relation: np.ndarray

    @classmethod
    def init(cls, n_users: int, n_entities: int, n_relations: int, dim: int,
             rng: np.random.Generator, dtype=np.float32) -> "ParameterStore":
        """Xavier-uniform tables, treating each table as a (rows x dim) weight."""

        def xavier(rows):
            bound = np.sqrt(6.0 / (rows + dim))
            return rng.uniform(-bound, bound, size=(rows, dim)).astype(dtype)

        return cls(xavier(n_users), xavier(n_entities), xavier(max(n_relations, 1)))

    def as_dict(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TABLES}

    def copy(self) -> "ParameterStore":
        return ParameterStore(*(getattr(self, n).copy() for n in TABLES))

    def astype(self, dtype) -> "ParameterStore":
        return ParameterStore(*(getattr(self, n).astype(dtype) for n in TABLES))


class LGCIndex:
    """Edge arrays and symmetric normalisation weights of an interaction graph."""

    def __init__(self, graph: InteractionGraph, dtype=np.float64):
        self.n_users = graph.n_users
        self.n_items = graph.n_items
        self.users = graph.edge_users()
        self.items = graph.user_items
        du = graph.user_degree[self.users].astype(np.float64)
        di = graph.item_degree[self.items].astype(np.float64)
        self.weights = (1.0 / np.sqrt(du * di)).astype(dtype)


def lgc_layer(graph: InteractionGraph | LGCIndex, user_prev, item_prev) -> tuple[C.Tensor, C.Tensor]:
    idx = graph if isinstance(graph, LGCIndex) else LGCIndex(graph, C.as_tensor(user_prev).dtype)
    user_prev, item_prev = C.as_tensor(user_prev), C.as_tensor(item_prev)
    if user_prev.shape[0] != idx.n_users or item_prev.shape[0] != idx.n_items:
        raise ContractError("lgc_layer: row counts do not match the graph")
    w = idx.weights.astype(user_prev.dtype, copy=False)
    user_next = C.scatter_add_rows(C.gather_rows(item_prev, idx.items), idx.users, idx.n_users, w)
    item_next = C.scatter_add_rows(C.gather_rows(user_prev, idx.users), idx.items, idx.n_items, w)
    return user_next, item_next


def lgc_readout(layers) -> C.Tensor:
    """Arithmetic mean over layers 0..K."""
    if not layers:
        raise ContractError("lgc_readout: need at least one layer")
    if len(layers) == 1:
        return C.as_tensor(layers[0])
    return C.scale(readout_sum(layers), 1.0 / len(layers))


@dataclass
class Representations:
    users: C.Tensor
    items: C.Tensor
    entity0: C.Tensor


class Model:
    """Static index data for one dataset/config pair; ``forward`` is re-run every step."""

    def __init__(self, dataset: Dataset, config: TrainConfig):
        self.config = config
        self.kg = dataset.kg
        self.graph = dataset.graph
        self.n_users = dataset.n_users
        self.n_items = dataset.n_items
        self.lgc = LGCIndex(dataset.graph)
        if np.any(dataset.graph.user_degree == 0):
            raise ContractError("every user needs at least one training interaction")

    def forward(self, user, entity, relation) -> Representations:
        cfg = self.config
        n_layers = cfg.effective_kg_layers
        stack = propagate_all(self.kg, entity, relation, n_layers, cfg.no_relation_encoding)
        item_layers = [item_rows(layer, self.n_items) for layer in stack.layers]
        user_layers = [C.as_tensor(user)]
        del_inputs = item_layers[:1] if cfg.no_kg else item_layers[1:]
        for layer in del_inputs:
            user_layers.append(user_layer(layer, self.lgc.users, self.lgc.items, self.n_users, cfg.no_del))
        users = [readout_sum(user_layers)]
        items = [readout_sum(item_layers)]
        for _ in range(cfg.lgc_layers):
            u, i = lgc_layer(self.lgc, users[-1], items[-1])
            users.append(u)
            items.append(i)
        return Representations(lgc_readout(users), lgc_readout(items), stack.layers[0])

    def embed(self, params: ParameterStore) -> tuple[np.ndarray, np.ndarray]:
        """Final user and item matrices, no gradient recording."""
        reps = self.forward(params.user, params.entity, params.relation)
        return reps.users.value, reps.items.value

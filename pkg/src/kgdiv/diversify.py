"""Diversified user embeddings.

A user's provisional profile is the mean of their items. Items far from that
profile get more weight (softmax over Euclidean distances), and the user row
at that layer is the weighted sum of item rows.
"""
from __future__ import annotations

import numpy as np

from kgdiv import compute as C
from kgdiv.errors import ContractError


def user_temp(items_of_u, item_layer) -> C.Tensor:
    items = np.asarray(items_of_u)
    if items.size == 0:
        raise ContractError("user_temp: user has no items")
    return C.mean_rows(C.gather_rows(item_layer, items))


def diversity_weights(temp, item_rows) -> C.Tensor:
    return C.softmax_vector(C.euclidean_distance(item_rows, temp))


def user_diverse(weights, item_rows) -> C.Tensor:
    return C.sum_rows(C.scale_rows(item_rows, weights))


def readout_sum(layers) -> C.Tensor:
    if not layers:
        raise ContractError("readout_sum: need at least one layer")
    out = C.as_tensor(layers[0])
    for layer in layers[1:]:
        out = C.add(out, layer)
    return out


def user_layer(item_layer, edge_users: np.ndarray, edge_items: np.ndarray, n_users: int,
               no_del: bool = False) -> C.Tensor:
    """All users' rows at one layer, from training edges given as parallel arrays.

    Every user in ``range(n_users)`` must own at least one edge.
    """
    rows = C.gather_rows(item_layer, edge_items)
    temp = C.mean_rows(rows, edge_users, n_users)
    if no_del:
        return temp
    dist = C.euclidean_distance(C.gather_rows(temp, edge_users), rows)
    a = C.softmax_vector(dist, edge_users, n_users)
    return C.scatter_add_rows(C.scale_rows(rows, a), edge_users, n_users)

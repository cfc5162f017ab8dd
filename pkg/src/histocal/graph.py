"""Coordinate kNN graphs and exact multi-hop neighborhood shells.

The h-hop matrix marks pairs at shortest-path distance exactly h, so the
shells partition the reachable off-diagonal pairs (no double counting across
hops).  Everything is computed on raw, unnormalized spot coordinates.
"""

from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractWarning, ShapeError


def build_knn_graph(coords: np.ndarray, k: int) -> np.ndarray:
    """Symmetrized kNN adjacency (0/1, zero diagonal) from 2-D coordinates.

    Directed edges go to the k nearest Euclidean neighbors excluding self,
    ties broken by (distance, index) ascending; the result is the logical OR
    with its transpose.  k >= B is clipped to B-1 with a warning.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ShapeError(f"build_knn_graph: coords must be Bx2, got {coords.shape}")
    b = coords.shape[0]
    if b < 2:
        raise ConfigError("build_knn_graph: need at least 2 spots")
    if k < 1:
        raise ConfigError("build_knn_graph: k must be >= 1")
    if k >= b:
        warnings.warn(f"build_knn_graph: k={k} >= B={b}, clipping to {b - 1}",
                      ContractWarning, stacklevel=2)
        k = b - 1
    diff = coords[:, None, :] - coords[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    np.fill_diagonal(dist, np.inf)
    # stable argsort on distance keeps index-ascending tie order
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
    adj = np.zeros((b, b))
    rows = np.repeat(np.arange(b), k)
    adj[rows, nearest.ravel()] = 1.0
    adj = np.maximum(adj, adj.T)
    np.fill_diagonal(adj, 0.0)
    return adj


def multihop(a1: np.ndarray, h_hop: int) -> list[np.ndarray]:
    """[A^(1) .. A^(H)] where A^(h)[i,j] = 1 iff BFS distance(i,j) == h."""
    a1 = np.asarray(a1, dtype=np.float64)
    b = a1.shape[0]
    if a1.shape != (b, b):
        raise ShapeError(f"multihop: adjacency must be square, got {a1.shape}")
    if h_hop < 1:
        raise ConfigError("multihop: h_hop must be >= 1")
    neighbors = [np.flatnonzero(a1[i]) for i in range(b)]
    hops = [np.zeros((b, b)) for _ in range(h_hop)]
    for start in range(b):
        depth = np.full(b, -1, dtype=np.int64)
        depth[start] = 0
        queue = deque([start])
        while queue:
            u = queue.popleft()
            if depth[u] >= h_hop:
                continue
            for v in neighbors[u]:
                if depth[v] < 0:
                    depth[v] = depth[u] + 1
                    queue.append(v)
        for h in range(1, h_hop + 1):
            hops[h - 1][start, depth == h] = 1.0
    return hops


@dataclass
class TopoPrior:
    """Hop indicator stack and their weighted sum."""

    a_hops: list[np.ndarray]
    a_topo: np.ndarray


def build_topo_prior(coords: np.ndarray, k: int, alpha) -> TopoPrior:
    """kNN graph -> exact hop shells -> weighted topology prior."""
    alpha = np.asarray(alpha, dtype=np.float64)
    a1 = build_knn_graph(coords, k)
    hops = multihop(a1, len(alpha))
    a_topo = np.zeros_like(a1)
    for w, a_h in zip(alpha, hops):
        a_topo += w * a_h
    return TopoPrior(a_hops=hops, a_topo=a_topo)

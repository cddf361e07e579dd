"""Sensor graphs and the diffusion operators derived from them."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .errors import DataError


@dataclass(frozen=True)
class SensorGraph:
    """Weighted directed graph; ``adjacency[i, j]`` is the weight of edge i -> j."""

    adjacency: np.ndarray
    node_ids: tuple = ()

    def __post_init__(self):
        A = np.asarray(self.adjacency, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError(f"adjacency must be square, got {A.shape}")
        if (A < 0).any():
            raise ValueError("edge weights must be non-negative")
        A.setflags(write=False)
        object.__setattr__(self, "adjacency", A)
        if not self.node_ids:
            object.__setattr__(self, "node_ids", tuple(range(A.shape[0])))
        elif len(self.node_ids) != A.shape[0]:
            raise ValueError("node_ids length does not match adjacency")

    @property
    def n(self) -> int:
        return self.adjacency.shape[0]

    @property
    def edges(self) -> list[tuple[int, int, float]]:
        src, dst = np.nonzero(self.adjacency)
        return [(int(i), int(j), float(self.adjacency[i, j])) for i, j in zip(src, dst)]

    @property
    def in_degree(self) -> np.ndarray:
        return self.adjacency.sum(axis=1)

    @property
    def out_degree(self) -> np.ndarray:
        return self.adjacency.sum(axis=0)

    def neighbors(self, i: int) -> np.ndarray:
        """Nodes linked to i in either direction, excluding i itself."""
        A = self.adjacency
        mask = (A[i] > 0) | (A[:, i] > 0)
        mask[i] = False
        return np.flatnonzero(mask)

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[tuple[int, int, float]], node_ids: Sequence = ()) -> "SensorGraph":
        A = np.zeros((n, n))
        for s, d, w in edges:
            A[s, d] = w
        return cls(A, tuple(node_ids))

    @classmethod
    def empty(cls, n: int) -> "SensorGraph":
        return cls(np.zeros((n, n)))


def kernel_adjacency(edges, sigma2: float = 25.0, n: int | None = None, node_ids: Sequence | None = None) -> SensorGraph:
    """Gaussian kernel weights exp(-d^2 / sigma2) on the listed (src, dst, distance) pairs.

    With ``node_ids`` the endpoints are looked up by identifier, otherwise
    they must already be integer indices.
    """
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    edges = list(edges)
    if node_ids is not None:
        pos = {nid: k for k, nid in enumerate(node_ids)}
        try:
            edges = [(pos[s], pos[d], dist) for s, d, dist in edges]
        except KeyError as exc:
            raise DataError(f"edge endpoint {exc.args[0]!r} is not a known sensor") from None
        n = len(node_ids)
    if n is None:
        n = 1 + max((max(s, d) for s, d, _ in edges), default=-1)
    A = np.zeros((n, n))
    for s, d, dist in edges:
        if dist < 0:
            raise ValueError(f"negative distance {dist} on edge {s}->{d}")
        A[s, d] = np.exp(-float(dist) ** 2 / sigma2)
    return SensorGraph(A, tuple(node_ids) if node_ids is not None else ())


def read_edge_list(path) -> list[tuple]:
    """Read ``src,dst,distance`` rows."""
    try:
        df = pd.read_csv(path, dtype={"src": str, "dst": str}, float_precision="round_trip")
    except (OSError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"cannot read edge list {path}: {exc}") from None
    missing = {"src", "dst", "distance"} - set(df.columns)
    if missing:
        raise DataError(f"edge list {path} lacks columns {sorted(missing)}")
    return [(s, d, float(w)) for s, d, w in df[["src", "dst", "distance"]].itertuples(index=False)]


def write_adjacency(graph: SensorGraph, path) -> None:
    ids = graph.node_ids
    rows = [(ids[i], ids[j], w) for i, j, w in graph.edges]
    pd.DataFrame(rows, columns=["src", "dst", "weight"]).to_csv(Path(path), index=False, float_format="%.17g")


def read_adjacency(path, node_ids: Sequence) -> SensorGraph:
    """Inverse of ``write_adjacency`` given the full node order (isolated nodes have no rows)."""
    try:
        df = pd.read_csv(path, dtype={"src": str, "dst": str}, float_precision="round_trip")
    except (OSError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"cannot read adjacency {path}: {exc}") from None
    pos = {str(nid): k for k, nid in enumerate(node_ids)}
    try:
        edges = [(pos[s], pos[d], float(w)) for s, d, w in df[["src", "dst", "weight"]].itertuples(index=False)]
    except KeyError as exc:
        raise DataError(f"adjacency {path} names unknown node {exc.args[0]!r}") from None
    return SensorGraph.from_edges(len(node_ids), edges, tuple(node_ids))


@dataclass
class DiffusionOperator:
    """Row-normalised random walk S = D_in^{-1} A with a bounded cache of powers."""

    S: np.ndarray
    max_hops: int = 3
    _powers: list = field(default_factory=list, repr=False)

    def power(self, k: int) -> np.ndarray:
        if k < 0:
            raise ValueError("negative hop count")
        if k > self.max_hops:
            raise ValueError(f"hop {k} exceeds the cache bound {self.max_hops}")
        if not self._powers:
            self._powers.append(np.eye(self.S.shape[0]))
        while len(self._powers) <= k:
            self._powers.append(self.S @ self._powers[-1])
        return self._powers[k]


def random_walk(graph: SensorGraph, max_hops: int = 3) -> DiffusionOperator:
    A = graph.adjacency
    deg = A.sum(axis=1, keepdims=True)
    # rows of isolated nodes stay zero instead of inventing a uniform walk
    S = np.divide(A, deg, out=np.zeros_like(A), where=deg > 0)
    return DiffusionOperator(S, max_hops)


def poly_filter(op: DiffusionOperator, alphas: Sequence[float], X: np.ndarray) -> np.ndarray:
    """sum_k alphas[k] S^k X by repeated products with S."""
    X = np.asarray(X, dtype=np.float64)
    if len(alphas) == 0:
        raise ValueError("need at least one coefficient")
    if X.shape[0] != op.S.shape[0]:
        raise ValueError(f"signal has {X.shape[0]} rows, operator is {op.S.shape}")
    Z = X
    out = alphas[0] * X
    for a in alphas[1:]:
        Z = op.S @ Z
        out = out + a * Z
    return out


def sym_normalize(A: np.ndarray) -> np.ndarray:
    """D^{-1/2} (A + I) D^{-1/2} with D the row sums of A + I.

    Existing diagonal entries are dropped first so every node carries exactly
    one unit self-loop; for ``ones((2, 2))`` this gives 0.5 everywhere.
    """
    A = np.array(A, dtype=np.float64)
    if (A < 0).any():
        raise ValueError("sym_normalize expects non-negative weights")
    np.fill_diagonal(A, 0.0)
    A += np.eye(A.shape[0])
    d = 1.0 / np.sqrt(A.sum(axis=1))
    return d[:, None] * A * d[None, :]


def topk_mask(A: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of each row's k largest entries; ties go to the lower column."""
    A = np.asarray(A)
    R = A.shape[1]
    if not 1 <= k <= R:
        raise ValueError(f"k must lie in [1, {R}], got {k}")
    order = np.argsort(-A, axis=1, kind="stable")[:, :k]
    mask = np.zeros(A.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return mask


def topk_sparsify(A: np.ndarray, k: int) -> np.ndarray:
    A = np.asarray(A)
    return np.where(topk_mask(A, k), A, 0.0)

"""Sparse undirected graphs: construction, generators, dataset I/O, and
combinatorial ground truth (random-walk encodings, cycle counting).

Graphs are immutable CSR structures; every constructor validates symmetry,
sortedness, and the no-self-loop rule so downstream code never re-checks.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Graph",
    "Dataset",
    "GraphParseError",
    "GraphValidationError",
    "IsolatedNodeError",
    "load_graph_json",
    "save_graph_json",
    "load_dataset",
    "save_dataset",
    "gen_cycle",
    "gen_complete",
    "gen_erdos_renyi",
    "normalized_adjacency",
    "rwse",
    "count_triangles",
    "count_substructure_per_node",
    "a_not_a2_pairs",
    "permute_graph",
]

TASKS = ("graph-regression", "node-regression", "graph-classification")

CYCLE_PATTERNS = {"cycle3": 3, "cycle4": 4, "cycle5": 5, "cycle6": 6}


class GraphValidationError(ValueError):
    """Structural problem in graph data (bad index, duplicate edge, self-loop)."""


class GraphParseError(ValueError):
    """File exists but is not a well-formed graph document."""


class IsolatedNodeError(GraphValidationError):
    """Operation requires every node to have degree >= 1."""


@dataclass(frozen=True)
class Graph:
    """Undirected graph in CSR form with dense node features.

    ``indptr``/``indices`` follow the usual CSR convention: the neighbors of
    node ``v`` are ``indices[indptr[v]:indptr[v + 1]]``, sorted ascending.
    The adjacency is symmetric and has no self-loops.
    """

    num_nodes: int
    indptr: np.ndarray
    indices: np.ndarray
    node_features: np.ndarray
    node_labels: np.ndarray | None = None
    graph_label: np.ndarray | None = None

    def __post_init__(self):
        n = self.num_nodes
        if self.indptr.shape != (n + 1,):
            raise GraphValidationError("indptr length must be num_nodes + 1")
        if self.indptr[0] != 0 or self.indptr[-1] != len(self.indices):
            raise GraphValidationError("indptr does not cover indices")
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= n):
            raise GraphValidationError("neighbor index out of range")
        for v in range(n):
            nb = self.indices[self.indptr[v]:self.indptr[v + 1]]
            if np.any(nb == v):
                raise GraphValidationError(f"self-loop at node {v}")
            if np.any(np.diff(nb) <= 0):
                raise GraphValidationError(f"neighbors of node {v} not strictly sorted")
        # symmetry: (u, v) present iff (v, u) present
        pairs = {(v, u) for v in range(n) for u in self.neighbors(v)}
        if any((u, v) not in pairs for v, u in pairs):
            raise GraphValidationError("adjacency is not symmetric")
        if self.node_features.ndim != 2 or self.node_features.shape[0] != n:
            raise GraphValidationError("node_features must be (num_nodes, d)")
        if self.node_labels is not None and self.node_labels.shape != (n,):
            raise GraphValidationError("node_labels must have one entry per node")

    def neighbors(self, v: int) -> np.ndarray:
        return self.indices[self.indptr[v]:self.indptr[v + 1]]

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    @cached_property
    def row_index(self) -> np.ndarray:
        """Row id of each CSR entry; pairs with ``indices`` to list directed edges."""
        return np.repeat(np.arange(self.num_nodes), self.degrees)

    @property
    def num_edges(self) -> int:
        return len(self.indices) // 2

    @property
    def feature_dim(self) -> int:
        return self.node_features.shape[1]

    def dense_adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes), dtype=np.int64)
        a[self.row_index, self.indices] = 1
        return a

    def with_features(self, features: np.ndarray) -> "Graph":
        return Graph(self.num_nodes, self.indptr, self.indices,
                     np.asarray(features, dtype=np.float64),
                     self.node_labels, self.graph_label)

    def with_labels(self, node_labels=None, graph_label=None) -> "Graph":
        return Graph(self.num_nodes, self.indptr, self.indices, self.node_features,
                     None if node_labels is None else np.asarray(node_labels, dtype=np.float64),
                     None if graph_label is None else np.asarray(graph_label, dtype=np.float64))


def graph_from_edges(num_nodes: int, edges, node_features=None,
                     node_labels=None, graph_label=None) -> Graph:
    """Build a Graph from once-per-undirected-edge pairs, symmetrizing.

    Rejects out-of-range endpoints, self-loops, and duplicate edges (in
    either orientation) so that fixture files stay canonical.
    """
    seen = set()
    rows, cols = [], []
    for e in edges:
        if len(e) != 2:
            raise GraphValidationError(f"edge {e!r} is not a pair")
        u, v = int(e[0]), int(e[1])
        if not (0 <= u < num_nodes and 0 <= v < num_nodes):
            raise GraphValidationError(f"edge ({u},{v}) out of range for n={num_nodes}")
        if u == v:
            raise GraphValidationError(f"self-loop ({u},{v})")
        key = (min(u, v), max(u, v))
        if key in seen:
            raise GraphValidationError(f"duplicate edge ({u},{v})")
        seen.add(key)
        rows += [u, v]
        cols += [v, u]
    order = np.lexsort((np.asarray(cols, dtype=np.int64), np.asarray(rows, dtype=np.int64)))
    rows = np.asarray(rows, dtype=np.int64)[order]
    cols = np.asarray(cols, dtype=np.int64)[order]
    indptr = np.zeros(num_nodes + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    indptr = np.cumsum(indptr)
    if node_features is None:
        node_features = np.ones((num_nodes, 1))
    return Graph(num_nodes, indptr, cols, np.asarray(node_features, dtype=np.float64),
                 None if node_labels is None else np.asarray(node_labels, dtype=np.float64),
                 None if graph_label is None else np.asarray(graph_label, dtype=np.float64))


# ---------------------------------------------------------------------------
# JSON I/O
# ---------------------------------------------------------------------------

def load_graph_json(path) -> Graph:
    """Load one graph from a JSON file.

    Schema: {"num_nodes": int, "edges": [[u, v], ...],
             "node_features"?: [[...], ...], "node_labels"?: [...],
             "graph_label"?: [...]}.
    Missing node_features default to the all-ones n x 1 matrix.
    """
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise GraphParseError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict) or "num_nodes" not in doc or "edges" not in doc:
        raise GraphParseError(f"{path}: missing num_nodes/edges")
    return graph_from_edges(
        int(doc["num_nodes"]), doc["edges"],
        node_features=doc.get("node_features"),
        node_labels=doc.get("node_labels"),
        graph_label=doc.get("graph_label"),
    )


def save_graph_json(g: Graph, path) -> None:
    edges = [[int(v), int(u)] for v in range(g.num_nodes) for u in g.neighbors(v) if v < u]
    doc = {"num_nodes": g.num_nodes, "edges": edges,
           "node_features": g.node_features.tolist()}
    if g.node_labels is not None:
        doc["node_labels"] = g.node_labels.tolist()
    if g.graph_label is not None:
        doc["graph_label"] = g.graph_label.tolist()
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


@dataclass
class Dataset:
    """Ordered graph collection with a task tag and train/val/test split."""

    graphs: list
    task: str
    split: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS:
            raise GraphValidationError(f"unknown task {self.task!r}")
        all_idx = []
        for part in ("train", "val", "test"):
            idx = list(self.split.get(part, []))
            if any(not (0 <= i < len(self.graphs)) for i in idx):
                raise GraphValidationError(f"split {part} index out of range")
            all_idx += idx
        if len(set(all_idx)) != len(all_idx):
            raise GraphValidationError("split indices overlap")

    def part(self, name: str) -> list:
        return [self.graphs[i] for i in self.split.get(name, [])]


def load_dataset(directory) -> Dataset:
    """Read a dataset directory: manifest.json plus one graph file per graph."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise GraphParseError(f"missing manifest: {manifest_path}")
    except json.JSONDecodeError as exc:
        raise GraphParseError(f"{manifest_path}: {exc}") from exc
    if "files" not in manifest or "split" not in manifest:
        raise GraphParseError(f"{manifest_path}: need 'files' and 'split'")
    graphs = [load_graph_json(directory / name) for name in manifest["files"]]
    task = manifest.get("task", "graph-regression")
    return Dataset(graphs=graphs, task=task, split=manifest["split"])


def save_dataset(ds: Dataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, g in enumerate(ds.graphs):
        name = f"graph_{i:04d}.json"
        save_graph_json(g, directory / name)
        files.append(name)
    manifest = {"files": files, "split": ds.split, "task": ds.task}
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh)


# ---------------------------------------------------------------------------
# Generators (pure functions of their arguments, all-ones features)
# ---------------------------------------------------------------------------

def gen_cycle(n: int) -> Graph:
    if n < 3:
        raise GraphValidationError("cycle needs n >= 3")
    return graph_from_edges(n, [(i, (i + 1) % n) for i in range(n)])


def gen_complete(n: int) -> Graph:
    if n < 2:
        raise GraphValidationError("complete graph needs n >= 2")
    return graph_from_edges(n, list(itertools.combinations(range(n), 2)))


def gen_erdos_renyi(n: int, p: float, seed: int) -> Graph:
    if n < 1:
        raise GraphValidationError("need n >= 1")
    if not 0.0 <= p <= 1.0:
        raise GraphValidationError("edge probability must be in [0, 1]")
    rng = np.random.default_rng(seed)
    edges = [(u, v) for u, v in itertools.combinations(range(n), 2) if rng.random() < p]
    return graph_from_edges(n, edges)


def permute_graph(g: Graph, perm: np.ndarray) -> Graph:
    """Relabel nodes: new node perm[v] is old node v."""
    perm = np.asarray(perm, dtype=np.int64)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(g.num_nodes)
    edges = [(int(perm[v]), int(perm[u])) for v in range(g.num_nodes)
             for u in g.neighbors(v) if v < u]
    return graph_from_edges(
        g.num_nodes, edges,
        node_features=g.node_features[inv],
        node_labels=None if g.node_labels is None else g.node_labels[inv],
        graph_label=g.graph_label,
    )


# ---------------------------------------------------------------------------
# Random-walk encoding and counting oracles
# ---------------------------------------------------------------------------

def _check_no_isolated(g: Graph) -> None:
    if np.any(g.degrees == 0):
        bad = int(np.flatnonzero(g.degrees == 0)[0])
        raise IsolatedNodeError(f"node {bad} has degree 0")


def normalized_adjacency(g: Graph) -> sp.csr_matrix:
    """Degree-normalized adjacency with column scaling: out[v, u] = A[v, u] / deg(u)."""
    _check_no_isolated(g)
    data = 1.0 / g.degrees[g.indices]
    return sp.csr_matrix((data, g.indices.copy(), g.indptr.copy()),
                         shape=(g.num_nodes, g.num_nodes))


def rwse(g: Graph, L: int) -> np.ndarray:
    """Return-walk probabilities: column l (1-based) is diag of the l-th power
    of the degree-normalized adjacency."""
    if L < 1:
        raise GraphValidationError("need L >= 1")
    m = normalized_adjacency(g).toarray()
    out = np.empty((g.num_nodes, L))
    p = np.eye(g.num_nodes)
    for l in range(L):
        p = p @ m
        out[:, l] = np.diag(p)
    return out


def count_triangles(g: Graph) -> int:
    a = g.dense_adjacency()
    return int(np.trace(a @ a @ a)) // 6


def _cycles_through_nodes(g: Graph, length: int) -> np.ndarray:
    """Per-node count of simple cycles of the given length (as vertex sets)."""
    n = g.num_nodes
    adj = [set(g.neighbors(v).tolist()) for v in range(n)]
    counts = np.zeros(n, dtype=np.int64)

    def extend(start, path, on_path):
        last = path[-1]
        if len(path) == length:
            if start in adj[last] and path[1] < last:  # close once per direction
                for w in path:
                    counts[w] += 1
            return
        for nxt in adj[last]:
            if nxt > start and nxt not in on_path:
                on_path.add(nxt)
                path.append(nxt)
                extend(start, path, on_path)
                path.pop()
                on_path.remove(nxt)

    for start in range(n):
        extend(start, [start], {start})
    return counts


def count_substructure_per_node(g: Graph, pattern: str) -> np.ndarray:
    if pattern not in CYCLE_PATTERNS:
        raise GraphValidationError(f"unsupported pattern {pattern!r}")
    return _cycles_through_nodes(g, CYCLE_PATTERNS[pattern])


def a_not_a2_pairs(g: Graph) -> int:
    """Ordered pairs (u, v) adjacent but with no 2-step walk between them."""
    a = g.dense_adjacency()
    a2 = a @ a
    return int(np.count_nonzero((a == 1) & (a2 == 0)))

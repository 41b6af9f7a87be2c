"""Attributed-graph storage, dataset bundles, and subgraph machinery.

A dataset is a directory of four tab-separated files (``edges.tsv``,
``features.tsv``, ``labels.tsv``, ``splits.tsv``; ``#`` starts a comment
line, node ids are 0-based contiguous integers). Graphs are immutable once
built and safe to share across workers.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import _kernels

SPLIT_NAMES = ("train", "val", "test")


class BundleError(ValueError):
    """Malformed dataset bundle; message carries file and line context."""


@dataclass(frozen=True)
class SbmParams:
    """Planted-partition generator parameters.

    Per-block feature means are placed so that any two block means are
    exactly ``feature_separation`` apart (unit-variance Gaussian features).
    """

    block_sizes: tuple[int, ...]
    p_in: float
    p_out: float
    feature_dim: int = 16
    feature_separation: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "block_sizes", tuple(int(s) for s in self.block_sizes))
        if not self.block_sizes or any(s < 1 for s in self.block_sizes):
            raise ValueError("block_sizes must be nonempty with all sizes >= 1")
        for name in ("p_in", "p_out"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if self.feature_dim < len(self.block_sizes):
            raise ValueError("feature_dim must be >= number of blocks")
        if self.feature_separation < 0:
            raise ValueError("feature_separation must be >= 0")


@dataclass(frozen=True)
class NormalizedAdj:
    """Symmetrically normalized adjacency with self-loops, dense."""

    size: int
    values: np.ndarray


@dataclass(frozen=True)
class SubgraphView:
    """An induced subgraph, locally re-indexed and normalized.

    ``local_to_global`` is sorted; every global edge between retained
    vertices is present locally.
    """

    anchor: int
    local_to_global: np.ndarray
    norm_adj: NormalizedAdj
    features: np.ndarray

    @property
    def num_nodes(self) -> int:
        return self.local_to_global.shape[0]

    @property
    def anchor_local(self) -> int:
        return int(np.searchsorted(self.local_to_global, self.anchor))


class Graph:
    """Immutable undirected attributed graph with node splits.

    ``edges`` holds each undirected pair once with ``u < v``; the CSR arrays
    (``indptr``/``indices``) hold both directions with sorted neighbor lists.
    """

    __slots__ = ("num_nodes", "edges", "features", "labels", "splits",
                 "indptr", "indices")

    def __init__(self, num_nodes, edges, features, labels, splits):
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        features = np.ascontiguousarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)

        if features.ndim != 2 or features.shape[0] != num_nodes:
            raise ValueError("feature matrix must have one row per node")
        if labels.shape != (num_nodes,):
            raise ValueError("labels must have one entry per node")
        if labels.size and labels.min() < 0:
            raise ValueError("labels must be non-negative class ids")
        if edges.size:
            if edges.min() < 0 or edges.max() >= num_nodes:
                raise ValueError("edge endpoint out of range")
            if np.any(edges[:, 0] == edges[:, 1]):
                raise ValueError("self-loops are not allowed")
        lo = np.minimum(edges[:, 0], edges[:, 1])
        hi = np.maximum(edges[:, 0], edges[:, 1])
        canon = np.unique(np.stack([lo, hi], axis=1), axis=0) if edges.size else edges
        if canon.shape[0] != edges.shape[0]:
            raise ValueError("duplicate undirected edges are not allowed")

        split_arrays = {}
        seen = np.zeros(num_nodes, dtype=bool)
        for name in SPLIT_NAMES:
            idx = np.asarray(splits.get(name, ()), dtype=np.int64)
            idx = np.unique(idx)
            if idx.size and (idx.min() < 0 or idx.max() >= num_nodes):
                raise ValueError(f"{name} split index out of range")
            if np.any(seen[idx]):
                raise ValueError("splits must be pairwise disjoint")
            seen[idx] = True
            split_arrays[name] = idx

        # CSR with both directions, neighbors sorted per row
        if canon.size:
            both = np.concatenate([canon, canon[:, ::-1]], axis=0)
            order = np.lexsort((both[:, 1], both[:, 0]))
            both = both[order]
            indptr = np.zeros(num_nodes + 1, dtype=np.int64)
            np.add.at(indptr, both[:, 0] + 1, 1)
            indptr = np.cumsum(indptr)
            indices = np.ascontiguousarray(both[:, 1])
        else:
            indptr = np.zeros(num_nodes + 1, dtype=np.int64)
            indices = np.empty(0, dtype=np.int64)

        for arr in (canon, features, labels, indptr, indices, *split_arrays.values()):
            arr.flags.writeable = False

        object.__setattr__(self, "num_nodes", int(num_nodes))
        object.__setattr__(self, "edges", canon)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "splits", split_arrays)
        object.__setattr__(self, "indptr", indptr)
        object.__setattr__(self, "indices", indices)

    def __setattr__(self, name, value):
        raise AttributeError("Graph is immutable")

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.num_nodes else 0

    def degree(self, v: int) -> int:
        return int(self.indptr[v + 1] - self.indptr[v])

    def neighbors(self, v: int) -> np.ndarray:
        return self.indices[self.indptr[v]:self.indptr[v + 1]]


def _parse_rows(path, n_fields=None):
    """Yield (line_number, fields) for data rows of a TSV file."""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            fields = stripped.split("\t")
            if len(fields) == 1:
                fields = stripped.split()
            if n_fields is not None and len(fields) != n_fields:
                raise BundleError(
                    f"{path}:{lineno}: expected {n_fields} fields, got {len(fields)}")
            yield lineno, fields


def _parse_int(path, lineno, text, what):
    try:
        return int(text)
    except ValueError:
        raise BundleError(f"{path}:{lineno}: bad {what} {text!r}") from None


def load_citation_bundle(dir_path) -> Graph:
    """Load a four-file dataset bundle into a Graph.

    Undirected duplicates are collapsed and self-loops dropped on ingest.
    Nodes absent from ``splits.tsv`` belong to no split.
    """
    dir_path = os.fspath(dir_path)

    feat_path = os.path.join(dir_path, "features.tsv")
    rows = []
    width = None
    for lineno, fields in _parse_rows(feat_path):
        node = _parse_int(feat_path, lineno, fields[0], "node id")
        if width is None:
            width = len(fields) - 1
            if width < 1:
                raise BundleError(f"{feat_path}:{lineno}: no feature columns")
        elif len(fields) - 1 != width:
            raise BundleError(
                f"{feat_path}:{lineno}: expected {width} features, got {len(fields) - 1}")
        try:
            vec = [float(x) for x in fields[1:]]
        except ValueError:
            raise BundleError(f"{feat_path}:{lineno}: non-numeric feature") from None
        rows.append((node, lineno, vec))
    if not rows:
        raise BundleError(f"{feat_path}: empty feature file")
    num_nodes = len(rows)
    features = np.zeros((num_nodes, width))
    present = np.zeros(num_nodes, dtype=bool)
    for node, lineno, vec in rows:
        if not 0 <= node < num_nodes:
            raise BundleError(
                f"{feat_path}:{lineno}: node id {node} outside contiguous range "
                f"[0, {num_nodes})")
        if present[node]:
            raise BundleError(f"{feat_path}:{lineno}: duplicate node id {node}")
        present[node] = True
        features[node] = vec

    edge_path = os.path.join(dir_path, "edges.tsv")
    pairs = set()
    if os.path.exists(edge_path):
        for lineno, fields in _parse_rows(edge_path, n_fields=2):
            u = _parse_int(edge_path, lineno, fields[0], "endpoint")
            v = _parse_int(edge_path, lineno, fields[1], "endpoint")
            if not (0 <= u < num_nodes and 0 <= v < num_nodes):
                raise BundleError(
                    f"{edge_path}:{lineno}: endpoint out of range [0, {num_nodes})")
            if u == v:
                continue
            pairs.add((min(u, v), max(u, v)))
    edges = np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)

    label_path = os.path.join(dir_path, "labels.tsv")
    labels = np.full(num_nodes, -1, dtype=np.int64)
    for lineno, fields in _parse_rows(label_path, n_fields=2):
        node = _parse_int(label_path, lineno, fields[0], "node id")
        cls = _parse_int(label_path, lineno, fields[1], "class id")
        if not 0 <= node < num_nodes:
            raise BundleError(f"{label_path}:{lineno}: node id out of range")
        if cls < 0:
            raise BundleError(f"{label_path}:{lineno}: negative class id")
        if labels[node] != -1:
            raise BundleError(f"{label_path}:{lineno}: duplicate label for node {node}")
        labels[node] = cls
    if np.any(labels < 0):
        missing = int(np.sum(labels < 0))
        raise BundleError(f"{label_path}: {missing} nodes have no label")

    split_path = os.path.join(dir_path, "splits.tsv")
    splits = {name: [] for name in SPLIT_NAMES}
    if os.path.exists(split_path):
        assigned = {}
        for lineno, fields in _parse_rows(split_path, n_fields=2):
            node = _parse_int(split_path, lineno, fields[0], "node id")
            name = fields[1]
            if name not in SPLIT_NAMES:
                raise BundleError(
                    f"{split_path}:{lineno}: unknown split {name!r} "
                    f"(expected one of {SPLIT_NAMES})")
            if not 0 <= node < num_nodes:
                raise BundleError(f"{split_path}:{lineno}: node id out of range")
            if node in assigned:
                raise BundleError(
                    f"{split_path}:{lineno}: node {node} assigned to two splits")
            assigned[node] = name
            splits[name].append(node)

    return Graph(num_nodes, edges, features, labels, splits)


def write_bundle(graph: Graph, dir_path) -> None:
    """Write a Graph back out as a canonical four-file bundle."""
    dir_path = os.fspath(dir_path)
    os.makedirs(dir_path, exist_ok=True)
    with open(os.path.join(dir_path, "edges.tsv"), "w", encoding="utf-8") as fh:
        for u, v in graph.edges:
            fh.write(f"{u}\t{v}\n")
    with open(os.path.join(dir_path, "features.tsv"), "w", encoding="utf-8") as fh:
        for i in range(graph.num_nodes):
            row = "\t".join(f"{x:.12g}" for x in graph.features[i])
            fh.write(f"{i}\t{row}\n")
    with open(os.path.join(dir_path, "labels.tsv"), "w", encoding="utf-8") as fh:
        for i in range(graph.num_nodes):
            fh.write(f"{i}\t{graph.labels[i]}\n")
    with open(os.path.join(dir_path, "splits.tsv"), "w", encoding="utf-8") as fh:
        for name in SPLIT_NAMES:
            for i in graph.splits[name]:
                fh.write(f"{i}\t{name}\n")


def generate_sbm(params: SbmParams, seed: int) -> Graph:
    """Sample a stochastic block model graph; pure function of (params, seed).

    Labels equal block ids, features are unit-variance Gaussians around
    block means pairwise ``feature_separation`` apart, and a stratified
    80/10/10 split is attached.
    """
    rng = np.random.default_rng(seed)
    sizes = np.array(params.block_sizes, dtype=np.int64)
    num_nodes = int(sizes.sum())
    labels = np.repeat(np.arange(sizes.shape[0]), sizes)

    iu, ju = np.triu_indices(num_nodes, k=1)
    prob = np.where(labels[iu] == labels[ju], params.p_in, params.p_out)
    keep = rng.random(prob.shape[0]) < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1)

    # orthogonal block means at distance feature_separation / sqrt(2) from 0
    means = np.zeros((sizes.shape[0], params.feature_dim))
    for b in range(sizes.shape[0]):
        means[b, b] = params.feature_separation / np.sqrt(2.0)
    features = means[labels] + rng.standard_normal((num_nodes, params.feature_dim))

    splits = {name: [] for name in SPLIT_NAMES}
    start = 0
    for size in sizes:
        perm = start + rng.permutation(size)
        n_val = max(1, int(round(size * 0.1))) if size >= 3 else 0
        n_test = n_val
        splits["test"].extend(perm[:n_test])
        splits["val"].extend(perm[n_test:n_test + n_val])
        splits["train"].extend(perm[n_test + n_val:])
        start += size
    return Graph(num_nodes, edges, features, labels, splits)


def normalize_adjacency(adj: np.ndarray) -> NormalizedAdj:
    """D^{-1/2} (A + I) D^{-1/2} for a binary symmetric zero-diagonal A."""
    adj = np.asarray(adj, dtype=np.float64)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ValueError("adjacency must be square")
    if not np.array_equal(adj, adj.T):
        raise ValueError("adjacency must be symmetric")
    if np.any(np.diag(adj) != 0):
        raise ValueError("adjacency must have a zero diagonal")
    if not np.all((adj == 0) | (adj == 1)):
        raise ValueError("adjacency must be binary")
    a_hat = adj + np.eye(adj.shape[0])
    inv_sqrt = 1.0 / np.sqrt(a_hat.sum(axis=1))
    values = a_hat * inv_sqrt[:, None] * inv_sqrt[None, :]
    return NormalizedAdj(size=adj.shape[0], values=values)


def k_hop_neighbors(graph: Graph, v: int, hops: int) -> np.ndarray:
    """All vertices within shortest-path distance ``hops`` of v (incl. v)."""
    if not 0 <= v < graph.num_nodes:
        raise ValueError(f"node id {v} out of range")
    if hops < 0:
        raise ValueError("hop count must be >= 0")
    return _kernels.bfs_within(graph.indptr, graph.indices, v, hops)


def induced_subgraph(graph: Graph, vertices, anchor: int) -> SubgraphView:
    """Induced subgraph over ``vertices`` with local normalized adjacency."""
    verts = np.unique(np.asarray(list(vertices), dtype=np.int64))
    if verts.size == 0:
        raise ValueError("vertex set must be nonempty")
    if verts.min() < 0 or verts.max() >= graph.num_nodes:
        raise ValueError("vertex id out of range")
    pos = np.searchsorted(verts, anchor)
    if pos >= verts.size or verts[pos] != anchor:
        raise ValueError("anchor must be a member of the vertex set")

    offsets = np.array([0, verts.size], dtype=np.int64)
    rows, cols, vals, _ = _kernels.induced_block_coo(
        graph.indptr, graph.indices, verts, offsets)
    n = verts.size
    dense = np.zeros((n, n))
    dense[rows, cols] = vals
    return SubgraphView(
        anchor=int(anchor),
        local_to_global=verts,
        norm_adj=NormalizedAdj(size=n, values=dense),
        features=np.array(graph.features[verts]),
    )

"""Density-based clustering of embedding vectors (HDBSCAN, from scratch).

Pipeline: k-core distances -> mutual-reachability distances -> minimum
spanning tree (Prim, dense) -> single-linkage hierarchy -> condensed tree at
min_cluster_size -> excess-of-mass cluster extraction. Points belonging to no
extracted cluster are labeled -1 (noise).

Conventions chosen for reproducibility:

* core distance of a point = distance to its k-th nearest neighbor counting
  the point itself (k = min_samples), matching the widely used reference
  implementations;
* exact ties in edge weights break on (smaller endpoint index first);
* cluster ids are assigned by first point occurrence.

Input sizes here are small (a few hundred concept bullets per table), so the
dense O(n^2) formulation is both the simplest and fast enough.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, InvalidParameter

NOISE = -1


@dataclass(frozen=True)
class ClusterAssignment:
    labels: tuple[int, ...]
    cluster_count: int

    def members(self, cluster_id: int) -> list[int]:
        return [i for i, lab in enumerate(self.labels) if lab == cluster_id]


def mutual_reachability(core_a: float, core_b: float, dist: float) -> float:
    """Mutual-reachability distance: max of the two core distances and the
    point-to-point distance."""
    if core_a < 0 or core_b < 0 or dist < 0:
        raise InvalidParameter("distances must be non-negative")
    return max(core_a, core_b, dist)


def _pairwise_euclidean(x: np.ndarray) -> np.ndarray:
    # gram-trick formulation; operation order kept bitwise-stable so exact
    # ties in mutual-reachability values reproduce across runs
    sq = np.einsum("ij,ij->i", x, x)[:, None]
    d2 = -2.0 * (x @ x.T)
    d2 += sq
    d2 += sq.T
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def _prim_mst(weights: np.ndarray) -> list[tuple[int, int, float]]:
    """MST edges of a dense weighted graph, grown from vertex 0."""
    n = weights.shape[0]
    in_tree = np.zeros(n, dtype=bool)
    best = np.full(n, np.inf)
    best_from = np.zeros(n, dtype=int)
    in_tree[0] = True
    best[0] = 0.0
    np.minimum(best, weights[0], out=best)
    best_from[:] = 0

    edges = []
    for _ in range(n - 1):
        candidates = np.where(~in_tree, best, np.inf)
        nxt = int(np.argmin(candidates))
        u, v, w = int(best_from[nxt]), nxt, float(best[nxt])
        edges.append((min(u, v), max(u, v), w))
        in_tree[nxt] = True
        update = weights[nxt] < best
        update &= ~in_tree
        best_from[update] = nxt
        best[update] = weights[nxt][update]
    return edges


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: int, b: int) -> None:
        self.parent[self.find(b)] = self.find(a)


def _single_linkage(edges: list[tuple[int, int, float]], n: int) -> np.ndarray:
    """scipy-style linkage from sorted MST edges: rows of
    (left child, right child, merge distance, subtree size).
    Internal node i corresponds to id n + i."""
    edges = sorted(edges, key=lambda e: (e[2], e[0], e[1]))
    uf = _UnionFind(2 * n - 1)
    component = list(range(n))  # union-find root -> current dendrogram node
    size = [1] * n + [0] * (n - 1)
    linkage = np.zeros((n - 1, 4))
    next_node = n
    for u, v, w in edges:
        ra, rb = uf.find(u), uf.find(v)
        na, nb = component[ra], component[rb]
        linkage[next_node - n] = (na, nb, w, size[na] + size[nb])
        size[next_node] = size[na] + size[nb]
        uf.union(ra, rb)
        component[uf.find(ra)] = next_node
        next_node += 1
    return linkage


def _leaves_under(node: int, linkage: np.ndarray, n: int) -> list[int]:
    stack = [node]
    out = []
    while stack:
        cur = stack.pop()
        if cur < n:
            out.append(cur)
        else:
            row = linkage[cur - n]
            stack.append(int(row[0]))
            stack.append(int(row[1]))
    return out


def _condense_tree(linkage: np.ndarray, n: int, min_cluster_size: int):
    """Collapse the single-linkage dendrogram into the condensed tree.

    Returns rows of (parent, child, lambda, child_size) where ids < n are
    points and ids >= n are condensed clusters; the root cluster has id n.
    Lambda is 1/merge-distance (inf for zero distance).
    """
    root = 2 * n - 2
    relabel = {root: n}
    next_label = n + 1
    ignore = set()
    rows = []

    # breadth-first from the root keeps parents processed before children
    bfs = [root]
    order = []
    while bfs:
        cur = bfs.pop(0)
        order.append(cur)
        if cur >= n:
            row = linkage[cur - n]
            bfs.append(int(row[0]))
            bfs.append(int(row[1]))

    for node in order:
        if node < n or node in ignore:
            continue
        left, right, dist, _ = linkage[node - n]
        left, right = int(left), int(right)
        lam = 1.0 / dist if dist > 0.0 else np.inf
        left_size = int(linkage[left - n][3]) if left >= n else 1
        right_size = int(linkage[right - n][3]) if right >= n else 1
        parent = relabel[node]

        if left_size >= min_cluster_size and right_size >= min_cluster_size:
            relabel[left] = next_label
            rows.append((parent, next_label, lam, left_size))
            next_label += 1
            relabel[right] = next_label
            rows.append((parent, next_label, lam, right_size))
            next_label += 1
        elif left_size < min_cluster_size and right_size < min_cluster_size:
            for child in (left, right):
                for point in _leaves_under(child, linkage, n):
                    rows.append((parent, point, lam, 1))
                if child >= n:
                    ignore.add(child)
                    ignore.update(
                        m for m in _descendant_internal(child, linkage, n)
                    )
        elif left_size < min_cluster_size:
            relabel[right] = parent
            for point in _leaves_under(left, linkage, n):
                rows.append((parent, point, lam, 1))
            if left >= n:
                ignore.add(left)
                ignore.update(_descendant_internal(left, linkage, n))
        else:
            relabel[left] = parent
            for point in _leaves_under(right, linkage, n):
                rows.append((parent, point, lam, 1))
            if right >= n:
                ignore.add(right)
                ignore.update(_descendant_internal(right, linkage, n))
    return rows


def _descendant_internal(node: int, linkage: np.ndarray, n: int) -> list[int]:
    out = []
    stack = [node]
    while stack:
        cur = stack.pop()
        if cur < n:
            continue
        row = linkage[cur - n]
        for child in (int(row[0]), int(row[1])):
            if child >= n:
                out.append(child)
                stack.append(child)
    return out


def _stability(rows, n: int) -> dict[int, float]:
    births: dict[int, float] = {n: 0.0}
    for _, child, lam, _ in rows:
        if child >= n:
            births[child] = lam
    stability: dict[int, float] = {}
    for parent, _, lam, child_size in rows:
        birth = births[parent]
        term = (lam - birth) * child_size
        if not np.isfinite(term):
            term = 0.0 if lam == birth else term
        stability[parent] = stability.get(parent, 0.0) + term
    for cluster in births:
        stability.setdefault(cluster, 0.0)
    return stability


def _extract_eom(rows, n: int, stability: dict[int, float]) -> set[int]:
    """Excess-of-mass selection over the condensed cluster tree. The root is
    never selected (no single-cluster mode)."""
    cluster_rows = [(p, c) for p, c, _, s in rows if s > 1]
    children_of: dict[int, list[int]] = {}
    for parent, child in cluster_rows:
        children_of.setdefault(parent, []).append(child)

    clusters = sorted(stability.keys(), reverse=True)
    selected = {c: True for c in clusters if c != n}
    work = dict(stability)
    for node in clusters:
        if node == n:
            continue
        subtree = sum(work[c] for c in children_of.get(node, []))
        if subtree > work[node]:
            work[node] = subtree
            selected[node] = False
        else:
            # selecting this node deselects every descendant cluster
            stack = list(children_of.get(node, []))
            while stack:
                cur = stack.pop()
                selected[cur] = False
                stack.extend(children_of.get(cur, []))
    return {c for c, keep in selected.items() if keep}


def hdbscan(
    points,
    min_cluster_size: int = 5,
    min_samples: int | None = None,
) -> ClusterAssignment:
    """Cluster points (sequence of equal-dimension vectors) with Euclidean
    HDBSCAN and excess-of-mass extraction.

    min_samples defaults to min_cluster_size. Points in no extracted cluster
    get label -1; cluster ids run 0..C-1 by first point occurrence.
    """
    if min_cluster_size < 2:
        raise InvalidParameter(f"min_cluster_size must be >= 2, got {min_cluster_size}")
    if min_samples is None:
        min_samples = min_cluster_size
    if min_samples < 1:
        raise InvalidParameter(f"min_samples must be >= 1, got {min_samples}")

    try:
        x = np.asarray(points, dtype=float)
    except ValueError as exc:
        raise DimensionMismatch(f"points must all share one dimension: {exc}") from exc
    if x.ndim == 1 and len(x) == 0:
        return ClusterAssignment(labels=(), cluster_count=0)
    if x.ndim != 2:
        raise DimensionMismatch("points must all share one dimension")
    if not np.all(np.isfinite(x)):
        raise InvalidParameter("points must be finite")
    n = x.shape[0]

    # EOM without single-cluster mode needs a split with both sides at least
    # min_cluster_size, so below 2*mcs every point is necessarily noise.
    if n < 2 * min_cluster_size:
        return ClusterAssignment(labels=(NOISE,) * n, cluster_count=0)

    dist = _pairwise_euclidean(x)
    # k-th nearest neighbor counting the point itself: the self-distance 0
    # occupies column 0, so the k-th neighbor sits at index k-1.
    idx = min(min_samples - 1, n - 1)
    core = np.sort(dist, axis=1)[:, idx]
    mreach = np.maximum(np.maximum.outer(core, core), dist)

    edges = _prim_mst(mreach)
    linkage = _single_linkage(edges, n)
    rows = _condense_tree(linkage, n, min_cluster_size)
    stability = _stability(rows, n)
    chosen = _extract_eom(rows, n, stability)

    # resolve each point through the cluster tree to its selected ancestor
    parent_of: dict[int, int] = {}
    for parent, child, _, size in rows:
        if size > 1:
            parent_of[child] = parent
    point_parent: dict[int, int] = {}
    for parent, child, _, size in rows:
        if size == 1:
            point_parent[int(child)] = parent

    resolve_memo: dict[int, int] = {}

    def resolve(cluster: int) -> int:
        seen = []
        cur = cluster
        while cur not in resolve_memo and cur in parent_of and cur not in chosen:
            seen.append(cur)
            cur = parent_of[cur]
        result = resolve_memo.get(cur, cur if cur in chosen else NOISE)
        for c in seen:
            resolve_memo[c] = result
        resolve_memo[cluster] = result
        return result

    raw = [resolve(point_parent[i]) for i in range(n)]
    label_map: dict[int, int] = {}
    labels = []
    for value in raw:
        if value == NOISE:
            labels.append(NOISE)
            continue
        if value not in label_map:
            label_map[value] = len(label_map)
        labels.append(label_map[value])
    return ClusterAssignment(labels=tuple(labels), cluster_count=len(label_map))

"""Density clustering utilities: k-distance curves, elbow detection, and a
hierarchical density clustering pass constrained by a distance threshold.

The clustering follows the usual mutual-reachability construction: core
distance per point, minimum spanning tree of the mutual reachability graph,
single-linkage dendrogram, condensed tree, excess-of-mass cluster selection.
Selected clusters born below the distance threshold eps are replaced by the
first ancestor born at or above it, so no cluster that a flat eps cut would
keep together is split further.  Membership probabilities come from the
condensed-tree lambda ratio; outliers get probability zero.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ClusteringParams:
    min_pts: int = 6
    eps_hat: float = 0.0
    membership_cutoff: float = 0.1

    def validate(self):
        if self.min_pts < 2:
            raise ValueError("min_pts must be at least 2")
        if self.eps_hat <= 0.0:
            raise ValueError("eps_hat must be positive")
        if not (0.0 <= self.membership_cutoff <= 1.0):
            raise ValueError("membership_cutoff must lie in [0, 1]")
        return self


def _pairwise(points: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def kdist_curve(points: np.ndarray, k: int) -> np.ndarray:
    """Distance to the k-th nearest neighbor (self excluded), sorted ascending."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k < 1:
        raise ValueError("k must be at least 1")
    if n <= k:
        raise ValueError(f"too few points for a {k}-distance curve: {n} <= {k}")
    dists = np.sort(_pairwise(points), axis=1)
    return np.sort(dists[:, k])  # column 0 is the self distance


def kneedle_elbow(curve: np.ndarray, sensitivity: float = 1.0) -> float | None:
    """Knee of an ascending concave curve; None when no knee exists.

    Normalizes both axes to [0, 1], forms the difference y - x, and walks its
    interior local maxima in order; a maximum becomes the knee when the
    difference drops to or below (max - sensitivity * mean spacing) before the
    next local maximum.  Returns the curve value at the knee.
    """
    y = np.asarray(curve, dtype=np.float64)
    n = y.size
    if n < 3:
        return None
    span = float(y.max() - y.min())
    if span <= 0.0:
        return None  # flat curve
    x_n = np.arange(n, dtype=np.float64) / (n - 1)
    y_n = (y - y.min()) / span
    d = y_n - x_n

    interior = np.arange(1, n - 1)
    is_max = (d[interior] >= d[interior - 1]) & (d[interior] >= d[interior + 1])
    maxima = interior[is_max]
    if maxima.size == 0:
        return None

    spacing = sensitivity / (n - 1)
    for pos, m in enumerate(maxima):
        # tiny slack so exact-arithmetic ties survive binary rounding
        threshold = d[m] - spacing + 1e-12
        stop = maxima[pos + 1] if pos + 1 < maxima.size else n
        for j in range(m + 1, stop):
            if d[j] <= threshold:
                return float(y[m])
    return None


# ---------------------------------------------------------------------------
# dendrogram machinery

def _mst_edges(mreach: np.ndarray) -> np.ndarray:
    """Prim's algorithm on the dense mutual reachability matrix.

    Returns (n-1, 3) rows (u, v, weight).  Ties resolve to the lowest node
    index, so the tree is deterministic.
    """
    n = mreach.shape[0]
    in_tree = np.zeros(n, dtype=bool)
    best = np.full(n, np.inf)
    src = np.full(n, -1, dtype=np.int64)
    best[0] = 0.0
    edges = np.empty((n - 1, 3), dtype=np.float64)
    for it in range(n):
        masked = np.where(in_tree, np.inf, best)
        u = int(np.argmin(masked))
        in_tree[u] = True
        if it > 0:
            edges[it - 1] = (src[u], u, best[u])
        better = ~in_tree & (mreach[u] < best)
        best[better] = mreach[u][better]
        src[better] = u
    return edges


def _single_linkage(edges: np.ndarray, n: int) -> np.ndarray:
    """Scipy-style linkage rows (left, right, distance, size) from MST edges."""
    order = np.lexsort((edges[:, 1], edges[:, 0], edges[:, 2]))
    edges = edges[order]
    parent = np.arange(2 * n - 1, dtype=np.int64)
    size = np.ones(2 * n - 1, dtype=np.int64)

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    rows = np.empty((n - 1, 4), dtype=np.float64)
    nxt = n
    for i in range(n - 1):
        u, v, w = int(edges[i, 0]), int(edges[i, 1]), edges[i, 2]
        ru, rv = find(u), find(v)
        rows[i] = (ru, rv, w, size[ru] + size[rv])
        parent[ru] = parent[rv] = nxt
        size[nxt] = size[ru] + size[rv]
        nxt += 1
    return rows


def _bfs_leaves(linkage: np.ndarray, n: int, node: int) -> list[int]:
    out = []
    queue = deque([node])
    while queue:
        cur = queue.popleft()
        if cur < n:
            out.append(cur)
        else:
            row = linkage[cur - n]
            queue.append(int(row[0]))
            queue.append(int(row[1]))
    return out


def _condense(linkage: np.ndarray, n: int, min_cluster_size: int):
    """Condensed tree rows (parent, child, lambda, child_size).

    Children with fewer than min_cluster_size points fall out of their
    parent cluster as single points at the split's lambda; larger children
    either continue the parent cluster or found new condensed clusters.
    Condensed cluster ids start at n (the root).
    """
    root = 2 * n - 2
    relabel = {root: n}
    next_label = n + 1
    rows = []
    ignore = set()
    queue = deque([root])
    while queue:
        node = queue.popleft()
        if node < n or node in ignore:
            continue
        left, right, dist, _ = linkage[node - n]
        left, right = int(left), int(right)
        lam = 1.0 / dist if dist > 0.0 else np.inf
        parent_label = relabel[node]
        size_l = int(linkage[left - n, 3]) if left >= n else 1
        size_r = int(linkage[right - n, 3]) if right >= n else 1

        if size_l >= min_cluster_size and size_r >= min_cluster_size:
            relabel[left] = next_label
            rows.append((parent_label, next_label, lam, size_l))
            next_label += 1
            relabel[right] = next_label
            rows.append((parent_label, next_label, lam, size_r))
            next_label += 1
            queue.append(left)
            queue.append(right)
        elif size_l < min_cluster_size and size_r < min_cluster_size:
            for side in (left, right):
                for p in _bfs_leaves(linkage, n, side):
                    rows.append((parent_label, p, lam, 1))
                    ignore.add(p)
                if side >= n:
                    ignore.update(
                        x for x in _bfs_internal(linkage, n, side)
                    )
        else:
            big, small = (left, right) if size_l >= min_cluster_size else (right, left)
            relabel[big] = parent_label
            queue.append(big)
            for p in _bfs_leaves(linkage, n, small):
                rows.append((parent_label, p, lam, 1))
                ignore.add(p)
            if small >= n:
                ignore.update(x for x in _bfs_internal(linkage, n, small))
    return rows


def _bfs_internal(linkage, n, node):
    out = []
    queue = deque([node])
    while queue:
        cur = queue.popleft()
        if cur >= n:
            out.append(cur)
            row = linkage[cur - n]
            queue.append(int(row[0]))
            queue.append(int(row[1]))
    return out


def _cluster_children(rows) -> dict[int, list[int]]:
    children: dict[int, list[int]] = {}
    for parent, child, _lam, size in rows:
        if size > 1:
            children.setdefault(parent, []).append(child)
    return children


def _stability(rows, n) -> dict[int, float]:
    births: dict[int, float] = {n: 0.0}
    for _parent, child, lam, size in rows:
        if size > 1:
            births[child] = lam
    stab = {c: 0.0 for c in births}
    for parent, _child, lam, size in rows:
        lam_use = lam if np.isfinite(lam) else 0.0
        # infinite lambda (duplicate points) contributes nothing extra here;
        # the candidate ordering below still treats such clusters correctly
        stab[parent] += (lam_use - births[parent]) * size
    return stab, births


def _select_eom(rows, n, eps: float):
    """Excess-of-mass selection with the distance-threshold constraint.

    The root may be selected (needed for single-blob inputs).  Clusters born
    below eps are replaced by their first ancestor born at or above it.
    """
    stab, births = _stability(rows, n)
    children = _cluster_children(rows)
    parent_of = {}
    for parent, child, _lam, size in rows:
        if size > 1:
            parent_of[child] = parent

    is_cluster = {c: True for c in stab}
    running = dict(stab)
    for node in sorted(stab, reverse=True):
        subtree = sum(running[ch] for ch in children.get(node, ()))
        if children.get(node) and subtree > running[node]:
            is_cluster[node] = False
            running[node] = subtree
        else:
            # prune every descendant cluster
            queue = deque(children.get(node, ()))
            while queue:
                d = queue.popleft()
                is_cluster[d] = False
                queue.extend(children.get(d, ()))

    selected = {c for c, keep in is_cluster.items() if keep}

    # distance-threshold constraint
    def birth_eps(c):
        lam = births[c]
        if lam == 0.0:
            return np.inf
        return 1.0 / lam if np.isfinite(lam) else 0.0

    final: set[int] = set()
    for c in sorted(selected):
        if birth_eps(c) >= eps:
            final.add(c)
            continue
        cur = c
        while cur in parent_of:
            cur = parent_of[cur]
            if birth_eps(cur) >= eps:
                break
        final.add(cur)

    # drop any selected cluster nested under another selected cluster
    pruned = set()
    for c in final:
        cur = c
        nested = False
        while cur in parent_of:
            cur = parent_of[cur]
            if cur in final:
                nested = True
                break
        if not nested:
            pruned.add(c)
    return pruned, parent_of


def hdbscan_eps(points: np.ndarray, params: ClusteringParams):
    """Cluster labels and membership probabilities for a point cloud.

    Returns (labels, probabilities): labels are consecutive ints from 0 in
    cluster id order with -1 for outliers; probabilities are the
    condensed-tree lambda ratios, zero for outliers.
    """
    params.validate()
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n <= params.min_pts:
        raise ValueError(
            f"too few points to cluster: {n} <= min_pts {params.min_pts}"
        )

    dist = _pairwise(points)
    core = np.sort(dist, axis=1)[:, params.min_pts - 1]  # excl. self: col 0 is self
    mreach = np.maximum(np.maximum(core[:, None], core[None, :]), dist)
    np.fill_diagonal(mreach, 0.0)

    edges = _mst_edges(mreach)
    linkage = _single_linkage(edges, n)
    rows = _condense(linkage, n, params.min_pts)
    selected, parent_of = _select_eom(rows, n, params.eps_hat)

    point_parent = {}
    point_lambda = {}
    for parent, child, lam, size in rows:
        if size == 1:
            point_parent[int(child)] = parent
            point_lambda[int(child)] = lam

    # lambda ceiling per selected cluster: max over all points in its subtree
    max_lambda = {c: 0.0 for c in selected}
    for p in range(n):
        cur = point_parent.get(p)
        while cur is not None:
            if cur in selected:
                lam = point_lambda[p]
                if np.isfinite(lam):
                    max_lambda[cur] = max(max_lambda[cur], lam)
                else:
                    max_lambda[cur] = np.inf
                break
            cur = parent_of.get(cur)

    label_map = {c: i for i, c in enumerate(sorted(selected))}
    labels = np.full(n, -1, dtype=np.int64)
    probs = np.zeros(n, dtype=np.float64)
    lam_gate = 1.0 / params.eps_hat
    root = n

    for p in range(n):
        cur = point_parent.get(p)
        while cur is not None and cur not in selected:
            cur = parent_of.get(cur)
        if cur is None:
            continue
        lam_p = point_lambda[p]
        if cur == root and lam_p < lam_gate:
            continue  # the root cluster only keeps points within eps reach
        labels[p] = label_map[cur]
        ceil = max_lambda[cur]
        if ceil <= 0.0 or not np.isfinite(ceil):
            probs[p] = 1.0
        elif not np.isfinite(lam_p):
            probs[p] = 1.0
        else:
            probs[p] = min(lam_p, ceil) / ceil

    return labels, probs

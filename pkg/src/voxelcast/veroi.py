"""Voxel-wise encoding ROIs: cluster per-voxel head weights into a parcellation.

Pipeline: average the per-voxel linear head weights over several trained
all-ROI models, reduce voxel count with Euclidean k-means, run Ward
hierarchical clustering over the k-means centroids (size-weighted), then
cut the dendrogram at a chosen linkage threshold.  The cut's connected
components, mapped back through each voxel's k-means assignment, are the
veROIs; the threshold controls granularity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numcore import make_rng, require


@dataclass
class Parcellation:
    """voxel -> ROI assignment; labels are 0..n_rois-1, every voxel exactly one."""

    labels: np.ndarray  # [N] int64
    voxel_ids: list[str]
    n_rois: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        require(self.labels.ndim == 1, "labels must be 1-D")
        require(len(self.voxel_ids) == self.labels.size, "voxel_ids/labels length mismatch")
        require(self.labels.min(initial=0) >= 0, "negative ROI label")
        require(int(self.labels.max(initial=-1)) < self.n_rois, "label exceeds n_rois")

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_rois)

    def members(self, roi: int) -> np.ndarray:
        return np.nonzero(self.labels == roi)[0]

    def to_json(self) -> dict:
        return {vid: int(lab) for vid, lab in zip(self.voxel_ids, self.labels)}

    @classmethod
    def from_json(cls, d: dict, voxel_ids: list[str]) -> "Parcellation":
        labels = np.array([d[v] for v in voxel_ids], dtype=np.int64)
        return cls(labels=labels, voxel_ids=list(voxel_ids), n_rois=int(labels.max()) + 1)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=0, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path, voxel_ids: list[str]) -> "Parcellation":
        return cls.from_json(json.loads(Path(path).read_text()), voxel_ids)


def from_groups(labels, voxel_ids) -> Parcellation:
    labels = np.asarray(labels, dtype=np.int64)
    return Parcellation(labels=labels, voxel_ids=list(voxel_ids), n_rois=int(labels.max()) + 1)


# ---------------------------------------------------------------------------
# k-means (Lloyd, k-means++ seeding)


def kmeans_euclid(X: np.ndarray, k: int, seed: int = 0, max_iter: int = 100):
    """Euclidean k-means; deterministic given the seed.

    k-means++ seeding, ties to the lowest index, empty clusters re-seeded
    from the point farthest from its assigned centroid.  Returns
    (labels [n], centroids [k, D]).
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    require(k >= 1, "k must be >= 1")
    if k > n:
        raise ValueError(f"kmeans: k={k} exceeds {n} items")
    rng = make_rng(seed)

    centroids = np.empty((k, X.shape[1]))
    centroids[0] = X[rng.integers(n)]
    d2 = ((X - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[j] = X[rng.integers(n)]
        else:
            centroids[j] = X[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((X - centroids[j]) ** 2).sum(axis=1))

    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        dist = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = dist.argmin(axis=1)
        for j in range(k):
            mask = new_labels == j
            if mask.any():
                centroids[j] = X[mask].mean(axis=0)
            else:
                far = np.argmax(dist[np.arange(n), new_labels])
                centroids[j] = X[far]
                new_labels[far] = j
        if np.array_equal(new_labels, labels):
            labels = new_labels
            break
        labels = new_labels
    return labels, centroids


# ---------------------------------------------------------------------------
# Ward hierarchical clustering (Lance-Williams on squared distances)


@dataclass
class Dendrogram:
    """Merge list of (cluster_a, cluster_b, linkage_distance, new_size).

    Leaves are 0..n_leaves-1; merge i creates cluster n_leaves+i.  Ward
    linkage distances are non-decreasing.
    """

    n_leaves: int
    merges: list[tuple[int, int, float, int]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "n_leaves": self.n_leaves,
            "merges": [[int(a), int(b), float(d), int(s)] for a, b, d, s in self.merges],
        }

    @classmethod
    def from_json(cls, d: dict) -> "Dendrogram":
        return cls(
            n_leaves=int(d["n_leaves"]),
            merges=[(int(a), int(b), float(dd), int(s)) for a, b, dd, s in d["merges"]],
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @property
    def root_distance(self) -> float:
        return self.merges[-1][2] if self.merges else 0.0


def ward_linkage(centroids: np.ndarray, sizes: np.ndarray) -> Dendrogram:
    """Size-weighted Ward clustering via the Lance-Williams update.

    Initial squared distance between singleton clusters i,j is
    2*n_i*n_j/(n_i+n_j)*||c_i-c_j||^2 (twice the SSE increase of merging);
    the reported linkage distance is its square root.  Ties break on the
    smaller (a, b) index pair.
    """
    centroids = np.asarray(centroids, dtype=np.float64)
    sizes = np.asarray(sizes, dtype=np.float64)
    k = centroids.shape[0]
    require(k >= 2, "ward_linkage needs at least 2 clusters")
    require(sizes.shape == (k,) and np.all(sizes > 0), "sizes must be positive, one per centroid")

    diff = centroids[:, None, :] - centroids[None, :, :]
    sq = (diff**2).sum(axis=2)
    ns = sizes[:, None] + sizes[None, :]
    d2 = 2.0 * (sizes[:, None] * sizes[None, :] / ns) * sq
    np.fill_diagonal(d2, np.inf)

    ids = list(range(k))  # dendrogram id per active row
    n = sizes.copy()
    active = np.ones(k, dtype=bool)
    merges: list[tuple[int, int, float, int]] = []
    next_id = k

    for step in range(k - 1):
        mn = d2.min()
        cand = np.argwhere(d2 == mn)
        # exact ties resolved by the smaller (a, b) dendrogram id pair
        best = None
        for i, j in cand:
            if i >= j:
                continue
            pair = tuple(sorted((ids[i], ids[j])))
            if best is None or pair < best[0]:
                best = (pair, int(i), int(j))
        (a, b), bi, bj = best
        dist2 = mn
        merges.append((a, b, float(np.sqrt(dist2)), int(n[bi] + n[bj])))
        # Lance-Williams update for Ward, into row bi
        for m in np.nonzero(active)[0]:
            if m == bi or m == bj:
                continue
            tot = n[bi] + n[bj] + n[m]
            d2[bi, m] = d2[m, bi] = (
                (n[bi] + n[m]) * d2[bi, m] + (n[bj] + n[m]) * d2[bj, m] - n[m] * d2[bi, bj]
            ) / tot
        n[bi] += n[bj]
        active[bj] = False
        d2[bj, :] = np.inf
        d2[:, bj] = np.inf
        ids[bi] = next_id
        next_id += 1
    return Dendrogram(n_leaves=k, merges=merges)


def cut_dendrogram(dendro: Dendrogram, threshold: float) -> np.ndarray:
    """Connected components over merges with linkage distance < threshold.

    Returns leaf labels renumbered by first-leaf order; raising the
    threshold never increases the cluster count.
    """
    require(threshold >= 0, "threshold must be >= 0")
    k = dendro.n_leaves
    parent = list(range(2 * k - 1))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i, (a, b, dist, _size) in enumerate(dendro.merges):
        node = k + i
        if dist < threshold:
            parent[find(a)] = node
            parent[find(b)] = node
        else:
            # keep the internal node reachable for later merges but do not
            # join the children below threshold
            parent[node] = node
    roots = [find(leaf) for leaf in range(k)]
    order: dict[int, int] = {}
    labels = np.empty(k, dtype=np.int64)
    for leaf in range(k):
        r = roots[leaf]
        if r not in order:
            order[r] = len(order)
        labels[leaf] = order[r]
    return labels


# ---------------------------------------------------------------------------
# Pipeline


def default_kmeans_k(n_voxels: int) -> int:
    return max(1, min(500, n_voxels // 10))


def build_veroi(
    weight_matrices: list[np.ndarray],
    voxel_ids: list[str],
    threshold: float,
    kmeans_k: int | None = None,
    seed: int = 0,
) -> tuple[Parcellation, Dendrogram]:
    """Average head weights over models, k-means, Ward, threshold cut.

    `weight_matrices` are per-model [N, D] head weights in voxel-table
    order; the threshold is in Ward linkage units (see `ward_linkage`).
    """
    require(len(weight_matrices) >= 1, "need at least one model's weights")
    shapes = {w.shape for w in weight_matrices}
    if len(shapes) != 1:
        raise ValueError(f"head weight shapes differ across models: {sorted(shapes)}")
    W = np.mean([w.astype(np.float64) for w in weight_matrices], axis=0)
    if not np.all(np.isfinite(W)):
        raise ValueError("non-finite head weights")
    n = W.shape[0]
    require(len(voxel_ids) == n, "voxel_ids length does not match weights")
    k = kmeans_k if kmeans_k is not None else default_kmeans_k(n)
    k = min(k, n)
    km_labels, centroids = kmeans_euclid(W, k, seed=seed)
    sizes = np.bincount(km_labels, minlength=k)
    if k == 1:
        labels = np.zeros(n, dtype=np.int64)
        dendro = Dendrogram(n_leaves=1, merges=[])
    else:
        dendro = ward_linkage(centroids, sizes)
        cut = cut_dendrogram(dendro, threshold)
        labels = cut[km_labels]
    # renumber by first-voxel appearance so labels are stable
    order: dict[int, int] = {}
    out = np.empty(n, dtype=np.int64)
    for i, lab in enumerate(labels):
        if lab not in order:
            order[lab] = len(order)
        out[i] = order[lab]
    parc = Parcellation(labels=out, voxel_ids=list(voxel_ids), n_rois=len(order))
    return parc, dendro


def make_rand_roi(parcellation: Parcellation, seed: int = 0) -> Parcellation:
    """Random partition with the identical ROI size multiset.

    Each label keeps its size; membership is a uniformly random permutation
    of the voxels.
    """
    rng = make_rng(seed)
    perm = rng.permutation(parcellation.labels.size)
    flat = np.repeat(np.arange(parcellation.n_rois), parcellation.sizes())
    new_labels = np.empty_like(parcellation.labels)
    new_labels[perm] = flat
    return Parcellation(
        labels=new_labels, voxel_ids=list(parcellation.voxel_ids), n_rois=parcellation.n_rois
    )


def sizes_csv(parcellation: Parcellation, path: str | Path) -> None:
    lines = ["roi,size"]
    for roi, size in enumerate(parcellation.sizes()):
        lines.append(f"{roi},{int(size)}")
    Path(path).write_text("\n".join(lines) + "\n")

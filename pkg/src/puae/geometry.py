"""Point-set algorithms, metrics and differentiable losses.

Distances are plain (unsquared) Euclidean throughout. Nearest-neighbour
searches are exact: KD-trees for low-dimensional coordinates, vectorised
brute force elsewhere, with ties resolved toward the lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from . import tensor as T
from .errors import (
    CardinalityError,
    DegenerateGeometryError,
    EmptyPointSetError,
    OutOfRangeError,
)
from .tensor import Tensor

EMD_CAP = 1024


@dataclass
class PointCloud:
    points: np.ndarray
    labels: Optional[np.ndarray] = None
    cls: Optional[int] = None
    source: str = "synthetic"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be N x 3, got {self.points.shape}")
        if len(self.points) < 1:
            raise EmptyPointSetError("point cloud needs at least one point")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud has non-finite coordinates")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.points),):
                raise ValueError("labels must have one entry per point")

    def __len__(self):
        return len(self.points)

    def subset(self, indices) -> "PointCloud":
        labels = None if self.labels is None else self.labels[indices]
        return PointCloud(self.points[indices], labels, self.cls, self.source)


@dataclass
class SubsampleResult:
    indices: np.ndarray
    ratio: float
    strategy: str


@dataclass
class NeighborGraph:
    neighbor_indices: np.ndarray
    k: int
    include_self: bool
    space: str = "coordinate"


@dataclass
class LossConfig:
    cd_weight: float = 100.0
    rep_weight: float = 1.0
    rep_neighbors: int = 5
    rep_radius: float = 0.03
    variant: str = "CD+RL"
    emd_cap: int = EMD_CAP

    VARIANTS = ("CD", "EMD", "EMD+RL", "CD+RL")

    def __post_init__(self):
        if self.variant not in self.VARIANTS:
            raise ValueError(f"unknown loss variant {self.variant!r}; expected one of {self.VARIANTS}")
        if self.cd_weight < 0 or self.rep_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.rep_neighbors < 1:
            raise ValueError("rep_neighbors must be >= 1")
        if self.rep_radius <= 0:
            raise ValueError("rep_radius must be positive")


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    source: str = field(default="mesh")

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        tri = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)


def _points(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.points
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def subsample_count(n: int, ratio: float) -> int:
    """round(ratio * n) with halves rounded up."""
    return int(np.floor(ratio * n + 0.5))


# ---------------------------------------------------------------- subsampling


def random_subsample(cloud, ratio: float, rng: np.random.Generator) -> SubsampleResult:
    n = len(_points(cloud))
    if not 0 < ratio <= 1:
        raise OutOfRangeError(f"ratio {ratio} outside (0, 1]")
    m = subsample_count(n, ratio)
    if m < 1:
        raise EmptyPointSetError(f"ratio {ratio} of {n} points leaves nothing")
    return SubsampleResult(rng.choice(n, size=m, replace=False), ratio, "random")


def farthest_point_sample(cloud, m: int, start: int = 0) -> SubsampleResult:
    pts = _points(cloud)
    n = len(pts)
    if not 1 <= m <= n:
        raise OutOfRangeError(f"m={m} outside [1, {n}]")
    if not 0 <= start < n:
        raise OutOfRangeError(f"start={start} outside [0, {n})")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = start
    mind = np.linalg.norm(pts - pts[start], axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(mind))
        chosen[i] = nxt
        mind = np.minimum(mind, np.linalg.norm(pts - pts[nxt], axis=1))
    return SubsampleResult(chosen, m / n, "fps")


def local_subsample(cloud, m: int, rng: np.random.Generator) -> SubsampleResult:
    pts = _points(cloud)
    n = len(pts)
    if not 1 <= m <= n:
        raise OutOfRangeError(f"m={m} outside [1, {n}]")
    seed = int(rng.integers(n))
    d = np.linalg.norm(pts - pts[seed], axis=1)
    # seed first even against exact duplicates, then by distance, then index
    order = np.lexsort((np.arange(n), np.arange(n) != seed, d))
    return SubsampleResult(order[:m], m / n, "local")


def subsample(cloud, ratio: float, strategy: str, rng: np.random.Generator) -> SubsampleResult:
    """Dispatch on strategy name; count is max(1, round(ratio * n))."""
    n = len(_points(cloud))
    m = max(1, subsample_count(n, ratio))
    if strategy == "random":
        return SubsampleResult(rng.choice(n, size=m, replace=False), ratio, "random")
    if strategy == "fps":
        res = farthest_point_sample(cloud, m, int(rng.integers(n)))
    elif strategy == "local":
        res = local_subsample(cloud, m, rng)
    else:
        raise ValueError(f"unknown sampling strategy {strategy!r}")
    res.ratio = ratio
    return res


# ------------------------------------------------------------------------ knn


def _pairwise(query: np.ndarray, base: np.ndarray) -> np.ndarray:
    diff = query[:, None, :] - base[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def knn(query, base=None, k: int = 1, include_self: bool = True) -> NeighborGraph:
    """Exact k nearest neighbours of each query row among ``base`` rows.

    ``base=None`` means query against itself; then ``include_self=False``
    removes each row's own index from its candidate set.
    """
    q = np.asarray(_points(query), dtype=np.float64)
    same = base is None or base is query
    b = q if same else np.asarray(_points(base), dtype=np.float64)
    if q.ndim != 2 or b.ndim != 2 or q.shape[1] != b.shape[1]:
        raise ValueError(f"knn: incompatible tables {q.shape} and {b.shape}")
    available = len(b) - (1 if same and not include_self else 0)
    if k < 1 or k > available:
        raise OutOfRangeError(f"knn: k={k} but only {available} candidates")
    exclude = same and not include_self
    if q.shape[1] <= 3 and len(b) > 64:
        out = _knn_tree(q, b, k, exclude)
    else:
        out = _knn_brute(q, b, k, exclude)
    space = "coordinate" if q.shape[1] == 3 else "feature"
    return NeighborGraph(out, k, include_self, space)


def _knn_brute(q, b, k, exclude, chunk=512):
    out = np.empty((len(q), k), dtype=np.int64)
    for s in range(0, len(q), chunk):
        d = _pairwise(q[s : s + chunk], b)
        if exclude:
            rows = np.arange(d.shape[0])
            d[rows, rows + s] = np.inf
        # stable sort keeps the lowest index first among equal distances
        out[s : s + chunk] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return out


def _knn_tree(q, b, k, exclude):
    tree = cKDTree(b)
    kk = min(len(b), k + (2 if exclude else 1))
    _, cand = tree.query(q, k=kk)
    cand = cand.reshape(len(q), kk)
    d = np.linalg.norm(b[cand] - q[:, None, :], axis=2)
    if exclude:
        d[cand == np.arange(len(q))[:, None]] = np.inf
    order = np.lexsort((cand, d), axis=1)
    cand = np.take_along_axis(cand, order, axis=1)
    d = np.take_along_axis(d, order, axis=1)
    out = cand[:, :k].copy()
    # a tie at the cut-off may hide a lower index outside the candidates
    if kk > k:
        tied = np.flatnonzero(d[:, k] == d[:, k - 1])
        if len(tied):
            dd = _pairwise(q[tied], b)
            if exclude:
                dd[np.arange(len(tied)), tied] = np.inf
            out[tied] = np.argsort(dd, axis=1, kind="stable")[:, :k]
    return out


def knn_batched(x: np.ndarray, k: int, include_self: bool = False) -> np.ndarray:
    """Self-knn for a batch of tables (B, M, D) -> (B, M, k) local indices."""
    sq = np.einsum("bmd,bmd->bm", x, x)
    d2 = sq[:, :, None] + sq[:, None, :] - 2.0 * (x @ np.swapaxes(x, 1, 2))
    if not include_self:
        m = x.shape[1]
        d2[:, np.arange(m), np.arange(m)] = np.inf
    return np.argsort(d2, axis=2, kind="stable")[:, :, :k]


# -------------------------------------------------------------------- metrics


def _nearest(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Index into ``dst`` of the nearest point for every row of ``src``."""
    if len(dst) > 32:
        return cKDTree(dst).query(src, k=1)[1].astype(np.int64)
    return np.argmin(_pairwise(src, dst), axis=1)


def _as_batch(x, like=None):
    if isinstance(x, Tensor):
        t = x
    else:
        dtype = like.dtype if isinstance(like, Tensor) else None
        t = Tensor(np.asarray(_points(x), dtype=dtype))
    if t.ndim == 2:
        return T.reshape(t, (1,) + t.shape), False
    return t, True


def _check_nonempty(*arrays):
    for a in arrays:
        if a.shape[-2] == 0:
            raise EmptyPointSetError("point set is empty")


def _row_dist(a: Tensor, b: Tensor) -> Tensor:
    return T.sqrt(T.reduce_sum(T.square(a - b), axis=-1))


def chamfer_distance(a, b) -> Tensor:
    """Symmetric mean nearest-neighbour distance; batches are averaged.

    Accepts (N, 3) or (B, N, 3) inputs as arrays, clouds or Tensors. The
    nearest-neighbour assignment is held fixed for differentiation.
    """
    ta, _ = _as_batch(a, like=b)
    tb, _ = _as_batch(b, like=a)
    _check_nonempty(ta.data, tb.data)
    if ta.shape[0] != tb.shape[0]:
        raise CardinalityError(f"batch sizes differ: {ta.shape[0]} vs {tb.shape[0]}")
    bsz, na, nb = ta.shape[0], ta.shape[1], tb.shape[1]
    fa = T.reshape(ta, (bsz * na, 3))
    fb = T.reshape(tb, (bsz * nb, 3))
    idx_ab = np.concatenate([_nearest(ta.data[i], tb.data[i]) + i * nb for i in range(bsz)])
    idx_ba = np.concatenate([_nearest(tb.data[i], ta.data[i]) + i * na for i in range(bsz)])
    d_ab = _row_dist(fa, T.gather_rows(fb, idx_ab))
    d_ba = _row_dist(fb, T.gather_rows(fa, idx_ba))
    return T.reduce_mean(d_ab) + T.reduce_mean(d_ba)


def chamfer_per_cloud(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Chamfer distance of each cloud pair in a batch, evaluation only."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[None], b[None]
    out = np.empty(len(a))
    for i in range(len(a)):
        da = cKDTree(b[i]).query(a[i], k=1)[0]
        db = cKDTree(a[i]).query(b[i], k=1)[0]
        out[i] = da.mean() + db.mean()
    return out


def hausdorff_distance(a, b) -> float:
    pa, pb = _points(a), _points(b)
    if len(pa) == 0 or len(pb) == 0:
        raise EmptyPointSetError("point set is empty")
    da = np.linalg.norm(pa - pb[_nearest(pa, pb)], axis=1)
    db = np.linalg.norm(pb - pa[_nearest(pb, pa)], axis=1)
    return float(max(da.max(), db.max()))


def nn_distance_cv(points) -> float:
    """Coefficient of variation (std / mean) of each point's distance to its nearest other point.

    Lower means more evenly spread points. Coincident points count with
    distance 0; a cloud whose points all coincide returns inf.
    """
    p = _points(points)
    if len(p) < 2:
        raise EmptyPointSetError("need at least two points")
    d, _ = cKDTree(p).query(p, k=2)
    nn = d[:, 1]
    mean = nn.mean()
    return float(nn.std() / mean) if mean > 0 else float("inf")


# ------------------------------------------------------------------------ emd


def hungarian(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost perfect matching on a square matrix.

    Shortest augmenting paths with dual potentials, O(n^3). Returns ``col``
    with ``col[i]`` the column assigned to row ``i``.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.shape != (n, n):
        raise CardinalityError(f"cost matrix must be square, got {cost.shape}")
    # 1-based rows/cols with a virtual column 0, following the classic layout
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.int64)  # owner[j] = row matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    padded = np.zeros((n + 1, n + 1))
    padded[1:, 1:] = cost
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used
            free[0] = False
            cur = padded[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            masked = np.where(free, minv, np.inf)
            j1 = int(np.argmin(masked))
            delta = masked[j1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    col = np.empty(n, dtype=np.int64)
    col[owner[1:] - 1] = np.arange(n)
    return col


def emd_matching(a: np.ndarray, b: np.ndarray, cap: int = EMD_CAP) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if len(a) != len(b):
        raise CardinalityError(f"EMD needs equal cardinalities, got {len(a)} and {len(b)}")
    if len(a) == 0:
        raise EmptyPointSetError("point set is empty")
    if len(a) > cap:
        raise OutOfRangeError(f"EMD limited to {cap} points, got {len(a)}")
    return hungarian(_pairwise(a, b))


def earth_movers_distance(a, b, cap: int = EMD_CAP) -> Tensor:
    """Exact EMD: mean matched distance under the optimal bijection."""
    ta, _ = _as_batch(a, like=b)
    tb, _ = _as_batch(b, like=a)
    _check_nonempty(ta.data, tb.data)
    if ta.shape[:2] != tb.shape[:2]:
        raise CardinalityError(f"EMD needs equal cardinalities, got {ta.shape} and {tb.shape}")
    bsz, n = ta.shape[0], ta.shape[1]
    match = np.concatenate([emd_matching(ta.data[i], tb.data[i], cap) + i * n for i in range(bsz)])
    fa = T.reshape(ta, (bsz * n, 3))
    fb = T.reshape(tb, (bsz * n, 3))
    return T.reduce_mean(_row_dist(fa, T.gather_rows(fb, match)))


# ------------------------------------------------------------------ repulsion


def repulsion_loss(p, neighbors: int = 5, radius: float = 0.03) -> Tensor:
    """Sum over points and their nearest neighbours of -d * exp(-d^2 / radius^2).

    Batched input (B, N, 3) gives the mean of per-cloud sums.
    """
    if radius <= 0:
        raise OutOfRangeError(f"radius must be positive, got {radius}")
    tp, _ = _as_batch(p)
    bsz, n = tp.shape[0], tp.shape[1]
    if n <= neighbors:
        raise EmptyPointSetError(f"repulsion needs more than {neighbors} neighbours per point, got {n} points")
    idx = np.stack([knn(tp.data[i], k=neighbors, include_self=False).neighbor_indices + i * n for i in range(bsz)])
    flat = T.reshape(tp, (bsz * n, 3))
    centre = T.reshape(flat, (bsz * n, 1, 3))
    nbrs = T.gather_rows(flat, idx.reshape(bsz * n, neighbors))
    d = _row_dist(centre, nbrs)
    weight = T.exp(T.mul(T.square(d), -1.0 / (radius * radius)))
    total = T.reduce_sum(T.neg(d) * weight)
    return T.mul(total, 1.0 / bsz)


# -------------------------------------------------------------- point-to-face


def closest_points_on_triangles(p: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Closest point on each triangle for each point: (P, 3), (T, 3, 3) -> (P, T, 3).

    Region classification over the triangle's Voronoi regions (vertices,
    edges, interior).
    """
    a, b, c = (tri[None, :, i, :] for i in range(3))
    p = p[:, None, :]
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.sum(ab * ap, -1)
    d2 = np.sum(ac * ap, -1)
    bp = p - b
    d3 = np.sum(ab * bp, -1)
    d4 = np.sum(ac * bp, -1)
    cp = p - c
    d5 = np.sum(ab * cp, -1)
    d6 = np.sum(ac * cp, -1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v_in = vb / denom
        w_in = vc / denom
        result = a + ab * v_in[..., None] + ac * w_in[..., None]

        # edge bc
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        m = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
        result = np.where(m[..., None], b + (c - b) * w_bc[..., None], result)
        # edge ac
        w_ac = d2 / (d2 - d6)
        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        result = np.where(m[..., None], a + ac * w_ac[..., None], result)
        result = np.where(((d6 >= 0) & (d5 <= d6))[..., None], c, result)
        # edge ab
        v_ab = d1 / (d1 - d3)
        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        result = np.where(m[..., None], a + ab * v_ab[..., None], result)

    # later overrides win: reverse of the usual sequential region tests
    result = np.where(((d3 >= 0) & (d4 <= d3))[..., None], b, result)
    result = np.where(((d1 <= 0) & (d2 <= 0))[..., None], a, result)
    return result


def mesh_distance(points, mesh: Mesh, chunk: int = 256) -> np.ndarray:
    """Exact unsigned distance from each point to the nearest mesh triangle."""
    tri = mesh.triangles()
    if len(tri) == 0:
        raise DegenerateGeometryError("mesh has no faces")
    areas = mesh.face_areas()
    scale = max(1.0, float(np.abs(mesh.vertices).max()))
    if np.any(areas <= 1e-14 * scale * scale):
        raise DegenerateGeometryError("mesh has zero-area triangles")
    pts = _points(points)
    out = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        p = pts[s : s + chunk]
        q = closest_points_on_triangles(p, tri)
        out[s : s + chunk] = np.sqrt(((q - p[:, None, :]) ** 2).sum(-1)).min(axis=1)
    return out


def point_to_surface(points, surface) -> float:
    """Mean distance from points to a Mesh or an analytic surface.

    Analytic surfaces expose ``distance(points) -> (N,)`` returning the
    unsigned distance.
    """
    if isinstance(surface, Mesh):
        d = mesh_distance(points, surface)
    else:
        d = np.asarray(surface.distance(_points(points)))
    return float(d.mean())


# -------------------------------------------------------------- normalization


def normalization_transform(points, target: str = "unit_cube"):
    """Centroid and scale such that ``(p - centre) * scale`` fits ``target``."""
    pts = _points(points)
    centre = pts.mean(axis=0)
    centred = pts - centre
    if target == "unit_cube":
        extent = np.abs(centred).max() / 0.5
    elif target == "unit_sphere":
        extent = np.linalg.norm(centred, axis=1).max()
    else:
        raise ValueError(f"unknown normalization target {target!r}")
    if not extent > 0:
        raise DegenerateGeometryError("cloud has zero extent")
    return centre, 1.0 / extent


def normalize(cloud, target: str = "unit_cube"):
    """Centre on the centroid and scale into the unit cube or sphere."""
    pts = _points(cloud)
    centre, scale = normalization_transform(pts, target)
    out = (pts - centre) * scale
    if isinstance(cloud, PointCloud):
        return PointCloud(out, cloud.labels, cloud.cls, cloud.source)
    return out

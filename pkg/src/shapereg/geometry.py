"""
Geometric primitives shared by every registration method: point clouds, rigid transforms,
correspondence maps, nearest-neighbour search, normal estimation and least-squares rigid
fitting.

All coordinates are millimetres. Clouds are immutable values; operations return new ones.
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Self

import numpy as np
from scipy.spatial import cKDTree

from shapereg.error import GeometryError

logger = logging.getLogger(__spec__.name)

NONE = -1
"""Sentinel for "no index" in assignment and provenance arrays."""

DEFAULT_NORMAL_K = 12


def _as_points(values, name: str = 'points') -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise GeometryError(f'{name} must have shape (n, 3), got {arr.shape}')
    return arr


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PointCloud:
    """
    Ordered 3D points with optional unit normals and per-point provenance labels.

    A normal row of NaNs marks a point whose normal could not be estimated.
    """

    points: np.ndarray
    normals: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        points = _frozen(_as_points(self.points).copy())
        if not np.all(np.isfinite(points)):
            raise GeometryError('Point coordinates must be finite')
        object.__setattr__(self, 'points', points)

        if self.normals is not None:
            normals = _as_points(self.normals, 'normals').copy()
            if len(normals) != len(points):
                raise GeometryError(
                    f'Got {len(normals)} normals for {len(points)} points'
                )
            known = ~np.isnan(normals).any(axis=1)
            if np.any(np.abs(np.linalg.norm(normals[known], axis=1) - 1.0) > 1e-6):
                raise GeometryError('Normals must have unit length')
            object.__setattr__(self, 'normals', _frozen(normals))

        if self.labels is not None:
            labels = np.asarray(self.labels).copy()
            if labels.shape != (len(points),):
                raise GeometryError(f'Got {labels.shape} labels for {len(points)} points')
            object.__setattr__(self, 'labels', _frozen(labels))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def centroid(self) -> np.ndarray:
        if len(self) == 0:
            raise GeometryError('empty point set')
        return self.points.mean(axis=0)

    @property
    def diameter(self) -> float:
        """Diagonal of the bounding box, a cheap scale for tolerances."""
        lo, hi = bounding_box(self)
        return float(np.linalg.norm(hi - lo))

    def subset(self, indices) -> Self:
        indices = np.asarray(indices, dtype=np.intp)
        return type(self)(
            self.points[indices],
            None if self.normals is None else self.normals[indices],
            None if self.labels is None else self.labels[indices],
        )

    def with_points(self, points) -> Self:
        return type(self)(points, self.normals, self.labels)

    def with_normals(self, normals) -> Self:
        return type(self)(self.points, normals, self.labels)

    def with_labels(self, labels) -> Self:
        return type(self)(self.points, self.normals, labels)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """x -> scale * rotation @ x + translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64).copy()
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        if rotation.shape != (3, 3):
            raise GeometryError(f'Rotation must be 3x3, got {rotation.shape}')
        if np.max(np.abs(rotation.T @ rotation - np.eye(3))) >= 1e-9:
            raise GeometryError('Rotation is not orthonormal')
        if abs(np.linalg.det(rotation) - 1.0) > 1e-9:
            raise GeometryError('Rotation must have determinant +1')
        if not self.scale > 0:
            raise GeometryError(f'Scale must be positive, got {self.scale}')
        object.__setattr__(self, 'rotation', _frozen(rotation))
        object.__setattr__(self, 'translation', _frozen(translation))
        object.__setattr__(self, 'scale', float(self.scale))

    @classmethod
    def identity(cls) -> Self:
        return cls()

    def apply_points(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return self.scale * pts @ self.rotation.T + self.translation

    def inverse(self) -> Self:
        rot_t = self.rotation.T
        return type(self)(rot_t, -(rot_t @ self.translation) / self.scale, 1.0 / self.scale)

    def compose(self, other: 'RigidTransform') -> Self:
        """The transform applying ``other`` first and then ``self``."""
        return type(self)(
            self.rotation @ other.rotation,
            self.scale * self.rotation @ other.translation + self.translation,
            self.scale * other.scale,
        )

    def as_matrix(self) -> np.ndarray:
        mat = np.eye(4)
        mat[:3, :3] = self.scale * self.rotation
        mat[:3, 3] = self.translation
        return mat

    def rotation_angle(self) -> float:
        """Angle in radians of the rotation part."""
        cos = (np.trace(self.rotation) - 1.0) / 2.0
        return float(np.arccos(np.clip(cos, -1.0, 1.0)))


@dataclass(frozen=True, eq=False)
class CorrespondenceMap:
    """
    Template-to-target assignment.

    ``assignments[m]`` is a target index or NONE; a template point with NONE is missing.
    ``outlier_targets`` holds target indices classified as outliers and never overlaps the
    assigned ones.
    """

    assignments: np.ndarray
    outlier_targets: np.ndarray
    threshold_used: float
    target_count: int
    distances: np.ndarray | None = None

    def __post_init__(self):
        assignments = np.asarray(self.assignments, dtype=np.intp).reshape(-1).copy()
        outliers = np.unique(np.asarray(self.outlier_targets, dtype=np.intp).reshape(-1))
        valid = assignments != NONE
        if np.any(assignments[valid] < 0) or np.any(assignments[valid] >= self.target_count):
            raise GeometryError('Assigned target index out of bounds')
        if outliers.size and (outliers[0] < 0 or outliers[-1] >= self.target_count):
            raise GeometryError('Outlier target index out of bounds')
        if np.intersect1d(outliers, assignments[valid]).size:
            raise GeometryError('Outlier targets overlap assigned targets')
        object.__setattr__(self, 'assignments', _frozen(assignments))
        object.__setattr__(self, 'outlier_targets', _frozen(outliers))
        if self.distances is not None:
            distances = np.asarray(self.distances, dtype=np.float64).reshape(-1).copy()
            object.__setattr__(self, 'distances', _frozen(distances))

    @property
    def template_count(self) -> int:
        return len(self.assignments)

    @property
    def missing(self) -> np.ndarray:
        """Template indices without a correspondence."""
        return np.flatnonzero(self.assignments == NONE)

    @property
    def assigned_targets(self) -> np.ndarray:
        return np.unique(self.assignments[self.assignments != NONE])

    @property
    def pairs(self) -> np.ndarray:
        """(k, 2) array of (template index, target index) for assigned template points."""
        m = np.flatnonzero(self.assignments != NONE)
        return np.column_stack([m, self.assignments[m]])


# --------------------
# Nearest neighbours
# --------------------


def _exact_distances(points: np.ndarray, queries: np.ndarray) -> np.ndarray:
    return np.linalg.norm(points - queries, axis=-1)


def nearest_neighbors(
    queries, cloud: PointCloud | np.ndarray, tree: cKDTree | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """
    Batch nearest-neighbour search.

    The kd-tree only proposes candidates; the winner is decided on exact Euclidean distances
    with ties going to the lowest index, so the answer matches an exhaustive scan.
    """
    points = cloud.points if isinstance(cloud, PointCloud) else _as_points(cloud)
    queries = _as_points(np.atleast_2d(queries), 'queries')
    if len(points) == 0:
        raise GeometryError('empty point set')
    tree = tree if tree is not None else cKDTree(points)

    k = min(4, len(points))
    _, cand = tree.query(queries, k=k)
    cand = cand.reshape(len(queries), k)
    exact = _exact_distances(points[cand], queries[:, None, :])
    best = exact.min(axis=1)
    # Slack absorbs rounding differences between the tree's metric and the exact one.
    bound = best * (1.0 + 1e-9) + 1e-12

    # lexsort: primary key distance, secondary index
    order = np.lexsort((cand, exact), axis=1)
    idx = np.take_along_axis(cand, order[:, :1], axis=1)[:, 0]
    dist = np.take_along_axis(exact, order[:, :1], axis=1)[:, 0]

    if k < len(points):
        # More equidistant candidates may hide beyond the k returned by the tree.
        crowded = np.flatnonzero(exact.max(axis=1) <= bound)
        for q in crowded:
            ball = np.asarray(tree.query_ball_point(queries[q], bound[q]), dtype=np.intp)
            ball_dist = _exact_distances(points[ball], queries[q])
            winner = np.lexsort((ball, ball_dist))[0]
            idx[q], dist[q] = ball[winner], ball_dist[winner]

    return idx.astype(np.intp), dist


def nearest_neighbor(query, cloud: PointCloud) -> tuple[int, float]:
    """Index of, and distance to, the cloud point closest to ``query``."""
    idx, dist = nearest_neighbors(np.asarray(query, dtype=np.float64).reshape(1, 3), cloud)
    return int(idx[0]), float(dist[0])


def median_spacing(cloud: PointCloud) -> float:
    """Median distance from each point to its closest other point."""
    if len(cloud) < 2:
        raise GeometryError('Need at least 2 points to measure spacing')
    dist, _ = cKDTree(cloud.points).query(cloud.points, k=2)
    return float(np.median(dist[:, 1]))


def bounding_box(cloud: PointCloud) -> tuple[np.ndarray, np.ndarray]:
    if len(cloud) == 0:
        raise GeometryError('empty point set')
    return cloud.points.min(axis=0), cloud.points.max(axis=0)


# --------------------
# Normals
# --------------------


def estimate_normals(cloud: PointCloud, k: int = DEFAULT_NORMAL_K) -> PointCloud:
    """
    Local-covariance PCA normals.

    Each normal is the eigenvector of the smallest eigenvalue of the covariance of the point
    and its ``k`` nearest neighbours. Normals point away from the centroid; where that is
    ambiguous (normal nearly tangent to the centroid direction) the orientation is
    propagated from already oriented neighbours. Neighbourhoods with rank < 2 get a NaN
    normal and a warning.
    """
    if k < 3:
        raise GeometryError(f'k must be at least 3, got {k}')
    n = len(cloud)
    if n < 3:
        raise GeometryError(f'Need at least 3 points to estimate normals, got {n}')

    pts = cloud.points
    tree = cKDTree(pts)
    kk = min(k + 1, n)
    _, nbrs = tree.query(pts, k=kk)
    nbrs = nbrs.reshape(n, kk)

    local = pts[nbrs] - pts[nbrs].mean(axis=1, keepdims=True)
    cov = np.einsum('nki,nkj->nij', local, local) / kk
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0].copy()

    scale = np.maximum(evals[:, 2], np.finfo(float).tiny)
    degenerate = evals[:, 1] <= 1e-10 * scale
    if np.any(degenerate):
        logger.warning(f'{int(degenerate.sum())} points have degenerate neighbourhoods')
        normals[degenerate] = np.nan

    _orient_outward(pts, normals, nbrs, ~degenerate)
    return cloud.with_normals(normals)


def _orient_outward(pts: np.ndarray, normals: np.ndarray, nbrs: np.ndarray, valid: np.ndarray):
    radial = pts - pts.mean(axis=0)
    radial_norm = np.linalg.norm(radial, axis=1)
    cos = np.einsum('ij,ij->i', normals, radial) / np.maximum(radial_norm, 1e-12)

    flip = valid & (cos < 0)
    normals[flip] *= -1
    oriented = valid & (np.abs(cos) >= 0.1)

    pending = valid & ~oriented
    if not pending.any():
        return
    if not oriented.any():
        seed = int(np.flatnonzero(valid)[0])
        oriented[seed] = True
        pending[seed] = False

    # Breadth-first propagation through the k-neighbour graph.
    queue = deque(np.flatnonzero(oriented))
    while queue and pending.any():
        i = queue.popleft()
        for j in nbrs[i]:
            if pending[j]:
                if normals[i] @ normals[j] < 0:
                    normals[j] *= -1
                pending[j] = False
                oriented[j] = True
                queue.append(j)


# --------------------
# Rigid fitting
# --------------------


def fit_rigid_least_squares(
    source_pts, target_pts, weights=None, with_scale: bool = False
) -> RigidTransform:
    """
    Least-squares rigid (optionally similarity) transform taking source onto target.

    SVD-based with reflection correction, so the returned rotation is always proper.
    """
    src = _as_points(source_pts, 'source_pts')
    dst = _as_points(target_pts, 'target_pts')
    if len(src) != len(dst):
        raise GeometryError(f'Got {len(src)} source and {len(dst)} target points')
    if len(src) < 3:
        raise GeometryError('degenerate correspondence set')

    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(src),) or np.any(w < 0) or w.sum() <= 0:
        raise GeometryError('Weights must be non-negative with a positive sum')
    w = w / w.sum()

    src_c = w @ src
    dst_c = w @ dst
    a = src - src_c
    b = dst - dst_c

    spread = np.linalg.svd(a * np.sqrt(w)[:, None], compute_uv=False)
    if spread[0] == 0 or spread[1] <= 1e-12 * spread[0]:
        raise GeometryError('degenerate correspondence set')

    cov = (b * w[:, None]).T @ a
    u, sing, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    fix = np.diag([1.0, 1.0, d])
    rotation = u @ fix @ vt

    scale = 1.0
    if with_scale:
        scale = float(np.sum(sing * np.diag(fix)) / np.sum(w * np.sum(a * a, axis=1)))

    translation = dst_c - scale * rotation @ src_c
    return RigidTransform(_orthonormalize(rotation), translation, scale)


def _orthonormalize(rotation: np.ndarray) -> np.ndarray:
    """Snap a numerically rotation-like matrix back onto SO(3)."""
    u, _, vt = np.linalg.svd(rotation)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def apply_transform(cloud: PointCloud, tf: RigidTransform) -> PointCloud:
    normals = None if cloud.normals is None else cloud.normals @ tf.rotation.T
    return PointCloud(tf.apply_points(cloud.points), normals, cloud.labels)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation over SO(3) from a normalised Gaussian quaternion."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return _orthonormalize(
        np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
            ]
        )
    )


def rotation_about(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for ``angle`` radians about ``axis``."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    kx = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * kx @ kx

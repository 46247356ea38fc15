"""
Simulated-dataset construction: degrade a clean, corresponded shape with missing data,
outliers and Gaussian measurement noise, keeping an exact record of every change.

Every function is a pure function of its inputs and seed.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Self

import numpy as np

from shapereg.error import CorruptionError
from shapereg.geometry import NONE, PointCloud, bounding_box
from shapereg.utils import check_fraction, child_seeds, round_half_up

logger = logging.getLogger(__spec__.name)

ORIGINAL = 'original'
OUTLIER = 'outlier'


def read_index_file(path: str | Path) -> np.ndarray:
    """One 0-based index per line; blank lines and ``#`` comments are ignored."""
    indices = []
    with open(path) as f:
        for line in f:
            line = line.split('#', 1)[0].strip()
            if line:
                indices.append(int(line))
    return np.asarray(indices, dtype=np.intp)


def write_index_file(indices, path: str | Path) -> None:
    with open(path, 'w') as f:
        f.writelines(f'{int(i)}\n' for i in indices)


@dataclass(frozen=True, eq=False)
class RegionSpec:
    """Part of a shape, given by explicit point indices or by a sphere or box volume."""

    kind: Literal['index_set', 'sphere', 'box']
    center: tuple[float, float, float] | None = None
    radius: float | None = None
    min: tuple[float, float, float] | None = None
    max: tuple[float, float, float] | None = None
    indices: tuple[int, ...] | None = None
    description: str = ''

    def __post_init__(self):
        match self.kind:
            case 'sphere':
                if self.center is None or self.radius is None:
                    raise ValueError('sphere region needs center and radius')
                if not self.radius > 0:
                    raise ValueError(f'sphere radius must be positive, got {self.radius}')
                object.__setattr__(self, 'center', tuple(float(c) for c in self.center))
            case 'box':
                if self.min is None or self.max is None:
                    raise ValueError('box region needs min and max')
                if np.any(np.asarray(self.min) > np.asarray(self.max)):
                    raise ValueError('box min must not exceed max')
                object.__setattr__(self, 'min', tuple(float(c) for c in self.min))
                object.__setattr__(self, 'max', tuple(float(c) for c in self.max))
            case 'index_set':
                if self.indices is None:
                    raise ValueError('index_set region needs indices')
                indices = tuple(int(i) for i in self.indices)
                if any(i < 0 for i in indices):
                    raise ValueError('index_set indices must be non-negative')
                object.__setattr__(self, 'indices', indices)
            case _:
                raise ValueError(f'Unknown region kind: {self.kind!r}')

    @classmethod
    def from_dict(cls, data: dict, base_dir: str | Path | None = None) -> Self:
        """
        Build from a config mapping. An index set may be given inline (``indices``) or as
        a ``path`` to an index file, resolved against ``base_dir``.
        """
        data = dict(data)
        if data.get('kind') == 'index_set' and 'path' in data:
            path = Path(data.pop('path'))
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            data['indices'] = read_index_file(path).tolist()
        return cls(**data)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()
                if v is not None}

    def select(self, cloud: PointCloud) -> np.ndarray:
        """Indices of the cloud points inside the region, ascending."""
        pts = cloud.points
        match self.kind:
            case 'sphere':
                inside = np.linalg.norm(pts - np.asarray(self.center), axis=1) <= self.radius
                return np.flatnonzero(inside)
            case 'box':
                inside = np.all((pts >= np.asarray(self.min)) & (pts <= np.asarray(self.max)), 1)
                return np.flatnonzero(inside)
            case 'index_set':
                idx = np.unique(np.asarray(self.indices, dtype=np.intp))
                if idx.size and idx[-1] >= len(cloud):
                    raise CorruptionError(
                        f'Region index {idx[-1]} out of bounds for {len(cloud)} points'
                    )
                return idx

    def contains(self, points, reference: PointCloud | None = None) -> np.ndarray:
        """Membership test for arbitrary points (index sets use their bounding box)."""
        pts = np.asarray(points, dtype=np.float64)
        lo, hi = self._volume_box(reference)
        if self.kind == 'sphere':
            return np.linalg.norm(pts - np.asarray(self.center), axis=1) <= self.radius
        return np.all((pts >= lo) & (pts <= hi), axis=1)

    def sample(self, n: int, rng: np.random.Generator, reference: PointCloud) -> np.ndarray:
        """
        ``n`` points uniform over the region volume. An index set's volume is the bounding
        box of its points in ``reference``.
        """
        if self.kind == 'sphere':
            direction = rng.standard_normal((n, 3))
            direction /= np.linalg.norm(direction, axis=1, keepdims=True)
            r = self.radius * rng.random(n) ** (1.0 / 3.0)
            return np.asarray(self.center) + direction * r[:, None]
        lo, hi = self._volume_box(reference)
        return lo + rng.random((n, 3)) * (hi - lo)

    def _volume_box(self, reference: PointCloud | None) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == 'box':
            return np.asarray(self.min), np.asarray(self.max)
        if self.kind == 'sphere':
            c = np.asarray(self.center)
            return c - self.radius, c + self.radius
        if reference is None:
            raise CorruptionError('An index_set region needs a reference cloud for its volume')
        selected = self.select(reference)
        if selected.size == 0:
            raise CorruptionError('region selects no points')
        return bounding_box(reference.subset(selected))


def _region(value) -> RegionSpec | None:
    if value is None or isinstance(value, RegionSpec):
        return value
    return RegionSpec.from_dict(value)


@dataclass(frozen=True)
class CorruptionConfig:
    uniform_missing_ratio: float = 0.2
    structured_missing_ratio: float = 0.8
    missing_region: RegionSpec | None = None
    uniform_outlier_ratio: float = 0.1
    structured_outlier_ratio: float = 0.4
    outlier_region: RegionSpec | None = None
    noise_sigma: float = 0.2
    seed: int = 0

    def __post_init__(self):
        check_fraction('uniform_missing_ratio', self.uniform_missing_ratio)
        check_fraction('structured_missing_ratio', self.structured_missing_ratio)
        check_fraction('uniform_outlier_ratio', self.uniform_outlier_ratio)
        check_fraction('structured_outlier_ratio', self.structured_outlier_ratio)
        if self.noise_sigma < 0:
            raise ValueError(f'noise_sigma must be >= 0, got {self.noise_sigma}')
        object.__setattr__(self, 'missing_region', _region(self.missing_region))
        object.__setattr__(self, 'outlier_region', _region(self.outlier_region))

    @classmethod
    def zero(cls, seed: int = 0) -> Self:
        """A config that changes nothing."""
        return cls(0.0, 0.0, None, 0.0, 0.0, None, 0.0, seed)

    def to_dict(self) -> dict:
        out = asdict(self)
        for key in ('missing_region', 'outlier_region'):
            region = getattr(self, key)
            out[key] = None if region is None else region.to_dict()
        return out


@dataclass(frozen=True, eq=False)
class CorruptionGroundTruth:
    """
    Exact record of a corruption run.

    ``kept_original_index[j]`` is the clean index of corrupted point ``j`` or NONE when the
    point was injected. Noise displacements are NaN for injected points and injected
    positions are NaN for kept points.
    """

    kept_original_index: np.ndarray
    removed_indices: np.ndarray
    noise_displacements: np.ndarray
    outlier_positions: np.ndarray
    original_count: int

    def __post_init__(self):
        kept = self.kept_original_index[self.kept_original_index != NONE]
        if np.intersect1d(kept, self.removed_indices).size:
            raise CorruptionError('Removed indices overlap kept indices')
        if len(kept) + len(self.removed_indices) != self.original_count:
            raise CorruptionError('Kept and removed points do not add up to the original count')

    @classmethod
    def identity(cls, n: int) -> Self:
        return cls(
            np.arange(n, dtype=np.intp),
            np.zeros(0, dtype=np.intp),
            np.zeros((n, 3)),
            np.full((n, 3), np.nan),
            n,
        )

    @property
    def outlier_indices(self) -> np.ndarray:
        """Corrupted-cloud indices of injected points."""
        return np.flatnonzero(self.kept_original_index == NONE)

    @property
    def kept_indices(self) -> np.ndarray:
        """Corrupted-cloud indices of surviving original points."""
        return np.flatnonzero(self.kept_original_index != NONE)

    @property
    def corrupted_count(self) -> int:
        return len(self.kept_original_index)

    def true_target_index(self) -> np.ndarray:
        """For every original index, its position in the corrupted cloud or NONE if removed."""
        out = np.full(self.original_count, NONE, dtype=np.intp)
        kept = self.kept_indices
        out[self.kept_original_index[kept]] = kept
        return out


# --------------------
# Individual corruption steps
# --------------------


def _labels(cloud: PointCloud) -> np.ndarray:
    if cloud.labels is not None:
        return cloud.labels
    return np.full(len(cloud), ORIGINAL)


def _remove(cloud: PointCloud, candidates: np.ndarray, count: int, rng) -> np.ndarray:
    """Draw ``count`` of ``candidates`` without replacement; returns them sorted."""
    pick = rng.choice(len(candidates), size=count, replace=False)
    return np.sort(candidates[pick])


def _without(cloud: PointCloud, removed: np.ndarray) -> PointCloud:
    keep = np.ones(len(cloud), dtype=bool)
    keep[removed] = False
    return cloud.subset(np.flatnonzero(keep))


def _append(cloud: PointCloud, new_points: np.ndarray) -> tuple[PointCloud, np.ndarray]:
    n = len(cloud)
    points = np.vstack([cloud.points, new_points])
    labels = np.concatenate([_labels(cloud), np.full(len(new_points), OUTLIER)])
    normals = None
    if cloud.normals is not None:
        normals = np.vstack([cloud.normals, np.full((len(new_points), 3), np.nan)])
    return PointCloud(points, normals, labels), np.arange(n, n + len(new_points))


def remove_uniform(
    cloud: PointCloud, ratio: float, seed: int, reference: PointCloud | None = None
) -> tuple[PointCloud, np.ndarray]:
    """
    Remove round(ratio * N) points chosen uniformly without replacement. N is the size of
    ``reference`` when given (capped at the points left), else of ``cloud``.
    """
    check_fraction('ratio', ratio)
    rng = np.random.default_rng(seed)
    size = len(cloud if reference is None else reference)
    count = min(round_half_up(ratio * size), len(cloud))
    removed = _remove(cloud, np.arange(len(cloud)), count, rng)
    return _without(cloud, removed), removed


def remove_structured(
    cloud: PointCloud, ratio: float, region: RegionSpec, seed: int
) -> tuple[PointCloud, np.ndarray]:
    """Remove round(ratio * |region|) points drawn only from inside ``region``."""
    check_fraction('ratio', ratio)
    inside = region.select(cloud)
    if inside.size == 0:
        raise CorruptionError('region selects no points')
    rng = np.random.default_rng(seed)
    removed = _remove(cloud, inside, round_half_up(ratio * inside.size), rng)
    return _without(cloud, removed), removed


def add_uniform_outliers(
    cloud: PointCloud, ratio: float, seed: int, reference: PointCloud | None = None
) -> tuple[PointCloud, np.ndarray]:
    """
    Append round(ratio * N) points uniform over the bounding box. N and the box come from
    ``reference`` when given, else from ``cloud``.
    """
    if ratio < 0:
        raise ValueError(f'ratio must be >= 0, got {ratio}')
    reference = cloud if reference is None else reference
    rng = np.random.default_rng(seed)
    lo, hi = bounding_box(reference)
    count = round_half_up(ratio * len(reference))
    return _append(cloud, lo + rng.random((count, 3)) * (hi - lo))


def add_structured_outliers(
    cloud: PointCloud,
    ratio: float,
    region: RegionSpec,
    seed: int,
    reference: PointCloud | None = None,
) -> tuple[PointCloud, np.ndarray]:
    """
    Append round(ratio * |region|) points uniform over the region's volume. The region is
    measured on ``reference`` when given, else on ``cloud``.
    """
    if ratio < 0:
        raise ValueError(f'ratio must be >= 0, got {ratio}')
    reference = cloud if reference is None else reference
    inside = region.select(reference)
    if inside.size == 0:
        raise CorruptionError('region selects no points')
    rng = np.random.default_rng(seed)
    count = round_half_up(ratio * inside.size)
    return _append(cloud, region.sample(count, rng, reference))


def add_noise(cloud: PointCloud, sigma: float, seed: int) -> tuple[PointCloud, np.ndarray]:
    """Perturb every coordinate by independent N(0, sigma^2)."""
    if sigma < 0:
        raise ValueError(f'sigma must be >= 0, got {sigma}')
    rng = np.random.default_rng(seed)
    displacements = rng.normal(0.0, sigma, size=(len(cloud), 3))
    return cloud.with_points(cloud.points + displacements), displacements


# --------------------
# Full simulation
# --------------------


def corrupt(
    cloud: PointCloud, config: CorruptionConfig
) -> tuple[PointCloud, CorruptionGroundTruth]:
    """
    Apply structured missing, uniform missing, noise, structured outliers and uniform
    outliers, in that order.

    Missing and outlier counts are relative to the clean shape: the uniform missing count is
    round(ratio * N) of the clean N, structured counts are relative to the number of clean
    points inside the region. Injected outliers receive no noise.
    """
    seeds = child_seeds(config.seed, 5)
    n = len(cloud)
    current = cloud.with_labels(np.full(n, ORIGINAL))
    origin = np.arange(n, dtype=np.intp)
    removed: list[np.ndarray] = []

    if config.structured_missing_ratio > 0:
        if config.missing_region is None:
            logger.warning('structured_missing_ratio > 0 but no missing_region; skipped')
        else:
            current, gone = remove_structured(
                current, config.structured_missing_ratio, config.missing_region, seeds[0]
            )
            removed.append(origin[gone])
            origin = np.delete(origin, gone)

    if config.uniform_missing_ratio > 0:
        current, gone = remove_uniform(
            current, config.uniform_missing_ratio, seeds[1], reference=cloud
        )
        removed.append(origin[gone])
        origin = np.delete(origin, gone)

    current, displacements = add_noise(current, config.noise_sigma, seeds[2])
    n_kept = len(current)

    if config.structured_outlier_ratio > 0:
        if config.outlier_region is None:
            logger.warning('structured_outlier_ratio > 0 but no outlier_region; skipped')
        else:
            current, _ = add_structured_outliers(
                current, config.structured_outlier_ratio, config.outlier_region, seeds[3],
                reference=cloud,
            )

    if config.uniform_outlier_ratio > 0:
        current, _ = add_uniform_outliers(
            current, config.uniform_outlier_ratio, seeds[4], reference=cloud
        )

    new_points = current.points[n_kept:]
    n_out = len(new_points)
    kept_original_index = np.concatenate([origin, np.full(n_out, NONE, dtype=np.intp)])
    noise = np.vstack([displacements, np.full((n_out, 3), np.nan)])
    outlier_positions = np.vstack([np.full((n_kept, 3), np.nan), new_points])
    removed_indices = np.sort(np.concatenate(removed)) if removed else np.zeros(0, np.intp)

    logger.debug(
        f'Corrupted {n} points: {len(removed_indices)} removed, {n_out} injected, '
        f'sigma={config.noise_sigma}'
    )
    truth = CorruptionGroundTruth(
        kept_original_index, removed_indices.astype(np.intp), noise, outlier_positions, n
    )
    return current, truth

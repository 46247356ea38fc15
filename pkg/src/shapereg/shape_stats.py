"""
Dataset-level shape statistics: Generalized Procrustes Analysis, the mean shape and how far
each shape and each point deviates from it.
"""

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from shapereg.error import GeometryError
from shapereg.geometry import PointCloud, RigidTransform, fit_rigid_least_squares

logger = logging.getLogger(__spec__.name)


@dataclass(frozen=True, eq=False)
class AlignedDataset:
    """
    Corresponded shapes after GPA. ``alignment_transforms[i]`` maps the input shape ``i``
    onto ``shapes[i]``; ``objective_history`` is the sum of squared distances to the mean
    after each alignment pass.
    """

    shapes: tuple[PointCloud, ...]
    alignment_transforms: tuple[RigidTransform, ...]
    iterations_used: int
    status: str = 'converged'
    objective_history: tuple[float, ...] = ()

    def __post_init__(self):
        if len({len(s) for s in self.shapes}) > 1:
            raise GeometryError('Aligned shapes must have equal point counts')

    def __len__(self) -> int:
        return len(self.shapes)

    def stacked(self) -> np.ndarray:
        """(shapes, points, 3) array."""
        return np.stack([s.points for s in self.shapes])


def _align_all(shapes, mean, with_scale):
    transforms = [fit_rigid_least_squares(s.points, mean, with_scale=with_scale) for s in shapes]
    aligned = np.stack([tf.apply_points(s.points) for tf, s in zip(transforms, shapes)])
    return transforms, aligned


def gpa(
    shapes: Sequence[PointCloud],
    max_iterations: int = 100,
    tol: float = 1e-9,
    scale: bool = False,
) -> AlignedDataset:
    """
    Generalized Procrustes Analysis.

    The mean starts as the first shape, centred, and is rotated back onto it after every
    update, so the first shape's orientation fixes the global frame. With ``scale`` the
    shapes are also scaled and the mean keeps the size of the centred first shape.
    """
    if len(shapes) < 2:
        raise GeometryError('gpa needs at least 2 shapes')
    if len({len(s) for s in shapes}) != 1:
        raise GeometryError('gpa needs corresponded shapes with equal point counts')

    anchor = shapes[0].points - shapes[0].centroid
    size = np.linalg.norm(anchor)
    mean = anchor
    history: list[float] = []
    status = 'max_iterations'

    it = 0
    for it in range(1, max_iterations + 1):
        transforms, aligned = _align_all(shapes, mean, scale)
        history.append(float(np.sum((aligned - mean) ** 2)))

        new_mean = aligned.mean(axis=0)
        if scale:
            new_mean *= size / np.linalg.norm(new_mean)
        new_mean = fit_rigid_least_squares(new_mean, anchor).apply_points(new_mean)
        change = float(np.max(np.abs(new_mean - mean)))
        mean = new_mean
        logger.debug(f'gpa iteration {it}: objective={history[-1]:.6g} mean change={change:.3g}')
        if change < tol:
            status = 'converged'
            break

    transforms, aligned = _align_all(shapes, mean, scale)
    if status != 'converged':
        logger.warning(f'gpa did not converge in {max_iterations} iterations')
    return AlignedDataset(
        tuple(s.with_points(a) for s, a in zip(shapes, aligned)),
        tuple(transforms),
        it,
        status,
        tuple(history),
    )


def mean_shape(dataset: AlignedDataset) -> PointCloud:
    if len(dataset) == 0:
        raise GeometryError('empty point set')
    return PointCloud(dataset.stacked().mean(axis=0))


def deformation_matrix(dataset: AlignedDataset, mean: PointCloud | None = None) -> np.ndarray:
    """Distances from each point of each shape to the same point of the mean."""
    mean = mean_shape(dataset) if mean is None else mean
    return np.linalg.norm(dataset.stacked() - mean.points, axis=2)


def deformation_stats(dataset: AlignedDataset) -> tuple[np.ndarray, np.ndarray]:
    """(mean deformation per shape, mean deformation per point)."""
    dist = deformation_matrix(dataset)
    return dist.mean(axis=1), dist.mean(axis=0)


def most_different_shape(dataset: AlignedDataset) -> int:
    """Index of the shape with the largest mean deformation; ties go to the lowest index."""
    if len(dataset) < 2:
        raise GeometryError('most_different_shape needs at least 2 shapes')
    per_shape, _ = deformation_stats(dataset)
    return int(np.argmax(per_shape))

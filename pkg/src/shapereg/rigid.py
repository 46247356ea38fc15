"""
Initial rigid alignment: classic ICP and RANSIP, a randomised multi-start ICP that scores
each start by the median angle between the normals of its inlier pairs.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.spatial import cKDTree

from shapereg.error import GeometryError, RegistrationError
from shapereg.geometry import (
    NONE,
    CorrespondenceMap,
    PointCloud,
    RigidTransform,
    estimate_normals,
    fit_rigid_least_squares,
    median_spacing,
    nearest_neighbors,
    random_rotation,
)

logger = logging.getLogger(__spec__.name)

INLIER_SPACING_FACTOR = 5.0


@dataclass(frozen=True)
class IcpParams:
    max_iterations: int = 50
    convergence_tol: float = 1e-6
    correspondence_threshold: float = math.inf
    robust_loss: Literal['squared', 'huber'] = 'squared'
    huber_delta: float = 1.0
    unique_matches: bool = False

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError('max_iterations must be >= 1')
        if not (self.convergence_tol > 0 and self.correspondence_threshold > 0):
            raise ValueError('tolerances must be positive')
        if self.robust_loss not in ('squared', 'huber'):
            raise ValueError(f'Unknown robust_loss: {self.robust_loss!r}')
        if not self.huber_delta > 0:
            raise ValueError('huber_delta must be positive')


@dataclass(frozen=True)
class RansipParams:
    confidence: float = 0.999
    max_trials: int = 100
    inlier_distance_threshold: float | None = None
    normal_angle_gate: float = math.pi / 4
    icp: IcpParams = field(default_factory=IcpParams)
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.confidence < 1:
            raise ValueError('confidence must be in (0, 1)')
        if not 0 < self.normal_angle_gate <= math.pi:
            raise ValueError('normal_angle_gate must be in (0, pi]')
        if self.max_trials < 1:
            raise ValueError('max_trials must be >= 1')
        if self.inlier_distance_threshold is not None and not self.inlier_distance_threshold > 0:
            raise ValueError('inlier_distance_threshold must be positive')
        if isinstance(self.icp, dict):
            object.__setattr__(self, 'icp', IcpParams(**self.icp))


@dataclass(frozen=True, eq=False)
class RigidResult:
    """
    ``correspondences`` holds every within-threshold nearest-neighbour pair under
    ``transform``. ``inlier_pairs`` are the pairs that also pass RANSIP's normal gate (for
    plain ICP, all pairs).
    """

    transform: RigidTransform
    correspondences: CorrespondenceMap
    cost: float
    trials_run: int
    inlier_pairs: np.ndarray
    inlier_angles: np.ndarray | None = None
    history: tuple[float, ...] = ()


def _correspondences(
    moved: np.ndarray,
    target: PointCloud,
    tree: cKDTree,
    threshold: float,
    unique: bool = False,
) -> CorrespondenceMap:
    idx, dist = nearest_neighbors(moved, target, tree)
    assignments = np.where(dist <= threshold, idx, NONE)
    if unique:
        assignments = _unique_matches(assignments, dist)
    assigned = np.zeros(len(target), dtype=bool)
    assigned[assignments[assignments != NONE]] = True
    return CorrespondenceMap(
        assignments, np.flatnonzero(~assigned), threshold, len(target), dist
    )


def _unique_matches(assignments: np.ndarray, dist: np.ndarray) -> np.ndarray:
    """Keep, for every target, only its closest template point (lowest index on ties)."""
    out = np.full_like(assignments, NONE)
    valid = np.flatnonzero(assignments != NONE)
    order = valid[np.lexsort((valid, dist[valid]))]
    _, first = np.unique(assignments[order], return_index=True)
    winners = order[first]
    out[winners] = assignments[winners]
    return out


def _loss_weights(residuals: np.ndarray, params: IcpParams) -> np.ndarray | None:
    if params.robust_loss == 'squared':
        return None
    delta = params.huber_delta
    return np.where(residuals <= delta, 1.0, delta / np.maximum(residuals, 1e-300))


def icp(
    template: PointCloud,
    target: PointCloud,
    params: IcpParams = IcpParams(),
    init: RigidTransform | None = None,
    tree: cKDTree | None = None,
) -> RigidResult:
    """
    Alternate nearest-neighbour matching and least-squares rigid fitting.

    Stops when the mean in-threshold residual changes by less than ``convergence_tol`` or
    after ``max_iterations``. ``history`` records the RMS residual of every matching step.
    Matches may be many-to-one.
    """
    if len(template) < 3 or len(target) < 3:
        raise RegistrationError('ICP needs at least 3 points in each cloud')
    tree = tree if tree is not None else cKDTree(target.points)
    tf = init if init is not None else RigidTransform.identity()
    history: list[float] = []
    previous_mean = math.inf

    for it in range(params.max_iterations):
        moved = tf.apply_points(template.points)
        idx, dist = nearest_neighbors(moved, target, tree)
        mask = dist <= params.correspondence_threshold
        if mask.sum() < 3:
            raise RegistrationError('registration diverged')
        rms = float(np.sqrt(np.mean(dist[mask] ** 2)))
        mean = float(np.mean(dist[mask]))
        history.append(rms)
        logger.debug(f'icp iteration {it}: mean={mean:.6g} rms={rms:.6g} pairs={int(mask.sum())}')
        if abs(previous_mean - mean) < params.convergence_tol:
            break
        previous_mean = mean
        try:
            step = fit_rigid_least_squares(
                moved[mask], target.points[idx[mask]], _loss_weights(dist[mask], params)
            )
        except GeometryError as e:
            raise RegistrationError('registration diverged') from e
        tf = step.compose(tf)

    moved = tf.apply_points(template.points)
    corr = _correspondences(
        moved, target, tree, params.correspondence_threshold, params.unique_matches
    )
    pairs = corr.pairs
    if len(pairs) < 3:
        raise RegistrationError('registration diverged')
    cost = float(np.sqrt(np.mean(corr.distances[pairs[:, 0]] ** 2)))
    return RigidResult(tf, corr, cost, 1, pairs, None, tuple(history))


def _normal_angles(template_normals, target_normals, rotation, pairs) -> np.ndarray:
    a = template_normals[pairs[:, 0]] @ rotation.T
    b = target_normals[pairs[:, 1]]
    cos = np.clip(np.einsum('ij,ij->i', a, b), -1.0, 1.0)
    # NaN normals give NaN angles, which fail every gate comparison
    return np.arccos(cos)


def required_trials(confidence: float, inlier_fraction: float, sample_size: int = 3) -> float:
    """RANSAC bound on the number of trials needed to see an all-inlier sample."""
    if inlier_fraction <= 0:
        return math.inf
    p_good = inlier_fraction**sample_size
    if p_good >= 1:
        return 1.0
    return math.log(1.0 - confidence) / math.log(1.0 - p_good)


def ransip(
    template: PointCloud, target: PointCloud, params: RansipParams = RansipParams()
) -> RigidResult:
    """
    Randomised multi-start ICP with a normal-angle median cost.

    Trial ``k`` starts from rotation ``R_k`` (uniform over SO(3), drawn up-front from the
    seeded generator) about the template centroid, translated onto the target centroid.
    Inliers are pairs within the inlier distance whose normals differ by less than the gate;
    the trial cost is the median inlier angle. The lowest cost wins, ties going to the
    earlier trial.
    """
    if template.normals is None:
        template = estimate_normals(template)
    if target.normals is None:
        target = estimate_normals(target)
    threshold = params.inlier_distance_threshold
    if threshold is None:
        threshold = INLIER_SPACING_FACTOR * median_spacing(template)

    rng = np.random.default_rng(params.seed)
    rotations = [random_rotation(rng) for _ in range(params.max_trials)]
    tree = cKDTree(target.points)
    c_template, c_target = template.centroid, target.centroid

    best: RigidResult | None = None
    best_fraction = 0.0
    trials = 0
    for k, rotation in enumerate(rotations):
        trials = k + 1
        init = RigidTransform(rotation, c_target - rotation @ c_template)
        try:
            fitted = icp(template, target, params.icp, init, tree)
        except RegistrationError:
            logger.debug(f'ransip trial {k}: icp diverged')
            continue

        moved = fitted.transform.apply_points(template.points)
        corr = _correspondences(moved, target, tree, threshold)
        pairs = corr.pairs
        angles = _normal_angles(template.normals, target.normals, fitted.transform.rotation,
                                pairs)
        gate = angles < params.normal_angle_gate
        inliers, inlier_angles = pairs[gate], angles[gate]

        if len(inliers) >= 3:
            cost = float(np.median(inlier_angles))
            fraction = len(inliers) / len(template)
            logger.debug(f'ransip trial {k}: cost={cost:.4g} inliers={fraction:.3f}')
            if best is None or cost < best.cost:
                best = RigidResult(
                    fitted.transform, corr, cost, 0, inliers, inlier_angles, fitted.history
                )
            best_fraction = max(best_fraction, fraction)

        if trials >= required_trials(params.confidence, best_fraction):
            break

    if best is None:
        raise RegistrationError('no consensus found')
    logger.info(f'ransip: best cost {best.cost:.4g} after {trials} trials')
    return RigidResult(
        best.transform,
        best.correspondences,
        best.cost,
        trials,
        best.inlier_pairs,
        best.inlier_angles,
        best.history,
    )


def classify_points(
    result: RigidResult, target: PointCloud
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Split a rigid result into (inlier target indices, outlier target indices, missing
    template indices).

    Targets never chosen as a within-threshold nearest neighbour are outliers; template
    points without a within-threshold target are missing.
    """
    corr = result.correspondences
    if corr.target_count != len(target):
        raise RegistrationError(
            f'Result was computed for {corr.target_count} targets, got {len(target)}'
        )
    inliers = corr.assigned_targets
    outliers = np.setdiff1d(np.arange(len(target)), inliers)
    return inliers, outliers, corr.missing

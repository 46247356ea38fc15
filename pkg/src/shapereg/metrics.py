"""
Scores for registration and completion against corruption ground truth.

Template point ``m`` corresponds to clean target point ``m``: the simulated targets are
derived from shapes already in correspondence with the template. Distances are measured in
clean coordinates, so the corruption noise does not count against a method.

Note on naming: ``*_precision`` is TN / (TN + FP). That is the specificity of the
classifier; the name follows the evaluation protocol these scores are compared with.
"""

import logging
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

from shapereg.corruption import CorruptionGroundTruth
from shapereg.error import MetricsError
from shapereg.geometry import NONE, CorrespondenceMap, PointCloud

logger = logging.getLogger(__spec__.name)

PRECISION_NOTE = (
    'outlier_precision and missing_precision are TN/(TN+FP), i.e. specificity; '
    'recall is TP/(TP+FN). Undefined ratios are null.'
)
SCORE_COLUMNS = [
    'distance_error',
    'correspondence_fraction',
    'outlier_precision',
    'outlier_recall',
    'missing_precision',
    'missing_recall',
]


@dataclass(frozen=True)
class RegistrationScore:
    """None marks a score that is undefined for the sample (empty denominator)."""

    distance_error: float | None
    correspondence_fraction: float | None
    outlier_precision: float | None
    outlier_recall: float | None
    missing_precision: float | None
    missing_recall: float | None

    def to_dict(self) -> dict:
        return asdict(self)


def _positions(points) -> np.ndarray:
    return np.asarray(getattr(points, 'points', points), dtype=np.float64)


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


def _mask(indices, size: int, what: str) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.intp).reshape(-1)
    if indices.size and (indices.min() < 0 or indices.max() >= size):
        raise MetricsError(f'{what} index out of bounds for {size} points')
    mask = np.zeros(size, dtype=bool)
    mask[indices] = True
    return mask


def _precision_recall(flagged: np.ndarray, truth: np.ndarray):
    tp = int(np.sum(flagged & truth))
    fn = int(np.sum(~flagged & truth))
    tn = int(np.sum(~flagged & ~truth))
    fp = int(np.sum(flagged & ~truth))
    return _ratio(tn, tn + fp), _ratio(tp, tp + fn)


def _check_correspondences(corr: CorrespondenceMap, gt: CorruptionGroundTruth):
    if corr.template_count != gt.original_count:
        raise MetricsError(
            f'Correspondences cover {corr.template_count} template points, ground truth '
            f'{gt.original_count}'
        )
    if corr.target_count != gt.corrupted_count:
        raise MetricsError(
            f'Correspondences index {corr.target_count} targets, ground truth '
            f'{gt.corrupted_count}'
        )


def distance_error(
    correspondences: CorrespondenceMap,
    ground_truth: CorruptionGroundTruth,
    template: PointCloud,
    target_clean: PointCloud,
) -> float:
    """
    Mean distance between each template point's true target and the one it was matched to,
    over template points that both survived corruption and received a match.

    A match to an injected outlier is measured at the outlier's position.
    """
    _check_correspondences(correspondences, ground_truth)
    if len(template) != ground_truth.original_count or len(target_clean) != len(template):
        raise MetricsError('Template, clean target and ground truth must have equal counts')
    survived = ground_truth.true_target_index() != NONE
    assigned = correspondences.assignments
    scorable = np.flatnonzero(survived & (assigned != NONE))
    if scorable.size == 0:
        raise MetricsError('no scorable correspondences')

    matched = assigned[scorable]
    origin = ground_truth.kept_original_index[matched]
    registered = np.where(
        (origin != NONE)[:, None],
        target_clean.points[np.where(origin != NONE, origin, 0)],
        ground_truth.outlier_positions[matched],
    )
    return float(np.mean(np.linalg.norm(target_clean.points[scorable] - registered, axis=1)))


def correspondence_fraction(
    correspondences: CorrespondenceMap, ground_truth: CorruptionGroundTruth
) -> float:
    """
    Matches made over template points whose true counterpart survived. Many-to-one matching
    can push it above 1.
    """
    _check_correspondences(correspondences, ground_truth)
    found = int(np.sum(correspondences.assignments != NONE))
    valid = ground_truth.original_count - len(ground_truth.removed_indices)
    if valid == 0:
        raise MetricsError('No template point has a surviving counterpart')
    return found / valid


def outlier_scores(flagged_outliers, ground_truth: CorruptionGroundTruth):
    """(precision, recall) of a target-point outlier classification."""
    n = ground_truth.corrupted_count
    flagged = _mask(flagged_outliers, n, 'Outlier')
    truth = ground_truth.kept_original_index == NONE
    return _precision_recall(flagged, truth)


def missing_scores(flagged_missing, ground_truth: CorruptionGroundTruth):
    """(precision, recall) of a template-point missing classification."""
    n = ground_truth.original_count
    flagged = _mask(flagged_missing, n, 'Missing')
    truth = _mask(ground_truth.removed_indices, n, 'Removed')
    return _precision_recall(flagged, truth)


def reconstruction_error(predicted, truth) -> float:
    pred, true = _positions(predicted), _positions(truth)
    if pred.shape != true.shape:
        raise MetricsError(f'Point count mismatch: {len(pred)} predicted, {len(true)} true')
    if len(pred) == 0:
        raise MetricsError('empty point set')
    return float(np.mean(np.linalg.norm(pred - true, axis=1)))


def score_registration(
    correspondences: CorrespondenceMap,
    ground_truth: CorruptionGroundTruth,
    template: PointCloud,
    target_clean: PointCloud,
    flagged_outliers=None,
) -> RegistrationScore:
    """
    All six registration scores. Outliers default to the map's ``outlier_targets``; a score
    whose denominator is empty comes back as None.
    """
    try:
        distance = distance_error(correspondences, ground_truth, template, target_clean)
    except MetricsError as e:
        logger.warning(f'distance error undefined: {e}')
        distance = None
    try:
        fraction = correspondence_fraction(correspondences, ground_truth)
    except MetricsError as e:
        logger.warning(f'correspondence fraction undefined: {e}')
        fraction = None
    if flagged_outliers is None:
        flagged_outliers = correspondences.outlier_targets
    out_p, out_r = outlier_scores(flagged_outliers, ground_truth)
    miss_p, miss_r = missing_scores(correspondences.missing, ground_truth)
    return RegistrationScore(distance, fraction, out_p, out_r, miss_p, miss_r)


def summarize_scores(table: pd.DataFrame, by: str = 'method') -> dict:
    """
    Mean, median, quartiles and count per group for every numeric score column.

    Missing values (undefined scores) are skipped, not counted as zero.
    """
    columns = [c for c in table.columns if c != by and pd.api.types.is_numeric_dtype(table[c])]
    summary = {}
    for key, group in table.groupby(by, sort=True):
        summary[str(key)] = {
            col: {
                'mean': _finite(group[col].mean()),
                'median': _finite(group[col].median()),
                'q1': _finite(group[col].quantile(0.25)),
                'q3': _finite(group[col].quantile(0.75)),
                'count': int(group[col].count()),
            }
            for col in columns
        }
    return {'note': PRECISION_NOTE, 'groups': summary}


def _finite(value) -> float | None:
    return None if pd.isna(value) else float(value)

"""
Shape completion: fill in the template points a scan never captured.

Three options are provided: the registration's deformed template, conditional prediction
under a probabilistic PCA model, and Gaussian-process regression with a kernel that sums
the sample covariance of a training set and an isotropic Gaussian kernel. Models are built
from GPA-aligned, corresponded shapes and live in that frame.

Shape vectors are flattened row-major, (x0, y0, z0, x1, ...), so point ``i`` owns entries
``3i .. 3i+2``.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Literal, Protocol, Sequence

import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist

from shapereg.error import CompletionError, GeometryError
from shapereg.geometry import PointCloud, RigidTransform, fit_rigid_least_squares

logger = logging.getLogger(__spec__.name)

DENSE_EIGEN_LIMIT = 3000
"""Largest kernel size (3M) decomposed densely; larger ones use the Nystrom approximation."""

NYSTROM_POINTS = 300
DEFAULT_GP_NOISE = 0.1
MAX_CONDITION = 1e12
EIGEN_RTOL = 1e-12

POSTERIOR = 'posterior'
PRIOR_MEAN = 'prior mean'

CompletionMethod = Literal['deformed_template', 'ppca', 'gp', 'mean']


def _coords(indices: np.ndarray) -> np.ndarray:
    """Flat-vector rows of the given point indices."""
    return (3 * np.asarray(indices, dtype=np.intp)[:, None] + np.arange(3)).reshape(-1)


def _stack(shapes: Sequence[PointCloud]) -> np.ndarray:
    if len(shapes) == 0:
        raise CompletionError('No shapes given')
    counts = {len(s) for s in shapes}
    if len(counts) != 1:
        raise CompletionError(f'Shapes must be corresponded, got point counts {sorted(counts)}')
    return np.stack([s.points.reshape(-1) for s in shapes])


@dataclass(frozen=True)
class CompletionParams:
    method: CompletionMethod = 'gp'
    model_dir: str | None = None
    observation_noise: float | None = None
    exact: bool = False

    def __post_init__(self):
        if self.method not in ('deformed_template', 'ppca', 'gp', 'mean'):
            raise ValueError(f'Unknown completion method: {self.method!r}')
        if self.observation_noise is not None and not self.observation_noise > 0:
            raise ValueError('observation_noise must be positive')


@dataclass(frozen=True, eq=False)
class PartialObservation:
    """Known positions for a subset of template points. ``observation_noise`` is in mm^2."""

    observed_indices: np.ndarray
    observed_positions: np.ndarray
    observation_noise: float | None = None

    def __post_init__(self):
        idx = np.asarray(self.observed_indices, dtype=np.intp).reshape(-1)
        pos = np.asarray(self.observed_positions, dtype=np.float64).reshape(len(idx), 3)
        if len(np.unique(idx)) != len(idx):
            raise CompletionError('Observed indices must be unique')
        if np.any(idx < 0):
            raise CompletionError('Observed indices must be non-negative')
        if not np.all(np.isfinite(pos)):
            raise CompletionError('Observed positions must be finite')
        if self.observation_noise is not None and not self.observation_noise > 0:
            raise CompletionError('observation_noise must be positive')
        object.__setattr__(self, 'observed_indices', idx)
        object.__setattr__(self, 'observed_positions', pos)

    def __len__(self) -> int:
        return len(self.observed_indices)

    def check_bounds(self, point_count: int):
        if len(self) and self.observed_indices.max() >= point_count:
            raise CompletionError(
                f'Observed index {self.observed_indices.max()} out of bounds for '
                f'{point_count} points'
            )

    def transformed(self, tf: RigidTransform) -> 'PartialObservation':
        return PartialObservation(
            self.observed_indices, tf.apply_points(self.observed_positions),
            self.observation_noise,
        )


@dataclass(frozen=True, eq=False)
class CompletionResult:
    points: np.ndarray
    alpha: np.ndarray | None = None
    alpha_covariance: np.ndarray | None = None
    status: str = POSTERIOR

    @property
    def vector(self) -> np.ndarray:
        return self.points.reshape(-1)


# --------------------
# Deformed template and mean shape
# --------------------


class _HasDeformedTemplate(Protocol):
    deformed_template: PointCloud


def deformed_template_completion(result: _HasDeformedTemplate) -> PointCloud:
    return result.deformed_template


def mean_shape_completion(model: 'PcaShapeModel') -> np.ndarray:
    """The mean-shape baseline: predicts the model mean whatever was observed."""
    return model.mean.reshape(-1, 3).copy()


# --------------------
# PPCA
# --------------------


@dataclass(frozen=True, eq=False)
class PcaShapeModel:
    """
    Linear shape model x = mean + components @ (sqrt(eigenvalues) * alpha), alpha ~ N(0, I).

    ``components`` has orthonormal columns; ``noise_sigma2`` is the average variance left in
    the discarded directions.
    """

    mean: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray
    noise_sigma2: float
    point_count: int

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        comps = np.asarray(self.components, dtype=np.float64)
        evals = np.asarray(self.eigenvalues, dtype=np.float64).reshape(-1)
        if mean.shape != (3 * self.point_count,):
            raise CompletionError('Mean must have 3 entries per point')
        if comps.ndim != 2 or comps.shape != (len(mean), len(evals)):
            raise CompletionError(
                f'Components must be {len(mean)}x{len(evals)}, got {comps.shape}'
            )
        if np.any(evals <= 0) or np.any(np.diff(evals) > 0):
            raise CompletionError('Eigenvalues must be positive and sorted descending')
        if np.max(np.abs(comps.T @ comps - np.eye(len(evals))), initial=0.0) > 1e-8:
            raise CompletionError('Components must be orthonormal')
        if self.noise_sigma2 < 0:
            raise CompletionError('noise_sigma2 must be non-negative')
        object.__setattr__(self, 'mean', mean)
        object.__setattr__(self, 'components', comps)
        object.__setattr__(self, 'eigenvalues', evals)

    @property
    def n_components(self) -> int:
        return len(self.eigenvalues)

    @property
    def loadings(self) -> np.ndarray:
        return self.components * np.sqrt(self.eigenvalues)

    @property
    def mean_shape(self) -> PointCloud:
        return PointCloud(self.mean.reshape(-1, 3))


def build_pca_model(shapes: Sequence[PointCloud], n_components: int) -> PcaShapeModel:
    """
    PCA of a GPA-aligned, corresponded dataset.

    The covariance is decomposed through the n x n inner-product matrix, which is far
    smaller than 3M x 3M for realistic datasets.
    """
    data = _stack(shapes)
    n, dim = data.shape
    if n < 2:
        raise CompletionError('build_pca_model needs at least 2 shapes')
    mean = data.mean(axis=0)
    centered = data - mean
    evals, evecs = np.linalg.eigh(centered @ centered.T / (n - 1))
    evals, evecs = evals[::-1], evecs[:, ::-1]
    nonzero = int(np.sum(evals > max(EIGEN_RTOL * evals[0], 1e-20)))
    if not 1 <= n_components <= nonzero:
        raise CompletionError(
            f'Asked for {n_components} components, the dataset has {nonzero} nonzero eigenvalues'
        )

    kept = evals[:n_components]
    comps = centered.T @ evecs[:, :n_components] / np.sqrt(kept * (n - 1))
    comps, _ = np.linalg.qr(comps)
    # qr may flip signs; keep the sign of the original directions
    comps *= np.sign(np.sum(comps * (centered.T @ evecs[:, :n_components]), axis=0))
    discarded = np.clip(evals[n_components:], 0.0, None).sum()
    noise = float(discarded / (dim - n_components)) if dim > n_components else 0.0
    logger.info(f'pca model: {n_components} components, noise_sigma2={noise:.4g}')
    return PcaShapeModel(mean, comps, kept, noise, dim // 3)


def ppca_complete(model: PcaShapeModel, obs: PartialObservation) -> CompletionResult:
    """
    Posterior of the latent coefficients given the observed points, and the shape they imply.

    With W the loadings and sigma2 the observation noise (the model's noise when the
    observation gives none), alpha = (Wb^T Wb + sigma2 I)^-1 Wb^T (xb - mean_b) and its
    covariance is sigma2 (Wb^T Wb + sigma2 I)^-1.
    """
    if len(obs) == 0:
        raise CompletionError('ppca_complete needs at least one observed point')
    obs.check_bounds(model.point_count)
    sigma2 = obs.observation_noise if obs.observation_noise is not None else model.noise_sigma2
    rows = _coords(obs.observed_indices)
    w = model.loadings
    wb = w[rows]
    a = wb.T @ wb + sigma2 * np.eye(model.n_components)
    if not np.isfinite(cond := np.linalg.cond(a)) or cond > MAX_CONDITION:
        raise CompletionError('ill-conditioned completion')
    alpha = scipy.linalg.solve(a, wb.T @ (obs.observed_positions.reshape(-1) - model.mean[rows]),
                               assume_a='pos')
    cov = sigma2 * scipy.linalg.inv(a)
    points = (model.mean + w @ alpha).reshape(-1, 3)
    return CompletionResult(points, alpha, cov)


def pca_reconstruct(model: PcaShapeModel, shape, n_components: int | None = None) -> np.ndarray:
    """Orthogonal projection of a full shape onto the first ``n_components`` components."""
    k = model.n_components if n_components is None else n_components
    if not 0 <= k <= model.n_components:
        raise CompletionError(f'n_components must be in [0, {model.n_components}]')
    x = np.asarray(getattr(shape, 'points', shape), dtype=np.float64).reshape(-1)
    comps = model.components[:, :k]
    return (model.mean + comps @ (comps.T @ (x - model.mean))).reshape(-1, 3)


# --------------------
# Gaussian process
# --------------------


@dataclass(frozen=True, eq=False)
class GpShapeModel:
    """
    Deformations u of the reference shape, u ~ GP(mean_deformation, k_SSM + amplitude * g).

    ``sample_factor`` F holds the centred training deformations scaled by 1/sqrt(n - 1), so
    k_SSM = F^T F. The leading eigenpairs of the summed kernel on the reference points form
    the low-rank model u = mean + sum_i alpha_i sqrt(eigenvalue_i) eigenfunction_i.
    """

    reference: PointCloud
    mean_deformation: np.ndarray
    eigenvalues: np.ndarray
    eigenfunctions: np.ndarray
    gaussian_sigma: float
    gaussian_amplitude: float
    sample_factor: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def __post_init__(self):
        m = len(self.reference)
        mean = np.asarray(self.mean_deformation, dtype=np.float64).reshape(m, 3)
        evals = np.asarray(self.eigenvalues, dtype=np.float64).reshape(-1)
        funcs = np.asarray(self.eigenfunctions, dtype=np.float64)
        factor = np.asarray(self.sample_factor, dtype=np.float64)
        if factor.size == 0:
            factor = np.zeros((0, 3 * m))
        _check_kernel_params(self.gaussian_sigma, self.gaussian_amplitude)
        if len(evals) < 1 or np.any(evals <= 0) or np.any(np.diff(evals) > 0):
            raise CompletionError('Eigenvalues must be positive and sorted descending')
        if funcs.shape != (3 * m, len(evals)) or not np.all(np.isfinite(funcs)):
            raise CompletionError(f'Eigenfunctions must be finite, shaped {(3 * m, len(evals))}')
        if factor.shape[1] != 3 * m:
            raise CompletionError('sample_factor must have 3 columns per reference point')
        object.__setattr__(self, 'mean_deformation', mean)
        object.__setattr__(self, 'eigenvalues', evals)
        object.__setattr__(self, 'eigenfunctions', funcs)
        object.__setattr__(self, 'sample_factor', factor)

    @property
    def rank(self) -> int:
        return len(self.eigenvalues)

    @property
    def mean_shape(self) -> PointCloud:
        return PointCloud(self.reference.points + self.mean_deformation)


def _check_kernel_params(sigma: float, amplitude: float):
    if not sigma > 0:
        raise CompletionError(f'gaussian_sigma must be positive, got {sigma}')
    if amplitude < 0:
        raise CompletionError(f'gaussian_amplitude must be non-negative, got {amplitude}')


def _kernel(factor, ref_pts, sigma, amplitude, rows, cols) -> np.ndarray:
    """k_final between the points ``rows`` and ``cols`` as a (3|rows|) x (3|cols|) block."""
    k = factor[:, _coords(rows)].T @ factor[:, _coords(cols)]
    if amplitude > 0:
        g = np.exp(-cdist(ref_pts[rows], ref_pts[cols], 'sqeuclidean') / sigma**2)
        k += amplitude * np.kron(g, np.eye(3))
    return k


def gp_kernel_matrix(model: GpShapeModel, indices=None, columns=None) -> np.ndarray:
    """k_final Gram matrix on reference points ``indices`` (all by default)."""
    rows = np.arange(len(model.reference)) if indices is None else np.asarray(indices)
    cols = rows if columns is None else np.asarray(columns)
    return _kernel(
        model.sample_factor, model.reference.points, model.gaussian_sigma,
        model.gaussian_amplitude, rows, cols,
    )


def _top_eigenpairs(k: np.ndarray, rank: int) -> tuple[np.ndarray, np.ndarray]:
    size = len(k)
    evals, evecs = scipy.linalg.eigh(k, subset_by_index=[size - min(rank, size), size - 1])
    return evals[::-1], evecs[:, ::-1]


def _nystrom(factor, ref_pts, sigma, amplitude, rank) -> tuple[np.ndarray, np.ndarray]:
    """
    Leading eigenpairs of the Nystrom approximation K ~ B B^T built on evenly spaced landmark
    points; the returned eigenvectors are exactly orthonormal.
    """
    m = len(ref_pts)
    count = min(m, max(rank, NYSTROM_POINTS))
    landmarks = np.linspace(0, m - 1, count).round().astype(np.intp)
    k_nl = _kernel(factor, ref_pts, sigma, amplitude, np.arange(m), landmarks)
    evals, evecs = _top_eigenpairs(k_nl[_coords(landmarks)], rank)
    keep = evals > EIGEN_RTOL * evals[0]
    if not keep.any():
        return evals[:0], np.zeros((3 * m, 0))
    b = k_nl @ evecs[:, keep] / np.sqrt(evals[keep])
    s, w = np.linalg.eigh(b.T @ b)
    s, w = s[::-1], w[:, ::-1]
    keep = s > EIGEN_RTOL * s[0]
    return s[keep], b @ w[:, keep] / np.sqrt(s[keep])


def build_gp_model(
    shapes: Sequence[PointCloud],
    reference: PointCloud,
    gaussian_sigma: float,
    gaussian_amplitude: float,
    rank: int,
) -> GpShapeModel:
    """
    GP deformation model around ``reference`` from corresponded training shapes.

    Kernels up to DENSE_EIGEN_LIMIT rows are decomposed exactly; larger ones through a
    Nystrom approximation on landmark points.
    """
    _check_kernel_params(gaussian_sigma, gaussian_amplitude)
    if rank < 1:
        raise CompletionError('rank must be >= 1')
    data = _stack(shapes)
    if data.shape[1] != 3 * len(reference):
        raise CompletionError('Shapes must be corresponded to the reference')
    n = len(data)
    deformations = data - reference.points.reshape(-1)
    mean = deformations.mean(axis=0)
    factor = (deformations - mean) / math.sqrt(n - 1) if n > 1 else np.zeros((0, data.shape[1]))

    ref_pts = reference.points
    size = data.shape[1]
    if size <= DENSE_EIGEN_LIMIT:
        k = _kernel(factor, ref_pts, gaussian_sigma, gaussian_amplitude,
                    np.arange(len(reference)), np.arange(len(reference)))
        evals, funcs = _top_eigenpairs(k, rank)
        keep = evals > EIGEN_RTOL * max(evals[0], 0.0)
        evals, funcs = evals[keep], funcs[:, keep]
    else:
        evals, funcs = _nystrom(factor, ref_pts, gaussian_sigma, gaussian_amplitude, rank)
        evals, funcs = evals[:rank], funcs[:, :rank]

    if len(evals) == 0 or not evals[0] > 0:
        raise CompletionError('Kernel has no positive eigenvalues')
    if len(evals) < rank:
        logger.warning(f'gp model: kernel has rank {len(evals)}, truncated from {rank}')
    logger.info(f'gp model: rank {len(evals)}, leading eigenvalue {evals[0]:.4g}')
    return GpShapeModel(
        reference, mean.reshape(-1, 3), evals, funcs, gaussian_sigma, gaussian_amplitude, factor
    )


def sample_gp_shape(model: GpShapeModel, alpha) -> PointCloud:
    """Shape for Karhunen-Loeve coefficients ``alpha`` (standard normal under the prior)."""
    alpha = np.asarray(alpha, dtype=np.float64).reshape(-1)
    if len(alpha) != model.rank:
        raise CompletionError(f'Expected {model.rank} coefficients, got {len(alpha)}')
    u = model.eigenfunctions @ (np.sqrt(model.eigenvalues) * alpha)
    return PointCloud(model.reference.points + model.mean_deformation + u.reshape(-1, 3))


def gp_complete(
    model: GpShapeModel, obs: PartialObservation, exact: bool = False
) -> CompletionResult:
    """
    GP regression of the deformation field from observed template points.

    The low-rank path solves a ridge problem for the coefficients alpha of the rank-r model.
    ``exact`` instead uses the full kernel, u = mean + K_ao (K_oo + noise I)^-1 (u_o - mean_o).
    """
    ref = model.reference.points
    if len(obs) == 0:
        return CompletionResult(ref + model.mean_deformation, np.zeros(model.rank),
                                status=PRIOR_MEAN)
    obs.check_bounds(len(ref))
    noise = obs.observation_noise if obs.observation_noise is not None else DEFAULT_GP_NOISE
    idx = obs.observed_indices
    residual = (obs.observed_positions - ref[idx] - model.mean_deformation[idx]).reshape(-1)

    if exact:
        k_oo = gp_kernel_matrix(model, idx) + noise * np.eye(3 * len(idx))
        k_ao = gp_kernel_matrix(model, None, idx)
        try:
            weights = scipy.linalg.solve(k_oo, residual, assume_a='pos')
        except (np.linalg.LinAlgError, ValueError) as e:
            raise CompletionError('ill-conditioned completion') from e
        u = model.mean_deformation.reshape(-1) + k_ao @ weights
        return CompletionResult((ref.reshape(-1) + u).reshape(-1, 3))

    basis = model.eigenfunctions[_coords(idx)] * np.sqrt(model.eigenvalues)
    a = basis.T @ basis + noise * np.eye(model.rank)
    alpha = scipy.linalg.solve(a, basis.T @ residual, assume_a='pos')
    points = sample_gp_shape(model, alpha).points
    return CompletionResult(points, alpha, noise * scipy.linalg.inv(a))


# --------------------
# Frames
# --------------------


def to_model_frame(
    mean_points: np.ndarray, obs: PartialObservation
) -> tuple[PartialObservation, RigidTransform]:
    """
    Move an observation from scan coordinates into a model's frame.

    Fits the model mean (at the observed indices) onto the observed positions and returns
    the observation mapped back through that fit, with the fitted model-to-scan transform.
    Falls back to the identity when the observed points are too few or collinear.
    """
    try:
        tf = fit_rigid_least_squares(mean_points[obs.observed_indices], obs.observed_positions)
    except GeometryError:
        logger.warning('Cannot fit model frame to the observation; using the scan frame')
        return obs, RigidTransform.identity()
    return obs.transformed(tf.inverse()), tf

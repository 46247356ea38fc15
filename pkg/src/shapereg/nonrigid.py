"""
Registration refinement with Coherent Point Drift (EM over a Gaussian mixture with a
uniform outlier component) and Bayesian Coherent Point Drift (similarity transform plus a
coherent displacement field, fitted by variational inference).

Conventions: the template Y has M points and the target X has N points; posterior
matrices are M x N with column n holding P(m | x_n). The motion-coherence kernel is
G(i, j) = exp(-|y_i - y_j|^2 / (2 beta^2)).
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.spatial.distance import cdist
from scipy.special import digamma, logsumexp

from shapereg.error import RegistrationError
from shapereg.geometry import NONE, CorrespondenceMap, PointCloud, RigidTransform
from shapereg.rigid import RigidResult

logger = logging.getLogger(__spec__.name)

D = 3
SIGMA2_FLOOR = 1e-12

CONVERGED = 'converged'
MAX_ITERATIONS = 'max_iterations'
DEGENERATE = 'converged (degenerate variance)'


@dataclass(frozen=True)
class CpdParams:
    w: float = 0.1
    beta: float = 10.0
    lambda_: float = 2.0
    max_iterations: int = 150
    sigma2_tol: float = 1e-8
    seed: int = 0
    missing_threshold: float = 0.5
    outlier_threshold: float = 0.3

    def __post_init__(self):
        if not 0 < self.w < 1:
            raise ValueError('w must be in (0, 1)')
        if not (self.beta > 0 and self.lambda_ > 0):
            raise ValueError('beta and lambda_ must be positive')
        if self.max_iterations < 1 or not self.sigma2_tol > 0:
            raise ValueError('max_iterations must be >= 1 and sigma2_tol positive')


@dataclass(frozen=True)
class BcpdParams:
    w: float = 0.1
    beta: float = 10.0
    lambda_: float = 2.0
    gamma: float = 1.0
    kappa: float = math.inf
    max_iterations: int = 100
    convergence_tol: float = 1e-6
    similarity_iterations: int = 50
    low_rank_terms: int = 0
    missing_threshold: float = 0.5
    outlier_threshold: float = 0.3

    def __post_init__(self):
        if not 0 < self.w < 1:
            raise ValueError('w must be in (0, 1)')
        for name in ('beta', 'lambda_', 'gamma', 'kappa', 'convergence_tol'):
            if not getattr(self, name) > 0:
                raise ValueError(f'{name} must be positive')
        if self.max_iterations < 1 or self.low_rank_terms < 0 or self.similarity_iterations < 0:
            raise ValueError(
                'max_iterations must be >= 1, low_rank_terms and similarity_iterations >= 0'
            )


@dataclass(frozen=True, eq=False)
class CpdResult:
    deformed_template: PointCloud
    posterior: np.ndarray
    outlier_posterior: np.ndarray
    sigma2_final: float
    correspondences: CorrespondenceMap
    status: str
    iterations: int
    objective_history: tuple[float, ...] = ()


@dataclass(frozen=True, eq=False)
class BcpdResult:
    deformed_template: PointCloud
    similarity: RigidTransform
    displacements: np.ndarray
    correspondence_probabilities: np.ndarray
    outlier_probabilities: np.ndarray
    correspondences: CorrespondenceMap
    sigma2_final: float
    status: str
    iterations: int
    sigma2_history: tuple[float, ...] = field(default=())


def gaussian_kernel(a: np.ndarray, b: np.ndarray, beta: float) -> np.ndarray:
    return np.exp(-cdist(a, b, 'sqeuclidean') / (2.0 * beta**2))


def initial_sigma2(target_pts: np.ndarray, template_pts: np.ndarray) -> float:
    """Mean squared distance over all template-target pairs, per dimension."""
    return float(cdist(template_pts, target_pts, 'sqeuclidean').sum()) / (
        D * len(template_pts) * len(target_pts)
    )


def cpd_responsibilities(
    target_pts: np.ndarray, moved_pts: np.ndarray, sigma2: float, w: float
) -> tuple[np.ndarray, np.ndarray, float]:
    """
    E-step of CPD under p(x) = w/N + (1 - w)/M * sum_m N(x; moved_m, sigma2 I).

    Returns the M x N posterior P(m | x_n), the outlier component's posterior per target
    point and the negative log-likelihood of the target. Computed in log space, so every
    column of the posterior plus its outlier entry sums to 1 up to rounding.
    """
    m, n = len(moved_pts), len(target_pts)
    log_in = (
        math.log((1.0 - w) / m)
        - 0.5 * D * math.log(2.0 * math.pi * sigma2)
        - cdist(moved_pts, target_pts, 'sqeuclidean') / (2.0 * sigma2)
    )
    log_out = np.full((1, n), math.log(w / n))
    log_p = logsumexp(np.vstack([log_in, log_out]), axis=0)
    posterior = np.exp(log_in - log_p)
    outlier = np.exp(log_out[0] - log_p)
    return posterior, outlier, float(-log_p.sum())


def extract_correspondences(
    probabilities: np.ndarray, missing_threshold: float = 0.5, outlier_threshold: float = 0.3
) -> CorrespondenceMap:
    """
    Turn an M x N posterior into a correspondence map.

    Template m takes the target with the largest responsibility in row m (lowest index on
    ties) if that responsibility reaches ``missing_threshold``, else it is missing. Target n
    is an outlier if its column mass is below ``outlier_threshold`` and it is not assigned.
    ``threshold_used`` records ``missing_threshold``.
    """
    for name, value in (('missing_threshold', missing_threshold),
                        ('outlier_threshold', outlier_threshold)):
        if not 0.0 <= value <= 1.0:
            raise RegistrationError(f'{name} must be in [0, 1], got {value}')
    probabilities = np.asarray(probabilities, dtype=np.float64)
    m, n = probabilities.shape
    if m == 0 or n == 0:
        return CorrespondenceMap(np.full(m, NONE), np.arange(n), missing_threshold, n)

    best = np.argmax(probabilities, axis=1)
    value = probabilities[np.arange(m), best]
    assignments = np.where(value >= missing_threshold, best, NONE)
    low_mass = np.flatnonzero(probabilities.sum(axis=0) < outlier_threshold)
    outliers = np.setdiff1d(low_mass, assignments[assignments != NONE])
    return CorrespondenceMap(assignments, outliers, missing_threshold, n)


def _with_distances(corr: CorrespondenceMap, moved: np.ndarray, target: np.ndarray):
    dist = np.full(corr.template_count, np.nan)
    pairs = corr.pairs
    dist[pairs[:, 0]] = np.linalg.norm(moved[pairs[:, 0]] - target[pairs[:, 1]], axis=1)
    return CorrespondenceMap(
        corr.assignments, corr.outlier_targets, corr.threshold_used, corr.target_count, dist
    )


def _check_inputs(template: PointCloud, target: PointCloud):
    if len(template) == 0 or len(target) == 0:
        raise RegistrationError('empty point set')


def _normalise(target_pts: np.ndarray, template_pts: np.ndarray):
    """
    Shift both sets by the target centroid and divide them by the target's RMS radius, so
    the uniform outlier density is the same whatever unit the points are given in.
    """
    shift = target_pts.mean(axis=0)
    unit = float(np.sqrt(np.mean(np.sum((target_pts - shift) ** 2, axis=1))))
    if not unit > 0:
        unit = 1.0
    return (target_pts - shift) / unit, (template_pts - shift) / unit, shift, unit


# --------------------
# CPD
# --------------------


def cpd_nonrigid(template: PointCloud, target: PointCloud, params: CpdParams = CpdParams()):
    """
    Non-rigid CPD: T(y_m) = y_m + (G W)_m, W solved in the M-step with regularisation
    weight lambda and sigma2 updated in closed form.

    Both sets are normalised first (see ``_normalise``); ``beta`` and ``sigma2_tol`` stay in
    the input units while ``lambda_`` applies to the normalised problem. The returned
    template and ``sigma2_final`` are in the input units.

    ``objective_history`` holds the penalised negative log-likelihood
    -sum log p(x_n) + lambda/2 tr(W^T G W) of the normalised problem, evaluated at the start
    of every iteration; EM makes it non-increasing.
    """
    _check_inputs(template, target)
    x, y, shift, unit = _normalise(target.points, template.points)
    g = gaussian_kernel(template.points, template.points, params.beta)
    w_coef = np.zeros_like(y)
    sigma2 = initial_sigma2(x, y)
    floor, tol = SIGMA2_FLOOR / unit**2, params.sigma2_tol / unit**2
    x2 = np.sum(x * x, axis=1)
    history: list[float] = []
    status = MAX_ITERATIONS

    it = 0
    for it in range(1, params.max_iterations + 1):
        moved = y + g @ w_coef
        p, _, nll = cpd_responsibilities(x, moved, sigma2, params.w)
        history.append(nll + 0.5 * params.lambda_ * float(np.sum(w_coef * (g @ w_coef))))

        p1, pt1 = p.sum(axis=1), p.sum(axis=0)
        px = p @ x
        a = p1[:, None] * g + params.lambda_ * sigma2 * np.eye(len(y))
        w_coef = scipy.linalg.solve(a, px - p1[:, None] * y)

        moved = y + g @ w_coef
        np_total = p1.sum()
        new_sigma2 = (
            pt1 @ x2 - 2.0 * np.sum(px * moved) + p1 @ np.sum(moved * moved, axis=1)
        ) / (np_total * D)
        logger.debug(f'cpd iteration {it}: sigma2={new_sigma2:.6g} objective={history[-1]:.6g}')
        if new_sigma2 < floor:
            sigma2, status = floor, DEGENERATE
            break
        change = abs(new_sigma2 - sigma2)
        sigma2 = float(new_sigma2)
        if change < tol:
            status = CONVERGED
            break

    moved = y + g @ w_coef
    p, outlier, _ = cpd_responsibilities(x, moved, sigma2, params.w)
    corr = extract_correspondences(p, params.missing_threshold, params.outlier_threshold)
    deformed = unit * moved + shift
    sigma2 *= unit**2
    logger.info(f'cpd: {status} after {it} iterations, sigma2={sigma2:.4g}')
    return CpdResult(
        PointCloud(deformed, labels=template.labels),
        p,
        outlier,
        sigma2,
        _with_distances(corr, deformed, target.points),
        status,
        it,
        tuple(history),
    )


def cpd_rigid(
    template: PointCloud,
    target: PointCloud,
    params: CpdParams = CpdParams(),
    with_scale: bool = False,
) -> RigidResult:
    """
    Rigid CPD. Returns a RigidResult whose cost is the final sigma2 and whose
    correspondences come from the posterior, so it can stand in for ICP/RANSIP.
    The sets are normalised as in ``cpd_nonrigid`` and the transform mapped back.
    """
    _check_inputs(template, target)
    x, y, shift, unit = _normalise(target.points, template.points)
    rotation, translation, scale = np.eye(3), np.zeros(3), 1.0
    sigma2 = initial_sigma2(x, y)
    floor, tol = SIGMA2_FLOOR / unit**2, params.sigma2_tol / unit**2

    it = 0
    for it in range(1, params.max_iterations + 1):
        moved = scale * y @ rotation.T + translation
        p, _, _ = cpd_responsibilities(x, moved, sigma2, params.w)
        p1, pt1 = p.sum(axis=1), p.sum(axis=0)
        np_total = p1.sum()
        mu_x = pt1 @ x / np_total
        mu_y = p1 @ y / np_total
        xc, yc = x - mu_x, y - mu_y
        a = xc.T @ p.T @ yc
        u, _, vt = np.linalg.svd(a)
        c = np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vt)) or 1.0])
        rotation = u @ c @ vt
        tr_ar = np.trace(a.T @ rotation)
        y_spread = p1 @ np.sum(yc * yc, axis=1)
        if with_scale:
            scale = tr_ar / y_spread
        translation = mu_x - scale * rotation @ mu_y
        new_sigma2 = (
            pt1 @ np.sum(xc * xc, axis=1) - 2 * scale * tr_ar + scale**2 * y_spread
        ) / (np_total * D)
        if new_sigma2 < floor:
            sigma2 = floor
            break
        change = abs(new_sigma2 - sigma2)
        sigma2 = float(new_sigma2)
        if change < tol:
            break

    rotation = _proper(rotation)
    tf = RigidTransform(
        rotation, shift + unit * translation - scale * rotation @ shift, float(scale)
    )
    moved = tf.apply_points(template.points)
    p, _, _ = cpd_responsibilities(x, (moved - shift) / unit, sigma2, params.w)
    corr = _with_distances(
        extract_correspondences(p, params.missing_threshold, params.outlier_threshold),
        moved,
        target.points,
    )
    sigma2 *= unit**2
    logger.info(f'cpd_rigid: {it} iterations, sigma2={sigma2:.4g}')
    return RigidResult(tf, corr, sigma2, 1, corr.pairs)


def _proper(rotation: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(rotation)
    return u @ np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vt)) or 1.0]) @ vt


# --------------------
# BCPD
# --------------------


def _kernel_eigenpairs(g: np.ndarray, terms: int) -> tuple[np.ndarray, np.ndarray]:
    """Leading ``terms`` eigenpairs of G, eigenvalues descending."""
    m = len(g)
    evals, evecs = scipy.linalg.eigh(g, subset_by_index=[m - terms, m - 1])
    return evals[::-1], evecs[:, ::-1]


def bcpd(template: PointCloud, target: PointCloud, params: BcpdParams = BcpdParams()):
    """
    Bayesian CPD with T(y_m) = s R (y_m + v_m) + t.

    Alternates the variational updates of the matching probabilities, the displacement
    posterior (mean v, per-point variance), the mixing weights, the similarity (s, R, t) and
    sigma2. Starts from s = 1, R = I and t aligning the centroids. The first
    ``similarity_iterations`` iterations hold v at zero and fit the similarity alone; the
    field is released earlier if the similarity settles. With ``low_rank_terms`` in (0, M]
    the kernel is replaced by its leading eigenpairs.

    Convergence is tested on the relative change of sigma2 and s, the change of R and the
    change of t relative to the target's RMS radius, and only once the field is free.
    """
    _check_inputs(template, target)
    x, y = target.points, template.points
    m, n = len(y), len(x)
    terms = min(params.low_rank_terms, m)

    g = gaussian_kernel(y, y, params.beta)
    if terms:
        evals, evecs = _kernel_eigenpairs(g, terms)

    scale, rotation = 1.0, np.eye(3)
    translation = x.mean(axis=0) - y.mean(axis=0)
    v = np.zeros_like(y)
    var_m = np.zeros(m)
    log_alpha = np.full(m, -math.log(m))
    sigma2 = params.gamma * initial_sigma2(x, y + translation)

    extent = np.maximum(np.ptp(x, axis=0), 1e-6)
    log_out = math.log(params.w) - float(np.sum(np.log(extent)))
    radius = float(np.sqrt(np.mean(np.sum((x - x.mean(axis=0)) ** 2, axis=1)))) or 1.0
    x2 = np.sum(x * x, axis=1)
    history: list[float] = [sigma2]
    status = MAX_ITERATIONS
    deforming = params.similarity_iterations == 0

    it = 0
    for it in range(1, params.max_iterations + 1):
        moved = scale * (y + v) @ rotation.T + translation
        p, _ = _bcpd_matching(x, moved, sigma2, scale, var_m, log_alpha, params.w, log_out)
        nu, nu_t = p.sum(axis=1), p.sum(axis=0)
        n_hat = nu.sum()
        if n_hat <= 0:
            raise RegistrationError('registration diverged')
        px = p @ x

        if deforming:
            c = scale**2 / sigma2
            x_hat = np.divide(px, nu[:, None], out=np.zeros_like(px), where=nu[:, None] > 0)
            residual = (x_hat - translation) @ rotation / scale - y
            if terms:
                qtdq = evecs.T @ (nu[:, None] * evecs)
                inner = scipy.linalg.solve(
                    params.lambda_ * np.eye(terms) + c * evals[:, None] * qtdq, np.diag(evals)
                )
                var_m = np.einsum('mk,kl,ml->m', evecs, inner, evecs)
                v = c * evecs @ (inner @ (evecs.T @ (nu[:, None] * residual)))
            else:
                sigma = scipy.linalg.solve(params.lambda_ * np.eye(m) + c * g * nu[None, :], g)
                var_m = np.diag(sigma).copy()
                v = c * sigma @ (nu[:, None] * residual)
        u = y + v

        if math.isfinite(params.kappa):
            log_alpha = digamma(params.kappa + nu) - digamma(params.kappa * m + n_hat)

        # similarity transform; var_bar is zero while the field is held
        x_bar = px.sum(axis=0) / n_hat
        u_bar = nu @ u / n_hat
        var_bar = float(nu @ var_m) / n_hat
        uc = u - u_bar
        s_xu = (px - nu[:, None] * x_bar).T @ uc / n_hat
        s_uu = uc.T @ (nu[:, None] * uc) / n_hat + var_bar * np.eye(3)
        left, _, right = np.linalg.svd(s_xu)
        new_rotation = left @ np.diag([1.0, 1.0, np.linalg.det(left @ right)]) @ right
        new_scale = float(np.trace(new_rotation.T @ s_xu) / np.trace(s_uu))
        new_translation = x_bar - new_scale * new_rotation @ u_bar

        moved = new_scale * u @ new_rotation.T + new_translation
        new_sigma2 = (
            nu_t @ x2 - 2.0 * np.sum(px * moved) + nu @ np.sum(moved * moved, axis=1)
        ) / (n_hat * D) + new_scale**2 * var_bar

        change = max(
            abs(new_sigma2 - sigma2) / sigma2,
            abs(new_scale - scale) / max(abs(scale), 1e-12),
            float(np.max(np.abs(new_rotation - rotation))),
            float(np.max(np.abs(new_translation - translation))) / radius,
        )
        scale, rotation, translation = new_scale, new_rotation, new_translation
        logger.debug(f'bcpd iteration {it}: sigma2={new_sigma2:.6g} s={scale:.6g}')
        if new_sigma2 < SIGMA2_FLOOR:
            sigma2, status = SIGMA2_FLOOR, DEGENERATE
            history.append(sigma2)
            break
        sigma2 = float(new_sigma2)
        history.append(sigma2)
        if deforming and change < params.convergence_tol:
            status = CONVERGED
            break
        if not deforming and (change < params.convergence_tol
                              or it >= params.similarity_iterations):
            logger.debug(f'bcpd: similarity settled after {it} iterations, s={scale:.6g}')
            deforming = True

    similarity = RigidTransform(_proper(rotation), translation, scale)
    deformed = similarity.apply_points(y + v)
    p, outlier = _bcpd_matching(x, deformed, sigma2, scale, var_m, log_alpha, params.w, log_out)
    corr = extract_correspondences(p, params.missing_threshold, params.outlier_threshold)
    logger.info(f'bcpd: {status} after {it} iterations, s={scale:.4g}, sigma2={sigma2:.4g}')
    return BcpdResult(
        PointCloud(deformed, labels=template.labels),
        similarity,
        v,
        p,
        outlier,
        _with_distances(corr, deformed, x),
        sigma2,
        status,
        it,
        tuple(history),
    )


def _bcpd_matching(x, moved, sigma2, scale, var_m, log_alpha, w, log_out):
    """Matching probabilities of BCPD; the outlier density is uniform over the target box."""
    log_in = (
        math.log(1.0 - w)
        + log_alpha[:, None]
        - 0.5 * D * math.log(2.0 * math.pi * sigma2)
        - cdist(moved, x, 'sqeuclidean') / (2.0 * sigma2)
        - (scale**2 * D * var_m / (2.0 * sigma2))[:, None]
    )
    out_row = np.full((1, len(x)), log_out)
    log_norm = logsumexp(np.vstack([log_in, out_row]), axis=0)
    return np.exp(log_in - log_norm), np.exp(out_row[0] - log_norm)

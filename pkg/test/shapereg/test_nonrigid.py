import itertools
import math

import numpy as np
import pytest
from shapes import blob_points, bumped

from shapereg.error import RegistrationError
from shapereg.geometry import NONE, PointCloud, RigidTransform, apply_transform, rotation_about
from shapereg.nonrigid import (
    DEGENERATE,
    BcpdParams,
    CpdParams,
    bcpd,
    cpd_nonrigid,
    cpd_responsibilities,
    cpd_rigid,
    extract_correspondences,
    gaussian_kernel,
    initial_sigma2,
)


@pytest.fixture
def small():
    return PointCloud(blob_points(100))


@pytest.fixture
def deformed_target():
    return PointCloud(bumped(blob_points(100), 4.0, seed=1))


def _fixed_iterations(n: int, **kwargs) -> BcpdParams:
    """Parameters that make BCPD run exactly ``n`` iterations (barring a variance collapse)."""
    kwargs.setdefault('similarity_iterations', 5)
    return BcpdParams(max_iterations=n, convergence_tol=1e-300, **kwargs)


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


class TestKernelAndInit:
    def test_gaussian_kernel_convention(self):
        a = np.zeros((1, 3))
        b = np.array([[2.0, 0.0, 0.0]])
        assert gaussian_kernel(a, b, beta=2.0)[0, 0] == pytest.approx(math.exp(-0.5))

    def test_initial_sigma2(self):
        x = np.array([[0.0, 0.0, 0.0]])
        y = np.array([[3.0, 0.0, 0.0], [0.0, 3.0, 0.0]])
        assert initial_sigma2(x, y) == pytest.approx(9.0 / 3)


class TestResponsibilities:
    def test_matches_direct_density(self):
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
        sigma2, w = 0.7, 0.2
        posterior, outlier, nll = cpd_responsibilities(x, y, sigma2, w)

        norm = (2 * math.pi * sigma2) ** 1.5
        expected = np.zeros((3, 3))
        total_log = 0.0
        for n in range(3):
            comps = [
                (1 - w) / 3 * math.exp(-np.sum((x[n] - y[m]) ** 2) / (2 * sigma2)) / norm
                for m in range(3)
            ]
            density = sum(comps) + w / 3
            expected[:, n] = np.asarray(comps) / density
            assert outlier[n] == pytest.approx((w / 3) / density, rel=1e-12)
            total_log += math.log(density)
        assert np.allclose(posterior, expected, rtol=1e-12, atol=0)
        assert nll == pytest.approx(-total_log, rel=1e-12)

    def test_columns_normalised(self):
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=(40, 3)) * 10, rng.normal(size=(25, 3)) * 10
        posterior, outlier, _ = cpd_responsibilities(x, y, 0.01, 0.1)
        assert np.allclose(posterior.sum(axis=0) + outlier, 1.0, atol=1e-9)
        assert np.all((posterior >= 0) & (posterior <= 1))


class TestExtractCorrespondences:
    def test_identity(self):
        corr = extract_correspondences(np.eye(4))
        assert np.array_equal(corr.assignments, np.arange(4))
        assert corr.outlier_targets.size == 0
        assert corr.missing.size == 0

    def test_weak_row_is_missing(self):
        probs = np.eye(3)
        probs[1] = [0.2, 0.3, 0.1]
        corr = extract_correspondences(probs, missing_threshold=0.5, outlier_threshold=0.0)
        assert list(corr.assignments) == [0, NONE, 2]

    def test_low_mass_column_is_outlier(self):
        probs = np.array([[0.9, 0.0, 0.1], [0.0, 0.8, 0.1]])
        corr = extract_correspondences(probs, outlier_threshold=0.3)
        assert list(corr.outlier_targets) == [2]

    def test_records_threshold(self):
        assert extract_correspondences(np.eye(2), missing_threshold=0.4).threshold_used == 0.4

    @pytest.mark.parametrize('missing, outlier', [(-0.1, 0.3), (0.5, 1.2)])
    def test_threshold_range(self, missing, outlier):
        with pytest.raises(RegistrationError, match='must be in'):
            extract_correspondences(np.eye(2), missing, outlier)

    def test_matches_rule_applied_by_hand(self):
        probs = np.random.default_rng(4).random((5, 6)) * 0.4
        corr = extract_correspondences(probs, missing_threshold=0.3, outlier_threshold=0.8)
        for m in range(5):
            best = max(range(6), key=lambda n: (probs[m, n], -n))
            expected = best if probs[m, best] >= 0.3 else NONE
            assert corr.assignments[m] == expected
        assigned = set(corr.assignments[corr.assignments != NONE].tolist())
        for n in range(6):
            flagged = probs[:, n].sum() < 0.8 and n not in assigned
            assert (n in corr.outlier_targets) == flagged


# ---------------------------------------------------------------------------
# CPD
# ---------------------------------------------------------------------------


class TestCpdNonrigid:
    def test_self_registration(self, small):
        result = cpd_nonrigid(small, small, CpdParams(w=0.1, max_iterations=500))
        assert np.max(np.abs(result.deformed_template.points - small.points)) < 1e-3
        assert np.array_equal(np.argmax(result.posterior, axis=0), np.arange(len(small)))

    def test_posterior_normalised(self, small, deformed_target):
        result = cpd_nonrigid(small, deformed_target, CpdParams(max_iterations=30))
        total = result.posterior.sum(axis=0) + result.outlier_posterior
        assert np.allclose(total, 1.0, atol=1e-9)

    def test_objective_never_increases(self, small, deformed_target):
        result = cpd_nonrigid(small, deformed_target, CpdParams(max_iterations=60))
        history = np.asarray(result.objective_history)
        assert len(history) > 1
        assert np.all(np.diff(history) <= 1e-8 * np.maximum(1.0, np.abs(history[:-1])))

    def test_moves_towards_target(self, small, deformed_target):
        result = cpd_nonrigid(small, deformed_target)
        before = np.mean(np.linalg.norm(small.points - deformed_target.points, axis=1))
        after = np.mean(
            np.linalg.norm(result.deformed_template.points - deformed_target.points, axis=1)
        )
        assert after < before

    def test_same_result_in_other_units(self, small, deformed_target):
        k = 0.1
        fixed = {'max_iterations': 40, 'sigma2_tol': 1e-300}
        mm = cpd_nonrigid(small, deformed_target, CpdParams(beta=10.0, **fixed))
        cm = cpd_nonrigid(
            PointCloud(k * small.points),
            PointCloud(k * deformed_target.points),
            CpdParams(beta=10.0 * k, **fixed),
        )
        assert cm.iterations == mm.iterations
        assert np.allclose(
            cm.deformed_template.points, k * mm.deformed_template.points, atol=1e-6
        )
        assert cm.sigma2_final == pytest.approx(k**2 * mm.sigma2_final, rel=1e-6)
        assert np.allclose(cm.posterior, mm.posterior, atol=1e-8)

    def test_variance_collapse_is_reported(self):
        cloud = PointCloud(blob_points(30))
        result = cpd_nonrigid(cloud, cloud, CpdParams(w=0.01, max_iterations=500,
                                                      sigma2_tol=1e-30))
        assert result.status == DEGENERATE
        assert result.sigma2_final == pytest.approx(1e-12)

    def test_empty_input(self, small):
        with pytest.raises(RegistrationError, match='empty point set'):
            cpd_nonrigid(small, PointCloud(np.zeros((0, 3))))

    @pytest.mark.parametrize('kwargs', [{'w': 1.0}, {'beta': 0.0}, {'lambda_': -1.0}])
    def test_params_validated(self, kwargs):
        with pytest.raises(ValueError):
            CpdParams(**kwargs)


class TestCpdRigid:
    def test_recovers_rotation(self, small):
        tf = RigidTransform(rotation_about([0, 0, 1], np.radians(20)), [3.0, -1.0, 2.0])
        target = apply_transform(small, tf)
        result = cpd_rigid(small, target, CpdParams(max_iterations=300))
        assert np.allclose(result.transform.rotation, tf.rotation, atol=1e-4)
        assert np.allclose(result.transform.translation, tf.translation, atol=1e-3)

    def test_recovers_scale(self, small):
        target = PointCloud(1.2 * small.points)
        result = cpd_rigid(small, target, CpdParams(max_iterations=300), with_scale=True)
        assert result.transform.scale == pytest.approx(1.2, abs=1e-3)

    def test_same_result_in_other_units(self, small, deformed_target):
        k = 0.1
        tf = RigidTransform(rotation_about([1, 0, 0], np.radians(15)), [2.0, 1.0, -1.0], 1.1)
        target = apply_transform(deformed_target, tf)
        fixed = {'max_iterations': 60, 'sigma2_tol': 1e-300}
        mm = cpd_rigid(small, target, CpdParams(**fixed), with_scale=True)
        cm = cpd_rigid(
            PointCloud(k * small.points),
            PointCloud(k * target.points),
            CpdParams(beta=10.0 * k, **fixed),
            with_scale=True,
        )
        assert cm.transform.scale == pytest.approx(mm.transform.scale, rel=1e-6)
        assert np.allclose(cm.transform.rotation, mm.transform.rotation, atol=1e-6)
        assert np.allclose(cm.transform.translation, k * mm.transform.translation, atol=1e-6)
        assert cm.cost == pytest.approx(k**2 * mm.cost, rel=1e-6)


# ---------------------------------------------------------------------------
# BCPD
# ---------------------------------------------------------------------------


class TestBcpd:
    def test_self_registration(self, small):
        result = bcpd(small, small)
        assert result.similarity.scale == pytest.approx(1.0, abs=1e-3)
        assert np.allclose(result.similarity.rotation, np.eye(3), atol=1e-3)
        assert np.linalg.norm(result.similarity.translation) < 1e-2
        assert np.max(np.linalg.norm(result.displacements, axis=1)) < 0.1
        assigned = np.sum(result.correspondences.assignments != NONE)
        assert assigned / len(small) > 0.9

    def test_recovers_pure_scaling(self, small):
        target = PointCloud(1.2 * small.points)
        result = bcpd(small, target, BcpdParams(max_iterations=300))
        assert result.similarity.scale == pytest.approx(1.2, abs=1e-2)
        field = np.max(np.linalg.norm(result.displacements, axis=1))
        assert field < 1e-2 * small.diameter

    def test_recovers_similarity(self, small):
        tf = RigidTransform(rotation_about([1, 1, 0], np.radians(20)), [4.0, -2.0, 1.0], 1.2)
        result = bcpd(small, apply_transform(small, tf), BcpdParams(max_iterations=300))
        assert result.similarity.scale == pytest.approx(1.2, abs=1e-2)
        relative = result.similarity.rotation.T @ tf.rotation
        angle = math.acos(np.clip((np.trace(relative) - 1) / 2, -1.0, 1.0))
        assert angle < np.radians(2)

    def test_field_held_during_similarity_iterations(self, small, deformed_target):
        params = BcpdParams(max_iterations=3, similarity_iterations=10)
        result = bcpd(small, deformed_target, params)
        assert result.iterations == 3
        assert not result.displacements.any()

    def test_field_released_after_similarity_iterations(self, small, deformed_target):
        result = bcpd(small, deformed_target, _fixed_iterations(10, similarity_iterations=3))
        assert result.displacements.any()

    def test_deformed_points_come_from_parts(self, small, deformed_target):
        result = bcpd(small, deformed_target, BcpdParams(max_iterations=20))
        sim = result.similarity
        rebuilt = sim.scale * (small.points + result.displacements) @ sim.rotation.T
        rebuilt += sim.translation
        assert np.allclose(result.deformed_template.points, rebuilt, atol=1e-12)

    def test_rotation_is_proper(self, small, deformed_target):
        rot = bcpd(small, deformed_target, BcpdParams(max_iterations=20)).similarity.rotation
        assert np.allclose(rot.T @ rot, np.eye(3), atol=1e-8)
        assert np.linalg.det(rot) == pytest.approx(1.0, abs=1e-8)

    def test_probabilities_normalised(self, small, deformed_target):
        result = bcpd(small, deformed_target, BcpdParams(max_iterations=20, kappa=5.0))
        total = result.correspondence_probabilities.sum(axis=0) + result.outlier_probabilities
        assert np.allclose(total, 1.0, atol=1e-9)

    def test_translation_equivariance(self, small, deformed_target):
        shift = np.array([3.0, -2.0, 5.0])
        params = _fixed_iterations(25)
        base = bcpd(small, deformed_target, params)
        moved = bcpd(small, PointCloud(deformed_target.points + shift), params)
        assert np.allclose(
            moved.similarity.translation, base.similarity.translation + shift, atol=1e-6
        )
        assert np.allclose(moved.displacements, base.displacements, atol=1e-6)

    def test_full_rank_approximation_matches_exact(self, small, deformed_target):
        exact = bcpd(small, deformed_target, _fixed_iterations(20))
        approx = bcpd(small, deformed_target, _fixed_iterations(20, low_rank_terms=len(small)))
        assert np.allclose(
            approx.deformed_template.points, exact.deformed_template.points, atol=1e-6
        )
        assert approx.sigma2_final == pytest.approx(exact.sigma2_final, rel=1e-6)

    def test_low_rank_runs(self, small, deformed_target):
        result = bcpd(small, deformed_target, BcpdParams(max_iterations=20, low_rank_terms=15))
        assert np.all(np.isfinite(result.deformed_template.points))

    def test_empty_input(self, small):
        with pytest.raises(RegistrationError, match='empty point set'):
            bcpd(PointCloud(np.zeros((0, 3))), small)

    def test_params_validated(self):
        with pytest.raises(ValueError, match='kappa'):
            BcpdParams(kappa=0.0)


def test_kernel_is_symmetric():
    pts = blob_points(20)
    g = gaussian_kernel(pts, pts, 5.0)
    assert np.allclose(g, g.T)
    assert np.allclose(np.diag(g), 1.0)
    assert all(g[i, j] <= 1.0 for i, j in itertools.combinations(range(20), 2))

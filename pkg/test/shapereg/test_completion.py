import logging

import numpy as np
import pytest
from scipy.linalg import subspace_angles
from shapes import blob_points

from shapereg.completion import (
    PRIOR_MEAN,
    GpShapeModel,
    PartialObservation,
    PcaShapeModel,
    build_gp_model,
    build_pca_model,
    deformed_template_completion,
    gp_complete,
    gp_kernel_matrix,
    mean_shape_completion,
    pca_reconstruct,
    ppca_complete,
    sample_gp_shape,
    to_model_frame,
)
from shapereg.error import CompletionError
from shapereg.geometry import PointCloud, RigidTransform, rotation_about
from shapereg.nonrigid import bcpd

POINTS = 60


def _linear_dataset(n_shapes=12, noise=1e-4, seed=0):
    """Shapes drawn from mean + two known directions + tiny isotropic noise."""
    rng = np.random.default_rng(seed)
    mean = blob_points(POINTS).reshape(-1)
    basis, _ = np.linalg.qr(rng.normal(size=(3 * POINTS, 2)))
    coeffs = rng.normal(size=(n_shapes, 2)) * [6.0, 3.0]
    data = mean + coeffs @ basis.T + noise * rng.normal(size=(n_shapes, 3 * POINTS))
    return [PointCloud(row.reshape(-1, 3)) for row in data], basis


@pytest.fixture
def pca(shapes):
    return build_pca_model(shapes, 5)


@pytest.fixture
def reference(shapes):
    return PointCloud(np.mean([s.points for s in shapes], axis=0))


def _observe(points: np.ndarray, indices, noise=None) -> PartialObservation:
    indices = np.asarray(indices)
    return PartialObservation(indices, points[indices], noise)


# ---------------------------------------------------------------------------
# PartialObservation
# ---------------------------------------------------------------------------


class TestPartialObservation:
    def test_rejects_duplicates(self):
        with pytest.raises(CompletionError, match='unique'):
            PartialObservation([1, 1], np.zeros((2, 3)))

    def test_rejects_non_finite(self):
        with pytest.raises(CompletionError, match='finite'):
            PartialObservation([0], [[np.inf, 0.0, 0.0]])

    def test_rejects_bad_noise(self):
        with pytest.raises(CompletionError, match='observation_noise'):
            PartialObservation([0], np.zeros((1, 3)), observation_noise=0.0)

    def test_bounds(self):
        obs = PartialObservation([0, 9], np.zeros((2, 3)))
        with pytest.raises(CompletionError, match='out of bounds'):
            obs.check_bounds(5)

    def test_transformed(self):
        obs = PartialObservation([3], [[1.0, 0.0, 0.0]])
        moved = obs.transformed(RigidTransform(translation=[0.0, 2.0, 0.0]))
        assert moved.observed_positions.tolist() == [[1.0, 2.0, 0.0]]
        assert list(moved.observed_indices) == [3]


# ---------------------------------------------------------------------------
# PCA / PPCA
# ---------------------------------------------------------------------------


class TestBuildPcaModel:
    def test_two_shapes(self, shapes):
        model = build_pca_model(shapes[:2], 1)
        assert np.allclose(model.mean, (shapes[0].points + shapes[1].points).reshape(-1) / 2)
        with pytest.raises(CompletionError, match='nonzero eigenvalues'):
            build_pca_model(shapes[:2], 2)

    def test_components_orthonormal_and_sorted(self, pca):
        gram = pca.components.T @ pca.components
        assert np.allclose(gram, np.eye(5), atol=1e-8)
        assert np.all(np.diff(pca.eigenvalues) <= 0)
        assert pca.noise_sigma2 >= 0

    def test_recovers_generating_span(self):
        shapes, basis = _linear_dataset()
        model = build_pca_model(shapes, 2)
        assert np.degrees(np.max(subspace_angles(model.components, basis))) < 1.0

    def test_noise_is_average_discarded_variance(self, shapes):
        full = build_pca_model(shapes, 7)
        model = build_pca_model(shapes, 3)
        expected = full.eigenvalues[3:].sum() / (3 * len(shapes[0]) - 3)
        assert model.noise_sigma2 == pytest.approx(expected, rel=1e-8)

    def test_reconstruction_improves_with_components(self, shapes, pca):
        errors = [
            np.linalg.norm(pca_reconstruct(pca, shapes[2], k) - shapes[2].points)
            for k in range(pca.n_components + 1)
        ]
        assert all(b <= a + 1e-9 for a, b in zip(errors, errors[1:]))

    def test_unequal_counts(self, shapes):
        with pytest.raises(CompletionError, match='corresponded'):
            build_pca_model([shapes[0], shapes[1].subset(np.arange(10))], 1)

    def test_model_validation(self):
        with pytest.raises(CompletionError, match='orthonormal'):
            PcaShapeModel(np.zeros(6), np.ones((6, 1)), np.ones(1), 0.1, 2)
        with pytest.raises(CompletionError, match='sorted'):
            PcaShapeModel(np.zeros(6), np.eye(6)[:, :2], [1.0, 2.0], 0.1, 2)


class TestPpcaComplete:
    def test_mean_shape_gives_zero_alpha(self, pca):
        mean = pca.mean.reshape(-1, 3)
        result = ppca_complete(pca, _observe(mean, np.arange(len(mean)), noise=1.0))
        assert np.allclose(result.alpha, 0, atol=1e-9)
        assert np.allclose(result.points, mean, atol=1e-9)

    def test_recovers_model_shape_from_partial_view(self, pca):
        alpha = np.array([1.0, -0.5, 0.3, 0.8, -1.2])
        shape = (pca.mean + pca.loadings @ alpha).reshape(-1, 3)
        rng = np.random.default_rng(0)
        observed = np.sort(rng.choice(len(shape), int(0.6 * len(shape)), replace=False))
        result = ppca_complete(pca, _observe(shape, observed, noise=1e-12))
        assert np.allclose(result.alpha, alpha, atol=1e-6)
        held_out = np.setdiff1d(np.arange(len(shape)), observed)
        assert np.allclose(result.points[held_out], shape[held_out], atol=1e-6)

    def test_full_view_is_projection(self, pca, shapes):
        target = shapes[6].points + 0.3
        result = ppca_complete(pca, _observe(target, np.arange(len(target)), noise=1e-12))
        assert np.allclose(result.points, pca_reconstruct(pca, target), atol=1e-6)

    def test_more_observations_never_add_uncertainty(self, pca, shapes):
        order = np.random.default_rng(1).permutation(len(shapes[0]))
        traces = [
            np.trace(ppca_complete(pca, _observe(shapes[0].points, order[:k])).alpha_covariance)
            for k in (1, 5, 20, 60, len(order))
        ]
        assert all(b <= a + 1e-12 for a, b in zip(traces, traces[1:]))

    def test_covariance_formula(self, pca, shapes):
        obs = _observe(shapes[1].points, np.arange(10), noise=0.5)
        result = ppca_complete(pca, obs)
        wb = pca.loadings[:30]
        expected = 0.5 * np.linalg.inv(wb.T @ wb + 0.5 * np.eye(5))
        assert np.allclose(result.alpha_covariance, expected)

    def test_ill_conditioned(self, pca, shapes):
        obs = _observe(shapes[0].points, [0], noise=1e-20)
        with pytest.raises(CompletionError, match='ill-conditioned completion'):
            ppca_complete(pca, obs)

    def test_needs_observations(self, pca):
        with pytest.raises(CompletionError):
            ppca_complete(pca, PartialObservation([], np.zeros((0, 3))))

    def test_mean_shape_baseline(self, pca):
        assert np.array_equal(mean_shape_completion(pca), pca.mean.reshape(-1, 3))


# ---------------------------------------------------------------------------
# GP
# ---------------------------------------------------------------------------


class TestBuildGpModel:
    def test_sample_kernel_alone_spans_sample_deformations(self, shapes, reference):
        model = build_gp_model(shapes, reference, 5.0, 0.0, rank=len(shapes) - 1)
        pca = build_pca_model(shapes, len(shapes) - 1)
        assert model.rank == len(shapes) - 1
        assert np.max(subspace_angles(model.eigenfunctions, pca.components)) < 1e-6

    def test_single_shape_equal_to_reference(self, reference):
        model = build_gp_model([reference], reference, 8.0, 2.0, rank=10)
        assert np.all(model.mean_deformation == 0)
        g = np.exp(-np.sum((reference.points[:, None] - reference.points[None]) ** 2, 2) / 64)
        assert np.allclose(gp_kernel_matrix(model), 2.0 * np.kron(g, np.eye(3)))

    def test_eigenvalues_match_dense_oracle(self, shapes, reference):
        model = build_gp_model(shapes, reference, 6.0, 1.0, rank=25)
        dense = np.linalg.eigvalsh(gp_kernel_matrix(model))[::-1][:25]
        assert np.allclose(model.eigenvalues, dense, rtol=1e-8, atol=1e-8)

    def test_kernel_is_positive_semidefinite(self, shapes, reference):
        model = build_gp_model(shapes, reference, 6.0, 1.0, rank=5)
        assert np.linalg.eigvalsh(gp_kernel_matrix(model)).min() > -1e-8

    def test_truncated_rank_warns(self, shapes, reference, caplog):
        with caplog.at_level(logging.WARNING):
            model = build_gp_model(shapes, reference, 5.0, 0.0, rank=20)
        assert model.rank == len(shapes) - 1
        assert 'truncated' in caplog.text

    @pytest.mark.parametrize('sigma, amplitude', [(0.0, 1.0), (-1.0, 1.0), (5.0, -1.0)])
    def test_kernel_parameters_validated(self, shapes, reference, sigma, amplitude):
        with pytest.raises(CompletionError):
            build_gp_model(shapes, reference, sigma, amplitude, rank=5)

    def test_large_reference_uses_landmarks(self):
        reference = PointCloud(blob_points(1100))
        shapes = [PointCloud(reference.points * s) for s in (0.95, 1.0, 1.05)]
        model = build_gp_model(shapes, reference, 8.0, 1.0, rank=12)
        assert model.rank == 12
        funcs = model.eigenfunctions
        assert np.allclose(funcs.T @ funcs, np.eye(12), atol=1e-8)
        assert np.all(np.diff(model.eigenvalues) <= 0)
        assert len(sample_gp_shape(model, np.ones(12))) == 1100

    def test_model_validation(self, reference):
        m = len(reference)
        with pytest.raises(CompletionError, match='Eigenvalues'):
            GpShapeModel(reference, np.zeros((m, 3)), [], np.zeros((3 * m, 0)), 5.0, 1.0)


class TestGpComplete:
    @pytest.fixture
    def model(self, shapes, reference):
        return build_gp_model(shapes, reference, 6.0, 1.0, rank=40)

    def test_no_observations_gives_prior_mean(self, model):
        result = gp_complete(model, PartialObservation([], np.zeros((0, 3))))
        assert result.status == PRIOR_MEAN
        assert np.allclose(result.points, model.mean_shape.points)

    @pytest.mark.parametrize('exact', [False, True])
    def test_prior_consistent_data(self, model, exact):
        mean = model.mean_shape.points
        observed = np.arange(0, len(mean), 3)
        result = gp_complete(model, _observe(mean, observed, noise=1e-10), exact=exact)
        assert np.allclose(result.points, mean, atol=1e-6)

    def test_exact_path_interpolates(self, model):
        rng = np.random.default_rng(2)
        observed = np.arange(0, len(model.reference), 6)
        positions = model.mean_shape.points[observed] + rng.normal(size=(len(observed), 3))
        obs = PartialObservation(observed, positions, 1e-10)
        result = gp_complete(model, obs, exact=True)
        assert np.allclose(result.points[observed], positions, atol=1e-6)

    def test_zero_amplitude_matches_ppca(self, shapes, reference):
        rank = len(shapes) - 1
        gp = build_gp_model(shapes, reference, 6.0, 0.0, rank=rank)
        pca = build_pca_model(shapes, rank)
        rng = np.random.default_rng(3)
        target = shapes[2].points + 0.5 * rng.normal(size=shapes[2].points.shape)
        obs = _observe(target, np.arange(0, len(target), 2), noise=1e-3)

        by_gp = gp_complete(gp, obs).points
        by_ppca = ppca_complete(pca, obs).points
        assert np.allclose(by_gp, by_ppca, atol=1e-6)
        for completed in (by_gp, by_ppca):
            offset = (completed - reference.points).reshape(-1, 1)
            assert np.degrees(np.max(subspace_angles(offset, pca.components))) < 1.0

    def test_recovers_model_draw(self, model):
        alpha = np.random.default_rng(3).normal(size=model.rank)
        truth = sample_gp_shape(model, alpha)
        rng = np.random.default_rng(4)
        observed = np.sort(rng.choice(len(truth), int(0.7 * len(truth)), replace=False))
        result = gp_complete(model, _observe(truth.points, observed, noise=1e-10))
        held_out = np.setdiff1d(np.arange(len(truth)), observed)
        error = np.max(np.linalg.norm(result.points[held_out] - truth.points[held_out], axis=1))
        assert error < 1e-4 * truth.diameter

    def test_out_of_bounds(self, model):
        with pytest.raises(CompletionError, match='out of bounds'):
            gp_complete(model, PartialObservation([10_000], np.zeros((1, 3))))

    def test_sample_needs_rank_coefficients(self, model):
        with pytest.raises(CompletionError, match='coefficients'):
            sample_gp_shape(model, np.zeros(model.rank + 1))


# ---------------------------------------------------------------------------
# Deformed template and frames
# ---------------------------------------------------------------------------


class TestDeformedTemplateCompletion:
    def test_returns_registration_output(self):
        template = PointCloud(blob_points(80))
        result = bcpd(template, template)
        completed = deformed_template_completion(result)
        assert completed is result.deformed_template
        assert len(completed) == len(template)
        assert np.max(np.abs(completed.points - template.points)) < 0.5


class TestToModelFrame:
    def test_undoes_rigid_motion(self, pca):
        mean = pca.mean.reshape(-1, 3)
        tf = RigidTransform(rotation_about([0, 1, 0], 0.8), [10.0, -5.0, 2.0])
        observed = np.arange(0, len(mean), 2)
        obs = PartialObservation(observed, tf.apply_points(mean[observed]))
        local, fitted = to_model_frame(mean, obs)
        assert np.allclose(local.observed_positions, mean[observed], atol=1e-9)
        assert np.allclose(fitted.rotation, tf.rotation, atol=1e-9)

    def test_collinear_observation_falls_back(self, caplog):
        mean = np.column_stack([np.arange(5.0), np.zeros(5), np.zeros(5)])
        obs = PartialObservation([0, 1, 2], mean[:3] + 1.0)
        with caplog.at_level(logging.WARNING):
            local, fitted = to_model_frame(mean, obs)
        assert local is obs
        assert np.array_equal(fitted.as_matrix(), np.eye(4))
        assert 'scan frame' in caplog.text
